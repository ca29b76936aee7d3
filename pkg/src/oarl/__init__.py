"""Active data sampling for offline conservative Q-learning.

Modules: ``envs`` (Traffic-World and the confounded maze), ``data``
(demonstration datasets and their binary format), ``net`` (numpy MLP),
``learner`` (ensemble CQL), ``sampling`` (acquisition scores and batch
samplers), ``evaluation`` (scenario suites, IQM, convergence), ``experiment``
(configs and the training loop) and ``cli``.
"""

__version__ = "0.1.0"
