"""Which transitions does the ensemble disagree about after a warm start?

Trains one uniform epoch on a Traffic-World dataset, scores every transition
by the variance of the members' advantages, and compares the rare cases where
the tile is yellow but the expert drove on against everything else.

    python3 demos/tail_salience.py [n_episodes]
"""

import sys

import numpy as np

from oarl import data, envs, evaluation, experiment, sampling

n_episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
env = envs.TrafficWorldConfig()
ds = data.collect_dataset(env, n_episodes=n_episodes, seed=0)
print(f"{len(ds)} transitions from {ds.n_episodes} episodes")

cfg = experiment.ExperimentConfig(env=env).replace(sampler={"kind": "variance_data"}, eval={"epochs": 1, "evals_per_epoch": 1})
res = experiment.train_seed(cfg, ds, seed=0)
print(f"warm start: {res.ensemble.step} uniform steps, suite reward {res.reports[-1].suite_mean:.2f}")

scores = sampling.score_variance(res.ensemble, ds.as_batch(), "data", ds.unique)
tail = envs.is_tile_forward(ds.obs, ds.actions, env)
hist = evaluation.score_histogram(scores, tail, bins=12)
print(f"tile yellow but forward: {tail.sum()} transitions ({tail.mean():.2%})")
print(f"mean score  tail {scores[tail].mean():.3g}   rest {scores[~tail].mean():.3g}")
print(f"tail mean ranks at percentile {hist['percentile']:.1f}")
print()
print(f"{'score bin':>23s} {'all':>7s} {'tail':>6s}")
edges = hist["edges"]
for lo, hi, c, t in zip(edges[:-1], edges[1:], hist["counts"], hist["tail_counts"]):
    print(f"{lo:10.3g} - {hi:10.3g} {c:7d} {t:6d}  {'#' * int(np.ceil(40 * c / len(scores)))}")
