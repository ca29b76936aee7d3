"""Uniform sampling against variance-driven sampling on Traffic-World.

A shortened version of the long acceptance runs: fewer episodes, seeds and
epochs, so it finishes in a few minutes. Prints the IQM suite-reward curve of
each sampler and the step at which it first holds 0.9 for three evaluations.

    python3 demos/sampler_race.py [n_episodes] [n_seeds] [epochs]
"""

import sys

from oarl import data, envs, evaluation, experiment

n_episodes, n_seeds, epochs = (int(a) for a in (sys.argv[1:] + ["3000", "3", "6"][len(sys.argv) - 1 :]))
env = envs.TrafficWorldConfig()
ds = data.collect_dataset(env, n_episodes=n_episodes, seed=0)

for kind, mode in (("uniform", "dataset"), ("variance_data", "dataset"), ("variance_data", "batch")):
    cfg = experiment.ExperimentConfig(env=env).replace(
        sampler={"kind": kind, "mode": mode},
        eval={"epochs": epochs, "evals_per_epoch": 2},
        run={"seeds": tuple(range(n_seeds))},
    )
    curve = experiment.curve_from_results(experiment.run_experiment(cfg, ds))
    iq = curve.iqm_curve()
    hit = evaluation.steps_to_convergence(iq, 0.9, 2, steps=curve.steps)
    print(f"{kind + '/' + mode:22s} steps to 0.9: {hit if hit is not None else 'never':>5}   " + " ".join(f"{x:.2f}" for x in iq))
