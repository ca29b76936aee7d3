"""Scenario-driven evaluation and cross-seed aggregation."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from . import envs, learner
from .envs import ConfoundedMazeConfig, GoalMode, TrafficWorldConfig
from .learner import EnsembleQ

MAZE_CASES = ("fixed-top-right", "uniform-random")


@dataclass
class EvalReport:
    per_scenario: dict
    epoch: int = 0
    gradient_step: int = 0
    seed: int = 0

    @property
    def suite_mean(self) -> float:
        return float(np.mean(list(self.per_scenario.values())))


def ensemble_policy(ensemble: EnsembleQ) -> Callable:
    return lambda obs, state=None: learner.greedy_action(ensemble, obs)


def max_suite_reward(config) -> float:
    return float(config.reward_goal)


def evaluate_policy(policy: Callable, config, n_episodes_per_case: int = 1, seed: int = 0) -> dict:
    """Per-case mean return of ``policy(obs, state)``.

    Traffic-World runs the four scripted scenarios once each (they are fully
    deterministic). The maze runs ``n_episodes_per_case`` seeded layouts for
    the fixed top-right goal and for uniformly placed goals.
    """
    if isinstance(config, TrafficWorldConfig):
        out = {}
        for spec in envs.scenario_suite(config):
            ret, _, _ = envs.rollout(config, policy, 0, spec)
            out[spec.name] = ret
        return out
    out = {}
    ss = np.random.SeedSequence([seed, 7919])
    seeds = ss.generate_state(n_episodes_per_case)
    for case, mode in zip(MAZE_CASES, (GoalMode.FIXED_TOP_RIGHT, GoalMode.UNIFORM_RANDOM)):
        cfg = dataclasses.replace(config, goal_mode=mode)
        rets = [envs.rollout(cfg, policy, int(s))[0] for s in seeds]
        out[case] = float(np.mean(rets))
    return out


def evaluate_suite(ensemble: EnsembleQ, config, n_episodes_per_case: int = 1, seed: int = 0, epoch: int = 0) -> EvalReport:
    per = evaluate_policy(ensemble_policy(ensemble), config, n_episodes_per_case, seed)
    return EvalReport(per, epoch, ensemble.step, seed)


def iqm(values: Sequence[float]) -> float:
    """Mean after dropping floor(k/4) values from each end of the sorted list."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("iqm of an empty sequence")
    k = v.size // 4
    return float(v[k : v.size - k].mean())


@dataclass
class RewardCurve:
    """Suite reward per evaluation, one row per seed, all seeds on a shared step grid."""

    steps: np.ndarray
    rewards: np.ndarray  # (n_seeds, n_evals)
    seeds: tuple = ()

    def __post_init__(self):
        self.steps = np.asarray(self.steps)
        self.rewards = np.atleast_2d(np.asarray(self.rewards, dtype=np.float64))
        if np.any(np.diff(self.steps) <= 0):
            raise ValueError("gradient steps must be strictly increasing")

    def iqm_curve(self) -> np.ndarray:
        return np.array([iqm(col) for col in self.rewards.T])

    def quantiles(self, q: float) -> np.ndarray:
        return np.quantile(self.rewards, q, axis=0)


def steps_to_convergence(curve, target_reward: float, window: int = 2, steps: Optional[Sequence[int]] = None):
    """First gradient step at which the reward is >= target there and at the next ``window`` evaluations.

    ``curve`` is either a sequence of ``(step, reward)`` pairs or, with
    ``steps`` given, a sequence of rewards.
    """
    if steps is None:
        pairs = list(curve)
        if not pairs:
            raise ValueError("empty curve")
        steps = [p[0] for p in pairs]
        rewards = [p[1] for p in pairs]
    else:
        rewards = list(curve)
    ok = np.asarray(rewards, dtype=np.float64) >= target_reward
    for i in range(len(ok) - window):
        if ok[i : i + window + 1].all():
            return int(steps[i])
    return None


def windowed_best(rewards: Sequence[float], window: int = 2) -> float:
    """Highest level the curve holds for ``window + 1`` consecutive evaluations."""
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) <= window:
        return float("-inf")
    return float(max(r[i : i + window + 1].min() for i in range(len(r) - window)))


def score_histogram(scores: np.ndarray, tail_mask: np.ndarray, bins: int = 50) -> dict:
    """Percentile rank of the mean tail-case score among all scores, plus histogram counts."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(tail_mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ValueError("tail_mask must have one entry per score")
    if not mask.any():
        raise ValueError("tail_mask selects no transitions")
    tail_mean = float(scores[mask].mean())
    pct = float(stats.percentileofscore(scores, tail_mean, kind="rank"))
    counts, edges = np.histogram(scores, bins=bins)
    tail_counts, _ = np.histogram(scores[mask], bins=edges)
    return {
        "percentile": pct,
        "tail_mean": tail_mean,
        "counts": counts,
        "tail_counts": tail_counts,
        "edges": edges,
    }


CURVE_FIELDS = ["seed", "epoch", "gradient_step", "scenario", "reward"]
AGG_FIELDS = ["gradient_step", "iqm_reward", "q25", "q75"]


def write_curve_csv(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for r in reports:
            for name, value in r.per_scenario.items():
                w.writerow([r.seed, r.epoch, r.gradient_step, name, repr(float(value))])
            w.writerow([r.seed, r.epoch, r.gradient_step, "suite", repr(r.suite_mean)])


def read_curve_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def suite_curve(rows: Sequence[dict]) -> RewardCurve:
    """Collect the ``suite`` rows of one or more curve CSVs into a RewardCurve."""
    by_seed: dict = {}
    for row in rows:
        if row["scenario"] != "suite":
            continue
        by_seed.setdefault(int(row["seed"]), {})[int(row["gradient_step"])] = float(row["reward"])
    if not by_seed:
        raise ValueError("no suite rows found")
    common = sorted(set.intersection(*(set(d) for d in by_seed.values())))
    seeds = tuple(sorted(by_seed))
    rewards = np.array([[by_seed[s][t] for t in common] for s in seeds])
    return RewardCurve(np.array(common), rewards, seeds)


def write_aggregate_csv(path, curve: RewardCurve) -> None:
    iq = curve.iqm_curve()
    q25, q75 = curve.quantiles(0.25), curve.quantiles(0.75)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGG_FIELDS)
        for row in zip(curve.steps, iq, q25, q75):
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
