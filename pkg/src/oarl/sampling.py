"""Acquisition scores and the samplers that turn them into training batches.

Two score-refresh regimes are supported:

``dataset``
    every transition is rescored after ``recompute_every`` gradient steps and
    batches are drawn i.i.d. from the normalised scores;
``batch``
    scores live in a proportional sum tree and only the leaves of the batch
    that was just sampled get refreshed, the way prioritized replay does it.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import learner
from .data import Batch, TransitionDataset
from .learner import EnsembleQ


class SamplerConfigError(ValueError):
    pass


class AcquisitionKind(enum.Enum):
    UNIFORM = "uniform"
    TD_ERROR = "td_error"
    VARIANCE_DATA = "variance_data"
    VARIANCE_GREEDY = "variance_greedy"


@dataclass(frozen=True)
class SamplerConfig:
    kind: AcquisitionKind = AcquisitionKind.UNIFORM
    mode: str = "dataset"  # "dataset" or "batch"
    recompute_every: int = 4
    alpha_per: float = 0.6
    eps_per: float = 1e-6
    beta: float = 0.0
    beta_increment: float = 0.0
    episodic: str = "off"  # "off" or "max"
    warm_start_epochs: int = 1
    source: str = "training"  # "training" or "companion"

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", AcquisitionKind(self.kind))
        if self.mode not in ("dataset", "batch"):
            raise SamplerConfigError(f"mode must be 'dataset' or 'batch', got {self.mode!r}")
        if self.recompute_every < 1:
            raise SamplerConfigError("recompute_every must be >= 1")
        if self.alpha_per < 0 or self.eps_per <= 0:
            raise SamplerConfigError("need alpha_per >= 0 and eps_per > 0")
        if self.beta != 0 or self.beta_increment != 0:
            raise SamplerConfigError("importance weighting is not supported; beta and beta_increment must be 0")
        if self.episodic not in ("off", "max"):
            raise SamplerConfigError("episodic must be 'off' or 'max'")
        if self.episodic == "max" and self.mode == "batch":
            raise SamplerConfigError("episodic aggregation needs full-dataset scores (mode='dataset')")
        if self.source not in ("training", "companion"):
            raise SamplerConfigError("source must be 'training' or 'companion'")
        if self.warm_start_epochs < 0:
            raise SamplerConfigError("warm_start_epochs must be >= 0")


# -- scores ---------------------------------------------------------------------


def _dedup(batch: Batch, unique: Optional[tuple]):
    if unique is None:
        return batch, None
    first, inverse = unique
    sub = Batch(batch.obs[first], batch.actions[first], batch.rewards[first], batch.next_obs[first], batch.dones[first])
    return sub, inverse


def score_td_error(ensemble: EnsembleQ, transitions: Batch, gamma: float = 0.99, unique: Optional[tuple] = None) -> np.ndarray:
    """Mean over members of |Q_i(s, a) - y_i| with the member's own double-DQN target."""
    sub, inverse = _dedup(transitions, unique)
    rows = np.arange(len(sub))
    total = np.zeros(len(sub))
    for i, member in enumerate(ensemble.members):
        q = learner.net.forward(member, sub.obs).astype(np.float64)
        y = learner.bellman_target(i, ensemble, sub, gamma)
        total += np.abs(q[rows, sub.actions] - y)
    scores = total / ensemble.size
    return scores if inverse is None else scores[inverse]


def score_variance(ensemble: EnsembleQ, transitions: Batch, which: str = "data", unique: Optional[tuple] = None) -> np.ndarray:
    """Population variance across members of the advantage of one action per state.

    ``which="data"`` scores the logged action, ``which="greedy"`` the argmax of
    the scoring ensemble's mean Q.
    """
    if ensemble.size < 2:
        raise SamplerConfigError("variance scores need an ensemble of at least two members")
    sub, inverse = _dedup(transitions, unique)
    q = ensemble.q_values(sub.obs).astype(np.float64)  # (N, B, A)
    if which == "data":
        acts = sub.actions
    elif which == "greedy":
        acts = q.mean(axis=0).argmax(axis=1)
    else:
        raise ValueError(f"which must be 'data' or 'greedy', got {which!r}")
    adv = learner.advantages(q, np.broadcast_to(acts, q.shape[:2]))
    # centre on one member first so identical members give exactly zero
    # (np.var leaves rounding specks that would soak up all sampling mass)
    d = adv - adv[0]
    scores = np.mean((d - d.mean(axis=0)) ** 2, axis=0)
    return scores if inverse is None else scores[inverse]


def compute_scores(kind: AcquisitionKind, ensemble: EnsembleQ, transitions: Batch, gamma: float = 0.99, unique=None) -> np.ndarray:
    if kind is AcquisitionKind.TD_ERROR:
        return score_td_error(ensemble, transitions, gamma, unique)
    if kind is AcquisitionKind.VARIANCE_DATA:
        return score_variance(ensemble, transitions, "data", unique)
    if kind is AcquisitionKind.VARIANCE_GREEDY:
        return score_variance(ensemble, transitions, "greedy", unique)
    return np.ones(len(transitions))


def episodic_aggregate(scores: np.ndarray, episode_offsets: np.ndarray) -> np.ndarray:
    """Replace each score by the maximum score of its episode."""
    scores = np.asarray(scores)
    if len(scores) == 0:
        return scores.copy()
    starts = np.asarray(episode_offsets[:-1])
    maxima = np.maximum.reduceat(scores, starts)
    return np.repeat(maxima, np.diff(episode_offsets))


# -- dataset mode -----------------------------------------------------------------


@dataclass
class ScoreTable:
    scores: np.ndarray
    last_full_rescore_step: Optional[int] = None
    _cdf: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def empty(cls, n: int) -> "ScoreTable":
        return cls(np.zeros(n))

    def set_scores(self, scores: np.ndarray, step: Optional[int]) -> None:
        scores = np.asarray(scores, dtype=np.float64)
        if np.any(scores < 0) or not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite and non-negative")
        self.scores = scores
        self.last_full_rescore_step = step
        self._cdf = None

    def probabilities(self) -> np.ndarray:
        total = self.scores.sum()
        if total <= 0:
            return np.full(len(self.scores), 1.0 / len(self.scores))
        return self.scores / total

    def cdf(self) -> np.ndarray:
        if self._cdf is None:
            c = np.cumsum(self.probabilities())
            c[-1] = 1.0
            self._cdf = c
        return self._cdf


def normalize_and_sample(table: ScoreTable, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. draws with replacement, probability proportional to score.

    An all-zero table falls back to uniform sampling.
    """
    n = len(table.scores)
    if table.scores.sum() <= 0:
        return rng.integers(0, n, size=batch_size)
    idx = np.searchsorted(table.cdf(), rng.random(batch_size), side="right")
    return np.minimum(idx, n - 1)


def uniform_sample(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n, size=batch_size)


def maybe_rescore(table: ScoreTable, ensemble: EnsembleQ, dataset: TransitionDataset, step: int, config: SamplerConfig, gamma: float = 0.99) -> ScoreTable:
    """Full rescoring once ``recompute_every`` steps have passed since the last one."""
    if config.mode != "dataset":
        raise SamplerConfigError("maybe_rescore is only used in dataset mode")
    last = table.last_full_rescore_step
    if last is not None and step - last < config.recompute_every:
        return table
    scores = compute_scores(config.kind, ensemble, dataset.as_batch(), gamma, dataset.unique)
    if config.episodic == "max":
        scores = episodic_aggregate(scores, dataset.episode_offsets)
    table.set_scores(scores, step)
    return table


# -- batch mode -------------------------------------------------------------------


class SumTree:
    """Array-backed binary tree of leaf priorities with subtree sums.

    Leaves occupy ``tree[cap:cap + n]`` where ``cap`` is the next power of two;
    node ``k`` has children ``2k`` and ``2k + 1``. Updates recompute parents
    from their children instead of propagating deltas, so stored sums never
    drift from the leaves.
    """

    def __init__(self, n: int, initial_priority: float = 1.0):
        if n < 1:
            raise ValueError("SumTree needs at least one leaf")
        self.n = n
        self.cap = 1 << max(int(np.ceil(np.log2(n))), 0)
        self.tree = np.zeros(2 * self.cap, dtype=np.float64)
        self.tree[self.cap : self.cap + n] = initial_priority
        self.max_priority = float(initial_priority)
        self._rebuild()

    def _rebuild(self) -> None:
        level = self.cap
        while level > 1:
            parents = np.arange(level // 2, level)
            self.tree[parents] = self.tree[2 * parents] + self.tree[2 * parents + 1]
            level //= 2

    def __len__(self):
        return self.n

    @property
    def total(self) -> float:
        return float(self.tree[1])

    @property
    def leaves(self) -> np.ndarray:
        return self.tree[self.cap : self.cap + self.n]

    def set(self, idx: np.ndarray, priorities: np.ndarray) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            return
        if idx.min() < 0 or idx.max() >= self.n:
            raise IndexError(f"leaf index out of range [0, {self.n})")
        pri = np.asarray(priorities, dtype=np.float64)
        if np.any(pri < 0) or not np.all(np.isfinite(pri)):
            raise ValueError("priorities must be finite and non-negative")
        nodes = idx + self.cap
        self.tree[nodes] = pri  # duplicates: the last write wins
        self.max_priority = max(self.max_priority, float(pri.max()))
        nodes = np.unique(nodes // 2)
        while nodes[0] >= 1:
            self.tree[nodes] = self.tree[2 * nodes] + self.tree[2 * nodes + 1]
            if nodes[0] == 1:
                break
            nodes = np.unique(nodes // 2)

    def find(self, values: np.ndarray) -> np.ndarray:
        """Leaf indices whose cumulative-priority interval contains each value."""
        v = np.array(values, dtype=np.float64)
        node = np.ones(len(v), dtype=np.int64)
        while node[0] < self.cap:
            left = 2 * node
            lsum = self.tree[left]
            go_right = v >= lsum
            # never descend into an empty subtree because of rounding
            go_right &= self.tree[left + 1] > 0
            go_right |= lsum <= 0
            v = np.where(go_right, v - lsum, v)
            node = np.where(go_right, left + 1, left)
        return np.minimum(node - self.cap, self.n - 1)


def priority_sample(tree: SumTree, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified proportional sampling: one uniform draw per equal-mass segment."""
    if len(tree) == 0:
        raise ValueError("cannot sample from an empty tree")
    total = tree.total
    if total <= 0:
        raise ValueError("sum tree has zero total priority")
    seg = total / batch_size
    points = (np.arange(batch_size) + rng.random(batch_size)) * seg
    return tree.find(np.minimum(points, np.nextafter(total, 0)))


def to_priority(scores: np.ndarray, alpha: float, eps: float) -> np.ndarray:
    return (np.asarray(scores, dtype=np.float64) + eps) ** alpha


def priority_update(tree: SumTree, idx: np.ndarray, scores: np.ndarray, alpha: float = 0.6, eps: float = 1e-6) -> SumTree:
    """Overwrite the sampled leaves with (score + eps) ** alpha; other leaves stay stale."""
    tree.set(idx, to_priority(scores, alpha, eps))
    return tree


# -- schedule ---------------------------------------------------------------------


def effective_sampler(step: int, epoch: int, config: SamplerConfig) -> str:
    """``"uniform"`` during the warm-start epochs or for the Uniform kind, else ``"active"``."""
    if config.kind is AcquisitionKind.UNIFORM or epoch < config.warm_start_epochs:
        return "uniform"
    return "active"


class BatchSampler:
    """Stateful glue used by the training loop: picks indices for each step.

    ``scorer`` is the ensemble whose scores drive sampling; it may differ from
    the one being trained (cross-ensemble experiments).
    """

    def __init__(self, dataset: TransitionDataset, config: SamplerConfig, batch_size: int, rng: np.random.Generator, gamma: float = 0.99):
        self.dataset = dataset
        self.config = config
        self.batch_size = batch_size
        self.rng = rng
        self.gamma = gamma
        self.table = ScoreTable.empty(len(dataset))
        self.tree: Optional[SumTree] = None
        self.last_indices: Optional[np.ndarray] = None

    def sample(self, step: int, epoch: int, scorer: EnsembleQ) -> np.ndarray:
        n = len(self.dataset)
        if effective_sampler(step, epoch, self.config) == "uniform":
            idx = uniform_sample(n, self.batch_size, self.rng)
        elif self.config.mode == "dataset":
            maybe_rescore(self.table, scorer, self.dataset, step, self.config, self.gamma)
            idx = normalize_and_sample(self.table, self.batch_size, self.rng)
        else:
            if self.tree is None:
                self.tree = SumTree(n, 1.0)
            idx = priority_sample(self.tree, self.batch_size, self.rng)
        self.last_indices = idx
        return idx

    def after_step(self, step: int, epoch: int, scorer: EnsembleQ) -> None:
        """Refresh the priorities of the batch just trained on (batch mode only)."""
        if self.config.mode != "batch" or self.tree is None or self.last_indices is None:
            return
        if effective_sampler(step, epoch, self.config) != "active":
            return
        idx = self.last_indices
        uniq, inv = np.unique(idx, return_inverse=True)
        fresh = compute_scores(self.config.kind, scorer, self.dataset.batch(uniq), self.gamma)
        priority_update(self.tree, uniq, fresh, self.config.alpha_per, self.config.eps_per)

    def current_scores(self) -> np.ndarray:
        if self.tree is not None:
            return self.tree.leaves.copy()
        return self.table.scores.copy()


def export_scores_csv(path, scores: np.ndarray, episode_ids: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["transition_index", "episode_id", "score"])
        for i, (e, s) in enumerate(zip(episode_ids, scores)):
            w.writerow([i, int(e), repr(float(s))])
