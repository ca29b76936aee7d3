"""Ensemble conservative Q-learning on discrete actions.

Each member keeps its own double-DQN TD target. The conservatism penalty is
applied once, to the ensemble-mean Q, and its gradient reaches every member
through the mean with weight 1/N.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import net
from .data import Batch
from .net import AdamState, MlpArch, MlpParams


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class CqlConfig:
    alpha0: float = 1.0
    gamma: float = 0.99
    lr: float = 5e-3
    batch_size: int = 512
    target_update_interval: int = 4
    ensemble_size: int = 3
    clip_norm: float = 5.0
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.target_update_interval < 1 or self.batch_size < 1:
            raise ValueError("target_update_interval and batch_size must be >= 1")


TRAFFIC_DEFAULTS = CqlConfig()
MAZE_DEFAULTS = CqlConfig(lr=1e-3, batch_size=2048, target_update_interval=50, ensemble_size=5)


@dataclass
class EnsembleQ:
    members: list
    targets: list
    adam_states: list
    step: int = 0
    member_seeds: tuple = ()

    @classmethod
    def create(cls, arch: MlpArch, ensemble_size: int, seed: int, dtype=np.float32) -> "EnsembleQ":
        seeds = tuple(int(s) for s in np.random.SeedSequence(seed).generate_state(ensemble_size))
        members = [net.init(arch, s, dtype) for s in seeds]
        return cls(members, [m.copy() for m in members], [AdamState.zeros_like(m) for m in members], 0, seeds)

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def arch(self) -> MlpArch:
        return self.members[0].arch

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        """Online Q for every member, shape (N, B, A)."""
        return np.stack([net.forward(m, obs) for m in self.members])

    def mean_q(self, obs: np.ndarray) -> np.ndarray:
        return self.q_values(obs).mean(axis=0)

    def copy(self) -> "EnsembleQ":
        return EnsembleQ(
            [m.copy() for m in self.members],
            [t.copy() for t in self.targets],
            [s.copy() for s in self.adam_states],
            self.step,
            self.member_seeds,
        )

    def digest(self) -> str:
        return "".join(m.digest()[:16] for m in self.members + self.targets)


@dataclass
class TrainStepReport:
    member_td_loss: list
    penalty: float
    total_loss: float
    grad_norm: float
    step: int


def bellman_target(member_index: int, ensemble: EnsembleQ, batch: Batch, gamma: float) -> np.ndarray:
    """Double-DQN target r + gamma * (1 - done) * Q_target(s', argmax_a Q_online(s', a))."""
    online = net.forward(ensemble.members[member_index], batch.next_obs)
    target = net.forward(ensemble.targets[member_index], batch.next_obs)
    a_plus = online.argmax(axis=1)
    boot = target[np.arange(len(a_plus)), a_plus].astype(np.float64)
    return batch.rewards.astype(np.float64) + gamma * (1.0 - batch.dones.astype(np.float64)) * boot


def logsumexp(q: np.ndarray) -> np.ndarray:
    m = q.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(q - m).sum(axis=-1, keepdims=True)))[..., 0]


def softmax(q: np.ndarray) -> np.ndarray:
    z = np.exp(q - q.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def cql_loss(ensemble: EnsembleQ, batch: Batch, config: CqlConfig, caches: Optional[list] = None):
    """Loss value and the gradient w.r.t. each member's Q output.

    loss = mean_i 0.5 * mean_b (Q_i(s, a) - y_i)^2
           + alpha0 * mean_b [logsumexp_a Qbar(s, .) - Qbar(s, a)]

    ``caches`` (optional, filled in place) receives each member's forward
    activations so :func:`train_step` can backpropagate without recomputing.
    Returns ``(total, upstream, td_losses, penalty)``.
    """
    n = ensemble.size
    b = len(batch)
    rows = np.arange(b)
    acts = batch.actions
    qs, td_losses, upstream = [], [], []
    for i, member in enumerate(ensemble.members):
        q, cache = net.forward(member, batch.obs, return_cache=True)
        if not np.all(np.isfinite(q)):
            raise DivergenceError(f"member {i} produced non-finite Q-values at step {ensemble.step}")
        if caches is not None:
            caches.append(cache)
        q64 = q.astype(np.float64)
        y = bellman_target(i, ensemble, batch, config.gamma)
        err = q64[rows, acts] - y
        td_losses.append(0.5 * float(np.mean(err**2)))
        g = np.zeros_like(q64)
        g[rows, acts] = err / (n * b)
        upstream.append(g)
        qs.append(q64)
    qbar = np.mean(qs, axis=0)
    penalty = float(np.mean(logsumexp(qbar) - qbar[rows, acts]))
    if config.alpha0:
        pg = softmax(qbar)
        pg[rows, acts] -= 1.0
        pg *= config.alpha0 / (n * b)
        for g in upstream:
            g += pg
    total = float(np.mean(td_losses)) + config.alpha0 * penalty
    return total, upstream, td_losses, penalty


def sync_targets(ensemble: EnsembleQ) -> EnsembleQ:
    ensemble.targets = [m.copy() for m in ensemble.members]
    return ensemble


def train_step(ensemble: EnsembleQ, batch: Batch, config: CqlConfig) -> TrainStepReport:
    """CQL loss, joint gradient clipping across members, Adam, periodic target sync."""
    caches: list = []
    total, upstream, td_losses, penalty = cql_loss(ensemble, batch, config, caches)
    grads = [net.backward(m, batch.obs, g, cache) for m, g, cache in zip(ensemble.members, upstream, caches)]
    flat = [g for gs in grads for g in gs]
    norm = net.global_norm(flat)
    if config.clip_norm and norm > config.clip_norm:
        flat = net.clip_global_norm(flat, config.clip_norm)
    k = len(grads[0])
    for i, (member, state) in enumerate(zip(ensemble.members, ensemble.adam_states)):
        net.adam_step(member, flat[i * k : (i + 1) * k], state, config.lr)
    ensemble.step += 1
    if ensemble.step % config.target_update_interval == 0:
        sync_targets(ensemble)
    return TrainStepReport(td_losses, penalty, total, norm, ensemble.step)


def greedy_action(ensemble: EnsembleQ, obs: np.ndarray):
    """Argmax of the ensemble-mean Q (lowest index wins ties).

    A single observation gives an ``int``; a batch gives an index array.
    """
    single = np.ndim(obs) == 1
    q = ensemble.mean_q(np.atleast_2d(obs))
    a = q.argmax(axis=1)
    return int(a[0]) if single else a


def softmax_value(q_row: np.ndarray) -> float:
    """Softmax-weighted state value sum_a Q(a) * softmax(Q)(a)."""
    q = np.asarray(q_row, dtype=np.float64)
    return float(np.sum(q * softmax(q)))


def softmax_values(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.sum(q * softmax(q), axis=-1)


def advantages(q: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Row-wise Q(s, a) - softmax_value(Q(s, .)) for a (…, B, A) array."""
    q = np.asarray(q, dtype=np.float64)
    picked = np.take_along_axis(q, np.broadcast_to(np.asarray(actions)[..., None], q.shape[:-1] + (1,)), axis=-1)[..., 0]
    return picked - softmax_values(q)


def advantage(member_params: MlpParams, obs: np.ndarray, action: int) -> float:
    q = net.forward(member_params, np.atleast_2d(obs))[0]
    return float(q[action] - softmax_value(q))


def save_checkpoint(ensemble: EnsembleQ, path, extra: Optional[dict] = None) -> None:
    arrays = []
    for m, t, s in zip(ensemble.members, ensemble.targets, ensemble.adam_states):
        arrays += m.arrays() + t.arrays() + s.m + s.v
    arch = ensemble.arch
    meta = {
        "kind": "ensemble_q",
        "input_dim": arch.input_dim,
        "output_dim": arch.output_dim,
        "hidden": list(arch.hidden),
        "ensemble_size": ensemble.size,
        "step": ensemble.step,
        "adam_t": [s.t for s in ensemble.adam_states],
        "member_seeds": list(ensemble.member_seeds),
        "extra": extra or {},
    }
    net.write_envelope(path, meta, arrays)


def load_checkpoint(path) -> tuple[EnsembleQ, dict]:
    meta, arrays = net.read_envelope(path)
    k = 2 * (len(meta["hidden"]) + 1)
    per = 4 * k
    members, targets, states = [], [], []
    for i in range(meta["ensemble_size"]):
        chunk = arrays[i * per : (i + 1) * per]
        members.append(net.params_from_arrays(chunk[:k]))
        targets.append(net.params_from_arrays(chunk[k : 2 * k]))
        states.append(AdamState(list(chunk[2 * k : 3 * k]), list(chunk[3 * k :]), meta["adam_t"][i]))
    ens = EnsembleQ(members, targets, states, meta["step"], tuple(meta["member_seeds"]))
    return ens, meta.get("extra", {})
