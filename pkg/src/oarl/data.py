"""Offline datasets: scripted collection, sub-sampling and the on-disk format.

File layout (all little-endian)::

    magic     4 bytes   b"OARL"
    version   u32
    obs_dim   u32
    n_actions u32
    n_trans   u64
    n_eps     u64
    offsets   (n_eps + 1) x i64      episode start indices, last = n_trans
    records   n_trans x {obs f32[obs_dim], next_obs f32[obs_dim],
                         action u16, reward f32, done u8}
    checksum  u64                    blake2b-64 of everything above

The metadata dictionary is written next to the binary file as
``<path>.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from . import envs
from .envs import ConfoundedMazeConfig, EnvConfig, TrafficWorldConfig

MAGIC = b"OARL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIQQ")


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class PolicyMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.actions)


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Immutable flat transition arrays plus episode boundaries.

    ``episode_offsets`` holds the start index of every episode followed by the
    total transition count, so episode ``e`` spans
    ``offsets[e]:offsets[e + 1]``.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    episode_offsets: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.actions)
        offsets = self.episode_offsets
        if offsets[0] != 0 or offsets[-1] != n:
            raise ValueError("episode_offsets must start at 0 and end at the transition count")
        if len(offsets) > 1 and np.any(np.diff(offsets) <= 0):
            raise ValueError("episode_offsets must be strictly increasing")
        if self.obs.shape != self.next_obs.shape or len(self.obs) != n:
            raise ValueError("obs/next_obs/action lengths disagree")
        for arr in (self.obs, self.actions, self.rewards, self.next_obs, self.dones, self.episode_offsets):
            arr.setflags(write=False)
        # keep meta in its on-disk (JSON) form so a save/load round trip is exact
        object.__setattr__(self, "meta", json.loads(json.dumps(self.meta)))

    def __len__(self):
        return len(self.actions)

    @property
    def n_episodes(self) -> int:
        return len(self.episode_offsets) - 1

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def action_count(self) -> int:
        return int(self.meta.get("action_count", int(self.actions.max()) + 1 if len(self) else 0))

    @property
    def episode_lengths(self) -> np.ndarray:
        return np.diff(self.episode_offsets)

    @cached_property
    def episode_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_episodes), self.episode_lengths)

    @cached_property
    def step_indices(self) -> np.ndarray:
        return np.arange(len(self)) - np.repeat(self.episode_offsets[:-1], self.episode_lengths)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx])

    def as_batch(self) -> Batch:
        return Batch(self.obs, self.actions, self.rewards, self.next_obs, self.dones)

    @cached_property
    def unique(self) -> tuple[np.ndarray, np.ndarray]:
        """(representative indices, inverse) over byte-identical transitions.

        The symbolic environments revisit the same transitions constantly, so
        anything that is a per-transition function only needs to run on the
        representatives.
        """
        rec = _records(self)
        _, first, inverse = np.unique(rec.view(np.dtype((np.void, rec.dtype.itemsize))), return_index=True, return_inverse=True)
        return first, inverse.reshape(-1)

    def digest(self) -> str:
        return hashlib.sha256(_payload(self)).hexdigest()

    def episode(self, e: int) -> Batch:
        lo, hi = self.episode_offsets[e], self.episode_offsets[e + 1]
        return self.batch(np.arange(lo, hi))


def empty_dataset(obs_dim: int, action_count: int, meta: Optional[dict] = None) -> TransitionDataset:
    meta = dict(meta or {})
    meta.setdefault("obs_dim", obs_dim)
    meta.setdefault("action_count", action_count)
    meta.setdefault("n_episodes", 0)
    z = np.zeros((0, obs_dim), np.float32)
    return TransitionDataset(z, np.zeros(0, np.int64), np.zeros(0, np.float32), z.copy(), np.zeros(0, bool), np.zeros(1, np.int64), meta)


# -- behaviour policies ---------------------------------------------------------


@dataclass(frozen=True)
class BehaviorPolicy:
    """Scripted demonstrator.

    kind is ``"traffic_scripted"``, ``"maze_shortest_path"`` or
    ``"epsilon_noisy"``; the last one wraps ``base`` and takes a uniformly
    random action with probability ``epsilon``.
    """

    kind: str = "traffic_scripted"
    epsilon: float = 0.0
    base: Optional["BehaviorPolicy"] = None

    @property
    def env_kind(self) -> str:
        if self.kind == "epsilon_noisy":
            if self.base is None:
                raise PolicyMismatchError("epsilon_noisy needs a base policy")
            return self.base.env_kind
        return {"traffic_scripted": "traffic", "maze_shortest_path": "maze"}[self.kind]

    def act(self, state, config: EnvConfig, rng: np.random.Generator) -> int:
        if self.kind == "traffic_scripted":
            return traffic_expert_action(state, config)
        if self.kind == "maze_shortest_path":
            return maze_expert_action(state, config)
        if rng.random() < self.epsilon:
            return int(rng.integers(config.action_count))
        return self.base.act(state, config, rng)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "epsilon": self.epsilon}
        if self.base is not None:
            out["base"] = self.base.to_dict()
        return out


def traffic_expert_action(state: envs.TrafficWorldState, config: TrafficWorldConfig) -> int:
    """Forward iff the next cell is free and the agent is not stopped at a red light."""
    nxt = state.agent_cell + 1
    if nxt in state.vehicle_cells:
        return envs.WAIT
    if state.agent_cell == config.light_cell and state.light == envs.RED:
        return envs.WAIT
    return envs.FORWARD


def maze_expert_action(state: envs.MazeState, config: ConfoundedMazeConfig) -> int:
    dist = envs.bfs_distances(state.walls, state.goal)
    r, c = state.agent
    best, best_d = envs.UP, None
    for a, (dr, dc) in enumerate(envs._MOVES):
        d = dist[r + dr, c + dc]
        if d >= 0 and (best_d is None or d < best_d):
            best, best_d = a, d
    return best


def default_policy(config: EnvConfig) -> BehaviorPolicy:
    return BehaviorPolicy("traffic_scripted" if config.kind == "traffic" else "maze_shortest_path")


# -- collection -----------------------------------------------------------------


def config_digest(config: EnvConfig) -> str:
    blob = json.dumps(envs.config_to_dict(config), sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def collect_dataset(config: EnvConfig, policy: Optional[BehaviorPolicy] = None, n_episodes: int = 1, seed: int = 0) -> TransitionDataset:
    """Roll out ``n_episodes`` complete episodes of ``policy`` in ``config``."""
    policy = policy or default_policy(config)
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if policy.env_kind != config.kind:
        raise PolicyMismatchError(f"{policy.kind} policy cannot drive a {config.kind} environment")
    ss = np.random.SeedSequence(seed)
    episode_seeds = ss.generate_state(n_episodes, dtype=np.uint64)
    policy_rng = np.random.default_rng(ss.spawn(1)[0])

    obs, actions, rewards, dones = [], [], [], []
    next_obs = []
    offsets = [0]
    for ep_seed in episode_seeds:
        state = envs.reset(config, int(ep_seed))
        o = envs.observe(state, config)
        while True:
            a = policy.act(state, config, policy_rng)
            out = envs.step(config, state, a)
            o2 = envs.observe(out.next_state, config)
            obs.append(o)
            actions.append(a)
            rewards.append(out.reward)
            next_obs.append(o2)
            dones.append(out.done)
            state, o = out.next_state, o2
            if out.done:
                break
        offsets.append(len(actions))

    meta = {
        "env_kind": config.kind,
        "env_config": envs.config_to_dict(config),
        "config_digest": config_digest(config),
        "spurious_enabled": bool(getattr(config, "spurious_tile_enabled", False)),
        "n_episodes": n_episodes,
        "obs_dim": config.obs_dim,
        "action_count": config.action_count,
        "collection_seed": seed,
        "policy": policy.to_dict(),
    }
    return TransitionDataset(
        np.asarray(obs, np.float32),
        np.asarray(actions, np.int64),
        np.asarray(rewards, np.float32),
        np.asarray(next_obs, np.float32),
        np.asarray(dones, bool),
        np.asarray(offsets, np.int64),
        meta,
    )


def concatenate(datasets: Sequence[TransitionDataset], meta: Optional[dict] = None) -> TransitionDataset:
    """Join datasets episode-wise (e.g. a fixed-goal and a random-goal maze set)."""
    if not datasets:
        raise ValueError("nothing to concatenate")
    dims = {d.obs_dim for d in datasets}
    if len(dims) != 1:
        raise ValueError(f"obs_dim differs across datasets: {sorted(dims)}")
    offsets = [np.zeros(1, np.int64)]
    base = 0
    for d in datasets:
        offsets.append(d.episode_offsets[1:] + base)
        base += len(d)
    merged = dict(datasets[0].meta)
    merged.update(meta or {})
    merged["n_episodes"] = sum(d.n_episodes for d in datasets)
    merged["parts"] = [d.meta.get("config_digest") for d in datasets]
    return TransitionDataset(
        np.concatenate([d.obs for d in datasets]),
        np.concatenate([d.actions for d in datasets]),
        np.concatenate([d.rewards for d in datasets]),
        np.concatenate([d.next_obs for d in datasets]),
        np.concatenate([d.dones for d in datasets]),
        np.concatenate(offsets),
        merged,
    )


def collect_maze_mixture(config: ConfoundedMazeConfig, n_fixed: int = 6000, n_random: int = 200, seed: int = 0) -> TransitionDataset:
    fixed = dataclasses.replace(config, goal_mode=envs.GoalMode.FIXED_TOP_RIGHT)
    rand = dataclasses.replace(config, goal_mode=envs.GoalMode.UNIFORM_RANDOM)
    ss = np.random.SeedSequence(seed)
    s1, s2 = (int(x) for x in ss.generate_state(2))
    parts = [collect_dataset(fixed, n_episodes=n_fixed, seed=s1)]
    if n_random:
        parts.append(collect_dataset(rand, n_episodes=n_random, seed=s2))
    return concatenate(parts, {"mixture": {"fixed_top_right": n_fixed, "uniform_random": n_random}, "collection_seed": seed})


def subsample(dataset: TransitionDataset, fraction: float, seed: int = 0) -> TransitionDataset:
    """Keep a uniformly chosen ``fraction`` of whole episodes, in original order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n_keep = int(round(fraction * dataset.n_episodes))
    if n_keep < 1:
        raise ValueError("fraction too small: no episode would be kept")
    if n_keep == dataset.n_episodes:
        keep = np.arange(dataset.n_episodes)
    else:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(dataset.n_episodes, size=n_keep, replace=False))
    lengths = dataset.episode_lengths[keep]
    starts = dataset.episode_offsets[keep]
    idx = np.concatenate([np.arange(s, s + n) for s, n in zip(starts, lengths)])
    meta = dict(dataset.meta)
    meta.update(n_episodes=int(n_keep), subsample_fraction=fraction, subsample_seed=seed, parent_digest=dataset.meta.get("config_digest"))
    return TransitionDataset(
        dataset.obs[idx],
        dataset.actions[idx],
        dataset.rewards[idx],
        dataset.next_obs[idx],
        dataset.dones[idx],
        np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
        meta,
    )


# -- persistence ----------------------------------------------------------------


def _record_dtype(obs_dim: int) -> np.dtype:
    return np.dtype(
        [
            ("obs", "<f4", (obs_dim,)),
            ("next_obs", "<f4", (obs_dim,)),
            ("action", "<u2"),
            ("reward", "<f4"),
            ("done", "u1"),
        ]
    )


def _records(dataset: TransitionDataset) -> np.ndarray:
    rec = np.zeros(len(dataset), dtype=_record_dtype(dataset.obs_dim))
    rec["obs"] = dataset.obs
    rec["next_obs"] = dataset.next_obs
    rec["action"] = dataset.actions
    rec["reward"] = dataset.rewards
    rec["done"] = dataset.dones
    return rec


def _payload(dataset: TransitionDataset) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, dataset.obs_dim, dataset.action_count, len(dataset), dataset.n_episodes)
    return header + dataset.episode_offsets.astype("<i8").tobytes() + _records(dataset).tobytes()


def checksum64(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def manifest_path(path) -> str:
    return os.fspath(path) + ".json"


def save(dataset: TransitionDataset, path) -> None:
    payload = _payload(dataset)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(checksum64(payload))
    with open(manifest_path(path), "w") as fh:
        json.dump(dataset.meta, fh, indent=2, sort_keys=True, default=str)


def load(path) -> TransitionDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC[: len(blob[:4])] or len(blob) < 4:
        raise BadMagicError(f"{path}: not an OARL dataset file")
    if len(blob) < _HEADER.size + 8:
        raise ChecksumError(f"{path}: file truncated")
    magic, version, obs_dim, n_actions, n_trans, n_eps = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    rec_dtype = _record_dtype(obs_dim)
    expected = _HEADER.size + 8 * (n_eps + 1) + rec_dtype.itemsize * n_trans
    payload, tail = blob[:-8], blob[-8:]
    if len(payload) != expected or checksum64(payload) != tail:
        raise ChecksumError(f"{path}: checksum mismatch or truncated payload")
    offsets = np.frombuffer(blob, "<i8", count=n_eps + 1, offset=_HEADER.size).astype(np.int64)
    rec = np.frombuffer(blob, rec_dtype, count=n_trans, offset=_HEADER.size + 8 * (n_eps + 1))
    meta = {}
    if os.path.exists(manifest_path(path)):
        with open(manifest_path(path)) as fh:
            meta = json.load(fh)
    meta["obs_dim"] = obs_dim
    meta["action_count"] = n_actions
    return TransitionDataset(
        rec["obs"].astype(np.float32),
        rec["action"].astype(np.int64),
        rec["reward"].astype(np.float32),
        rec["next_obs"].astype(np.float32),
        rec["done"].astype(bool),
        offsets,
        meta,
    )


def file_checksum(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- dataset statistics -----------------------------------------------------------


def traffic_episode_types(dataset: TransitionDataset, config: TrafficWorldConfig) -> np.ndarray:
    """Classify each Traffic-World episode by replaying its observations.

    1 = light green throughout, 2 = red light seen while the agent was queued
    behind a vehicle, 3 = red light with the agent at the front of the queue
    (waiting at the stop line itself).
    """
    dec = envs.decode_traffic_obs(dataset.obs, config)
    at_line = (dec["agent_cell"] == config.light_cell) & dec["red"]
    any_red = dec["red"]
    eid = dataset.episode_ids
    types = np.ones(dataset.n_episodes, dtype=np.int64)
    red_eps = np.zeros(dataset.n_episodes, bool)
    front_eps = np.zeros(dataset.n_episodes, bool)
    np.logical_or.at(red_eps, eid, any_red & (dataset.actions == envs.WAIT))
    np.logical_or.at(front_eps, eid, at_line)
    types[red_eps] = 2
    types[front_eps] = 3
    return types


def tile_policy_agreement(dataset: TransitionDataset, config: TrafficWorldConfig) -> float:
    """Fraction of transitions where "Forward iff tile not yellow" matches the data."""
    tile = envs.decode_traffic_obs(dataset.obs, config)["tile"]
    predicted = np.where(tile, envs.WAIT, envs.FORWARD)
    return float(np.mean(predicted == dataset.actions))
