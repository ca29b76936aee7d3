"""A small fully connected Q-network with hand-written backprop and Adam.

Parameters are stored as ``float32`` by default; weight gradients are reduced
over the batch in ``float64`` so results do not depend on BLAS blocking.
Tests that compare against finite differences build ``float64`` parameters.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"OARLQ"
CHECKPOINT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MlpArch:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min((self.input_dim, self.output_dim) + self.hidden) < 1:
            raise ShapeError(f"all layer widths must be >= 1, got {self.widths}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.hidden + (self.output_dim,)


@dataclass
class MlpParams:
    """Weights are stored ``(out, in)`` so a layer computes ``x @ W.T + b``."""

    weights: list
    biases: list
    init_scheme: str = "he_uniform"
    seed: Optional[int] = None

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.init_scheme, self.seed)

    @property
    def arch(self) -> MlpArch:
        return MlpArch(self.weights[0].shape[1], self.weights[-1].shape[0], tuple(w.shape[0] for w in self.weights[:-1]))

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def init(arch: MlpArch, seed: int, dtype=np.float32) -> MlpParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    widths = arch.widths
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights, biases, "he_uniform", seed)


def forward(params: MlpParams, x: np.ndarray, return_cache: bool = False):
    x = np.asarray(x, dtype=params.weights[0].dtype)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(f"expected input of shape (B, {params.weights[0].shape[1]}), got {x.shape}")
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        h = np.maximum(z, 0) if i < last else z
        acts.append(h)
    if return_cache:
        return h, acts
    return h


def backward(params: MlpParams, x: np.ndarray, upstream: np.ndarray, cache: Optional[list] = None) -> list:
    """Gradients of ``sum(upstream * forward(params, x))``.

    Returned in :meth:`MlpParams.arrays` order ``[W0, b0, W1, b1, ...]``.
    """
    if cache is None:
        _, cache = forward(params, x, return_cache=True)
    n_layers = len(params.weights)
    if upstream.shape != cache[-1].shape:
        raise ShapeError(f"upstream gradient shape {upstream.shape} does not match output {cache[-1].shape}")
    g = np.asarray(upstream, dtype=np.float64)
    grads = [None] * (2 * n_layers)
    for i in reversed(range(n_layers)):
        h_in = cache[i]
        w = params.weights[i]
        grads[2 * i] = (g.T @ h_in.astype(np.float64)).astype(w.dtype)
        grads[2 * i + 1] = g.sum(axis=0).astype(w.dtype)
        if i > 0:
            g = (g @ w.astype(np.float64)) * (cache[i] > 0)
    return grads


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> list:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * np.asarray(scale, dtype=g.dtype) for g in grads]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()])

    def copy(self) -> "AdamState":
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v], self.t, self.beta1, self.beta2, self.eps)


def adam_step(params: MlpParams, grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NonFiniteGradientError(f"gradient array {i} (shape {g.shape}) has {bad} non-finite entries")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params.arrays(), grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= (lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.dtype)
    return params, state


# -- checkpoints ------------------------------------------------------------------


def pack_arrays(arrays: Sequence[np.ndarray]) -> tuple[list, bytes]:
    specs, chunks = [], []
    for a in arrays:
        a = np.ascontiguousarray(a)
        specs.append({"shape": list(a.shape), "dtype": a.dtype.newbyteorder("<").str})
        chunks.append(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    return specs, b"".join(chunks)


def unpack_arrays(specs: list, blob: bytes) -> list:
    out, pos = [], 0
    for spec in specs:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"], dtype=np.int64))
        out.append(np.frombuffer(blob, dt, count=n, offset=pos).reshape(spec["shape"]).astype(dt.newbyteorder("=")))
        pos += n * dt.itemsize
    return out


def write_envelope(path, meta: dict, arrays: Sequence[np.ndarray]) -> None:
    """magic, version u32, meta length u32, JSON meta, raw arrays, blake2b-64 checksum."""
    specs, blob = pack_arrays(arrays)
    meta = dict(meta, arrays=specs)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    payload = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)) + meta_bytes + blob
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(hashlib.blake2b(payload, digest_size=8).digest())


def read_envelope(path) -> tuple[dict, list]:
    from .data import BadMagicError, ChecksumError, VersionMismatchError

    with open(path, "rb") as fh:
        blob = fh.read()
    n = len(CHECKPOINT_MAGIC)
    if blob[:n] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not an OARLQ checkpoint")
    if len(blob) < n + 16:
        raise ChecksumError(f"{path}: checkpoint truncated")
    payload, tail = blob[:-8], blob[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != tail:
        raise ChecksumError(f"{path}: checksum mismatch")
    version, meta_len = struct.unpack_from("<II", blob, n)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    meta = json.loads(payload[n + 8 : n + 8 + meta_len])
    arrays = unpack_arrays(meta.pop("arrays"), payload[n + 8 + meta_len :])
    return meta, arrays


def params_from_arrays(arrays: Sequence[np.ndarray], seed=None) -> MlpParams:
    return MlpParams(list(arrays[0::2]), list(arrays[1::2]), "he_uniform", seed)
