"""Experiment definition and the per-seed training loop.

Config files are plain ``section.key = value`` lines::

    env.kind = traffic
    env.spurious_tile_enabled = true
    learner.lr = 0.005
    sampler.kind = variance_data
    run.seeds = [0, 1, 2]

Values are Python literals; bare words are strings and ``true``/``false`` are
booleans. Unknown keys are rejected.
"""

from __future__ import annotations

import ast
import csv
import dataclasses
import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data, envs, evaluation, learner, net, sampling
from .data import TransitionDataset
from .envs import ConfoundedMazeConfig, TrafficWorldConfig
from .evaluation import EvalReport
from .learner import CqlConfig, EnsembleQ
from .sampling import AcquisitionKind, BatchSampler, SamplerConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    path: Optional[str] = None
    episodes: int = 7000
    seed: int = 0
    maze_random_episodes: int = 200
    subsample: float = 1.0
    subsample_seed: int = 0


@dataclass(frozen=True)
class EvalSpec:
    epochs: int = 10
    steps_per_epoch: int = 0  # 0 -> one pass over the data: ceil(len / batch)
    evals_per_epoch: int = 2
    episodes_per_case: int = 5
    target_fraction: float = 0.9


@dataclass(frozen=True)
class CompanionSpec:
    """Second ensemble trained on the same batches (cross-sampler runs)."""

    ensemble_size: int = 0
    checkpoint: Optional[str] = None


@dataclass(frozen=True)
class RunSpec:
    name: str = "run"
    seeds: tuple = (0, 1, 2, 3, 4, 5, 6)
    master_seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds or len(set(seeds)) != len(seeds):
            raise ConfigError("run.seeds must be a non-empty list of distinct integers")
        object.__setattr__(self, "seeds", seeds)


@dataclass(frozen=True)
class ExperimentConfig:
    env: object = field(default_factory=TrafficWorldConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    learner: CqlConfig = field(default_factory=CqlConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    companion: CompanionSpec = field(default_factory=CompanionSpec)
    run: RunSpec = field(default_factory=RunSpec)

    def replace(self, **sections) -> "ExperimentConfig":
        """``cfg.replace(sampler={"kind": "td_error"}, run={"seeds": [0]})``"""
        out = {}
        for name, updates in sections.items():
            current = getattr(self, name)
            out[name] = dataclasses.replace(current, **updates) if isinstance(updates, dict) else updates
        return dataclasses.replace(self, **out)


def default_config(kind: str = "traffic") -> ExperimentConfig:
    if kind == "traffic":
        return ExperimentConfig()
    return ExperimentConfig(
        env=ConfoundedMazeConfig(),
        dataset=DatasetSpec(episodes=6000, maze_random_episodes=200),
        learner=learner.MAZE_DEFAULTS,
        sampler=SamplerConfig(recompute_every=8),
        run=RunSpec(seeds=tuple(range(9))),
    )


# -- text format ------------------------------------------------------------------

_SECTIONS = ("env", "dataset", "learner", "sampler", "eval", "companion", "run")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (AcquisitionKind, envs.GoalMode)):
        return value.value
    if value is None:
        return "none"
    if isinstance(value, str):
        return value
    if isinstance(value, tuple):
        return repr(list(value))
    return repr(value)


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def serialize(config: ExperimentConfig) -> str:
    lines = [f"env.kind = {config.env.kind}"]
    for section in _SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def _coerce(cls, values: dict, section: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        default = names[key].default
        if isinstance(value, list):
            value = tuple(value)
        if isinstance(default, str) and value is not None and not isinstance(value, str):
            value = str(value)
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        out[key] = value
    try:
        return cls(**out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse(text: str) -> ExperimentConfig:
    raw: dict = {s: {} for s in _SECTIONS}
    kind = "traffic"
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line or "." not in line.split("=", 1)[0]:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        lhs, rhs = line.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if section not in raw:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        if section == "env" and key.strip() == "kind":
            kind = rhs.strip()
            continue
        raw[section][key.strip()] = _parse_value(rhs)
    base = default_config(kind)
    env_cls = {"traffic": TrafficWorldConfig, "maze": ConfoundedMazeConfig}.get(kind)
    if env_cls is None:
        raise ConfigError(f"unknown env.kind {kind!r}")
    sections = {"env": _coerce(env_cls, {**envs.config_to_dict(base.env), **raw["env"]}, "env")}
    for name, cls in (("dataset", DatasetSpec), ("learner", CqlConfig), ("sampler", SamplerConfig), ("eval", EvalSpec), ("companion", CompanionSpec), ("run", RunSpec)):
        current = getattr(base, name)
        merged = {f.name: getattr(current, f.name) for f in dataclasses.fields(current)}
        merged.update(raw[name])
        sections[name] = _coerce(cls, merged, name)
    cfg = ExperimentConfig(**sections)
    if cfg.sampler.kind in (AcquisitionKind.VARIANCE_DATA, AcquisitionKind.VARIANCE_GREEDY):
        scoring_size = cfg.companion.ensemble_size if cfg.sampler.source == "companion" else cfg.learner.ensemble_size
        if scoring_size < 2:
            raise ConfigError("variance acquisition needs a scoring ensemble with at least two members")
    if cfg.sampler.source == "companion" and cfg.companion.ensemble_size < 1:
        raise ConfigError("sampler.source = companion requires companion.ensemble_size >= 1")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        cfg = parse(fh.read())
    out = os.environ.get("OARL_OUT")
    if out:
        cfg = cfg.replace(run={"output_dir": out})
    return cfg


# -- randomness -------------------------------------------------------------------


def stream(master_seed: int, tag: str, seed: int) -> np.random.Generator:
    """Independent generator for one (master seed, purpose, run seed) triple."""
    tag_key = int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")
    return np.random.default_rng(np.random.SeedSequence([master_seed, tag_key, seed]))


def stream_seed(master_seed: int, tag: str, seed: int) -> int:
    return int(stream(master_seed, tag, seed).integers(2**63))


# -- datasets ---------------------------------------------------------------------


def build_dataset(config: ExperimentConfig) -> TransitionDataset:
    """Load ``dataset.path`` if it exists, otherwise collect it as the dataset section describes."""
    spec = config.dataset
    if spec.path and os.path.exists(spec.path):
        ds = data.load(spec.path)
    elif isinstance(config.env, TrafficWorldConfig):
        ds = data.collect_dataset(config.env, n_episodes=spec.episodes, seed=spec.seed)
    else:
        ds = data.collect_maze_mixture(config.env, spec.episodes, spec.maze_random_episodes, spec.seed)
    if spec.subsample < 1.0:
        ds = data.subsample(ds, spec.subsample, spec.subsample_seed)
    check_dataset(ds, config)
    return ds


def check_dataset(ds: TransitionDataset, config: ExperimentConfig) -> None:
    if ds.obs_dim != config.env.obs_dim or ds.action_count != config.env.action_count:
        raise ConfigError(
            f"dataset has obs_dim={ds.obs_dim}, actions={ds.action_count}; "
            f"environment expects {config.env.obs_dim}, {config.env.action_count}"
        )


# -- training ---------------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    reports: list
    ensemble: EnsembleQ
    companion_reports: list = field(default_factory=list)
    companion: Optional[EnsembleQ] = None
    log_rows: list = field(default_factory=list)
    diverged: Optional[str] = None


def steps_per_epoch(config: ExperimentConfig, n_transitions: int) -> int:
    if config.eval.steps_per_epoch > 0:
        return config.eval.steps_per_epoch
    return max(1, -(-n_transitions // config.learner.batch_size))


def make_ensemble(config: ExperimentConfig, size: int, seed: int, tag: str) -> EnsembleQ:
    arch = net.MlpArch(config.env.obs_dim, config.env.action_count, config.learner.hidden)
    return EnsembleQ.create(arch, size, stream_seed(config.run.master_seed, tag, seed))


def train_seed(config: ExperimentConfig, dataset: TransitionDataset, seed: int, companion_init: Optional[EnsembleQ] = None) -> SeedResult:
    """The training loop for one seed.

    Every step: pick the sampler for this epoch (uniform during warm start),
    refresh scores as the mode requires, draw a batch, take a CQL step. The
    suite is evaluated ``evals_per_epoch`` times per epoch.
    """
    cql = config.learner
    if config.sampler.source == "companion" and config.companion.ensemble_size <= 0 and companion_init is None:
        raise ConfigError("sampler.source = companion needs companion.ensemble_size > 0 or companion.checkpoint")
    ens = make_ensemble(config, cql.ensemble_size, seed, "ensemble")
    companion = None
    if config.companion.ensemble_size > 0 or companion_init is not None:
        companion = companion_init.copy() if companion_init is not None else make_ensemble(config, config.companion.ensemble_size, seed, "companion")
    companion_cql = dataclasses.replace(cql, ensemble_size=companion.size) if companion is not None else None
    scorer = companion if config.sampler.source == "companion" else ens
    batch_rng = stream(config.run.master_seed, "batches", seed)
    sampler = BatchSampler(dataset, config.sampler, cql.batch_size, batch_rng, cql.gamma)
    per_epoch = steps_per_epoch(config, len(dataset))
    n_evals = min(max(config.eval.evals_per_epoch, 1), per_epoch)
    result = SeedResult(seed, [], ens, [], companion)
    step = 0
    try:
        for epoch in range(config.eval.epochs):
            for t in range(per_epoch):
                idx = sampler.sample(step, epoch, scorer)
                batch = dataset.batch(idx)
                rep = learner.train_step(ens, batch, cql)
                if companion is not None:
                    learner.train_step(companion, batch, companion_cql)
                sampler.after_step(step, epoch, scorer)
                step += 1
                result.log_rows.append((seed, epoch, rep.step, rep.total_loss, rep.penalty, float(np.mean(rep.member_td_loss)), rep.grad_norm))
                # evenly spaced within the epoch, the last one at its end
                if (t + 1) * n_evals // per_epoch > t * n_evals // per_epoch:
                    result.reports.append(evaluation.evaluate_suite(ens, config.env, config.eval.episodes_per_case, seed, epoch))
                    if companion is not None:
                        result.companion_reports.append(evaluation.evaluate_suite(companion, config.env, config.eval.episodes_per_case, seed, epoch))
    except (learner.DivergenceError, net.NonFiniteGradientError) as exc:
        log.warning("seed %s diverged: %s", seed, exc)
        result.diverged = str(exc)
    return result


def run_experiment(config: ExperimentConfig, dataset: Optional[TransitionDataset] = None, out_dir: Optional[str] = None, seeds=None, save_checkpoints: bool = True, jobs: int = 1) -> list:
    """Train every seed; write per-seed and combined CSVs when ``out_dir`` is set.

    With ``jobs > 1`` seeds run in worker processes. Each seed only touches its
    own RNG streams, so the outputs do not depend on ``jobs``.
    """
    dataset = dataset if dataset is not None else build_dataset(config)
    companion_init = None
    if config.companion.checkpoint:
        companion_init, _ = learner.load_checkpoint(config.companion.checkpoint)
    seeds = list(seeds if seeds is not None else config.run.seeds)
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(min(jobs, len(seeds))) as pool:
            futures = [pool.submit(train_seed, config, dataset, s, companion_init) for s in seeds]
            results = [f.result() for f in futures]
    else:
        results = [train_seed(config, dataset, s, companion_init) for s in seeds]
    if out_dir:
        for res in results:
            write_seed_outputs(out_dir, res, save_checkpoints)
    if out_dir:
        write_run_outputs(out_dir, config, results)
    return results


def write_seed_outputs(out_dir: str, res: SeedResult, save_checkpoint: bool = True) -> None:
    sd = os.path.join(out_dir, f"seed_{res.seed}")
    os.makedirs(sd, exist_ok=True)
    evaluation.write_curve_csv(os.path.join(sd, "curve.csv"), res.reports)
    if res.companion_reports:
        evaluation.write_curve_csv(os.path.join(sd, "companion_curve.csv"), res.companion_reports)
    with open(os.path.join(sd, "train_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "epoch", "gradient_step", "total_loss", "penalty", "td_loss", "grad_norm"])
        for row in res.log_rows:
            w.writerow([row[0], row[1], row[2]] + [repr(float(x)) for x in row[3:]])
    if res.diverged:
        with open(os.path.join(sd, "DIVERGED"), "w") as fh:
            fh.write(res.diverged + "\n")
    if save_checkpoint:
        learner.save_checkpoint(res.ensemble, os.path.join(sd, "checkpoint.oarlq"), {"seed": res.seed})
        if res.companion is not None:
            learner.save_checkpoint(res.companion, os.path.join(sd, "companion.oarlq"), {"seed": res.seed})


def write_run_outputs(out_dir: str, config: ExperimentConfig, results: list) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(serialize(config))
    reports = [r for res in results for r in res.reports]
    evaluation.write_curve_csv(os.path.join(out_dir, "curve.csv"), reports)
    ok = [res for res in results if res.reports]
    if ok:
        evaluation.write_aggregate_csv(os.path.join(out_dir, "aggregate.csv"), curve_from_results(ok))


def curve_from_results(results: list, companion: bool = False) -> evaluation.RewardCurve:
    """Suite-reward curves of several seeds on their common evaluation steps."""
    rows = []
    for res in results:
        reps = res.companion_reports if companion else res.reports
        rows += [{"seed": res.seed, "gradient_step": r.gradient_step, "scenario": "suite", "reward": r.suite_mean} for r in reps]
    return evaluation.suite_curve(rows)
