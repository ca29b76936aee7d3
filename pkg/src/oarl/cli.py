"""Command line entry point: ``oarl <collect|train|evaluate|compare|histogram>``.

Every subcommand reads an experiment config (``--config``) except ``compare``,
which reads finished run directories. Exit codes::

    0  success
    2  invalid config, arguments or inputs
    3  file missing, unreadable or corrupt
    4  at least one seed diverged (the other seeds' outputs are still written)
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import data, envs, evaluation, experiment, learner, sampling
from .envs import TrafficWorldConfig
from .experiment import ConfigError, ExperimentConfig

log = logging.getLogger("oarl")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def _config(args) -> ExperimentConfig:
    if args.config is None:
        cfg = experiment.default_config(getattr(args, "env", "traffic"))
    else:
        cfg = experiment.load_config(args.config)
    if args.seed_subset:
        cfg = cfg.replace(run={"seeds": args.seed_subset})
    return cfg


def _seed_list(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.replace(" ", "").split(",") if s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# -- collect ----------------------------------------------------------------------


def cmd_collect(args) -> int:
    cfg = _config(args)
    path = args.out or cfg.dataset.path
    if not path:
        raise CliError("no output path: pass --out or set dataset.path")
    spec = cfg.dataset
    if isinstance(cfg.env, TrafficWorldConfig):
        ds = data.collect_dataset(cfg.env, n_episodes=spec.episodes, seed=spec.seed)
    else:
        ds = data.collect_maze_mixture(cfg.env, spec.episodes, spec.maze_random_episodes, spec.seed)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    data.save(ds, path)
    print(f"wrote {path}: {ds.n_episodes} episodes, {len(ds)} transitions, sha256 {data.file_checksum(path)[:16]}")
    return EXIT_OK


# -- train ------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.run.output_dir
    if cfg.dataset.path and not os.path.exists(cfg.dataset.path):
        raise CliError(f"dataset {cfg.dataset.path} does not exist; run `collect` first", EXIT_IO)
    ds = experiment.build_dataset(cfg)
    results = experiment.run_experiment(cfg, ds, out, jobs=args.jobs)
    for res in results:
        if res.diverged:
            print(f"seed {res.seed}: DIVERGED ({res.diverged})")
        else:
            last = res.reports[-1]
            print(f"seed {res.seed}: {last.gradient_step} steps, final suite reward {last.suite_mean:.3f}")
    print(f"wrote {out}")
    return EXIT_DIVERGENCE if any(r.diverged for r in results) else EXIT_OK


# -- evaluate ---------------------------------------------------------------------


def load_matching_checkpoint(path: str, cfg: ExperimentConfig):
    ens, extra = learner.load_checkpoint(path)
    arch = ens.arch
    if arch.input_dim != cfg.env.obs_dim or arch.output_dim != cfg.env.action_count:
        raise CliError(
            f"checkpoint expects obs_dim={arch.input_dim}, actions={arch.output_dim}; "
            f"environment has {cfg.env.obs_dim}, {cfg.env.action_count}"
        )
    return ens, extra


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ens, extra = load_matching_checkpoint(args.checkpoint, cfg)
    seed = int(extra.get("seed", cfg.run.seeds[0]))
    report = evaluation.evaluate_suite(ens, cfg.env, cfg.eval.episodes_per_case, seed)
    out = args.out or "eval.csv"
    evaluation.write_curve_csv(out, [report])
    for name, value in report.per_scenario.items():
        print(f"{name:36s} {value:+.3f}")
    print(f"{'suite':36s} {report.suite_mean:+.3f}")
    return EXIT_OK


# -- compare ----------------------------------------------------------------------


@dataclasses.dataclass
class RunCurve:
    name: str
    curve: evaluation.RewardCurve
    config: Optional[ExperimentConfig]

    @property
    def iqm(self) -> np.ndarray:
        return self.curve.iqm_curve()


def load_run(run_dir: str) -> RunCurve:
    path = os.path.join(run_dir, "curve.csv")
    if not os.path.exists(path):
        raise CliError(f"{run_dir}: no curve.csv (is this a finished run directory?)", EXIT_IO)
    curve = evaluation.suite_curve(evaluation.read_curve_csv(path))
    cfg = None
    cfg_path = os.path.join(run_dir, "config.txt")
    if os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            cfg = experiment.parse(fh.read())
    return RunCurve(os.path.basename(os.path.normpath(run_dir)), curve, cfg)


def resolve_target(spec: Optional[str], runs: Sequence[RunCurve], window: int) -> float:
    """``None`` -> target_fraction * max reward of the first run's env;
    ``best`` -> windowed best of the first run's IQM curve; else a number."""
    first = runs[0]
    if spec is None:
        cfg = first.config or experiment.default_config()
        return cfg.eval.target_fraction * evaluation.max_suite_reward(cfg.env)
    if spec == "best":
        return evaluation.windowed_best(first.iqm, window)
    try:
        return float(spec)
    except ValueError:
        raise CliError(f"--target must be a number or 'best', got {spec!r}")


def convergence_table(runs: Sequence[RunCurve], target: float, window: int = 2) -> list[dict]:
    """Steps to convergence of each run's IQM curve, and its ratio to the first run."""
    rows = []
    base = None
    for i, run in enumerate(runs):
        steps = evaluation.steps_to_convergence(run.iqm, target, window, run.curve.steps)
        if i == 0:
            base = steps
        ratio = steps / base if steps is not None and base else None
        rows.append({"run": run.name, "target": target, "steps_to_convergence": steps, "ratio_to_first": ratio, "best": evaluation.windowed_best(run.iqm, window)})
    return rows


def write_compare_csv(path: str, runs: Sequence[RunCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run"] + evaluation.AGG_FIELDS)
        for run in runs:
            q25, q75 = run.curve.quantiles(0.25), run.curve.quantiles(0.75)
            for row in zip(run.curve.steps, run.iqm, q25, q75):
                w.writerow([run.name, int(row[0])] + [repr(float(x)) for x in row[1:]])


def write_convergence_csv(path: str, rows: Sequence[dict]) -> None:
    fields = ["run", "target", "steps_to_convergence", "ratio_to_first", "best"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in fields})


_COLORS = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666")


def render_svg(runs: Sequence[RunCurve], target: Optional[float] = None, width: int = 640, height: int = 400) -> str:
    """IQM reward curves as a static SVG line plot (polylines plus axes)."""
    left, right, top, bottom = 60, 160, 20, 40
    pw, ph = width - left - right, height - top - bottom
    xmax = max(float(r.curve.steps.max()) for r in runs)
    ys = np.concatenate([r.iqm for r in runs] + ([np.array([target])] if target is not None else []))
    ymin, ymax = float(ys.min()), float(ys.max())
    if ymax - ymin < 1e-9:
        ymin, ymax = ymin - 1, ymax + 1

    def sx(x):
        return left + pw * x / xmax

    def sy(y):
        return top + ph * (1 - (y - ymin) / (ymax - ymin))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for k in range(5):
        xv, yv = xmax * k / 4, ymin + (ymax - ymin) * k / 4
        parts.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 15}" text-anchor="middle">{xv:.0f}</text>')
        parts.append(f'<text x="{left - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.2f}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 5}" text-anchor="middle">gradient steps</text>')
    parts.append(f'<text x="12" y="{top + ph / 2}" transform="rotate(-90 12 {top + ph / 2})" text-anchor="middle">IQM suite reward</text>')
    if target is not None:
        parts.append(f'<line x1="{left}" y1="{sy(target):.1f}" x2="{left + pw}" y2="{sy(target):.1f}" stroke="#999" stroke-dasharray="4 3"/>')
    for i, run in enumerate(runs):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(run.curve.steps, run.iqm))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = top + 14 * (i + 1)
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 35}" y="{ly}">{_escape(run.name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def cmd_compare(args) -> int:
    runs = [load_run(d) for d in args.runs]
    names = [r.name for r in runs]
    if len(set(names)) != len(names):
        runs = [dataclasses.replace(r, name=f"{i}:{r.name}") for i, r in enumerate(runs)]
    target = resolve_target(args.target, runs, args.window)
    out = args.out or "compare"
    os.makedirs(out, exist_ok=True)
    rows = convergence_table(runs, target, args.window)
    write_compare_csv(os.path.join(out, "compare.csv"), runs)
    write_convergence_csv(os.path.join(out, "convergence.csv"), rows)
    with open(os.path.join(out, "curves.svg"), "w") as fh:
        fh.write(render_svg(runs, target))
    print(f"target suite reward {target:.3f} (window {args.window})")
    for r in rows:
        steps = "not reached" if r["steps_to_convergence"] is None else r["steps_to_convergence"]
        ratio = "" if r["ratio_to_first"] is None else f"  x{r['ratio_to_first']:.2f}"
        print(f"{r['run']:30s} {steps}{ratio}")
    print(f"wrote {out}")
    return EXIT_OK


# -- histogram --------------------------------------------------------------------


def tail_mask(ds: data.TransitionDataset, env) -> np.ndarray:
    if not isinstance(env, TrafficWorldConfig):
        raise CliError("the tail-case classifier is only defined for Traffic-World")
    return envs.is_tile_forward(ds.obs, ds.actions, env)


def cmd_histogram(args) -> int:
    cfg = _config(args)
    if args.dataset:
        cfg = cfg.replace(dataset={"path": args.dataset})
        if not os.path.exists(args.dataset):
            raise CliError(f"dataset {args.dataset} does not exist", EXIT_IO)
    ds = experiment.build_dataset(cfg)
    ens, _ = load_matching_checkpoint(args.checkpoint, cfg)
    kind = sampling.AcquisitionKind(args.kind)
    if kind is sampling.AcquisitionKind.UNIFORM:
        raise CliError("uniform scores are constant; pick td_error or a variance kind")
    scores = sampling.compute_scores(kind, ens, ds.as_batch(), cfg.learner.gamma, ds.unique)
    hist = evaluation.score_histogram(scores, tail_mask(ds, cfg.env), args.bins)
    out = args.out or "histogram"
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "histogram.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count", "tail_count"])
        e = hist["edges"]
        for i in range(len(hist["counts"])):
            w.writerow([repr(float(e[i])), repr(float(e[i + 1])), int(hist["counts"][i]), int(hist["tail_counts"][i])])
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(f"kind = {kind.value}\n")
        fh.write(f"transitions = {len(scores)}\n")
        fh.write(f"tail_transitions = {int(hist['tail_counts'].sum())}\n")
        fh.write(f"tail_mean_score = {hist['tail_mean']!r}\n")
        fh.write(f"tail_percentile = {hist['percentile']!r}\n")
    print(f"tail mean {kind.value} score {hist['tail_mean']:.4g} ranks at percentile {hist['percentile']:.1f} of {len(scores)} transitions")
    print(f"wrote {out}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oarl", description="Offline CQL with active data sampling on toy gridworlds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="experiment config file (section.key = value lines)")
        sp.add_argument("--env", choices=("traffic", "maze"), default="traffic", help="defaults to use without --config")
        sp.add_argument("--seed-subset", type=_seed_list, help="comma-separated seeds overriding run.seeds")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("collect", help="roll out the behavior policy and write a dataset file")
    common(sp, "dataset file (default: dataset.path)")
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("train", help="train every seed and write curves, logs and checkpoints")
    common(sp, "run directory (default: run.output_dir or $OARL_OUT)")
    sp.add_argument("--jobs", type=int, default=1, help="seeds trained in parallel")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="run the evaluation suite on a checkpoint")
    common(sp, "report CSV (default: eval.csv)")
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("compare", help="IQM curves, convergence table and SVG plot for run directories")
    sp.add_argument("runs", nargs="+", help="run directories; the first is the reference")
    sp.add_argument("--target", help="reward target: a number or 'best' (default: target_fraction * max reward)")
    sp.add_argument("--window", type=int, default=2, help="evaluations the target must be held after reaching it")
    sp.add_argument("--out", help="output directory (default: compare)")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("histogram", help="acquisition-score histogram and tail-case percentile")
    common(sp, "output directory (default: histogram)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", help="dataset file (default: dataset section of the config)")
    sp.add_argument("--kind", default="variance_data", choices=[k.value for k in sampling.AcquisitionKind])
    sp.add_argument("--bins", type=int, default=50)
    sp.set_defaults(func=cmd_histogram)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except data.DatasetFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, sampling.SamplerConfigError, envs.EnvError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
