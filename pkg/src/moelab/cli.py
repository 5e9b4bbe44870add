"""Config-driven experiment runner.

Subcommands:

``run --config cfg.json``
    Train and evaluate ``repetitions`` seeds, writing one report JSON and
    one checkpoint per seed plus a mean/stderr summary CSV.

``sweep --config cfg.json``
    Expand a grid over variant, E, K and M, run each cell, and write one
    CSV row per cell with metrics and training FLOPs.  Besides the model
    variants the grid accepts two ensembling protocols: ``deep_ensemble``
    (M independently trained routed models averaged at test time) and
    ``mc_dropout`` (one dense model, M eval-time dropout draws).

``analyze --mode {gain_map,normalized_improvement,pareto}``
    Turn result CSVs into tables and SVG scatter plots.

``flops --preset <name>``
    Print the analytic cost report for a model configuration.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
All commands are deterministic given config and seed; files are written
atomically (temp file then rename).
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .analyzer import (
    CostPoint,
    improvement_table,
    load_reference_points,
    normalized_gain,
    pareto_frontier,
)
from .checkpoint import checkpoint_from_model, save_checkpoint
from .dataset import DatasetSpec, make_dataset
from .errors import ConfigError, DivergenceError, EvaluationError
from .flops import deep_ensemble_flops, flops_estimate, flops_forward, tiling_saving
from .model import PRESET_NAMES, VARIANTS, ModelSpec, build_model, preset
from .rng import Rng
from .trainer import TrainConfig, evaluate, history_to_csv, train

__all__ = ["ExperimentConfig", "main"]

# Eval-time draws (routing noise, dropout samples) come from a generator
# seeded away from the training seed so the two never share streams.
EVAL_SEED_OFFSET = 1000

# Deep-ensemble members get seeds spaced by a prime so member b of cell x
# never collides with member a of a neighbouring repetition.
MEMBER_SEED_STRIDE = 7919

SWEEP_PROTOCOLS = ("deep_ensemble", "mc_dropout")


@dataclass
class ExperimentConfig:
    """One training experiment: model + optimizer + data + replication."""

    model: ModelSpec
    train: TrainConfig
    dataset: DatasetSpec
    repetitions: int = 1
    output_dir: str = "out"
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError(
                f"repetitions must be >= 1, got {self.repetitions}"
            )
        allowed = {"variant", "e", "k", "m"}
        unknown = set(self.grid) - allowed
        if unknown:
            raise ConfigError(
                f"unknown grid keys {sorted(unknown)}; allowed {sorted(allowed)}"
            )
        for key, values in self.grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid.{key} must be a non-empty list")

    def to_dict(self) -> dict:
        d = {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "dataset": self.dataset.to_dict(),
            "repetitions": self.repetitions,
            "output_dir": self.output_dir,
        }
        if self.grid:
            d["grid"] = self.grid
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        allowed = {"model", "train", "dataset", "repetitions", "output_dir",
                   "grid"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(
                f"unknown config keys {sorted(unknown)}; allowed "
                f"{sorted(allowed)}"
            )
        for req in ("model", "train", "dataset"):
            if req not in d:
                raise ConfigError(f"config missing required key {req!r}")
        return cls(
            model=ModelSpec.from_dict(d["model"]),
            train=TrainConfig.from_dict(d["train"]),
            dataset=DatasetSpec.from_dict(d["dataset"]),
            repetitions=d.get("repetitions", 1),
            output_dir=d.get("output_dir", "out"),
            grid=d.get("grid", {}),
        )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def _write_text(path: Path, text: str) -> None:
    # atomic: never leave a half-written file behind a crash
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    return f"{v:.10g}"


def _mean_stderr(values: list) -> tuple:
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def _flatten_report(report) -> dict:
    """Scalar view of an EvalReport: top-level fields plus ood metrics."""
    d = report.to_dict()
    flat = {}
    for key in report.SCALAR_FIELDS:
        flat[key] = d.get(key)
    for pair, metrics in sorted((d.get("ood") or {}).items()):
        for name, value in sorted(metrics.items()):
            flat[f"ood.{pair}.{name}"] = value
    return flat


def _summary_csv(flat_reports: list) -> str:
    lines = ["metric,mean,stderr"]
    keys = list(flat_reports[0])
    for key in keys:
        values = [fr.get(key) for fr in flat_reports]
        if any(v is None for v in values):
            continue
        mean, stderr = _mean_stderr(values)
        lines.append(f"{key},{_fmt_cell(mean)},{_fmt_cell(stderr)}")
    return "\n".join(lines) + "\n"


def _train_one(spec: ModelSpec, dataset, tcfg: TrainConfig, seed: int):
    model = build_model(spec, Rng(seed))
    model, history = train(model, dataset, replace(tcfg, seed=seed))
    return model, history


def run_experiment(config: ExperimentConfig, out_dir: Path) -> list:
    """Train and evaluate every repetition; returns the EvalReports."""
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(
        out_dir / "config.json",
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
    )
    flops_giga = flops_estimate(
        config.model, config.train.steps, config.train.batch_size
    )
    reports = []
    for i in range(config.repetitions):
        seed = config.train.seed + i
        dataset = make_dataset(
            replace(config.dataset, seed=config.dataset.seed + i)
        )
        model, history = _train_one(config.model, dataset, config.train, seed)
        report = evaluate(
            model, dataset, Rng(seed + EVAL_SEED_OFFSET),
            flops_giga=flops_giga,
        )
        seed_dir = out_dir / f"seed_{i:03d}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        _write_text(seed_dir / "report.json", report.to_json() + "\n")
        history_to_csv(history, seed_dir / "history.csv")
        save_checkpoint(checkpoint_from_model(model), seed_dir / "checkpoint.bin")
        reports.append(report)
    flat = [_flatten_report(r) for r in reports]
    _write_text(out_dir / "summary.csv", _summary_csv(flat))
    return reports


def _cell_spec(base: ModelSpec, variant: str, e: int, k: int, m: int):
    """Resolve one sweep cell to (model spec, protocol, ensemble size)."""
    if variant == "deep_ensemble":
        spec = replace(base, variant="vmoe", e=e, k=k, m=1)
        return spec, "deep_ensemble", m
    if variant == "mc_dropout":
        spec = replace(base, variant="vit", m=1)
        return spec, "mc_dropout", m
    if variant not in VARIANTS:
        raise ConfigError(
            f"unknown sweep variant {variant!r}; allowed "
            f"{sorted(VARIANTS + SWEEP_PROTOCOLS)}"
        )
    return replace(base, variant=variant, e=e, k=k, m=m), "single", m


def _cell_flops(spec: ModelSpec, protocol: str, m: int,
                tcfg: TrainConfig) -> float:
    if protocol == "deep_ensemble":
        return deep_ensemble_flops(spec, m, tcfg.steps, tcfg.batch_size)
    # mc_dropout trains one dense model; the M draws only cost at eval
    return flops_estimate(spec, tcfg.steps, tcfg.batch_size)


def _run_cell(config: ExperimentConfig, spec: ModelSpec, protocol: str,
              m: int) -> list:
    """All repetitions of one sweep cell; returns flattened reports."""
    flops_giga = _cell_flops(spec, protocol, m, config.train)
    flat = []
    for i in range(config.repetitions):
        seed = config.train.seed + i
        dataset = make_dataset(
            replace(config.dataset, seed=config.dataset.seed + i)
        )
        eval_rng = Rng(seed + EVAL_SEED_OFFSET)
        if protocol == "deep_ensemble":
            models = [
                _train_one(spec, dataset, config.train,
                           seed + MEMBER_SEED_STRIDE * j)[0]
                for j in range(m)
            ]
            report = evaluate(None, dataset, eval_rng, models=models,
                              flops_giga=flops_giga)
        elif protocol == "mc_dropout":
            model, _ = _train_one(spec, dataset, config.train, seed)
            report = evaluate(model, dataset, eval_rng, mc_samples=m,
                              flops_giga=flops_giga)
        else:
            model, _ = _train_one(spec, dataset, config.train, seed)
            report = evaluate(model, dataset, eval_rng,
                              flops_giga=flops_giga)
        flat.append(_flatten_report(report))
    return flat


SWEEP_METRICS = ("nll", "error_pct", "ece", "kl_diversity")


def run_sweep(config: ExperimentConfig, out_dir: Path) -> Path:
    grid = config.grid
    variants = grid.get("variant", [config.model.variant])
    es = grid.get("e", [config.model.e])
    ks = grid.get("k", [config.model.k])
    ms = grid.get("m", [config.model.m])

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(
        out_dir / "config.json",
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
    )
    header = ["variant", "e", "k", "m"]
    for name in SWEEP_METRICS:
        header += [f"{name}_mean", f"{name}_stderr"]
    header.append("train_gflops")
    lines = [",".join(header)]
    for variant, e, k, m in itertools.product(variants, es, ks, ms):
        spec, protocol, m_eff = _cell_spec(config.model, variant, e, k, m)
        flat = _run_cell(config, spec, protocol, m_eff)
        row = [variant, str(e), str(k), str(m)]
        for name in SWEEP_METRICS:
            values = [fr.get(name) for fr in flat]
            if any(v is None for v in values):
                row += ["", ""]
            else:
                mean, stderr = _mean_stderr(values)
                row += [_fmt_cell(mean), _fmt_cell(stderr)]
        row.append(_fmt_cell(flat[0]["flops_train_giga"]))
        lines.append(",".join(row))
    path = out_dir / "sweep.csv"
    _write_text(path, "\n".join(lines) + "\n")
    return path


def _read_csv_rows(path) -> list:
    import csv

    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise ConfigError(f"{path}: empty CSV, header row required")
            rows = list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return rows


def _require_columns(rows: list, path, columns) -> None:
    for col in columns:
        for i, row in enumerate(rows):
            value = (row.get(col) or "").strip()
            if not value:
                raise ConfigError(
                    f"{path}: row {i + 1} missing value for column {col!r}"
                )


def _float_cell(row, col, path) -> float:
    try:
        return float(row[col])
    except (KeyError, TypeError, ValueError):
        raise ConfigError(
            f"{path}: column {col!r} must be numeric, got {row.get(col)!r}"
        ) from None


def _scatter_svg(series_points: dict, frontier=None, y_label="NLL") -> str:
    from .svg import ScatterPlot, Series

    plot = ScatterPlot(x_label="training GFLOPs", y_label=y_label)
    for name in sorted(series_points):
        xs, ys, labels = series_points[name]
        plot.add(Series(name=name, xs=xs, ys=ys, labels=labels,
                        connect=len(xs) > 1))
    if frontier:
        plot.frontier = list(frontier)
    return plot.render()


def analyze_normalized_improvement(rows, out_dir: Path, variant: str,
                                   reference: str) -> None:
    table = improvement_table(rows, variant, reference=reference)
    lines = ["family,raw_improvement_pct,normalized_improvement_pct"]
    for family, raw, norm in table:
        lines.append(f"{family},{_fmt_cell(raw)},{_fmt_cell(norm)}")
    _write_text(out_dir / "improvement.csv", "\n".join(lines) + "\n")

    series = {}
    for row in rows:
        name = row["variant"]
        xs, ys, labels = series.setdefault(name, ([], [], []))
        xs.append(float(row["gflops"]))
        ys.append(float(row["nll"]))
        labels.append(row["family"])
    _write_text(out_dir / "improvement.svg", _scatter_svg(series))


def analyze_pareto(rows, path, out_dir: Path) -> None:
    _require_columns(rows, path, ("label", "metric", "gflops"))
    points = [
        CostPoint(row["label"], _float_cell(row, "metric", path),
                  _float_cell(row, "gflops", path))
        for row in rows
    ]
    frontier = pareto_frontier(points)
    lines = ["label,metric,gflops"]
    for p in frontier:
        lines.append(f"{p.label},{_fmt_cell(p.metric)},{_fmt_cell(p.giga_flops)}")
    _write_text(out_dir / "frontier.csv", "\n".join(lines) + "\n")

    series = {"points": ([p.giga_flops for p in points],
                         [p.metric for p in points],
                         [p.label for p in points])}
    front_xy = [(p.giga_flops, p.metric) for p in frontier]
    _write_text(out_dir / "pareto.svg",
                _scatter_svg(series, frontier=front_xy, y_label="metric"))


def analyze_gain_map(rows, path, out_dir: Path, baseline) -> None:
    _require_columns(rows, path, ("k", "m", "metric", "gflops"))
    points = {}
    for row in rows:
        key = (int(_float_cell(row, "k", path)),
               int(_float_cell(row, "m", path)))
        label = (row.get("label") or "").strip() or f"K={key[0]},M={key[1]}"
        points[key] = CostPoint(label, _float_cell(row, "metric", path),
                                _float_cell(row, "gflops", path))
    gains = normalized_gain(points, baseline=baseline)
    lines = ["k,m,log_gain_per_cost"]
    for (k, m) in sorted(gains):
        g = gains[(k, m)]
        if g is None:
            cell = ""
        elif g == float("-inf"):
            cell = "-inf"
        else:
            cell = _fmt_cell(g)
        lines.append(f"{k},{m},{cell}")
    _write_text(out_dir / "gain_map.csv", "\n".join(lines) + "\n")

    series = {"grid": ([p.giga_flops for p in points.values()],
                       [p.metric for p in points.values()],
                       [p.label for p in points.values()])}
    _write_text(out_dir / "gain_map.svg",
                _scatter_svg(series, y_label="metric"))


def _cmd_run(args) -> int:
    config = load_config(args.config)
    out_dir = Path(args.output_dir or config.output_dir)
    run_experiment(config, out_dir)
    print(f"wrote {config.repetitions} seed reports to {out_dir}")
    return 0


def _cmd_sweep(args) -> int:
    config = load_config(args.config)
    if not config.grid:
        raise ConfigError("sweep config needs a non-empty 'grid' object")
    out_dir = Path(args.output_dir or config.output_dir)
    path = run_sweep(config, out_dir)
    print(f"wrote {path}")
    return 0


def _cmd_analyze(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.mode == "normalized_improvement":
        if args.input:
            rows = _read_csv_rows(args.input)
            _require_columns(rows, args.input,
                             ("family", "variant", "nll", "gflops"))
        else:
            rows = load_reference_points()
        analyze_normalized_improvement(rows, out_dir, args.variant,
                                       args.reference)
    elif args.mode == "pareto":
        if not args.input:
            raise ConfigError("analyze --mode pareto requires --input")
        rows = _read_csv_rows(args.input)
        analyze_pareto(rows, args.input, out_dir)
    else:  # gain_map
        if not args.input:
            raise ConfigError("analyze --mode gain_map requires --input")
        rows = _read_csv_rows(args.input)
        try:
            parts = [int(x) for x in args.baseline.split(",")]
            if len(parts) != 2:
                raise ValueError
        except ValueError:
            raise ConfigError(
                f"--baseline must be 'k,m', got {args.baseline!r}"
            ) from None
        analyze_gain_map(rows, args.input, out_dir, tuple(parts))
    print(f"wrote analysis to {out_dir}")
    return 0


def _spec_from_flags(args) -> ModelSpec:
    overrides = {}
    for name in ("variant", "e", "k", "m", "last_n", "classes"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    return preset(args.preset, **overrides)


def _cmd_flops(args) -> int:
    spec = _spec_from_flags(args)
    tiling = "naive" if args.naive else "deferred"
    report = flops_forward(spec, tiling=tiling)
    deferred = flops_forward(spec, tiling="deferred")
    naive = flops_forward(spec, tiling="naive")
    train_g = flops_estimate(spec, args.steps, args.batch_size)
    lines = [
        f"preset={args.preset} variant={spec.variant} e={spec.e} "
        f"k={spec.k} m={spec.m}",
        f"tiling={tiling}",
        f"forward_mflops={report.forward_per_example / 1e6:.6g}",
    ]
    for part in sorted(report.parts):
        lines.append(f"forward_mflops.{part}={report.parts[part] / 1e6:.6g}")
    lines += [
        f"forward_mflops_deferred={deferred.forward_per_example / 1e6:.6g}",
        f"forward_mflops_naive={naive.forward_per_example / 1e6:.6g}",
        f"tiling_saving_pct={100.0 * tiling_saving(spec):.4f}",
        f"train_gflops={train_g:.10g}",
    ]
    if args.ensemble > 1:
        de = deep_ensemble_flops(spec, args.ensemble, args.steps,
                                 args.batch_size)
        lines += [
            f"deep_ensemble_m={args.ensemble}",
            f"deep_ensemble_train_gflops={de:.10g}",
            f"deep_ensemble_ratio={de / train_g:.3f}",
        ]
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Sparse mixture-of-experts ensembling experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train and evaluate one configuration")
    p_run.add_argument("--config", required=True, help="experiment JSON")
    p_run.add_argument("--output-dir", default=None,
                       help="override config output_dir")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a variant/E/K/M grid")
    p_sweep.add_argument("--config", required=True, help="experiment JSON "
                         "with a 'grid' object")
    p_sweep.add_argument("--output-dir", default=None)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_an = sub.add_parser("analyze", help="tables and SVG plots from CSVs")
    p_an.add_argument("--mode", required=True,
                      choices=("gain_map", "normalized_improvement", "pareto"))
    p_an.add_argument("--input", default=None,
                      help="input CSV (normalized_improvement defaults to "
                      "the packaged reference points)")
    p_an.add_argument("--out", required=True, help="output directory")
    p_an.add_argument("--variant", default="pbe",
                      help="variant column to compare against vit")
    p_an.add_argument("--reference", default="H/14",
                      help="family whose improvement anchors normalization")
    p_an.add_argument("--baseline", default="1,1",
                      help="gain_map baseline cell as 'k,m'")
    p_an.set_defaults(func=_cmd_analyze)

    p_fl = sub.add_parser("flops", help="analytic cost report")
    p_fl.add_argument("--preset", required=True, choices=PRESET_NAMES)
    p_fl.add_argument("--variant", default=None,
                      choices=VARIANTS)
    p_fl.add_argument("--e", type=int, default=None)
    p_fl.add_argument("--k", type=int, default=None)
    p_fl.add_argument("--m", type=int, default=None)
    p_fl.add_argument("--last-n", type=int, default=None, dest="last_n")
    p_fl.add_argument("--classes", type=int, default=None)
    p_fl.add_argument("--steps", type=int, default=1,
                      help="training steps for the train-cost line")
    p_fl.add_argument("--batch-size", type=int, default=1)
    p_fl.add_argument("--ensemble", type=int, default=2,
                      help="deep-ensemble size for the ratio lines")
    tile = p_fl.add_mutually_exclusive_group()
    tile.add_argument("--deferred", action="store_true", default=True,
                      help="price tiling at the first routed block (default)")
    tile.add_argument("--naive", action="store_true", default=False,
                      help="price input-level tiling instead")
    p_fl.set_defaults(func=_cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, EvaluationError) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
