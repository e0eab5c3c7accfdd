"""Command line entry point: ``deepmmsa {synth,train,eval,baseline,ablate}``.

Results go to stdout as JSON (or CSV with ``--format csv``); logs go to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import tomli

from .baselines import CoxFitError, cox_fit, cox_risk_scores, kaplan_meier, nelson_aalen
from .data import CohortError, SynthSpec, generate_synthetic_cohort, load_cohort, split_folds
from .metrics import UndefinedMetricError, c_index, mae_uncensored
from .model import ModelConfig, load_model
from .preprocess import impute_mean, minmax_scale, one_hot, prepare_volume
from .train import (ABLATION_COLUMNS, AblationAxes, TrainConfig, encoder_from_meta, predict, run_ablation,
                    run_cv, Split, DESK_BASE_CHANNELS, DESK_VOLUME_SHAPE)

log = logging.getLogger("deepmmsa")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- configuration


@dataclass
class CliConfig:
    manifest: Optional[str] = None
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationAxes = field(default_factory=AblationAxes)
    fold: Optional[int] = None


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "ablation": AblationAxes}
_PATH_KEYS = {"manifest", "out_dir"}


def _coerce(cls, key: str, value):
    names = {f.name for f in fields(cls)}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} in [{_section_name(cls)}]")
    if isinstance(value, list):
        value = tuple(value)
    return value


def _section_name(cls) -> str:
    return next(k for k, v in _SECTIONS.items() if v is cls)


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def build_config(doc: dict, overrides: list[str] = (), desk_scale: bool = False,
                 seed: Optional[int] = None, base_dir: Optional[Path] = None) -> CliConfig:
    """Merge a parsed TOML document with ``section.key=value`` overrides (overrides win)."""
    doc = {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) == 1:
            doc.setdefault("paths", {})[parts[0]] = _parse_value(value)
        elif len(parts) == 2:
            doc.setdefault(parts[0], {})[parts[1]] = _parse_value(value)
        else:
            raise ConfigError(f"override key {key!r} has too many parts")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"paths"})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} at top level (expected [paths], [model], [train], [ablation])")

    cfg = CliConfig()
    paths = doc.get("paths", {})
    for key, value in paths.items():
        if key not in _PATH_KEYS:
            raise ConfigError(f"unknown key {key!r} in [paths]")
        if base_dir is not None and not Path(value).is_absolute():
            value = str(base_dir / value)
        setattr(cfg, key, value)

    train_doc = dict(doc.get("train", {}))
    train_base = TrainConfig.desk() if desk_scale else TrainConfig()
    model_base = ModelConfig(base_channels=DESK_BASE_CHANNELS) if desk_scale else ModelConfig()
    try:
        cfg.model = replace(model_base, **{k: _coerce(ModelConfig, k, v) for k, v in doc.get("model", {}).items()})
        cfg.train = replace(train_base, **{k: _coerce(TrainConfig, k, v) for k, v in train_doc.items()})
        cfg.ablation = replace(AblationAxes(), **{k: _coerce(AblationAxes, k, v)
                                                  for k, v in doc.get("ablation", {}).items()})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if seed is not None:
        cfg.train = replace(cfg.train, seed=seed)
    return cfg


def load_config(path: Optional[str], args) -> CliConfig:
    doc, base_dir = {}, None
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = tomli.loads(p.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        base_dir = p.parent
    cfg = build_config(doc, args.set or [], args.desk_scale, args.seed, base_dir)
    if getattr(args, "manifest", None):
        cfg.manifest = args.manifest
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    return cfg


def _require_manifest(path: Optional[str]) -> Path:
    if not path:
        raise ConfigError("no manifest given (set paths.manifest or pass --manifest)")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"manifest not found: {p}")
    return p


# ---------------------------------------------------------------- output


def emit(result, fmt: str, rows: Optional[list[dict]] = None, columns=None) -> None:
    """Write ``result`` as JSON, or ``rows`` as CSV, to stdout."""
    if fmt == "csv" and rows is not None:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(columns or rows[0].keys()), lineterminator="\n",
                                extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
        sys.stdout.write(buf.getvalue())
    else:
        sys.stdout.write(json.dumps(result, indent=2, default=_json_default) + "\n")
    sys.stdout.flush()


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigError(f"spec file not found: {spec_path}")
    text = spec_path.read_text()
    try:
        doc = json.loads(text) if spec_path.suffix == ".json" else tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"{spec_path}: {exc}") from None
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{spec_path}: {exc}") from None
    manifest = generate_synthetic_cohort(spec, args.out_dir)
    cohort = load_cohort(manifest)
    events = np.array([r.event for r in cohort])
    summary = {"manifest": str(manifest), "n": len(cohort), "censor_fraction": float(1 - events.mean())}
    log.info("wrote %d patients to %s", len(cohort), args.out_dir)
    emit(summary, args.format, [summary])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args)
    manifest = _require_manifest(cfg.manifest)
    cohort = load_cohort(manifest)
    folds = [args.fold] if args.fold is not None else None
    if folds and not 0 <= args.fold < cfg.train.k_folds:
        raise ConfigError(f"--fold must be in [0, {cfg.train.k_folds})")
    result = run_cv(cohort, cfg.model, cfg.train, folds=folds, jobs=args.jobs, out_dir=cfg.out_dir)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "cv_report.json").write_text(json.dumps(result, indent=2, default=_json_default))
    summary = {"folds": [f["fold"] for f in result["folds"]],
               "c_index": result["c_index"], "mae": result["mae"], "test_loss": result["test_loss"],
               "out_dir": cfg.out_dir}
    rows = [{"fold": f["fold"], "c_index": f["c_index"], "mae": f["mae"], "test_loss": f["test_loss"],
             "best_epoch": f["best_epoch"]} for f in result["folds"]]
    emit(summary, args.format, rows)
    return EXIT_OK


def _split_for(cohort, ids, meta) -> Split:
    encoder, label_stats = encoder_from_meta(meta)
    recs = cohort.subset(ids)
    shape = tuple(meta.get("volume_shape", DESK_VOLUME_SHAPE))
    vols = np.stack([prepare_volume(r.load_volume(), shape) for r in recs]).astype(np.float32)
    return Split(list(ids), vols, encoder.transform([r.clinical_raw for r in recs]),
                 np.asarray(minmax_scale([r.survival_time for r in recs], label_stats), dtype=np.float64).reshape(-1),
                 np.array([r.event for r in recs], dtype=np.int64))


def cmd_eval(args) -> int:
    manifest = _require_manifest(args.manifest)
    if not Path(args.checkpoint).with_suffix(".json").exists():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model, meta = load_model(args.checkpoint)
    cohort = load_cohort(manifest)
    ids = cohort.ids
    if args.subset == "test":
        if "plan" not in meta or "fold" not in meta:
            raise ConfigError("checkpoint has no fold plan; use --subset all")
        plan = split_folds(cohort.ids, meta["plan"]["k"], meta["plan"]["seed"])
        ids = plan.fold(meta["fold"])["test"]
    split = _split_for(cohort, ids, meta)
    pred = predict(model, split)
    result = {"c_index": c_index(pred, split.labels, split.events),
              "mae": mae_uncensored(pred, split.labels, split.events), "n": len(split)}
    emit(result, args.format, [result], ("c_index", "mae", "n"))
    return EXIT_OK


def cox_design(cohort) -> tuple[np.ndarray, list[str]]:
    """Covariates for the Cox baseline: raw numeric fields (mean-imputed) and reference-coded categories.

    The first category of each field is the reference level and gets no column;
    the Cox fit standardizes columns itself, so numeric fields stay unscaled.
    """
    rows = [r.clinical_raw for r in cohort]
    columns, names = [], []
    for f in cohort.schema.fields:
        values = [row.get(f.name) for row in rows]
        if f.kind == "numeric":
            columns.append(np.array(impute_mean(values, values)))
            names.append(f.name)
        else:
            encoded = np.stack([one_hot(v, f.vocabulary, f.name) for v in values])
            for j, level in enumerate(f.vocabulary[1:], start=1):
                columns.append(encoded[:, j])
                names.append(f"{f.name}={level}")
    return np.column_stack(columns), names


def cmd_baseline(args) -> int:
    manifest = _require_manifest(args.manifest)
    cohort = load_cohort(manifest)
    if len(cohort) == 0:
        raise ConfigError(f"{manifest}: cohort is empty")
    times = np.array([r.survival_time for r in cohort])
    events = np.array([r.event for r in cohort])
    if args.method in ("km", "na"):
        fn = kaplan_meier(times, events) if args.method == "km" else nelson_aalen(times, events)
        column = "survival" if args.method == "km" else "cumulative_hazard"
        rows = [{"time": t, column: v} for t, v in fn.to_rows()]
        if args.format == "json":
            emit({"method": args.method, "initial_value": fn.initial_value, "steps": rows}, "json")
        else:
            emit(None, "csv", rows, ("time", column)) if rows else sys.stdout.write(f"time,{column}\n")
        return EXIT_OK
    x, names = cox_design(cohort)
    model = cox_fit(x, times, events)
    scores = cox_risk_scores(model, x)
    try:
        ci = c_index(scores, times, events)
    except UndefinedMetricError:
        ci = None
    coef_rows = [{"covariate": n, "coefficient": float(b)} for n, b in zip(names, model.coefficients)]
    result = {"method": "cox", "c_index": ci, "n_iterations": model.n_iterations,
              "log_partial_likelihood": model.final_log_partial_likelihood, "coefficients": coef_rows}
    emit(result, args.format, coef_rows + [{"covariate": "c_index", "coefficient": ci}],
         ("covariate", "coefficient"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args)
    manifest = _require_manifest(cfg.manifest)
    cohort = load_cohort(manifest)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "ablation.json"
    completed = {}
    if results_path.exists():
        completed = {row["key"]: row for row in json.loads(results_path.read_text())["rows"]}
        log.info("resuming: %d completed cells", len(completed))
    rows_so_far = dict(completed)

    def save(row):
        rows_so_far[row["key"]] = row
        results_path.write_text(json.dumps({"columns": list(ABLATION_COLUMNS),
                                            "rows": list(rows_so_far.values())}, indent=2))

    rows = run_ablation(cohort, cfg.ablation, cfg.train, cfg.model, completed, on_row=save, jobs=args.jobs)
    results_path.write_text(json.dumps({"columns": list(ABLATION_COLUMNS), "rows": rows}, indent=2))
    for table in ("structures", "ratio"):
        with open(out / f"{table}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(ABLATION_COLUMNS), lineterminator="\n")
            writer.writeheader()
            writer.writerows(r for r in rows if r["table"] == table)
    emit({"rows": rows}, args.format, rows, ABLATION_COLUMNS)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; suppressed defaults keep values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="TOML configuration file")
    common.add_argument("--seed", type=int, default=d(None), help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=d(1), help="parallel fold processes")
    common.add_argument("--format", choices=("json", "csv"), default=d("json"), help="stdout format")
    common.add_argument("--desk-scale", action="store_true", default=d(False),
                        help="use the shrunken desk-scale defaults")
    common.add_argument("--set", action="append", default=d(None), metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False), help="log progress to stderr")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="deepmmsa", description=__doc__.splitlines()[0],
                                     parents=[_common_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    p.add_argument("spec", help="synthetic cohort spec (TOML or JSON)")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="cross-validated training")
    p.add_argument("--fold", type=int, help="train only this fold")
    p.add_argument("--manifest")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a cohort")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--subset", choices=("all", "test"), default="all")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", parents=[common], help="classical estimators")
    p.add_argument("manifest")
    p.add_argument("method", choices=("km", "na", "cox"))
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ablate", parents=[common], help="architecture sweeps")
    p.add_argument("--manifest")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"deepmmsa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CohortError, CoxFitError, UndefinedMetricError, ValueError, RuntimeError, OSError) as exc:
        print(f"deepmmsa: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
