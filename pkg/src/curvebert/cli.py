"""Command-line entry point for reproducible experiments.

Experiments are defined by an INI config file (sections: data, model,
pretrain, finetune, report, grid); flags only override (--seed, --out,
--force, --dry-run, --repeat, --jobs, --checkpoint). Every command prints
the fully resolved configuration before acting, and reports embed the same
snapshot, so any result is reproducible from its own header plus the
dataset file.

Commands: generate, pretrain, finetune, evaluate, gridsearch.
Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from configparser import ConfigParser
from pathlib import Path

import numpy as np

from . import data as data_mod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .encoder import count_parameters
from .input_layer import ModelConfig
from .trainer import (
    MetricsReport,
    TrainSpec,
    finetune,
    grid_search,
    pretrain,
    predict,
    repeat_runs,
    weighted_metrics,
)

logger = logging.getLogger(__name__)

OUT_ROOT_ENV = "CURVEBERT_OUT_ROOT"


class ConfigFileError(ValueError):
    """Run config file is malformed: unknown keys, bad values, missing data."""


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigFileError(f"expected a boolean, got '{raw}'")


def _parse_int_list(raw: str) -> list[int]:
    return [int(part.strip()) for part in raw.split(",") if part.strip()]


def _parse_count_map(raw: str) -> dict[int, int]:
    counts = {}
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        label, _, count = part.partition(":")
        counts[int(label)] = int(count)
    return counts


def _optional_int(raw: str):
    return None if raw.strip() == "" else int(raw)


# section -> key -> (parser, default); defaults follow the reference setup
_SCHEMA = {
    "data": {
        "dataset": (str, ""),
        "test_rate": (float, 0.2),
        "seed": (int, 0),
        "train_counts": (_parse_count_map, {}),  # optional per-class subsampling of the train split
    },
    "model": {
        "L": (int, 8),
        "A": (int, 8),
        "H": (int, 256),
        "token_size": (int, 100),
        "curve_length": (int, 1000),
        "num_classes": (int, 12),
        "ffn_inner": (_optional_int, None),
        "max_seq_length": (_optional_int, None),
        "task_variant": (str, "NCP-OMCM"),
        "dropout": (float, 0.1),
        "pe_base": (float, 1000.0),
        "pe_literal_pairing": (_parse_bool, False),
    },
    "pretrain": {
        "batch_size": (int, 64),
        "max_epoch": (int, 2000),
        "patience": (int, 20),
        "seed": (int, 0),
        "lr": (float, 0.001),
        "weight_decay": (float, 0.01),
    },
    "finetune": {
        "batch_size": (int, 128),
        "max_epoch": (int, 2000),
        "patience": (int, 20),
        "seed": (int, 0),
        "lr": (float, 0.001),
        "weight_decay": (float, 0.01),
        "mode": (str, "all_tokens"),
    },
    "report": {
        "out_dir": (str, ""),
    },
    "grid": {
        "L": (_parse_int_list, [4, 8, 12]),
        "A": (_parse_int_list, [4, 8, 16]),
        "H": (_parse_int_list, [256, 768, 1024]),
        "token_size": (_parse_int_list, [50, 100, 200]),
        "pretrain": (_parse_bool, False),
        "max_epoch": (int, 30),
        "patience": (int, 10),
    },
}


def load_run_config(path: str | Path | None) -> dict:
    """Resolve a run config file against the schema; unknown keys are errors."""
    parser = ConfigParser()
    parser.optionxform = str  # keep key case: L, A, H are distinct config fields
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigFileError(f"config file not found: {path}")
        parser.read(path)
    resolved: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigFileError(f"unknown config section [{section}] (known: {sorted(_SCHEMA)})")
        unknown = set(parser[section]) - set(_SCHEMA[section])
        if unknown:
            raise ConfigFileError(f"unknown keys in [{section}]: {sorted(unknown)}")
    for section, keys in _SCHEMA.items():
        resolved[section] = {}
        for key, (parse, default) in keys.items():
            if parser.has_option(section, key):
                try:
                    resolved[section][key] = parse(parser.get(section, key))
                except ConfigFileError:
                    raise
                except ValueError as exc:
                    raise ConfigFileError(f"[{section}] {key}: {exc}") from exc
            else:
                resolved[section][key] = default
    return resolved


def _model_config(resolved: dict) -> ModelConfig:
    return ModelConfig(**resolved["model"])


def _train_spec(resolved: dict, phase: str, seed_override: int | None) -> TrainSpec:
    section = dict(resolved[phase])
    mode = section.pop("mode", "all_tokens")
    if seed_override is not None:
        section["seed"] = seed_override
    return TrainSpec(phase=phase, finetune_mode=mode, **section)


def _print_resolved(resolved: dict) -> None:
    print("resolved configuration:")
    for section, keys in resolved.items():
        print(f"  [{section}]")
        for key, value in keys.items():
            print(f"  {key} = {value}")


def _out_dir(resolved: dict, override: str | None) -> Path:
    if override:
        return Path(override)
    configured = resolved["report"]["out_dir"]
    if configured:
        return Path(configured)
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _prepare_out_dir(out: Path, filenames: list[str], force: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if force:
        return
    existing = [name for name in filenames if (out / name).exists()]
    if existing:
        raise ConfigFileError(
            f"refusing to overwrite {existing} in {out}; pass --force to allow"
        )


def _load_split(resolved: dict):
    dataset = resolved["data"]["dataset"]
    if not dataset:
        raise ConfigFileError("[data] dataset is required for this command")
    curves = data_mod.load_dataset_csv(dataset)
    split = data_mod.split_dataset(curves, resolved["data"]["test_rate"], resolved["data"]["seed"])
    counts = resolved["data"]["train_counts"]
    if counts:
        split.train = data_mod.make_imbalanced(split.train, counts, resolved["data"]["seed"])
        print(f"train split subsampled to {len(split.train)} curves per [data] train_counts")
    return split


def _write_history_csv(history: list[dict], path: Path, columns: list[str]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in columns})


def _write_report(
    out: Path,
    reports: list[MetricsReport],
    resolved: dict,
    summary_stats: dict | None = None,
) -> None:
    config_json = json.dumps(resolved, sort_keys=True, default=str)
    with (out / "report.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run_seed", "precision", "recall", "weighted_f1", "config_json"])
        for r in reports:
            writer.writerow([r.run_seed, repr(r.precision), repr(r.recall), repr(r.weighted_f1), config_json])
    with (out / "confusion.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in reports[-1].confusion_matrix:
            writer.writerow([int(v) for v in row])
    lines = ["curve classification report", "===========================", ""]
    for r in reports:
        lines.append(
            f"seed {r.run_seed}: precision {r.precision:.4f}  recall {r.recall:.4f}  weighted-F1 {r.weighted_f1:.4f}"
        )
    if summary_stats is not None:
        lines.append("")
        lines.append(f"aggregate over {summary_stats['n']} runs (mean±variance, percent):")
        for metric, stats in summary_stats["metrics"].items():
            mean_pct = stats["mean"] * 100.0
            var_pct = np.var(np.array(stats["values"]) * 100.0)  # variance of the percent values
            lines.append(f"  {metric}: {mean_pct:.2f}±{var_pct:.2f}")
    lines.append("")
    lines.append("resolved configuration snapshot:")
    lines.append(config_json)
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- commands -----------------------------------------------------------------------


def cmd_generate(args) -> int:
    print(
        "resolved configuration:\n"
        f"  spec = {args.spec or '<built-in default recipe>'}\n"
        f"  classes = {args.classes}\n  per_class = {args.per_class}\n"
        f"  length = {args.length}\n  seed = {args.seed}"
    )
    if args.spec:
        specs = data_mod.load_class_specs(args.spec)
    else:
        specs = data_mod.default_class_specs(num_classes=args.classes, curve_length=args.length)
    curves = data_mod.generate_synthetic(specs, args.per_class, args.length, args.seed)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigFileError(f"refusing to overwrite {out}; pass --force to allow")
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_dataset_csv(curves, out)
    per_class: dict[int, int] = {}
    for c in curves:
        per_class[c.label] = per_class.get(c.label, 0) + 1
    print(f"wrote {len(curves)} curves of length {args.length} to {out}")
    for label in sorted(per_class):
        print(f"  class {label}: {per_class[label]}")
    return 0


def cmd_pretrain(args) -> int:
    resolved = load_run_config(args.config)
    if args.seed is not None:
        resolved["pretrain"]["seed"] = args.seed
    _print_resolved(resolved)
    config = _model_config(resolved)
    n_params = count_parameters(config, phase="pretrain")
    print(f"trainable parameters (pre-training): {n_params} ({n_params / 1e6:.2f}M)")
    if args.dry_run:
        print("dry run: configuration valid, no training performed")
        return 0
    out = _out_dir(resolved, args.out)
    _prepare_out_dir(out, ["pretrain.ckpt", "pretrain_losses.csv"], args.force)
    split = _load_split(resolved)
    spec = _train_spec(resolved, "pretrain", args.seed)
    ckpt = pretrain(split.train, split.valid, config, spec)
    save_checkpoint(ckpt, out / "pretrain.ckpt")
    _write_history_csv(
        ckpt.history, out / "pretrain_losses.csv", ["epoch", "mcm", "ncp", "total", "validation"]
    )
    print(f"best validation loss {ckpt.best_score:.6f} at epoch {ckpt.epoch}")
    print(f"wrote {out / 'pretrain.ckpt'} and {out / 'pretrain_losses.csv'}")
    return 0


def _run_finetune_once(split, config, resolved, seed, checkpoint_path):
    base = load_checkpoint(checkpoint_path) if checkpoint_path else None
    spec = _train_spec(resolved, "finetune", seed)
    return finetune(base, split, config, spec)


def cmd_finetune(args) -> int:
    resolved = load_run_config(args.config)
    if args.seed is not None:
        resolved["finetune"]["seed"] = args.seed
    _print_resolved(resolved)
    config = _model_config(resolved)
    out = _out_dir(resolved, args.out)
    _prepare_out_dir(
        out, ["finetune.ckpt", "finetune_history.csv", "report.csv", "confusion.csv", "summary.txt"], args.force
    )
    split = _load_split(resolved)
    base_seed = resolved["finetune"]["seed"]
    if args.repeat and args.repeat > 1:
        reports: list[MetricsReport] = []
        last_ckpt: Checkpoint | None = None

        def run(seed: int) -> MetricsReport:
            nonlocal last_ckpt
            ckpt, report = _run_finetune_once(split, config, resolved, seed, args.checkpoint)
            last_ckpt = ckpt
            reports.append(report)
            return report

        summary = repeat_runs(run, n=args.repeat, base_seed=base_seed)
        ckpt = last_ckpt
        _write_report(out, reports, resolved, summary_stats=summary)
        f1 = summary["metrics"]["weighted_f1"]
        print(
            f"weighted-F1 over {args.repeat} runs: "
            f"{f1['mean'] * 100:.2f}±{np.var(np.array(f1['values']) * 100):.2f} (percent, mean±variance)"
        )
    else:
        ckpt, report = _run_finetune_once(split, config, resolved, base_seed, args.checkpoint)
        _write_report(out, [report], resolved)
        print(
            f"test metrics: precision {report.precision:.4f}  recall {report.recall:.4f}  "
            f"weighted-F1 {report.weighted_f1:.4f}"
        )
    save_checkpoint(ckpt, out / "finetune.ckpt")
    _write_history_csv(ckpt.history, out / "finetune_history.csv", ["epoch", "train_loss", "validation"])
    print(f"wrote report files to {out}")
    return 0


def cmd_evaluate(args) -> int:
    resolved = load_run_config(args.config)
    _print_resolved(resolved)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.phase != "finetune":
        raise ConfigFileError(f"evaluate needs a fine-tuned checkpoint, got phase '{ckpt.phase}'")
    out = _out_dir(resolved, args.out)
    _prepare_out_dir(out, ["report.csv", "confusion.csv", "summary.txt"], args.force)
    split = _load_split(resolved)
    preds = predict(ckpt.params, ckpt.config, split.test, mode=ckpt.finetune_mode)
    labels = np.array([c.label for c in split.test], dtype=np.int64)
    report = weighted_metrics(
        preds, labels, ckpt.config.num_classes, run_seed=resolved["data"]["seed"],
        config_snapshot=ckpt.config.to_dict(),
    )
    _write_report(out, [report], resolved)
    print(
        f"test metrics: precision {report.precision:.4f}  recall {report.recall:.4f}  "
        f"weighted-F1 {report.weighted_f1:.4f}"
    )
    return 0


def _write_best_config(path: Path, resolved: dict, overrides: dict) -> None:
    parser = ConfigParser()
    parser.optionxform = str
    for section in ("data", "model", "pretrain", "finetune", "report"):
        parser.add_section(section)
        for key, value in resolved[section].items():
            if section == "model" and key in overrides:
                value = overrides[key]
            if isinstance(value, dict):
                value = ",".join(f"{k}:{v}" for k, v in value.items())
            parser[section][key] = "" if value is None else str(value)
    # grid-tuned models re-derive dependent sizes from the chosen H
    parser["model"]["ffn_inner"] = ""
    parser["model"]["max_seq_length"] = ""
    with path.open("w", encoding="utf-8") as fh:
        parser.write(fh)


def cmd_gridsearch(args) -> int:
    resolved = load_run_config(args.config)
    _print_resolved(resolved)
    grid_section = resolved["grid"]
    grids = {name: grid_section[name] for name in ("L", "A", "H", "token_size")}
    out = _out_dir(resolved, args.out)
    _prepare_out_dir(out, ["gridsearch.csv", "best_config.ini"], args.force)
    split = _load_split(resolved)
    base_config = _model_config(resolved)
    finetune_section = dict(resolved["finetune"])
    finetune_section["max_epoch"] = grid_section["max_epoch"]
    finetune_section["patience"] = grid_section["patience"]
    mode = finetune_section.pop("mode")
    finetune_spec = TrainSpec(phase="finetune", finetune_mode=mode, **finetune_section)
    pretrain_spec = None
    if grid_section["pretrain"]:
        pretrain_section = dict(resolved["pretrain"])
        pretrain_section["max_epoch"] = grid_section["max_epoch"]
        pretrain_section["patience"] = grid_section["patience"]
        pretrain_spec = TrainSpec(phase="pretrain", **pretrain_section)
    rows = grid_search(split, grids, base_config, finetune_spec, pretrain_spec, jobs=args.jobs)
    columns = ["rank", "L", "A", "H", "token_size", "validation_weighted_f1", "combo_index"]
    with (out / "gridsearch.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, base_config.to_dict().get(k, "")) for k in columns})
    best = rows[0]
    overrides = {k: best[k] for k in ("L", "A", "H", "token_size") if k in best}
    _write_best_config(out / "best_config.ini", resolved, overrides)
    print(f"{len(rows)} combinations evaluated; best: {overrides} "
          f"(validation weighted-F1 {best['validation_weighted_f1']:.4f})")
    print(f"wrote {out / 'gridsearch.csv'} and {out / 'best_config.ini'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="curvebert",
        description="Block-tokenized transformer for spectral curve classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic labeled dataset CSV")
    gen.add_argument("--spec", help="class spec INI file (default: built-in 12-class recipe)")
    gen.add_argument("--out", required=True, help="output CSV path")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--classes", type=int, default=12, help="class count for the built-in recipe")
    gen.add_argument("--per-class", type=int, default=100, dest="per_class")
    gen.add_argument("--length", type=int, default=1000, help="curve length in samples")
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_generate)

    pre = sub.add_parser("pretrain", help="masked-curve pre-training")
    pre.add_argument("--config", required=True)
    pre.add_argument("--seed", type=int, default=None, help="override [pretrain] seed")
    pre.add_argument("--out", default=None, help="override report.out_dir")
    pre.add_argument("--dry-run", action="store_true", help="validate config and print parameter count")
    pre.add_argument("--force", action="store_true")
    pre.set_defaults(func=cmd_pretrain)

    fin = sub.add_parser("finetune", help="supervised classification training")
    fin.add_argument("--config", required=True)
    fin.add_argument("--checkpoint", default=None, help="pre-trained checkpoint (omit for from-scratch)")
    fin.add_argument("--repeat", type=int, default=None, metavar="N", help="average over N seeded runs")
    fin.add_argument("--seed", type=int, default=None, help="override [finetune] seed")
    fin.add_argument("--out", default=None)
    fin.add_argument("--force", action="store_true")
    fin.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("evaluate", help="metrics for an existing fine-tuned checkpoint")
    ev.add_argument("--config", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", default=None)
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(func=cmd_evaluate)

    grid = sub.add_parser("gridsearch", help="rank hyperparameter combinations")
    grid.add_argument("--config", required=True)
    grid.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    grid.add_argument("--out", default=None)
    grid.add_argument("--force", action="store_true")
    grid.set_defaults(func=cmd_gridsearch)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigFileError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        logger.exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
