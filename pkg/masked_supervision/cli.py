"""``msl`` command line: dataset and mask generation, training, evaluation, ablations.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import load_checkpoint
from .config import DEFAULT_RUN_ROOT, RunConfig
from .data import LoadedDataset, generate_dataset, load_dataset
from .errors import ConfigError, MSLError
from .evaluation import (
    average_reports,
    compare,
    evaluate,
    evaluate_masked,
    read_predictions,
    score_dataset,
    topk_predictions,
    write_comparison,
    write_predictions,
)
from .loss import PRESETS, SENSITIVITY_GRID, LossWeights
from .masking import MaskSubsets, build_subsets, load_subsets, save_subsets
from .metrics import MetricsReport, ScoredPredictions, compute_report, write_per_class_csv
from .sources import DirectoryMaskSource
from .training import train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(MSLError):
    """Bad invocation: missing inputs, occupied output directory."""


# ==================== Shared helpers ====================

def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} already exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_dir(path: Optional[str], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{flag} {p} does not exist")
    return p


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_invocation(out: Path, command: str, inputs: Dict[str, Any]) -> None:
    _write_json(out / "invocation.json", {"command": command, "inputs": inputs})


def _load_split(dataset_dir: Path, split: str) -> LoadedDataset:
    manifest = dataset_dir / f"{split}.jsonl"
    if not manifest.is_file():
        raise UsageError(f"missing {split} manifest {manifest}")
    return load_dataset(manifest)


def _load_masks(masks_dir: Optional[str]) -> MaskSubsets:
    root = _require_dir(masks_dir, "--masks")
    return load_subsets(root)


def _print_report(label: str, report: MetricsReport) -> None:
    scalars = ", ".join(f"{k}={v:.4f}" for k, v in report.scalars().items())
    print(f"{label}: {scalars}")
    for name, sub in report.strata.items():
        print(f"  {name} ({sub.num_images} images): mAP={sub.mean_ap:.4f}")


# ==================== Subcommands ====================

def cmd_gen_dataset(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _prepare_out(Path(args.out or Path(DEFAULT_RUN_ROOT) / "dataset"), args.force)
    manifests = generate_dataset(cfg.dataset, out)
    cfg.write(out / "config.json")
    for split, manifest in manifests.items():
        strata = ", ".join(f"{k}={v}" for k, v in manifest.strata_counts().items())
        print(f"{split}: N={len(manifest)} K={manifest.num_classes} ({strata})")
    print(f"Dataset written to {out}")
    return EXIT_OK


def cmd_gen_masks(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _prepare_out(Path(args.out or Path(DEFAULT_RUN_ROOT) / "masks"), args.force)
    mc = cfg.masks
    source = None
    if mc.source_dir is not None:
        source = DirectoryMaskSource(mc.source_dir, mc.height, mc.width, invert=mc.invert)
    subsets = build_subsets(
        count=mc.count,
        params=mc.gen_params(),
        seed=mc.seed,
        height=mc.height,
        width=mc.width,
        source=source,
        budget_factor=mc.budget_factor,
        threshold=mc.threshold,
    )
    save_subsets(subsets, out, compression=mc.compression)
    cfg.write(out / "config.json")
    counts = subsets.counts()
    print(f"Masks written to {out}: high={counts['high']} low={counts['low']}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset_dir = _require_dir(args.dataset, "--dataset")
    train_data = _load_split(dataset_dir, "train")
    test_data = _load_split(dataset_dir, "test")
    subsets = _load_masks(args.masks) if cfg.train.uses_masked_branch and not args.vanilla else None
    out = _prepare_out(Path(args.out or Path(DEFAULT_RUN_ROOT) / f"train-seed{cfg.train.seed}"), args.force)
    cfg.write(out / "config.json")
    _write_invocation(out, "train", {"dataset": str(dataset_dir), "masks": args.masks, "vanilla": args.vanilla})
    arch = cfg.architecture(train_data.num_classes, tuple(train_data.images.shape[2:]))
    result = train(cfg.train, train_data, test_data, subsets, arch, out, vanilla=args.vanilla)
    if result.best_map is not None:
        print(f"Best test mAP {result.best_map:.4f} at epoch {result.best_epoch}")
    print(f"Run written to {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset_dir = _require_dir(args.dataset, "--dataset")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"--checkpoint {ckpt} does not exist")
    test_data = _load_split(dataset_dir, args.split)
    params = load_checkpoint(ckpt)
    out = _prepare_out(Path(args.out or Path(DEFAULT_RUN_ROOT) / f"eval-{ckpt.stem}"), args.force)
    cfg.write(out / "config.json")
    _write_invocation(out, "eval", {"dataset": str(dataset_dir), "checkpoint": str(ckpt), "split": args.split})

    report = evaluate(params, test_data, cfg.eval)
    (out / f"{ckpt.stem}_clean.json").write_text(report.to_json(), encoding="utf-8")
    write_per_class_csv(report, out / f"{ckpt.stem}_clean_per_class.csv", test_data.class_names)
    scores = score_dataset(params, test_data.images, cfg.eval.batch_size, cfg.eval.workers)
    write_predictions(ScoredPredictions(scores, test_data.labels, test_data.ids), out / "predictions.jsonl")
    _write_json(out / "topk.json", topk_predictions(scores, test_data.ids, test_data.class_names, k=3))
    _print_report(f"{ckpt.stem} clean", report)
    return EXIT_OK


def _parse_checkpoints(items: Sequence[str]) -> Dict[str, Path]:
    models: Dict[str, Path] = {}
    for item in items:
        name, sep, path = item.partition("=")
        p = Path(path if sep else name)
        label = name if sep else p.stem
        if not p.is_file():
            raise UsageError(f"checkpoint {p} does not exist")
        if label in models:
            raise UsageError(f"duplicate model name {label!r}; use name=path")
        models[label] = p
    return models


def cmd_robustness(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset_dir = _require_dir(args.dataset, "--dataset")
    models = _parse_checkpoints(args.checkpoint)
    modes = tuple(m for m in args.modes.split(",") if m)
    subsets = _load_masks(args.masks) if "masked" in modes else None
    test_data = _load_split(dataset_dir, "test")
    out = _prepare_out(Path(args.out or Path(DEFAULT_RUN_ROOT) / "robustness"), args.force)
    cfg.write(out / "config.json")
    _write_invocation(
        out, "robustness",
        {"dataset": str(dataset_dir), "masks": args.masks, "models": {k: str(v) for k, v in models.items()}},
    )
    report = compare(models, test_data, modes, subsets, cfg.eval)
    write_comparison(report, out)
    for m in report.models:
        if m.clean is not None:
            _print_report(f"{m.name} clean", m.clean)
        if m.masked is not None:
            _print_report(f"{m.name} masked ({report.subset})", m.masked)
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace, cfg: RunConfig) -> int:
    path = Path(args.predictions)
    if not path.is_file():
        raise UsageError(f"--predictions {path} does not exist")
    sp = read_predictions(path)
    report = compute_report(sp, args.threshold if args.threshold is not None else cfg.eval.threshold)
    out = _prepare_out(Path(args.out or Path(DEFAULT_RUN_ROOT) / f"metrics-{path.stem}"), args.force)
    cfg.write(out / "config.json")
    _write_invocation(out, "metrics", {"predictions": str(path)})
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    write_per_class_csv(report, out / "per_class.csv")
    _print_report(path.stem, report)
    return EXIT_OK


# ==================== Ablations ====================

ABLATION_COLUMNS = ("variant", "seed", "mode", "stratum", "metric", "value")


def ablation_variants(names: Sequence[str]) -> List[Tuple[str, Dict[str, Any]]]:
    """Expand variant names into TrainConfig overrides.

    Names: loss presets (vanilla, mabr, laco, msl), ``msl-low`` (low-mask
    training), ``msl-soft`` (masks not binarized), ``w:a1/a2/a3`` and
    ``sensitivity`` (the whole trade-off grid).
    """
    out: List[Tuple[str, Dict[str, Any]]] = []
    for name in names:
        if name == "sensitivity":
            out.extend(
                (f"w:{a1:g}/{a2:g}/{a3:g}", {"weights": LossWeights(a1, a2, a3), "masking": "high"})
                for a1, a2, a3 in SENSITIVITY_GRID
            )
        elif name == "vanilla":
            out.append((name, {"weights": LossWeights.preset("vanilla"), "masking": "none"}))
        elif name in PRESETS:
            out.append((name, {"weights": LossWeights.preset(name), "masking": "high"}))
        elif name == "msl-low":
            out.append((name, {"weights": LossWeights.preset("msl"), "masking": "low"}))
        elif name == "msl-soft":
            out.append((name, {"weights": LossWeights.preset("msl"), "masking": "high", "binarize_masks": False}))
        elif name.startswith("w:"):
            parts = name[2:].split("/")
            if len(parts) != 3:
                raise ConfigError(f"weight variant must look like w:a1/a2/a3, got {name!r}")
            out.append((name, {"weights": LossWeights(*(float(p) for p in parts)), "masking": "high"}))
        else:
            raise ConfigError(f"unknown ablation variant {name!r}")
    return out


def _report_rows(variant: str, seed: int, mode: str, report: MetricsReport) -> List[List[Any]]:
    rows = [[variant, seed, mode, "all", metric, value] for metric, value in report.scalars().items()]
    for stratum, sub in report.strata.items():
        rows.extend([variant, seed, mode, stratum, metric, value] for metric, value in sub.scalars().items())
    return rows


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset_dir = _require_dir(args.dataset, "--dataset")
    variants = ablation_variants([v for v in args.variants.split(",") if v])
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not seeds:
        raise UsageError("--seeds must list at least one seed")
    subsets = _load_masks(args.masks)
    train_data = _load_split(dataset_dir, "train")
    test_data = _load_split(dataset_dir, "test")
    out = _prepare_out(Path(args.out or Path(DEFAULT_RUN_ROOT) / "ablation"), args.force)
    cfg.write(out / "config.json")
    _write_invocation(
        out, "ablate",
        {"dataset": str(dataset_dir), "masks": args.masks, "variants": [v for v, _ in variants], "seeds": seeds},
    )
    arch = cfg.architecture(train_data.num_classes, tuple(train_data.images.shape[2:]))

    rows: List[List[Any]] = []
    for variant, overrides in variants:
        for seed in seeds:
            train_cfg = replace(cfg.train, seed=seed, run_name=f"{variant}-seed{seed}", **overrides)
            run_dir = out / variant.replace(":", "_").replace("/", "-") / f"seed{seed}"
            result = train(train_cfg, train_data, test_data, subsets, arch, run_dir)
            params = result.best_params if args.select == "best" else result.params
            clean = evaluate(params, test_data, cfg.eval)
            masked = average_reports([
                evaluate_masked(params, test_data, subsets, cfg.eval.mask_subset, s, cfg.eval)
                for s in cfg.eval.seeds
            ])
            rows.extend(_report_rows(variant, seed, "clean", clean))
            rows.extend(_report_rows(variant, seed, "masked", masked))
            print(f"{variant} seed {seed}: clean mAP={clean.mean_ap:.4f} masked mAP={masked.mean_ap:.4f}")

    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        writer.writerows(rows)
    _write_json(out / "summary.json", summarize_ablation(rows))
    print(f"Ablation written to {out}")
    return EXIT_OK


def summarize_ablation(rows: Sequence[Sequence[Any]]) -> Dict[str, Dict[str, float]]:
    """Per-variant mean over seeds, keyed ``mode/stratum/metric``."""
    grouped: Dict[str, Dict[str, List[float]]] = {}
    for variant, _seed, mode, stratum, metric, value in rows:
        grouped.setdefault(variant, {}).setdefault(f"{mode}/{stratum}/{metric}", []).append(float(value))
    return {
        variant: {key: float(np.mean(values)) for key, values in metrics.items()}
        for variant, metrics in grouped.items()
    }


# ==================== Entry point ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msl",
        description="Masked supervised learning for multi-label image recognition.",
        epilog="Any config leaf can be overridden with --section.key=value (e.g. --train.epochs=20).",
    )
    parser.add_argument("--log-level", default=os.environ.get("MSL_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help=f"output directory (default under {DEFAULT_RUN_ROOT})")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
        return p

    add("gen-dataset", "generate the synthetic occluded-shapes dataset")
    add("gen-masks", "build the high and low mask subsets")

    p = add("train", "train one model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--masks")
    p.add_argument("--vanilla", action="store_true", help="use the standalone single-branch trainer")

    p = add("eval", "evaluate a checkpoint on clean test images")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))

    p = add("robustness", "compare checkpoints on clean and masked test images")
    p.add_argument("--dataset", required=True)
    p.add_argument("--masks")
    p.add_argument("--checkpoint", action="append", required=True, help="[name=]path, repeatable")
    p.add_argument("--modes", default="clean,masked")

    p = add("metrics", "score a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--threshold", type=float)

    p = add("ablate", "train and evaluate several variants over several seeds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--variants", default="vanilla,mabr,laco,msl,msl-low")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--select", default="best", choices=("best", "final"))
    return parser


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "gen-masks": cmd_gen_masks,
    "train": cmd_train,
    "eval": cmd_eval,
    "robustness": cmd_robustness,
    "metrics": cmd_metrics,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = [e for e in extra if e.startswith("--") and "." in e.split("=", 1)[0] and "=" in e]
    leftover = [e for e in extra if e not in overrides]
    if leftover:
        parser.error(f"unrecognized arguments: {' '.join(leftover)}")

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(overrides)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as e:
        print(f"msl {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MSLError, OSError, ValueError) as e:
        print(f"msl {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
