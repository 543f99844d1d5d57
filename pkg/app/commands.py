"""Implementations of the command-line subcommands."""

import json
import logging
import os
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.components.heatmap import HeatmapBundle, export_heatmaps
from app.utils.config_utils import RunConfig, write_run_config
from app.utils.formatting import format_class_counts, format_metrics_report, format_table
from config import BAG_SUFFIX, LAST_CHECKPOINT_NAME, MANIFEST_FILE_NAME, SCAN_SCHEMES
from packages.data_gathering.synthetic import generate_synthetic
from packages.data_storage.bag_io import read_bag, write_bag
from packages.data_storage.manifest import Manifest, load_split_bags, split_manifest
from packages.helpers.errors import ConfigError, ContractError
from packages.hierarchy.scan_order import (
    REGION_NESTED, RESOLUTION_ORDERED, format_scan, region_nested_scan, resolution_ordered_scan,
)
from packages.model.moe_mamba_mil import build_variant, forward
from packages.numerics.tensor import no_grad
from packages.trainer.checkpoint import Checkpoint, load_checkpoint, restore_model
from packages.trainer.metrics import MetricsReport, compute_metrics
from packages.trainer.trainer import TrainResult, evaluate, fit, train

logger = logging.getLogger("Commands")

ABLATION_AXES = {
    "variant": ("model", "variant", str),
    "layers": ("model", "l_dyn", int),
    "topk": ("model", "top_k", int),
    "lambda": ("lambda", "lambda_balance", float),
    "scan": ("model", "scan_scheme", str),
}
ABLATION_COLUMNS = ["f1", "auc", "acc", "mcc"]


def cmd_generate(cfg: RunConfig, force: bool = False) -> Manifest:
    """Write the synthetic bags and their manifest into ``paths.data``."""
    out_dir = cfg.paths.data
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise ConfigError(f"output directory {out_dir} is not empty; pass --force to overwrite")
    os.makedirs(out_dir, exist_ok=True)

    bags = generate_synthetic(cfg.synthetic)
    paths = {}
    for bag in bags:
        paths[bag.slide_id] = f"{bag.slide_id}{BAG_SUFFIX}"
        write_bag(bag, os.path.join(out_dir, paths[bag.slide_id]))
    manifest = split_manifest(bags, cfg.synthetic.split_ratios, cfg.seed, paths=paths, root=out_dir)
    manifest.to_csv(os.path.join(out_dir, MANIFEST_FILE_NAME))
    write_run_config(cfg, out_dir)

    print(f"Generated {len(bags)} bags in {out_dir} ({format_class_counts([b.label for b in bags])})")
    print(format_table(manifest.label_counts().reset_index()))
    return manifest


def cmd_train(cfg: RunConfig, resume: bool = False) -> TrainResult:
    out_dir = cfg.paths.out
    manifest = Manifest.from_csv(cfg.paths.manifest_path())
    write_run_config(cfg, out_dir)
    logger.info(f"Resolved configuration:\n{cfg.to_json()}")

    resume_from = None
    if resume:
        resume_from = cfg.paths.checkpoint or os.path.join(out_dir, LAST_CHECKPOINT_NAME)
    model = build_variant(cfg.model)
    result = train(model, manifest, cfg.train, out_dir=out_dir, resume_from=resume_from)
    print(format_table(result.history))
    print(f"Best F1 {result.best_f1:.4f} at epoch {result.best_epoch}; checkpoints in {out_dir}")
    return result


def _log_checkpoint_config(checkpoint_path: str, ckpt: Checkpoint) -> None:
    resolved = {"model": ckpt.model_config.to_dict(), "train": ckpt.train_config}
    logger.info(f"Resolved configuration of {checkpoint_path} (epoch {ckpt.epoch}):\n"
                f"{json.dumps(resolved, indent=2, sort_keys=True)}")


def cmd_eval(checkpoint_path: str, manifest_path: str, split: str) -> MetricsReport:
    ckpt = load_checkpoint(checkpoint_path)
    _log_checkpoint_config(checkpoint_path, ckpt)
    model = restore_model(ckpt)
    bags = load_split_bags(Manifest.from_csv(manifest_path), split)
    if not bags:
        raise ContractError(f"split '{split}' of {manifest_path} is empty")
    result = evaluate(model, bags)
    report = compute_metrics(result.labels, result.probs, model.config.n_classes)
    print(format_metrics_report(report, title=f"{split} metrics of {checkpoint_path} ({len(bags)} slides)"))
    return report


def _ablation_settings(axis: str, values: Sequence[str]) -> List:
    if axis not in ABLATION_AXES:
        raise ContractError(f"unknown sweep axis '{axis}', expected one of {sorted(ABLATION_AXES)}")
    cast = ABLATION_AXES[axis][2]
    settings = [cast(v) for v in values]
    if axis == "variant":
        settings = [v.replace("-", "_").lower() for v in settings]
    if axis == "scan" and any(v not in SCAN_SCHEMES for v in settings):
        raise ContractError(f"scan sweep values must be among {SCAN_SCHEMES}")
    if len(set(settings)) != len(settings):
        raise ContractError(f"duplicate values in the {axis} sweep: {list(values)}")
    if not settings:
        raise ContractError(f"the {axis} sweep needs at least one value")
    return settings


def _configure(cfg: RunConfig, axis: str, setting, seed: int) -> RunConfig:
    section, key, _ = ABLATION_AXES[axis]
    train_cfg = cfg.train
    model_cfg = cfg.model
    if section == "lambda":
        train_cfg = replace(train_cfg, lambda_balance=setting)
    else:
        model_cfg = replace(model_cfg, **{key: setting})
    return replace(cfg, seed=seed, model=model_cfg, train=train_cfg)


def cmd_ablate(cfg: RunConfig, variants: Optional[Sequence[str]] = None, seeds: Optional[Sequence[int]] = None,
               sweep: Optional[str] = None, values: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Train and test every setting of one axis with shared data and seeds.

    Without ``sweep`` the axis is the model variant. One row per
    (setting, seed) followed by one mean row per setting.
    """
    axis = sweep or "variant"
    settings = _ablation_settings(axis, values if sweep else (variants or [cfg.model.variant]))
    seeds = list(seeds) if seeds else [cfg.seed]
    if len(set(seeds)) != len(seeds):
        raise ContractError(f"duplicate seeds {seeds}")

    manifest = Manifest.from_csv(cfg.paths.manifest_path())
    train_bags = load_split_bags(manifest, "train")
    val_bags = load_split_bags(manifest, "val")
    test_bags = load_split_bags(manifest, "test")
    if not test_bags:
        raise ContractError("ablation needs a non-empty test split")
    write_run_config(cfg, cfg.paths.out)
    logger.info(f"Resolved configuration:\n{cfg.to_json()}")

    rows = []
    for setting in settings:
        for seed in seeds:
            run = _configure(cfg, axis, setting, seed)
            logger.info(f"Ablation {axis}={setting} seed={seed}")
            result = fit(build_variant(run.model), train_bags, val_bags, run.train)
            test = evaluate(restore_model(result.checkpoint), test_bags)
            report = compute_metrics(test.labels, test.probs, run.model.n_classes)
            row = {axis: str(setting), "seed": str(seed)}
            row.update({name: getattr(report, name) for name in ABLATION_COLUMNS})
            rows.append(row)

    per_run = pd.DataFrame(rows)
    means = per_run.groupby(axis, sort=False)[ABLATION_COLUMNS].mean().reset_index()
    means["seed"] = "mean"
    table = pd.concat([per_run, means[per_run.columns]], ignore_index=True)

    os.makedirs(cfg.paths.out, exist_ok=True)
    csv_path = os.path.join(cfg.paths.out, f"ablation_{axis}.csv")
    table.to_csv(csv_path, index=False)
    print(format_table(table))
    logger.info(f"Ablation table written to {csv_path}")
    return table


def cmd_heatmap(checkpoint_path: str, bag_path: str, outdir: str) -> HeatmapBundle:
    ckpt = load_checkpoint(checkpoint_path)
    _log_checkpoint_config(checkpoint_path, ckpt)
    model = restore_model(ckpt)
    bag = read_bag(bag_path)
    with no_grad():
        out = forward(model, bag)
    bundle = export_heatmaps(bag, out, outdir)
    print(f"Predicted class {out.prediction} for {bag.slide_id} (label {bag.label}); "
          f"{len(bundle.levels)} level heatmaps in {outdir}")
    return bundle


def scan_text(bag_path: str) -> str:
    hierarchy = read_bag(bag_path).hierarchy()
    sections: Dict[str, str] = {
        REGION_NESTED: format_scan(region_nested_scan(hierarchy)),
        RESOLUTION_ORDERED: format_scan(resolution_ordered_scan(hierarchy)),
    }
    return "\n".join(f"# {scheme}\n{body}" for scheme, body in sections.items())


def cmd_scan(bag_path: str) -> str:
    text = scan_text(bag_path)
    print(text)
    return text


def split_scan_sections(text: str) -> Dict[str, str]:
    """Inverse of the ``cmd_scan`` layout: scheme name -> section body."""
    sections: Dict[str, List[str]] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("# "):
            current = line[2:].strip()
            sections[current] = []
        elif current is not None and line.strip():
            sections[current].append(line)
    return {scheme: "\n".join(lines) for scheme, lines in sections.items()}


def mean_metric(table: pd.DataFrame, axis: str, setting: str, metric: str = "f1") -> float:
    rows = table[(table[axis] == setting) & (table["seed"] == "mean")]
    return float(np.asarray(rows[metric])[0])
