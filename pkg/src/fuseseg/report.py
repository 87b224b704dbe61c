"""Multi-run training, re-evaluation of stored runs, and summary reports.

``run_ensemble`` trains one configuration several times with seeds
``base_seed + run_index`` and hands the run directories to
``write_report``, which re-evaluates every final checkpoint on its
validation split and emits:

    summary.csv    config_id,run,seed,miou,pixel_acc,mean_acc  (one row per run)
    aggregate.csv  config_id,n_runs,miou_mean,miou_min,miou_max,miou_spread
    report.svg     box-and-whisker chart of per-config mIoU

The spread column (max - min) is reported alongside the mean because
per-run scatter is part of the story for constant-weight fusion.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_entries, restore_model
from .config import DataConfig, RunConfig, build_model, load_datasets
from .errors import DataError
from .train import TrainConfig, evaluate, train

SUMMARY_HEADER = ["config_id", "run", "seed", "miou", "pixel_acc", "mean_acc"]
AGGREGATE_HEADER = ["config_id", "n_runs", "miou_mean", "miou_min", "miou_max", "miou_spread"]


def run_meta(cfg: RunConfig, run_index: int, run_id: str, model_section: dict,
             train_cfg: TrainConfig) -> dict:
    """Everything a later re-evaluation needs, with the *effective* seeds."""
    return {
        "config_id": cfg.config_id,
        "run": run_index,
        "run_id": run_id,
        "model": model_section,
        "train": asdict(train_cfg),
        "data": asdict(cfg.data),
    }


def train_single(cfg: RunConfig, out_dir, run_index: int = 0):
    """Train one run of a config; seeds are offset by the run index."""
    model_section = dict(cfg.model)
    model_section["seed"] = int(model_section.get("seed", 0)) + run_index
    train_cfg = TrainConfig(**{**asdict(cfg.train), "seed": cfg.train.seed + run_index})
    model = build_model(model_section)
    train_samples, _ = load_datasets(cfg.data)
    run_id = f"{cfg.config_id}-r{run_index}"
    meta = run_meta(cfg, run_index, run_id, model_section, train_cfg)
    result = train(model, train_samples, train_cfg, out_dir, run_id=run_id, meta=meta)
    return model, result


def evaluate_run(run_dir) -> dict:
    """Re-evaluate a stored run's final checkpoint on its validation split."""
    run_dir = Path(run_dir)
    meta_path = run_dir / "run.json"
    if not meta_path.exists():
        raise DataError(f"{run_dir}: no run.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    model = build_model(meta["model"])
    restore_model(model, load_entries(run_dir / "final.fwlb"))
    _, val = load_datasets(DataConfig(**meta["data"]))
    report = evaluate(model, val)
    return {
        "config_id": meta["config_id"],
        "run": int(meta["run"]),
        "seed": int(meta["train"]["seed"]),
        "miou": report.miou,
        "pixel_acc": report.pixel_acc,
        "mean_acc": report.mean_acc,
    }


def discover_runs(runs_root) -> list[Path]:
    root = Path(runs_root)
    dirs = sorted(p.parent for p in root.glob("**/run.json"))
    if not dirs:
        raise DataError(f"no runs (run.json) found under {root}")
    return dirs


def write_report(run_dirs, out_dir) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [evaluate_run(d) for d in run_dirs]
    rows.sort(key=lambda r: (r["config_id"], r["run"]))

    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for r in rows:
            writer.writerow([r["config_id"], r["run"], r["seed"],
                             repr(r["miou"]), repr(r["pixel_acc"]), repr(r["mean_acc"])])

    groups: dict[str, list[float]] = {}
    for r in rows:
        groups.setdefault(r["config_id"], []).append(r["miou"])
    with open(out / "aggregate.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_HEADER)
        for cid in sorted(groups):
            vals = np.asarray(groups[cid])
            writer.writerow([cid, len(vals), repr(float(vals.mean())),
                             repr(float(vals.min())), repr(float(vals.max())),
                             repr(float(vals.max() - vals.min()))])

    (out / "report.svg").write_text(_boxplot_svg(groups), encoding="utf-8")
    return rows


def run_ensemble(cfg: RunConfig, n_runs: int, out_root) -> list[dict]:
    """Train ``n_runs`` seeded runs of one config and report on them."""
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    out_root = Path(out_root)
    run_dirs = []
    for r in range(n_runs):
        run_dir = out_root / f"{cfg.config_id}_run{r:02d}"
        train_single(cfg, run_dir, run_index=r)
        run_dirs.append(run_dir)
    return write_report(run_dirs, out_root / "report")


def _boxplot_svg(groups: dict[str, list[float]], width: int = 560, height: int = 360) -> str:
    """Minimal box-and-whisker SVG: one box per config, mIoU on the y axis."""
    names = sorted(groups)
    all_vals = [v for vals in groups.values() for v in vals]
    lo, hi = min(all_vals), max(all_vals)
    pad = max((hi - lo) * 0.15, 0.01)
    lo, hi = lo - pad, hi + pad
    top, bottom, left = 20, height - 40, 60

    def ypix(v: float) -> float:
        return bottom - (v - lo) / (hi - lo) * (bottom - top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{bottom}" x2="{width - 20}" y2="{bottom}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = lo + frac * (hi - lo)
        y = ypix(v)
        parts.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{v:.3f}</text>')
    slot = (width - left - 40) / max(len(names), 1)
    for k, name in enumerate(names):
        vals = np.asarray(sorted(groups[name]), dtype=np.float64)
        q0, q1, q2, q3, q4 = np.percentile(vals, [0, 25, 50, 75, 100])
        cx = left + (k + 0.5) * slot
        bw = min(slot * 0.5, 60.0)
        parts += [
            f'<line x1="{cx:.1f}" y1="{ypix(q0):.1f}" x2="{cx:.1f}" y2="{ypix(q1):.1f}" stroke="black"/>',
            f'<line x1="{cx:.1f}" y1="{ypix(q3):.1f}" x2="{cx:.1f}" y2="{ypix(q4):.1f}" stroke="black"/>',
            f'<line x1="{cx - bw / 4:.1f}" y1="{ypix(q0):.1f}" x2="{cx + bw / 4:.1f}" y2="{ypix(q0):.1f}" stroke="black"/>',
            f'<line x1="{cx - bw / 4:.1f}" y1="{ypix(q4):.1f}" x2="{cx + bw / 4:.1f}" y2="{ypix(q4):.1f}" stroke="black"/>',
            f'<rect x="{cx - bw / 2:.1f}" y="{ypix(q3):.1f}" width="{bw:.1f}" '
            f'height="{max(ypix(q1) - ypix(q3), 1.0):.1f}" fill="#9ecae1" stroke="black"/>',
            f'<line x1="{cx - bw / 2:.1f}" y1="{ypix(q2):.1f}" x2="{cx + bw / 2:.1f}" y2="{ypix(q2):.1f}" '
            f'stroke="black" stroke-width="2"/>',
            f'<text x="{cx:.1f}" y="{bottom + 16}" text-anchor="middle">{name}</text>',
        ]
        for v in vals:
            parts.append(f'<circle cx="{cx + bw * 0.7:.1f}" cy="{ypix(float(v)):.1f}" r="2" fill="black"/>')
    parts.append(f'<text x="{left}" y="{top - 6}">mIoU</text>')
    parts.append('</svg>')
    return "\n".join(parts) + "\n"
