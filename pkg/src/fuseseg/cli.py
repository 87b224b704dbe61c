"""Command-line interface.

Subcommands: tile, synth, train, eval, verify, stats, report.
Exit codes: 0 success, 1 runtime or check failure, 2 usage/config errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_entries, load_iteration, restore_model
from .config import build_model, load_datasets, load_run_config
from .data import (ManifestRow, load_mask_png, load_image_png, save_image_png,
                   save_mask_png, synth_dataset, tile, write_manifest)
from .errors import ConfigError, DataError
from .report import discover_runs, train_single, write_report
from .rng import fold
from .stats import stats_from_arrays, write_stats_csv
from .train import evaluate
from .verify import all_passed, format_reports, run_suite, write_reports_csv


def _cmd_tile(args) -> int:
    in_dir = Path(args.input)
    img_dir, lab_dir = in_dir / "images", in_dir / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise DataError(f"{in_dir} must contain images/ and labels/")
    sources = sorted(img_dir.glob("*.png"))
    if not sources:
        raise DataError(f"no .png images under {img_dir}")
    out = Path(args.output)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rows: list[ManifestRow] = []
    for img_path in sources:
        lab_path = lab_dir / img_path.name
        if not lab_path.exists():
            raise DataError(f"no label for {img_path}")
        image = load_image_png(img_path)
        mask = load_mask_png(lab_path)
        if image.shape[1:] != mask.shape:
            raise DataError(f"{img_path.name}: image/label extents differ")
        source_id = img_path.stem
        mask_tiles = {(r, c): t for r, c, t in tile(mask, args.size)}
        for r, c, img_tile in tile(image, args.size):
            name = f"{source_id}_r{r}_c{c}.png"
            save_image_png(img_tile, out / "images" / name)
            save_mask_png(mask_tiles[(r, c)], out / "labels" / name)
            rows.append(ManifestRow(args.split, f"images/{name}", source_id, r, c))
    write_manifest(rows, out / "manifest.csv")
    print(f"tiled {len(sources)} images into {len(rows)} tiles under {out}")
    return 0


def _write_samples(samples, base: Path):
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "labels").mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(samples):
        name = f"synth_{k:05d}.png"
        save_image_png(s.image, base / "images" / name)
        save_mask_png(s.mask, base / "labels" / name)


def _cmd_synth(args) -> int:
    out = Path(args.out)
    n_val = args.n_val if args.n_val is not None else max(1, args.n // 10)
    n_test = args.n_test if args.n_test is not None else max(1, args.n // 10)
    _write_samples(synth_dataset(args.n, args.seed, args.canvas), out / "train")
    _write_samples(synth_dataset(n_val, fold(args.seed, "val"), args.canvas), out / "val")
    _write_samples(synth_dataset(n_test, fold(args.seed, "test"), args.canvas), out / "test")
    print(f"wrote {args.n}/{n_val}/{n_test} train/val/test samples under {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.model["seed"] = args.seed
    model, result = train_single(cfg, args.out, run_index=0)
    summary = model.summary()
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"parameters: {summary['param_count']:,} "
          f"(full-scale reference {summary['reference_param_count']:,}); "
          f"MACs at {summary['input_hw']}: {summary['mac_count']:,} "
          f"(reference {summary['reference_gflops']} GFLOPs)")
    final_loss = result.loss_rows[-1][2]
    print(f"finished {len(result.loss_rows)} iterations, final loss {final_loss:.4f}; "
          f"artifacts in {result.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    model = build_model(cfg.model)
    state = load_entries(args.ckpt)
    restore_model(model, state)
    if args.data is not None:
        from .data import load_split
        samples = load_split(args.data, args.split)
    else:
        _, samples = load_datasets(cfg.data)
    report = evaluate(model, samples)
    print(f"iteration: {load_iteration(state)}")
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_verify(args) -> int:
    reports = run_suite(args.suite, seeds=args.seeds)
    print(format_reports(reports))
    if args.out is not None:
        write_reports_csv(reports, args.out)
    return 0 if all_passed(reports) else 1


def _cmd_stats(args) -> int:
    run_dir = Path(args.run)
    meta_path = run_dir / "run.json"
    if not meta_path.exists():
        raise DataError(f"{run_dir}: no run.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    model = build_model(meta["model"])
    kinds = {p.name: p.kind for p in model.parameters()}
    rows = []
    for ckpt in sorted(run_dir.glob("ckpt_*.fwlb")):
        state = load_entries(ckpt)
        rows.extend(stats_from_arrays(state, kinds, load_iteration(state),
                                      meta.get("run_id", "run")))
    if not rows:
        raise DataError(f"no ckpt_*.fwlb snapshots under {run_dir}")
    write_stats_csv(rows, args.out)
    print(f"wrote {len(rows)} stat rows to {args.out}")
    return 0


def _cmd_report(args) -> int:
    rows = write_report(discover_runs(args.runs), args.out)
    for r in rows:
        print(f"{r['config_id']} run {r['run']} (seed {r['seed']}): miou={r['miou']:.4f}")
    print(f"report written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuseseg",
                                     description="weighted skip-fusion segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="cut image/label pairs into square tiles")
    p.add_argument("--input", required=True, help="directory with images/ and labels/")
    p.add_argument("--output", required=True)
    p.add_argument("--size", type=int, default=250)
    p.add_argument("--split", default="train", help="split name recorded in the manifest")
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("synth", help="generate a synthetic rectangle dataset")
    p.add_argument("--n", type=int, required=True, help="training samples")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=int, default=128)
    p.add_argument("--n-val", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override model and train seeds")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="dataset root (defaults to the config's data)")
    p.add_argument("--split", default="val")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("verify", help="run the numerical verification suite")
    p.add_argument("--suite", default="all",
                   choices=["all", "grad", "absorption", "series", "bn", "baseline"])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out", default=None, help="also write a CSV report")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("stats", help="recompute layer statistics from run checkpoints")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("report", help="summarize an ensemble of runs (CSV + SVG)")
    p.add_argument("--runs", required=True, help="directory containing run directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
