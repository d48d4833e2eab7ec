"""``colgeo`` command-line entry point.

Exit status: 0 on success, 1 when a module reports invalid input or a failed
check, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from colgeo import __version__, dataio, metrics
from colgeo.geometry import SCHEMES, CameraIntrinsics, depth_to_normals

GRADCHECK_TOL = 1e-4


class CheckFailed(Exception):
    """A requested check ran and did not pass."""


def _seed_arg(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")


def _format_arg(p):
    p.add_argument("--format", choices=("csv", "table"), default="table",
                   help="report format: full-precision CSV or an aligned 3-decimal table (default table)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="colgeo", description="Depth and surface-normal toolkit for synthetic endoscopy scenes.")
    ap.add_argument("--version", action="version", version=f"colgeo {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="render a synthetic dataset", description="Render random scenes and write a dataset with a scene-wise split.")
    p.add_argument("--kind", choices=("plane", "sphere", "tube", "composite"), default="tube", help="scene family (default tube)")
    p.add_argument("--scenes", type=int, default=10, help="number of scenes (default 10)")
    p.add_argument("--frames", type=int, default=1, help="frames per scene (default 1)")
    p.add_argument("--res", type=int, default=64, help="square image size in pixels, divisible by 8 (default 64)")
    p.add_argument("--fov", type=float, default=60.0, help="horizontal field of view in degrees (default 60)")
    p.add_argument("--split", default="0.6,0.2,0.2", help="train,val,test scene ratios (default 0.6,0.2,0.2)")
    p.add_argument("--rgb-noise", type=float, default=0.0, help="Gaussian RGB noise sigma (default 0)")
    p.add_argument("--depth-quant", type=float, default=0.0, help="depth quantization step in mm (default 0)")
    p.add_argument("--depth-scale", type=float, default=0.01, help="mm per raw 16-bit depth unit (default 0.01)")
    p.add_argument("--out", required=True, help="output dataset directory")
    _seed_arg(p)

    p = sub.add_parser("d2sn", help="convert a depth PNG to a normal PNG", description="Warp a 16-bit depth map to surface normals.")
    p.add_argument("--depth", required=True, help="16-bit depth PNG")
    p.add_argument("--intrinsics", required=True, help="JSON with f, cx, cy, width, height (or a dataset manifest)")
    p.add_argument("--out", required=True, help="output 16-bit normal PNG")
    p.add_argument("--scale", type=float, default=None, help="mm per raw unit (default: manifest depth_scale or 0.01)")
    p.add_argument("--scheme", choices=SCHEMES, default="pointcloud", help="tangent-vector scheme (default pointcloud)")

    p = sub.add_parser("eval", help="evaluate predictions or a checkpoint", description=(
        "Compare predicted maps with ground truth. Predictions in --pred-dir mirror the ground-truth "
        "dataset layout (same relative depth/normal paths); alternatively evaluate --checkpoint on --gt-dir."))
    p.add_argument("--gt-dir", required=True, help="ground-truth dataset directory (with manifest.json)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred-dir", help="directory of predicted depth/normal PNGs")
    src.add_argument("--checkpoint", help="model checkpoint to run on the ground-truth images")
    p.add_argument("--split", default=None, help="restrict to one split (default: all frames for --pred-dir, val for --checkpoint)")
    p.add_argument("--errors", default=None, help="write per-frame absolute error maps to this directory")
    _format_arg(p)

    p = sub.add_parser("train", help="train one model", description="Train one model from a TOML config.")
    _train_args(p)
    p.add_argument("--out", required=True, help="output directory for logs and the best checkpoint")

    p = sub.add_parser("ablate", help="train the four-mode ablation ladder", description="Train baseline, cbam, cbam-mtl and cbam-mtl-xtc for each seed and report medians.")
    _train_args(p)
    p.add_argument("--seeds", required=True, help="comma-separated seeds, at least 3")
    p.add_argument("--out", default=None, help="output directory for per-run logs, checkpoints and ablation.csv")
    _format_arg(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op and block",
                       description="Compare reverse-mode gradients with finite differences for all registered checks.")
    p.add_argument("--points", type=int, default=1, help="random points per check (default 1)")
    p.add_argument("--method", choices=("richardson", "central"), default="richardson",
                   help="difference stencil at base step 1e-3 (default richardson)")
    _seed_arg(p)
    _format_arg(p)

    p = sub.add_parser("report", help="render a CSV log", description="Render an ablation, epoch or metric CSV log.")
    p.add_argument("--log", required=True, help="CSV file written by train, ablate or eval")
    _format_arg(p)
    return ap


def _train_args(p):
    p.add_argument("--config", required=True, help="TOML file with [model], [train] and [data] tables")
    p.add_argument("--data", default=None, help="dataset directory (overrides [data].path)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key, e.g. --set train.lr=5e-4 (repeatable)")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--weight-decay", type=float, help="decoupled weight decay")
    p.add_argument("--batch-size", type=int, help="mini-batch size")
    p.add_argument("--epochs", type=int, help="number of epochs")
    p.add_argument("--optimizer", choices=("adam", "sgd-momentum"), help="optimizer")
    p.add_argument("--mode", choices=("baseline", "cbam", "cbam-mtl", "cbam-mtl-xtc"), help="ablation mode")
    p.add_argument("--seed", type=int, help="training seed")


# ---------------------------------------------------------------------------
def _load_training(args):
    from colgeo import trainer

    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    cfg_path = Path(args.config)
    with open(cfg_path, "rb") as fh:
        raw = tomllib.load(fh)
    flags = {"lr": args.lr, "weight_decay": args.weight_decay, "batch_size": args.batch_size,
             "epochs": args.epochs, "optimizer": args.optimizer, "mode": args.mode, "seed": args.seed}
    raw = trainer.apply_overrides(raw, args.set)
    for k, v in flags.items():
        if v is not None:
            raw.setdefault("train", {})[k] = v
    mcfg, tcfg, data = trainer.config_from_dict(raw)
    path = args.data or data.get("path")
    if path is None:
        raise ValueError("no dataset: pass --data or set [data].path")
    path = Path(path)
    if not path.is_absolute() and args.data is None:
        path = cfg_path.parent / path
    return mcfg, tcfg, trainer.Dataset.load(path)


def cmd_synth(args) -> int:
    from colgeo import scenes

    if args.res % 8:
        raise ValueError("--res must be divisible by 8")
    ratios = [float(x) for x in args.split.split(",")]
    if len(ratios) != 3:
        raise ValueError("--split needs three comma-separated ratios")
    cam = CameraIntrinsics.centered(args.res, args.res, args.fov)
    specs = scenes.random_specs(args.kind, args.scenes, cam, seed=args.seed, frames=args.frames,
                                rgb_noise=args.rgb_noise, depth_quant=args.depth_quant)
    man = scenes.make_dataset(specs, ratios, args.out, depth_scale=args.depth_scale)
    counts = man.split_counts
    print(f"wrote {len(man.frames)} frames from {len(specs)} scenes to {args.out} "
          + " ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_d2sn(args) -> int:
    raw = json.loads(Path(args.intrinsics).read_text(encoding="utf-8"))
    scale = args.scale
    if "intrinsics" in raw:
        scale = scale if scale is not None else raw.get("depth_scale")
        raw = raw["intrinsics"]
    cam = CameraIntrinsics.from_dict(raw)
    depth = dataio.load_depth(args.depth, scale if scale is not None else 0.01)
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth map is {depth.shape[1]}x{depth.shape[0]}, intrinsics say {cam.width}x{cam.height}")
    normals = depth_to_normals(depth, cam, args.scheme)
    dataio.save_normals(normals, args.out)
    print(f"wrote {args.out}: {int(normals.valid.sum())} valid of {normals.valid.size} pixels")
    return 0


def _emit(report_csv: str, report_table: str, fmt: str) -> None:
    print(report_csv if fmt == "csv" else report_table, end="" if fmt == "csv" else "\n")


def cmd_eval(args) -> int:
    from colgeo import trainer

    man = dataio.load_manifest(args.gt_dir)
    if args.checkpoint:
        ckpt = dataio.load_checkpoint(args.checkpoint)
        rep = trainer.evaluate(ckpt, man, args.split or "val", error_dir=args.errors)
        _emit(rep.to_csv(), rep.to_table(), args.format)
        return 0
    recs = man.frames if args.split is None else man.frames_in(args.split)
    if args.split is not None and args.split not in man.split_counts:
        raise KeyError(f"dataset has no split {args.split!r}")
    pred_root = Path(args.pred_dir)
    rows = []
    for i, rec in enumerate(recs):
        gd = dataio.load_depth(man.root / rec.depth, man.depth_scale)
        pd = dataio.load_depth(pred_root / rec.depth, man.depth_scale)
        mask = gd.valid & pd.valid
        if rec.mask is not None:
            mask &= dataio.load_mask(man.root / rec.mask)
        if not mask.any():
            continue
        row = metrics.depth_metrics(pd.values, gd.values, mask).as_dict()
        pn_path = pred_root / rec.normals
        if pn_path.is_file():
            gn = dataio.load_normals(man.root / rec.normals)
            pn = dataio.load_normals(pn_path)
            nmask = mask & gn.valid & pn.valid
            if nmask.any():
                row.update(metrics.normal_metrics(pn.vectors, gn.vectors, nmask).as_dict())
        if args.errors:
            out = Path(args.errors)
            dataio.save_error_map(np.where(mask, np.abs(pd.values - gd.values), 0.0), out / f"{i:04d}_depth_err.png")
        rows.append(row)
    if not rows:
        raise ValueError("no frame had valid pixels to evaluate")
    if any(set(r) != set(rows[0]) for r in rows):
        rows = [{k: r[k] for k in metrics.DEPTH_COLUMNS} for r in rows]
    rep = metrics.aggregate(rows)
    _emit(rep.to_csv(), rep.to_table(), args.format)
    return 0


def cmd_train(args) -> int:
    from colgeo import trainer

    mcfg, tcfg, ds = _load_training(args)
    out = Path(args.out)

    def progress(epoch, row):
        logging.getLogger("colgeo").info("epoch %d: delta1=%.4f abs_rel=%.4f", epoch, row["delta1"], row["abs_rel"])

    ckpt, tlog = trainer.train(ds, mcfg, tcfg, callback=progress)
    tlog.write(out)
    dataio.save_checkpoint(out / "best.ckpt", ckpt)
    print(f"best epoch {tlog.best_epoch}; checkpoint {out / 'best.ckpt'}; logs in {out}")
    if tlog.diverged:
        print("training diverged; the checkpoint holds the last good parameters", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    from colgeo import trainer

    mcfg, tcfg, ds = _load_training(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]

    def progress(mode, seed, row, tlog):
        logging.getLogger("colgeo").info("%s seed %d: delta1=%.4f", mode, seed, row.get("delta1", float("nan")))

    res = trainer.ablation_run(ds, mcfg, tcfg, seeds, out_dir=args.out, progress=progress)
    _emit(res.to_csv(), res.to_table(), args.format)
    return 0


def cmd_gradcheck(args) -> int:
    from colgeo import gradcheck

    results = gradcheck.run_all(args.seed, args.points, args.method)
    failed = [n for n, r in results if not r.max_error < GRADCHECK_TOL]
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["check", "max_rel_error", "checked", "skipped_kinks", "pass"])
        for n, r in results:
            w.writerow([n, repr(r.max_error), r.checked, r.skipped, r.max_error < GRADCHECK_TOL])
        print(buf.getvalue(), end="")
    else:
        width = max(len(n) for n, _ in results)
        print(f"{'check'.ljust(width)}  max rel err  checked  skipped  result")
        for n, r in results:
            status = "PASS" if r.max_error < GRADCHECK_TOL else "FAIL"
            print(f"{n.ljust(width)}  {r.max_error:11.3e}  {r.checked:7d}  {r.skipped:7d}  {status}")
        print(f"{len(results) - len(failed)}/{len(results)} checks below {GRADCHECK_TOL:g}")
    if failed:
        raise CheckFailed("gradient check failed: " + ", ".join(failed))
    return 0


def cmd_report(args) -> int:
    from colgeo import trainer

    with open(args.log, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{args.log} has no rows")
    cols = list(rows[0])
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])
        print(buf.getvalue(), end="")
        return 0
    if cols[0] == "mode" and set(metrics.ALL_COLUMNS) <= set(cols):
        parsed = [{"mode": r["mode"], **{c: (float(r[c]) if r[c] != "" else None) for c in metrics.ALL_COLUMNS}} for r in rows]
        print(trainer.render_table(parsed))
        return 0
    if cols[:3] == ["metric", "mean", "std"]:
        rep = metrics.AggregateReport({r["metric"]: float(r["mean"]) for r in rows},
                                      {r["metric"]: float(r["std"]) for r in rows}, int(rows[0]["count"]))
        print(rep.to_table())
        return 0

    def fmt(v):
        try:
            f = float(v)
        except ValueError:
            return v
        return v if f.is_integer() and "." not in v and "e" not in v else f"{f:.3f}"

    cells = [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[j]) for row in cells)) for j, c in enumerate(cols)]
    print("  ".join(c.rjust(w) for c, w in zip(cols, widths)))
    for row in cells:
        print("  ".join(v.rjust(w) for v, w in zip(row, widths)))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "d2sn": cmd_d2sn,
    "eval": cmd_eval,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from colgeo import kernels

    kernels.set_threads()
    try:
        return COMMANDS[args.command](args)
    except CheckFailed as exc:
        print(f"colgeo {args.command}: {exc}", file=sys.stderr)
        return 1
    except dataio.ManifestError as exc:
        print(f"colgeo {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, TypeError) as exc:
        print(f"colgeo {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
