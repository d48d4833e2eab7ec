"""Deterministic mini-batch training of the multi-task model, evaluation and
the four-mode ablation ladder."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import cv2
import numpy as np

from colgeo import dataio, losses, metrics
from colgeo import model as M
from colgeo import tensor as T
from colgeo.geometry import CameraIntrinsics, angular_error_deg, depth_to_normals_t, gradient_validity
from colgeo.tensor import Tensor

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd-momentum")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs: int = 10
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: str = "cbam-mtl-xtc"
    lambda1: float = 0.5
    lambda2: float = 0.3
    lambda3: float = 0.2
    silog_alpha: float = 10.0
    silog_lambda: float = 0.85
    rotate90: bool = True
    rotation_deg: float = 15.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError("lr must be a finite nonnegative number")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.mode not in M.MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {M.MODES}")
        if self.rotation_deg < 0:
            raise ValueError("rotation_deg must be nonnegative")
        self.weights  # validates the loss weights

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.lambda1, self.lambda2, self.lambda3)

    @property
    def silog(self) -> losses.SilogParams:
        return losses.SilogParams(self.silog_alpha, self.silog_lambda)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizers (decoupled weight decay)
# ---------------------------------------------------------------------------
class Optimizer:
    def __init__(self, params: M.Parameters, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        c = self.cfg
        self.t += 1
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if c.optimizer == "adam":
                self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
                self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
                mhat = self.m[k] / (1 - c.beta1**self.t)
                vhat = self.v[k] / (1 - c.beta2**self.t)
                update = mhat / (np.sqrt(vhat) + c.adam_eps)
            else:
                self.m[k] = c.momentum * self.m[k] + g
                update = self.m[k]
            p.data = p.data - c.lr * (update + c.weight_decay * p.data)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------
def rotate_sample(rgb, depth, normals, mask, angle_deg: float, quarter_turns: int, cam: CameraIntrinsics):
    """Rotate one channel-first sample about the principal point.

    Quarter turns are exact; the residual angle uses nearest-neighbour
    resampling for the targets, with pixels rotated in from outside marked
    invalid. Normal x/y components rotate with the image.
    """
    k = quarter_turns % 4
    if k and cam.width != cam.height:
        raise ValueError("quarter-turn rotation needs a square image")
    rgb = np.rot90(rgb, k, axes=(-2, -1))
    depth = np.rot90(depth, k, axes=(-2, -1))
    normals = np.rot90(normals, k, axes=(-2, -1))
    mask = np.rot90(mask, k, axes=(-2, -1))
    if angle_deg != 0.0:
        mat = cv2.getRotationMatrix2D((cam.cx, cam.cy), angle_deg, 1.0)
        size = (cam.width, cam.height)

        def warp(a, interp):
            chans = a if a.ndim == 3 else a[None]
            out = cv2.warpAffine(np.ascontiguousarray(chans.transpose(1, 2, 0)), mat, size,
                                 flags=interp, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
            out = out.reshape(cam.height, cam.width, -1).transpose(2, 0, 1)
            return out if a.ndim == 3 else out[0]

        rgb = warp(rgb, cv2.INTER_LINEAR)
        depth = warp(depth, cv2.INTER_NEAREST)
        normals = warp(normals, cv2.INTER_NEAREST)
        mask = warp(mask.astype(np.float64), cv2.INTER_NEAREST) > 0.5
    a = np.radians(90.0 * k + angle_deg)
    c, s = np.cos(a), np.sin(a)
    nx, ny = normals[0], normals[1]
    normals = np.stack([c * nx + s * ny, -s * nx + c * ny, normals[2]])
    mask = mask & (depth > 0)
    return (np.ascontiguousarray(rgb), np.ascontiguousarray(depth),
            np.ascontiguousarray(normals), np.ascontiguousarray(mask))


def make_batch(data: dataio.FrameArrays, idx, rng, cfg: TrainConfig, cam: CameraIntrinsics):
    rgb, depth, nrm, mask = [], [], [], []
    for i in idx:
        k = int(rng.integers(4)) if cfg.rotate90 else 0
        ang = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)) if cfg.rotation_deg > 0 else 0.0
        r, d, n, m = rotate_sample(data.rgb[i], data.depth[i], data.normals[i], data.mask[i], ang, k, cam)
        rgb.append(r)
        depth.append(d)
        nrm.append(n)
        mask.append(m)
    return np.stack(rgb), np.stack(depth), np.stack(nrm), np.stack(mask)


# ---------------------------------------------------------------------------
# losses per mode
# ---------------------------------------------------------------------------
def batch_losses(params, mcfg: M.ModelConfig, cfg: TrainConfig, cam, rgb, depth, normals, mask):
    """Returns ``(total, components)`` where components hold python floats."""
    pred_d, pred_n = M.forward(rgb, params, mcfg)
    pred_d = pred_d[:, 0]
    l_d = losses.silog_loss(pred_d, depth, mask, cfg.silog)
    comps = {"silog": l_d.item(), "mae": 0.0, "xtc": 0.0}
    if cfg.mode in ("baseline", "cbam"):
        return l_d, comps
    l_n = losses.mae_normal_loss(pred_n, normals, mask)
    comps["mae"] = l_n.item()
    if cfg.mode == "cbam-mtl":
        return losses.mtl_loss(l_d, l_n), comps
    warped = depth_to_normals_t(pred_d, cam)
    l_x = losses.xtc_loss(pred_n, warped, gradient_validity(mask))
    comps["xtc"] = l_x.item()
    return losses.final_loss(l_d, l_n, l_x, cfg.weights), comps


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------
def predict(params, mcfg: M.ModelConfig, rgb: np.ndarray, batch_size: int = 16):
    """Inference without building a graph; returns numpy ``(depth N×H×W, normals N×3×H×W or None)``."""
    depths, normals = [], []
    with T.no_grad():
        for s in range(0, rgb.shape[0], batch_size):
            d, n = M.forward(rgb[s : s + batch_size], params, mcfg)
            depths.append(d.data[:, 0])
            if n is not None:
                normals.append(n.data)
    return np.concatenate(depths), (np.concatenate(normals) if normals else None)


def consistency_deg(pred_depth, pred_normals, mask, cam) -> float:
    """Mean angle between predicted normals and the warp of predicted depth over ``mask``."""
    with T.no_grad():
        warped = depth_to_normals_t(Tensor(pred_depth), cam).data
    m = gradient_validity(mask)
    ang = angular_error_deg(np.moveaxis(pred_normals, -3, -1)[m], np.moveaxis(warped, -3, -1)[m])
    return float(ang.mean())


def frame_metrics(pred_depth, pred_normals, data: dataio.FrameArrays) -> list[dict]:
    out = []
    for i in range(len(data)):
        m = data.mask[i]
        if not m.any():
            continue
        row = metrics.depth_metrics(pred_depth[i], data.depth[i], m).as_dict()
        if pred_normals is not None:
            row.update(metrics.normal_metrics(
                np.moveaxis(pred_normals[i], 0, -1), np.moveaxis(data.normals[i], 0, -1), m).as_dict())
        out.append(row)
    return out


def validate(params, mcfg, data: dataio.FrameArrays, cam) -> dict:
    pd, pn = predict(params, mcfg, data.rgb)
    rep = metrics.aggregate(frame_metrics(pd, pn, data))
    row = dict(rep.mean)
    if pn is not None:
        row["consistency_deg"] = consistency_deg(pd, pn, data.mask, cam)
    return row


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
STEP_FIELDS = ("step", "epoch", "loss", "silog", "mae", "xtc")


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    diverged: bool = False
    wall_clock: float = 0.0

    def metric_rows(self) -> list[dict]:
        """Epoch rows without wall-clock timing (the deterministic part)."""
        return [{k: v for k, v in r.items() if k != "wall"} for r in self.epochs]

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(STEP_FIELDS)
        for r in self.steps:
            w.writerow([r[k] if isinstance(r[k], int) else repr(r[k]) for k in STEP_FIELDS])
        return buf.getvalue()

    def epochs_csv(self) -> str:
        keys = []
        for r in self.epochs:
            keys += [k for k in r if k not in keys]
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(keys)
        for r in self.epochs:
            w.writerow([repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in keys])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "steps.csv").write_text(self.steps_csv(), encoding="utf-8")
        (out / "epochs.csv").write_text(self.epochs_csv(), encoding="utf-8")


class Dataset:
    """Train/val splits in memory plus the camera."""

    def __init__(self, train: dataio.FrameArrays, val: dataio.FrameArrays, cam: CameraIntrinsics, max_depth: float):
        self.train, self.val, self.cam, self.max_depth = train, val, cam, max_depth

    @classmethod
    def load(cls, manifest) -> "Dataset":
        man = manifest if isinstance(manifest, dataio.DatasetManifest) else dataio.load_manifest(manifest)
        tr = dataio.load_split(man, "train")
        va = dataio.load_split(man, "val")
        if len(tr) == 0 or len(va) == 0:
            raise ValueError("dataset needs non-empty train and val splits")
        return cls(tr, va, man.intrinsics, man.max_depth)


def train(dataset: Dataset, mcfg: M.ModelConfig, cfg: TrainConfig, init: M.Parameters | None = None,
          callback=None) -> tuple[dataio.Checkpoint, TrainLog]:
    """Train and return the best-validation-δ1 checkpoint and the log."""
    mcfg = replace(mcfg, **_mode_flags(cfg.mode))
    if mcfg.max_depth != dataset.max_depth:
        log.warning("model max_depth %s differs from dataset max_depth %s", mcfg.max_depth, dataset.max_depth)
    params = init if init is not None else M.init_parameters(mcfg, cfg.seed)
    opt = Optimizer(params, cfg)
    tlog = TrainLog()
    start = time.perf_counter()
    n = len(dataset.train)
    best = (-math.inf, params.arrays())
    step = 0
    for epoch in range(cfg.epochs):
        # data order and augmentation depend only on (seed, epoch): shared across modes
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            batch = make_batch(dataset.train, order[s : s + cfg.batch_size], rng, cfg, dataset.cam)
            total, comps = batch_losses(params, mcfg, cfg, dataset.cam, *batch)
            value = total.item()
            if not math.isfinite(value):
                tlog.diverged = True
                log.error("non-finite loss at step %d; keeping the last good checkpoint", step)
                break
            params.zero_grad()
            total.backward()
            if not T.parameters_grad_finite(params.values()):
                tlog.diverged = True
                log.error("non-finite gradient at step %d; keeping the last good checkpoint", step)
                break
            opt.step()
            tlog.steps.append({"step": step, "epoch": epoch, "loss": value, **comps})
            step += 1
        if tlog.diverged:
            break
        row = {"epoch": epoch, **validate(params, mcfg, dataset.val, dataset.cam)}
        row["wall"] = time.perf_counter() - start
        tlog.epochs.append(row)
        if row["delta1"] > best[0]:
            best = (row["delta1"], params.arrays())
            tlog.best_epoch = epoch
        if callback is not None:
            callback(epoch, row)
    tlog.wall_clock = time.perf_counter() - start
    ckpt = dataio.Checkpoint(
        best[1],
        {"model": mcfg.to_dict(), "train": cfg.to_dict()},
        cfg.seed,
        {"best_epoch": tlog.best_epoch, "diverged": tlog.diverged, "width": dataset.cam.width,
         "height": dataset.cam.height},
    )
    return ckpt, tlog


def _mode_flags(mode: str) -> dict:
    base = M.ModelConfig.for_mode(mode)
    return {"use_cbam": base.use_cbam, "normals": base.normals}


def model_from_checkpoint(ckpt: dataio.Checkpoint) -> tuple[M.ModelConfig, M.Parameters]:
    return M.ModelConfig.from_dict(ckpt.config["model"]), M.Parameters.from_arrays(ckpt.params)


def evaluate(ckpt: dataio.Checkpoint, manifest, split: str = "val", error_dir=None) -> metrics.AggregateReport:
    """Metrics of a checkpoint on a split; optionally writes per-frame |pred - gt| maps."""
    man = manifest if isinstance(manifest, dataio.DatasetManifest) else dataio.load_manifest(manifest)
    if split not in man.split_counts and split not in man.scenes.values():
        raise KeyError(f"dataset has no split {split!r}")
    w, h = ckpt.meta.get("width"), ckpt.meta.get("height")
    if (w, h) != (man.intrinsics.width, man.intrinsics.height):
        raise ValueError(f"checkpoint resolution {w}x{h} does not match data "
                         f"{man.intrinsics.width}x{man.intrinsics.height}")
    data = dataio.load_split(man, split)
    if len(data) == 0:
        raise ValueError(f"split {split!r} is empty")
    mcfg, params = model_from_checkpoint(ckpt)
    pd, pn = predict(params, mcfg, data.rgb)
    if error_dir is not None:
        write_error_maps(error_dir, pd, pn, data)
    return metrics.aggregate(frame_metrics(pd, pn, data))


def write_error_maps(out_dir, pred_depth, pred_normals, data: dataio.FrameArrays) -> None:
    out = Path(out_dir)
    for i in range(len(data)):
        m = data.mask[i]
        err = np.where(m, np.abs(pred_depth[i] - data.depth[i]), 0.0)
        dataio.save_error_map(err, out / f"{i:04d}_depth_err.png")
        if pred_normals is not None:
            for c, axis in enumerate("xyz"):
                e = np.where(m, np.abs(pred_normals[i, c] - data.normals[i, c]), 0.0)
                dataio.save_error_map(e, out / f"{i:04d}_normal_{axis}_err.png")


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------
@dataclass
class AblationResult:
    modes: tuple
    seeds: tuple
    runs: dict  # (mode, seed) -> best-epoch validation row
    logs: dict  # (mode, seed) -> TrainLog
    checkpoints: dict  # (mode, seed) -> Checkpoint

    def median(self, mode: str, key: str) -> float | None:
        vals = [self.runs[(mode, s)].get(key) for s in self.seeds]
        if any(v is None for v in vals):
            return None
        return float(np.median(vals))

    def table_rows(self) -> list[dict]:
        """One row per mode, 14 metric columns; normal metrics are None for depth-only modes."""
        rows = []
        for mode in self.modes:
            row = {"mode": mode}
            for c in metrics.ALL_COLUMNS:
                row[c] = self.median(mode, c)
            rows.append(row)
        return rows

    def median_seed(self, mode: str, key: str = "delta1") -> int:
        """Seed whose run attains the (lower) median of ``key``."""
        ranked = sorted(self.seeds, key=lambda s: (self.runs[(mode, s)][key], s))
        return ranked[(len(ranked) - 1) // 2]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["mode", *metrics.ALL_COLUMNS])
        for r in self.table_rows():
            w.writerow([r["mode"]] + ["" if r[c] is None else repr(r[c]) for c in metrics.ALL_COLUMNS])
        return buf.getvalue()

    def to_table(self) -> str:
        return render_table(self.table_rows())


def render_table(rows: list[dict]) -> str:
    cols = list(metrics.ALL_COLUMNS)
    cells = [[r["mode"]] + ["-" if r.get(c) is None else f"{r[c]:.3f}" for c in cols] for r in rows]
    head = ["mode"] + [metrics.HEADERS[c] for c in cols]
    widths = [max(len(head[j]), *(len(row[j]) for row in cells)) for j in range(len(head))]
    lines = ["  ".join(h.rjust(wd) if j else h.ljust(wd) for j, (h, wd) in enumerate(zip(head, widths)))]
    for row in cells:
        lines.append("  ".join(c.rjust(wd) if j else c.ljust(wd) for j, (c, wd) in enumerate(zip(row, widths))))
    return "\n".join(lines)


def ablation_run(dataset: Dataset, mcfg: M.ModelConfig, cfg: TrainConfig, seeds, modes=M.MODES,
                 out_dir=None, progress=None) -> AblationResult:
    """Train every mode for every seed and collect best-epoch validation metrics."""
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 3:
        raise ValueError("an ablation needs at least 3 seeds")
    runs, logs, ckpts = {}, {}, {}
    for seed in seeds:
        for mode in modes:
            c = replace(cfg, mode=mode, seed=seed)
            ckpt, tlog = train(dataset, mcfg, c)
            row = dict(tlog.epochs[tlog.best_epoch]) if tlog.best_epoch >= 0 else {}
            row.pop("wall", None)
            runs[(mode, seed)] = row
            logs[(mode, seed)] = tlog
            ckpts[(mode, seed)] = ckpt
            if out_dir is not None:
                d = Path(out_dir) / f"{mode}_seed{seed}"
                tlog.write(d)
                dataio.save_checkpoint(d / "best.ckpt", ckpt)
            if progress is not None:
                progress(mode, seed, row, tlog)
    res = AblationResult(tuple(modes), seeds, runs, logs, ckpts)
    if out_dir is not None:
        (Path(out_dir) / "ablation.csv").write_text(res.to_csv(), encoding="utf-8")
    return res


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def _coerce(cls, section: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(section) - set(known))
    if unknown:
        raise ValueError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    return section


def load_config(path) -> tuple[M.ModelConfig, TrainConfig, dict]:
    """Read a TOML file with ``[model]``, ``[train]`` and ``[data]`` tables."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> tuple[M.ModelConfig, TrainConfig, dict]:
    extra = sorted(set(raw) - {"model", "train", "data"})
    if extra:
        raise ValueError(f"unknown table(s): {', '.join(extra)}")
    mcfg = M.ModelConfig(**_coerce(M.ModelConfig, raw.get("model", {}), "model"))
    tcfg = TrainConfig(**_coerce(TrainConfig, raw.get("train", {}), "train"))
    return mcfg, tcfg, dict(raw.get("data", {}))


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings (values parsed as TOML literals)."""
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        try:
            parsed = tomllib.loads(f"v = {value.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = value.strip()
        out.setdefault(section, {})[name] = parsed
    return out
