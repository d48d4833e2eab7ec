"""Depth and surface-normal evaluation metrics with mean/std aggregation."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np

DEPTH_COLUMNS = ("abs_rel", "sq_rel", "log10", "rmse", "rmse_log", "silog", "delta1", "delta2", "delta3")
NORMAL_COLUMNS = ("mean_ang", "median_ang", "delta_11_25", "delta_22_5", "delta_30")
ALL_COLUMNS = DEPTH_COLUMNS + NORMAL_COLUMNS

HEADERS = {
    "abs_rel": "Abs Rel",
    "sq_rel": "Sq Rel",
    "log10": "log10",
    "rmse": "RMSE",
    "rmse_log": "RMSE_log",
    "silog": "SILog",
    "delta1": "d1",
    "delta2": "d2",
    "delta3": "d3",
    "mean_ang": "Mean Ang",
    "median_ang": "Median Ang",
    "delta_11_25": "d11.25",
    "delta_22_5": "d22.5",
    "delta_30": "d30",
}


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    log10: float
    rmse: float
    rmse_log: float
    silog: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass
class NormalMetrics:
    mean_ang: float
    median_ang: float
    delta_11_25: float
    delta_22_5: float
    delta_30: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _select(pred, gt, mask, trailing: int = 0):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    lead = gt.shape[: gt.ndim - trailing]
    m = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty mask: no valid pixels")
    return pred[m], gt[m]


def depth_metrics(pred, gt, mask=None, silog_scale: float = 100.0) -> DepthMetrics:
    """Standard depth error/accuracy metrics over the valid pixels."""
    p, g = _select(pred, gt, mask)
    if np.any(p <= 0) or np.any(g <= 0):
        raise ValueError("depths must be positive on the mask")
    diff = p - g
    lg = np.log(p) - np.log(g)
    lgbar = lg.mean()
    var = np.mean((lg - lgbar) ** 2)
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean(lg**2))),
        silog=float(silog_scale * np.sqrt(max(var, 0.0))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def angles_deg(pred, gt) -> np.ndarray:
    dot = np.clip(np.sum(pred * gt, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dot))


def normal_metrics(pred, gt, mask=None) -> NormalMetrics:
    """Angular error statistics; vectors on the last axis (``H x W x 3``)."""
    p, g = _select(pred, gt, mask, trailing=1)
    ang = angles_deg(p, g)
    srt = np.sort(ang)
    return NormalMetrics(
        mean_ang=float(ang.mean()),
        median_ang=float(srt[(srt.size - 1) // 2]),  # lower median
        delta_11_25=float(np.mean(ang < 11.25)),
        delta_22_5=float(np.mean(ang < 22.5)),
        delta_30=float(np.mean(ang < 30.0)),
    )


@dataclass
class AggregateReport:
    mean: dict[str, float]
    std: dict[str, float]
    count: int

    def columns(self) -> list[str]:
        return [c for c in ALL_COLUMNS if c in self.mean]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["metric", "mean", "std", "count"])
        for c in self.columns():
            w.writerow([c, repr(self.mean[c]), repr(self.std[c]), self.count])
        return buf.getvalue()

    def to_table(self) -> str:
        cols = self.columns()
        cells = [f"{self.mean[c]:.3f}±{self.std[c]:.3f}" for c in cols]
        widths = [max(len(HEADERS[c]), len(cell)) for c, cell in zip(cols, cells)]
        head = "  ".join(HEADERS[c].rjust(wd) for c, wd in zip(cols, widths))
        row = "  ".join(cell.rjust(wd) for cell, wd in zip(cells, widths))
        return f"{head}\n{row}\n(n={self.count})"


def _as_dict(m) -> dict[str, float]:
    if isinstance(m, dict):
        return m
    return {f.name: getattr(m, f.name) for f in fields(m)}


def aggregate(frames) -> AggregateReport:
    """Per-metric mean and population std over frames (fixed summation order)."""
    frames = [_as_dict(f) for f in frames]
    if not frames:
        raise ValueError("cannot aggregate an empty list of frames")
    keys = [c for c in ALL_COLUMNS if c in frames[0]] + [k for k in frames[0] if k not in ALL_COLUMNS]
    mean, std = {}, {}
    for k in keys:
        vals = np.sort(np.array([f[k] for f in frames], dtype=np.float64))
        mu = vals.sum() / vals.size
        mean[k] = float(mu)
        std[k] = float(np.sqrt(np.sum((vals - mu) ** 2) / vals.size))
    return AggregateReport(mean, std, len(frames))
