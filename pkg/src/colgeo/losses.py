"""Training losses: SILog depth loss, L1 normal loss, RMSE cross-task consistency
loss and their weighted combinations."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from colgeo import tensor as T
from colgeo.tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.3
    lambda3: float = 0.2

    def __post_init__(self):
        w = (self.lambda1, self.lambda2, self.lambda3)
        if any(x < 0 for x in w):
            raise ValueError(f"loss weights must be nonnegative, got {w}")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got {sum(w)!r}")


@dataclass(frozen=True)
class SilogParams:
    alpha: float = 10.0
    lam: float = 0.85

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def _mask(mask, shape) -> np.ndarray:
    m = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty mask: no valid pixels")
    return m


def _sqrt0(x: Tensor) -> Tensor:
    # sqrt that returns an exact (gradient-free) zero at zero
    if x.data <= 0:
        return x * 0.0
    return T.sqrt(x)


def silog_loss(pred: Tensor, gt, mask=None, params: SilogParams = SilogParams()) -> Tensor:
    """``alpha * sqrt(mean(g^2) - lam * mean(g)^2)`` with ``g = log gt - log pred`` on the mask.

    Evaluated as ``var(g) + (1 - lam) * mean(g)^2`` so that uniform rescaling
    at ``lam = 1`` cancels to rounding error rather than to ``sqrt(eps)``.
    """
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    m = _mask(mask, gt.shape)
    mf = m.astype(np.float64)
    if np.any(pred.data[m] <= 0) or np.any(gt[m] <= 0):
        raise ValueError("depths must be positive on the mask")
    n = mf.sum()
    # off-mask entries are replaced by 1 so the log stays defined
    safe_pred = pred * mf + (1.0 - mf)
    log_gt = np.log(np.where(m, gt, 1.0))
    g = (log_gt - T.log(safe_pred)) * mf
    gbar = g.sum() * (1.0 / n)
    dev = (g - gbar) * mf
    var = (dev * dev).sum() * (1.0 / n)
    d = var + (gbar * gbar) * (1.0 - params.lam)
    return _sqrt0(d) * params.alpha


def mae_normal_loss(pred: Tensor, gt, mask=None) -> Tensor:
    """Mean absolute difference over valid pixels and the three components.

    ``pred``/``gt`` are ``(..., 3, H, W)``; ``mask`` is ``(..., H, W)``.
    """
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    m = _mask(mask, gt.shape[:-3] + gt.shape[-2:])
    mf = np.expand_dims(m.astype(np.float64), -3)
    n = 3.0 * m.sum()
    return (T.absolute(gt - pred) * mf).sum() * (1.0 / n)


def xtc_loss(pred_sn: Tensor, warped_sn: Tensor, mask=None) -> Tensor:
    """RMSE between predicted normals and normals warped from predicted depth."""
    pred_sn, warped_sn = T.as_tensor(pred_sn), T.as_tensor(warped_sn)
    if pred_sn.shape != warped_sn.shape:
        raise ValueError(f"shape mismatch {pred_sn.shape} vs {warped_sn.shape}")
    shape = pred_sn.shape
    m = _mask(mask, shape[:-3] + shape[-2:])
    mf = np.expand_dims(m.astype(np.float64), -3)
    diff = (warped_sn - pred_sn) * mf
    return _sqrt0((diff * diff).sum() * (1.0 / (3.0 * m.sum())))


def _combine(terms, weights):
    # a correctly rounded weighted sum, so e.g. (2, 1, 0.5) . (0.5, 0.3, 0.2) is exactly 1.4
    if any(isinstance(t, Tensor) for t in terms):
        return T.weighted_sum(terms, weights)
    return math.fsum(float(t) * w for t, w in zip(terms, weights))


def mtl_loss(l_depth, l_sn):
    """Equal-weight two-task objective."""
    return _combine((l_depth, l_sn), (0.5, 0.5))


def final_loss(l_depth, l_sn, l_xtc, w: LossWeights = LossWeights()):
    if not isinstance(w, LossWeights):
        raise TypeError("weights must be a LossWeights instance")
    return _combine((l_depth, l_sn, l_xtc), (w.lambda1, w.lambda2, w.lambda3))
