"""Finite-difference checks of the composite blocks, the losses and the full model."""
from __future__ import annotations

import numpy as np

from colgeo import losses
from colgeo import model as M
from colgeo import tensor as T
from colgeo.geometry import CameraIntrinsics, depth_to_normals_t
from colgeo.gradcheck import Check, GradCheckResult, grad_check, param_grad_check
from colgeo.tensor import Tensor

SMALL = dict(channels=(4, 4, 8, 8), cbam_ratio=2, max_depth=100.0)


def _unit(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-3, keepdims=True)


def _sample(params: dict, rng, n: int) -> list[tuple[str, int]]:
    """``n`` distinct (name, flat index) pairs drawn uniformly over all entries."""
    names = list(params)
    sizes = np.array([params[k].size for k in names])
    flat = rng.choice(sizes.sum(), size=min(n, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for f in np.sort(flat):
        j = int(np.searchsorted(bounds, f, side="right"))
        out.append((names[j], int(f - (bounds[j - 1] if j else 0))))
    return out


def _cbam_params(rng, c=4, ratio=2, name="cbam"):
    lay = M._Layout()
    lay.cbam(name, c, M.ModelConfig(channels=(c, c, c, c), cbam_ratio=ratio))
    return {k: Tensor(rng.normal(scale=0.5, size=s), requires_grad=True) for k, s in lay.shapes.items()}


def _reduction_params(rng, name, c_in, c_out):
    lay = M._Layout()
    lay.reduction(name, c_in, c_out)
    return {k: Tensor(rng.normal(scale=0.5, size=s), requires_grad=True) for k, s in lay.shapes.items()}


def _smooth_depth(rng, h, w):
    y, x = np.mgrid[0:h, 0:w] / max(h, w)
    a, b, c = rng.uniform(-8, 8, 3)
    return 40.0 + a * x + b * y + c * x * y + rng.uniform(-0.3, 0.3, (h, w))


def _smooth_region(params, cfg, cam, rgb, gn, margin: float = 0.05) -> np.ndarray:
    """Pixels where the objective is differentiable with room to spare.

    Excludes pixels whose predicted normal is within ``margin`` of the target
    in some component (the kink of the absolute value) and pixels where the
    warped normal is nearly perpendicular to the viewing ray (where its
    camera-facing sign flips).
    """
    with T.no_grad():
        d, n = M.forward(rgb, params, cfg)
        warped = depth_to_normals_t(d[:, 0], cam).data
    u, v = cam.rays()
    ray = np.stack([u, v, np.ones_like(u)])
    ray = ray / np.linalg.norm(ray, axis=0)
    facing = np.abs(np.sum(warped * ray, axis=-3))
    ok = facing > margin
    if n is not None:
        ok &= np.all(np.abs(n.data - gn) > margin, axis=-3)
    return ok


def block_checks() -> list[Check]:
    checks: list[Check] = []

    def cbam_input(rng):
        p = _cbam_params(rng)
        w = rng.normal(size=(4, 4, 4))
        return grad_check(lambda t: (M.cbam(t, p) * w).sum(), rng.normal(size=(4, 4, 4)))

    def cbam_weights(rng):
        p = _cbam_params(rng)
        x = Tensor(rng.normal(size=(4, 4, 4)))
        w = rng.normal(size=(4, 4, 4))
        return param_grad_check(lambda: (M.cbam(x, p) * w).sum(), p, _sample(p, rng, 40))

    def lpg(rng):
        p = _reduction_params(rng, "lpg", 8, 3)
        w = rng.normal(size=(1, 16, 16))
        fn = lambda t: (M.lpg_block(t, p, "lpg", 4, 100.0) * w).sum() * 0.01  # noqa: E731
        x = rng.normal(size=(8, 4, 4))
        return grad_check(fn, x).merge(param_grad_check(lambda: fn(Tensor(x)), p, _sample(p, rng, 30)))

    def unc(rng):
        p = _reduction_params(rng, "unc", 8, 2)
        w = rng.normal(size=(3, 8, 8))
        fn = lambda t: (M.unc_block(t, p, "unc", 2) * w).sum()  # noqa: E731
        x = rng.normal(size=(8, 4, 4))
        return grad_check(fn, x).merge(param_grad_check(lambda: fn(Tensor(x)), p, _sample(p, rng, 30)))

    def d2sn(rng):
        cam = CameraIntrinsics.centered(8, 8, 60.0)
        w = rng.normal(size=(3, 8, 8))
        return grad_check(lambda t: (depth_to_normals_t(t, cam) * w).sum(), _smooth_depth(rng, 8, 8))

    def silog(rng):
        gt = rng.uniform(5, 80, (6, 6))
        mask = rng.uniform(size=(6, 6)) > 0.2
        return grad_check(lambda t: losses.silog_loss(t, gt, mask), rng.uniform(5, 80, (6, 6)))

    def mae(rng):
        gt, mask = _unit(rng, (3, 5, 5)), rng.uniform(size=(5, 5)) > 0.2
        return grad_check(lambda t: losses.mae_normal_loss(t, gt, mask), _unit(rng, (3, 5, 5)))

    def xtc(rng):
        other, mask = _unit(rng, (3, 5, 5)), rng.uniform(size=(5, 5)) > 0.2
        return grad_check(lambda t: losses.xtc_loss(t, Tensor(other), mask), _unit(rng, (3, 5, 5)))

    def _small_setup(rng, mode="cbam-mtl-xtc"):
        cfg = M.ModelConfig.for_mode(mode, **SMALL)
        params = M.init_parameters(cfg, int(rng.integers(2**31)))
        cam = CameraIntrinsics.centered(16, 16, 60.0)
        rgb = rng.uniform(0, 1, (2, 3, 16, 16))
        gt = np.stack([_smooth_depth(rng, 16, 16) for _ in range(2)])
        gn = _unit(rng, (2, 3, 16, 16))
        mask = rng.uniform(size=(2, 16, 16)) > 0.1
        return cfg, params, cam, rgb, gt, gn, mask & _smooth_region(params, cfg, cam, rgb, gn)

    def final_objective(cfg, params, cam, rgb, gt, gn, mask, xtc_only=False):
        d, n = M.forward(rgb, params, cfg)
        d = d[:, 0]
        l_x = losses.xtc_loss(n, depth_to_normals_t(d, cam), mask)
        if xtc_only:
            return l_x
        return losses.final_loss(losses.silog_loss(d, gt, mask), losses.mae_normal_loss(n, gn, mask), l_x)

    def xtc_into_depth_head(rng):
        setup = _small_setup(rng)
        params = setup[1]
        head = {k: v for k, v in params.items() if k.startswith("dep.out") or k.startswith("dep.head1")}
        coords = [(k, i) for k in head for i in range(head[k].size)]
        for p in params.values():
            p.grad = None
        final_objective(*setup, xtc_only=True).backward()
        if not any(np.any(params[k].grad != 0) for k in head):
            return GradCheckResult(float("inf"), 0)  # the consistency term must reach the depth head
        return param_grad_check(lambda: final_objective(*setup, xtc_only=True), params, coords)

    def full_model(rng):
        setup = _small_setup(rng)
        params = setup[1]
        # candidates beyond 100 replace coordinates whose stencil crosses a kink
        return param_grad_check(lambda: final_objective(*setup), params, _sample(params, rng, 300), required=100)

    checks += [
        Check("block:cbam-input", cbam_input),
        Check("block:cbam-weights", cbam_weights),
        Check("block:lpg", lpg),
        Check("block:unc", unc),
        Check("block:d2sn", d2sn),
        Check("loss:silog", silog),
        Check("loss:mae", mae),
        Check("loss:xtc", xtc),
        Check("objective:xtc->depth-head", xtc_into_depth_head),
        Check("objective:full-model", full_model),
    ]
    return checks
