#!/usr/bin/env python3
"""Compare the compiled im2col/col2im kernels with the numpy fallback.

Usage:
  python benchmarks/bench_kernels.py [--repeat 20]

Prints per-shape timings for both backends and checks that their outputs are
bitwise identical. Also times one forward/backward step of the default model
at 32x32 under each backend.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from colgeo import _pykernels

try:
    from colgeo import _ckernels
except ImportError:  # extension not built
    _ckernels = None

# (channels, padded H, padded W, kernel, stride, dilation) as seen during training
SHAPES = [
    (8, 34, 34, 3, 1, 1),
    (16, 18, 18, 3, 2, 1),
    (64, 8, 8, 3, 1, 2),
    (32, 34, 34, 3, 1, 1),
]


def out_size(n, k, stride, dilation):
    return (n - dilation * (k - 1) - 1) // stride + 1


def bench_shape(shape, repeat, rng):
    c, h, w, k, s, d = shape
    xp = rng.normal(size=(8, c, h, w))
    oh, ow = out_size(h, k, s, d), out_size(w, k, s, d)
    rows = []
    results = {}
    for name, mod in (("python", _pykernels), ("cython", _ckernels)):
        if mod is None:
            continue
        cols = mod.im2col(xp, k, k, s, d, oh, ow)
        back = mod.col2im(cols, xp.shape, s, d)
        results[name] = (cols, back)
        t_fwd = min(timeit.repeat(lambda: mod.im2col(xp, k, k, s, d, oh, ow), number=1, repeat=repeat))
        t_bwd = min(timeit.repeat(lambda: mod.col2im(cols, xp.shape, s, d), number=1, repeat=repeat))
        rows.append((name, t_fwd, t_bwd))
    same = None
    if len(results) == 2:
        (a1, b1), (a2, b2) = results["python"], results["cython"]
        same = np.array_equal(a1, a2) and np.array_equal(b1, b2)
    return rows, same


def bench_model(repeat):
    import importlib
    import os

    timings = {}
    for backend in ("python", "cython"):
        if backend == "cython" and _ckernels is None:
            continue
        os.environ["COLGEO_BACKEND"] = backend
        from colgeo import kernels

        importlib.reload(kernels)
        from colgeo import losses, model

        cfg = model.ModelConfig.for_mode("cbam-mtl")
        params = model.init_parameters(cfg, 0)
        rng = np.random.default_rng(0)
        rgb = rng.uniform(size=(8, 3, 32, 32))
        gt = rng.uniform(10, 90, size=(8, 32, 32))

        def step():
            params.zero_grad()
            d, _ = model.forward(rgb, params, cfg)
            losses.silog_loss(d[:, 0], gt).backward()

        timings[backend] = min(timeit.repeat(step, number=1, repeat=max(3, repeat // 4)))
    os.environ.pop("COLGEO_BACKEND", None)
    return timings


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20, help="timing repetitions (best of)")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    if _ckernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'shape (C,H,W,k,s,d)':<24}{'backend':>8}{'im2col ms':>12}{'col2im ms':>12}  identical")
    for shape in SHAPES:
        rows, same = bench_shape(shape, args.repeat, rng)
        for name, tf, tb in rows:
            flag = "" if same is None else ("yes" if same else "NO")
            print(f"{str(shape):<24}{name:>8}{tf * 1e3:12.3f}{tb * 1e3:12.3f}  {flag}")
    model_t = bench_model(args.repeat)
    for name, t in model_t.items():
        print(f"model step (batch 8, 32x32, cbam-mtl) [{name}]: {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
