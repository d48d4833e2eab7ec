"""Central finite-difference gradient checking and the registry of checks.

``grad_check`` compares the reverse-mode gradient of a scalar function with
central differences at a base step of 1e-3, by default Richardson-extrapolated
over ``h``, ``h/2`` and ``h/4`` so that truncation error does not masquerade as
a gradient error on coordinates with small derivatives; ``difference_method``
switches the default to the plain central difference. Coordinates whose
stencil crosses a kink are reported as skipped rather than compared.
``registered_checks`` lists every differentiable op and composite block
exercised by the ``gradcheck`` CLI subcommand.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from colgeo import tensor as T
from colgeo.tensor import Tensor


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    err = np.abs(analytic - numeric) / denom
    # NaN anywhere counts as a failure
    return np.where(np.isfinite(err), err, np.inf)


METHODS = ("central", "richardson")
_method: contextvars.ContextVar[str] = contextvars.ContextVar("difference_method", default="richardson")


@contextlib.contextmanager
def difference_method(method: str):
    """Set the stencil used by checks that do not name one explicitly."""
    if method not in METHODS:
        raise ValueError(f"unknown difference method {method!r}; expected one of {METHODS}")
    token = _method.set(method)
    try:
        yield
    finally:
        _method.reset(token)


@dataclass
class GradCheckResult:
    """Worst relative error over the compared coordinates.

    ``skipped`` counts coordinates whose difference stencil crossed a kink
    (some non-smooth op changed branch), where finite differences are not a
    valid oracle.
    """

    max_error: float
    checked: int
    skipped: int = 0

    def __float__(self) -> float:
        return self.max_error

    def merge(self, other: "GradCheckResult") -> "GradCheckResult":
        return GradCheckResult(max(self.max_error, other.max_error), self.checked + other.checked,
                               self.skipped + other.skipped)


def _offsets(step: float, method: str) -> list[float]:
    if method == "central":
        return [step]
    if method == "richardson":
        return [step, step / 2, step / 4]
    raise ValueError(f"unknown difference method {method!r}; expected one of {METHODS}")


def _difference(evaluate: Callable[[float], tuple[float, list]], step: float, method: str | None):
    """Finite-difference derivative of ``evaluate(offset)`` at zero.

    ``evaluate`` returns ``(value, branch log)``. ``"central"`` is the plain
    central difference at ``step``; ``"richardson"`` runs a two-level
    Richardson tableau over the central differences at ``h``, ``h/2`` and
    ``h/4``, cancelling the ``h^2`` and ``h^4`` error terms. Returns
    ``(estimate, smooth)`` where ``smooth`` is False if any stencil point took
    a different branch than the base point. ``method=None`` uses the default
    set by ``difference_method``.
    """
    method = method or _method.get()
    offsets = _offsets(step, method)
    _, base = evaluate(0.0)
    smooth = True
    d = []
    for h in offsets:
        fp, bp = evaluate(h)
        fm, bm = evaluate(-h)
        smooth &= bp == base and bm == base
        d.append((fp - fm) / (2.0 * h))
    if method == "central":
        return d[0], smooth
    r1 = [(4.0 * d[i + 1] - d[i]) / 3.0 for i in range(2)]
    return (16.0 * r1[1] - r1[0]) / 15.0, smooth


def _traced(fn: Callable[[], Tensor]) -> tuple[float, list]:
    with T.no_grad(), T.record_branches() as log:
        value = fn().item()
    return value, log


def numeric_grad(
    function: Callable[[Tensor], Tensor],
    point: np.ndarray,
    step: float = 1e-3,
    coords: Iterable[int] | None = None,
    method: str | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Finite differences of ``function`` at ``point`` over ``coords`` (flat indices).

    Returns ``(indices, estimates, smooth flags)``.
    """
    base = np.array(point, dtype=np.float64)
    flat = base.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(list(coords), dtype=int)
    out = np.empty(idx.size)
    smooth = np.ones(idx.size, dtype=bool)
    for k, i in enumerate(idx):
        orig = flat[i]

        def evaluate(offset):
            flat[i] = orig + offset
            try:
                return _traced(lambda: function(Tensor(base)))
            finally:
                flat[i] = orig

        out[k], smooth[k] = _difference(evaluate, step, method)
    return idx, out, smooth


def analytic_grad(function: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    leaf = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    function(leaf).backward()
    if leaf.grad is None:
        return np.zeros(leaf.shape)
    return leaf.grad


def _result(ana: np.ndarray, num: np.ndarray, smooth: np.ndarray) -> GradCheckResult:
    err = relative_errors(ana[smooth], num[smooth])
    return GradCheckResult(float(err.max()) if err.size else 0.0, int(smooth.sum()), int((~smooth).sum()))


def grad_check(
    function: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-3,
    coords: Iterable[int] | None = None,
    method: str | None = None,
) -> GradCheckResult:
    """Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)."""
    point = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    ana = analytic_grad(function, point).reshape(-1)
    idx, num, smooth = numeric_grad(function, point, step, coords, method)
    return _result(ana[idx], num, smooth)


def param_grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict,
    coords: Iterable[tuple[str, int]],
    step: float = 1e-3,
    method: str | None = None,
    required: int | None = None,
) -> GradCheckResult:
    """Like ``grad_check`` but over ``(name, flat index)`` entries of named parameter tensors.

    With ``required``, candidates are consumed from ``coords`` until that many
    smooth coordinates have been compared.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    grads = {n: (np.zeros(p.shape) if p.grad is None else p.grad) for n, p in params.items()}
    ana, num, smooth = [], [], []
    for n, i in coords:
        if required is not None and sum(smooth) >= required:
            break
        p = params[n]
        at = np.unravel_index(i, p.shape)
        orig = p.data[at]

        def evaluate(offset):
            p.data[at] = orig + offset
            try:
                return _traced(loss_fn)
            finally:
                p.data[at] = orig

        est, ok = _difference(evaluate, step, method)
        ana.append(grads[n][at])
        num.append(est)
        smooth.append(ok)
    for p in params.values():
        p.grad = None
    res = _result(np.array(ana), np.array(num), np.array(smooth, dtype=bool))
    if required is not None and res.checked < required:
        res.max_error = float("inf")  # not enough differentiable coordinates to compare
    return res


@dataclass
class Check:
    name: str
    run: Callable[[np.random.Generator], GradCheckResult]


def _away_from(x: np.ndarray, kinks: Iterable[float], margin: float) -> np.ndarray:
    """Nudge entries so none sits within ``margin`` of a non-differentiable point."""
    for k in kinks:
        close = np.abs(x - k) < margin
        x = np.where(close, k + np.sign(x - k + 1e-300) * margin * 2, x)
    return x


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()


def _op_checks() -> list[Check]:
    checks: list[Check] = []

    def unary_check(name, lo, hi, kinks=()):
        def run(rng):
            x = _away_from(rng.uniform(lo, hi, (3, 4)), kinks, 0.05)
            w = rng.normal(size=(3, 4))
            return grad_check(lambda t: _weighted(T.unary(name, t), w), x)

        return Check(f"unary:{name}", run)

    for name in ("relu", "elu", "abs"):
        checks.append(unary_check(name, -2, 2, kinks=(0.0,)))
    for name in ("sigmoid", "sin", "cos", "neg", "square", "exp"):
        checks.append(unary_check(name, -2, 2))
    for name in ("log", "sqrt"):
        checks.append(unary_check(name, 0.2, 3))

    def scale_run(rng):
        w = rng.normal(size=(3, 4))
        return grad_check(lambda t: _weighted(T.scale(t, -2.5), w), rng.normal(size=(3, 4)))

    checks.append(Check("unary:scale", scale_run))

    def binary_check(name, fn, b_shape):
        def run(rng):
            a = rng.normal(size=(2, 3, 4))
            b = rng.uniform(0.5, 2.0, b_shape) * rng.choice([-1, 1], b_shape)
            w = rng.normal(size=(2, 3, 4))
            ea = grad_check(lambda t: _weighted(fn(t, Tensor(b)), w), a)
            eb = grad_check(lambda t: _weighted(fn(Tensor(a), t), w), b)
            return ea.merge(eb)

        return Check(f"binary:{name}{'(bcast)' if b_shape != (2, 3, 4) else ''}", run)

    for name, fn in (("add", T.add), ("sub", T.sub), ("mul", T.mul), ("div", T.div)):
        checks.append(binary_check(name, fn, (2, 3, 4)))
        checks.append(binary_check(name, fn, (3, 1)))

    for name in T.REDUCE:
        def run(rng, name=name):
            x = rng.normal(size=(2, 3, 4, 4))
            w = rng.normal(size=T.reduce(name, Tensor(x)).shape)
            return grad_check(lambda t: _weighted(T.reduce(name, t), w), x)

        checks.append(Check(f"reduce:{name}", run))

    def conv_check(stride, padding, dilation):
        def run(rng):
            x = rng.normal(size=(2, 5, 5))
            k = rng.normal(size=(3, 2, 3, 3))
            ho = (5 + 2 * padding - dilation * 2 - 1) // stride + 1
            w = rng.normal(size=(3, ho, ho))
            ex = grad_check(lambda t: _weighted(T.conv2d(t, Tensor(k), stride, padding, dilation), w), x)
            ek = grad_check(lambda t: _weighted(T.conv2d(Tensor(x), t, stride, padding, dilation), w), k)
            return ex.merge(ek)

        return Check(f"conv2d(s={stride},p={padding},d={dilation})", run)

    checks += [conv_check(1, 1, 1), conv_check(2, 1, 1), conv_check(1, 2, 2)]

    for mode in ("nearest", "bilinear"):
        def run(rng, mode=mode):
            x = rng.normal(size=(2, 3, 4))
            w = rng.normal(size=(2, 6, 8))
            return grad_check(lambda t: _weighted(T.resize(t, 2, mode), w), x)

        checks.append(Check(f"resize:{mode}", run))

    def concat_run(rng):
        a, b = rng.normal(size=(1, 3, 3)), rng.normal(size=(2, 3, 3))
        w = rng.normal(size=(3, 3, 3))
        ea = grad_check(lambda t: _weighted(T.concat([t, Tensor(b)], 0), w), a)
        eb = grad_check(lambda t: _weighted(T.concat([Tensor(a), t], 0), w), b)
        return ea.merge(eb)

    checks.append(Check("concat", concat_run))

    def weighted_sum_run(rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(1, 3))
        w = rng.normal(size=(2, 3))
        ea = grad_check(lambda t: _weighted(T.weighted_sum([t, Tensor(b)], [0.3, -1.7]), w), a)
        eb = grad_check(lambda t: _weighted(T.weighted_sum([Tensor(a), t], [0.3, -1.7]), w), b)
        return ea.merge(eb)

    checks.append(Check("weighted_sum", weighted_sum_run))

    def slice_run(rng):
        x = rng.normal(size=(3, 4, 5))
        w = rng.normal(size=(2, 4, 3))
        return grad_check(lambda t: _weighted(t[1:, :, 1:4], w), x)

    checks.append(Check("getitem", slice_run))

    def reshape_run(rng):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(2, 6))
        return grad_check(lambda t: _weighted(t.reshape(2, 6), w), x)

    checks.append(Check("reshape", reshape_run))

    def clamp_run(rng):
        x = _away_from(rng.normal(size=(3, 4)), (0.05,), 0.05)
        w = rng.normal(size=(3, 4))
        return grad_check(lambda t: _weighted(T.clamp_min(t, 0.05), w), x)

    checks.append(Check("clamp_min", clamp_run))
    return checks


def registered_checks() -> list[Check]:
    """All elementary-op checks followed by the composite-block checks."""
    from colgeo.blockchecks import block_checks

    return _op_checks() + block_checks()


def run_all(seed: int = 0, points: int = 1, method: str = "richardson") -> list[tuple[str, GradCheckResult]]:
    """Run every registered check at ``points`` random points; worst case per check."""
    results = []
    with difference_method(method):
        for check in registered_checks():
            total = GradCheckResult(0.0, 0, 0)
            for p in range(points):
                rng = np.random.default_rng([seed, p, sum(map(ord, check.name))])
                total = total.merge(check.run(rng))
            results.append((check.name, total))
    return results
