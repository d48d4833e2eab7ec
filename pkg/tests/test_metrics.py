import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from colgeo import metrics


def brute_depth(pred, gt, mask):
    """Per-pixel python loops; the reference for the vectorised metrics."""
    p = [float(a) for a, m in zip(pred.ravel(), mask.ravel()) if m]
    g = [float(b) for b, m in zip(gt.ravel(), mask.ravel()) if m]
    n = len(p)
    abs_rel = sq_rel = log10 = se = sle = 0.0
    logs = []
    hits = [0, 0, 0]
    for a, b in zip(p, g):
        abs_rel += abs(a - b) / b
        sq_rel += (a - b) ** 2 / b
        log10 += abs(math.log10(a) - math.log10(b))
        se += (a - b) ** 2
        d = math.log(a) - math.log(b)
        sle += d * d
        logs.append(d)
        r = max(a / b, b / a)
        for i, thr in enumerate((1.25, 1.25**2, 1.25**3)):
            hits[i] += r < thr
    mu = sum(logs) / n
    var = sum((d - mu) ** 2 for d in logs) / n
    return {
        "abs_rel": abs_rel / n, "sq_rel": sq_rel / n, "log10": log10 / n, "rmse": math.sqrt(se / n),
        "rmse_log": math.sqrt(sle / n), "silog": 100 * math.sqrt(var),
        "delta1": hits[0] / n, "delta2": hits[1] / n, "delta3": hits[2] / n,
    }


def brute_normal(pred, gt, mask):
    angs = []
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if mask[i, j]:
                dot = sum(pred[i, j, c] * gt[i, j, c] for c in range(3))
                angs.append(math.degrees(math.acos(min(1.0, max(-1.0, dot)))))
    angs_sorted = sorted(angs)
    n = len(angs)
    return {
        "mean_ang": sum(angs) / n, "median_ang": angs_sorted[(n - 1) // 2],
        "delta_11_25": sum(a < 11.25 for a in angs) / n, "delta_22_5": sum(a < 22.5 for a in angs) / n,
        "delta_30": sum(a < 30 for a in angs) / n,
    }


def random_pair(rng):
    gt = rng.uniform(1, 100, (16, 16))
    pred = gt * np.exp(rng.normal(0, 0.3, (16, 16)))
    mask = rng.uniform(size=(16, 16)) > 0.2
    return pred, gt, mask


def unit(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_depth_metrics_match_brute_force(rng):
    for _ in range(20):
        pred, gt, mask = random_pair(rng)
        got = metrics.depth_metrics(pred, gt, mask).as_dict()
        ref = brute_depth(pred, gt, mask)
        for k in ref:
            assert got[k] == pytest.approx(ref[k], abs=1e-9), k


def test_normal_metrics_match_brute_force(rng):
    for _ in range(20):
        gt = unit(rng, (16, 16, 3))
        pred = unit(rng, (16, 16, 3)) * 0.3 + gt
        pred /= np.linalg.norm(pred, axis=-1, keepdims=True)
        mask = rng.uniform(size=(16, 16)) > 0.2
        got = metrics.normal_metrics(pred, gt, mask).as_dict()
        ref = brute_normal(pred, gt, mask)
        for k in ref:
            assert got[k] == pytest.approx(ref[k], abs=1e-9), k


def test_delta_example():
    m = metrics.depth_metrics(np.array([1.0, 1.2, 1.3, 2.0]), np.ones(4))
    assert (m.delta1, m.delta2, m.delta3) == (0.5, 0.75, 0.75)


def test_perfect_prediction(rng):
    gt = rng.uniform(1, 50, (8, 8))
    m = metrics.depth_metrics(gt, gt)
    assert m.abs_rel == m.rmse == m.silog == 0 and m.delta1 == m.delta2 == m.delta3 == 1
    n = unit(rng, (8, 8, 3))
    nm = metrics.normal_metrics(n, n)
    assert nm.mean_ang < 1e-5 and nm.delta_11_25 == 1.0


def test_constant_ratio():
    gt = np.linspace(1, 80, 50)
    m = metrics.depth_metrics(1.1 * gt, gt)
    assert m.abs_rel == pytest.approx(0.1, abs=1e-15) and m.delta1 == 1.0


def test_normal_examples():
    m = metrics.normal_metrics(np.array([[0.0, 0, 1]]), np.array([[0.0, 1, 0]]))
    assert m.mean_ang == pytest.approx(90.0) and m.delta_30 == 0.0
    gt = np.array([[0.0, 0, 1], [0.0, 0, 1]])
    a, b = np.radians(10), np.radians(40)
    pred = np.array([[np.sin(a), 0, np.cos(a)], [np.sin(b), 0, np.cos(b)]])
    m = metrics.normal_metrics(pred, gt)
    assert m.mean_ang == pytest.approx(25.0) and m.median_ang == pytest.approx(10.0)
    assert m.delta_11_25 == m.delta_22_5 == m.delta_30 == 0.5


@given(arrays(np.float64, 12, elements=st.floats(1, 100)), arrays(np.float64, 12, elements=st.floats(1, 100)))
def test_delta_monotone(pred, gt):
    m = metrics.depth_metrics(pred, gt)
    assert m.delta1 <= m.delta2 <= m.delta3


def test_aggregate_examples(rng):
    one = metrics.aggregate([{"delta1": 0.8}])
    assert one.std["delta1"] == 0.0
    two = metrics.aggregate([{"delta1": 0.8}, {"delta1": 1.0}])
    assert two.mean["delta1"] == pytest.approx(0.9) and two.std["delta1"] == pytest.approx(0.1)
    rows = [metrics.depth_metrics(*random_pair(rng)).as_dict() for _ in range(6)]
    a = metrics.aggregate(rows)
    b = metrics.aggregate(rows[::-1])
    assert a.mean == b.mean and a.std == b.std


def test_report_formats():
    rep = metrics.aggregate([{"abs_rel": 0.123456789, "delta1": 0.9}])
    assert "0.123456789" in rep.to_csv()
    assert "0.123±0.000" in rep.to_table()


def test_errors():
    with pytest.raises(ValueError):
        metrics.depth_metrics(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        metrics.depth_metrics(np.ones(3), np.ones(3), np.zeros(3, bool))
    with pytest.raises(ValueError):
        metrics.aggregate([])
