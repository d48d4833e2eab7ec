import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from colgeo import losses
from colgeo.geometry import CameraIntrinsics, depth_to_normals_t
from colgeo.gradcheck import grad_check
from colgeo.losses import LossWeights, SilogParams
from colgeo.tensor import Tensor

depths = arrays(np.float64, (4, 5), elements=st.floats(0.5, 90))


def test_silog_worked_example():
    val = losses.silog_loss(Tensor([2.0, 2.0]), [1.0, 2.0], params=SilogParams(10.0, 0.85)).item()
    assert val == pytest.approx(3.71660, abs=1e-4)


def test_silog_zero_at_truth(rng):
    gt = rng.uniform(1, 50, (6, 6))
    assert losses.silog_loss(Tensor(gt), gt).item() == 0.0


@given(depths, st.sampled_from([0.5, 2.0, 3.0, 10.0]))
def test_silog_scale_invariant_at_lambda_one(gt, s):
    assert abs(losses.silog_loss(Tensor(s * gt), gt, params=SilogParams(10.0, 1.0)).item()) < 1e-10


@given(depths, depths)
def test_silog_nonnegative(pred, gt):
    assert losses.silog_loss(Tensor(pred), gt).item() >= 0.0


def test_silog_ignores_masked_pixels(rng):
    gt = rng.uniform(1, 50, (5, 5))
    pred = gt * 1.1
    mask = np.ones((5, 5), bool)
    mask[0, 0] = False
    pred2 = pred.copy()
    pred2[0, 0] = 1e3
    a = losses.silog_loss(Tensor(pred), gt, mask).item()
    assert losses.silog_loss(Tensor(pred2), gt, mask).item() == a


def test_silog_rejects_empty_mask_and_nonpositive_depth():
    with pytest.raises(ValueError):
        losses.silog_loss(Tensor([1.0]), [1.0], np.array([False]))
    with pytest.raises(ValueError):
        losses.silog_loss(Tensor([0.0, 1.0]), [1.0, 1.0])


def _pix(v):
    return np.asarray(v, dtype=np.float64).reshape(3, 1, 1)


def test_mae_examples(rng):
    assert losses.mae_normal_loss(Tensor(_pix([0, 0, 1])), _pix([0, 1, 0])).item() == pytest.approx(2 / 3, abs=1e-6)
    n = rng.normal(size=(3, 4, 4))
    assert losses.mae_normal_loss(Tensor(n), n).item() == 0.0


def test_mae_permutation_invariant(rng):
    a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    perm = rng.permutation(16)
    pa = a.reshape(3, 16)[:, perm].reshape(3, 4, 4)
    pb = b.reshape(3, 16)[:, perm].reshape(3, 4, 4)
    assert losses.mae_normal_loss(Tensor(a), b).item() == pytest.approx(losses.mae_normal_loss(Tensor(pa), pb).item(), rel=1e-14)


def test_xtc_examples(rng):
    n = rng.normal(size=(3, 4, 4))
    assert losses.xtc_loss(Tensor(n), Tensor(n)).item() == 0.0
    val = losses.xtc_loss(Tensor(_pix([0, 0, 0])), Tensor(_pix([0.3, 0, -0.4]))).item()
    assert val == pytest.approx(0.288675, abs=1e-6)


def test_xtc_gradient_through_d2sn(rng):
    cam = CameraIntrinsics.centered(8, 8, 60.0)
    y, x = np.mgrid[0:8, 0:8] / 8.0
    depth = 40 + 5 * x - 3 * y + rng.uniform(-0.2, 0.2, (8, 8))
    other = rng.normal(size=(3, 8, 8))
    res = grad_check(lambda t: losses.xtc_loss(Tensor(other), depth_to_normals_t(t, cam)), depth)
    assert res.max_error < 1e-4


def test_mtl_loss():
    assert losses.mtl_loss(2.0, 4.0) == 3.0
    assert losses.mtl_loss(0.0, 0.0) == 0.0
    assert losses.mtl_loss(0.7, 0.7) == 0.7


def test_final_loss_examples():
    assert losses.final_loss(2.0, 1.0, 0.5, LossWeights(0.5, 0.3, 0.2)) == 1.4
    assert losses.final_loss(0.0, 0.0, 0.0) == 0.0
    assert losses.final_loss(1.0, 1.0, 1.0, LossWeights(0.4, 0.3, 0.3)) == 1.0


def test_final_loss_gradient_is_the_weights():
    parts = [Tensor(v, requires_grad=True) for v in (2.0, 1.0, 0.5)]
    losses.final_loss(*parts).backward()
    assert [float(p.grad) for p in parts] == [0.5, 0.3, 0.2]


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        LossWeights(1.2, -0.2, 0.0)
    with pytest.raises(TypeError):
        losses.final_loss(1.0, 1.0, 1.0, (0.5, 0.3, 0.2))


def test_silog_gradient(rng):
    gt = rng.uniform(5, 80, (5, 5))
    assert grad_check(lambda t: losses.silog_loss(t, gt), rng.uniform(5, 80, (5, 5))).max_error < 1e-6
