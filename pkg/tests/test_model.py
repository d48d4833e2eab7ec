import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colgeo import losses
from colgeo import model as M
from colgeo import tensor as T
from colgeo.geometry import CameraIntrinsics, depth_to_normals_t
from colgeo.tensor import Tensor

SMALL = dict(channels=(4, 4, 8, 8), cbam_ratio=2)


def cbam_params(c, ratio=2, value=None, rng=None):
    lay = M._Layout()
    lay.cbam("c", c, M.ModelConfig(channels=(c, c, c, c), cbam_ratio=ratio))
    if value is None:
        return {k: Tensor(rng.normal(size=s)) for k, s in lay.shapes.items()}
    return {k: Tensor(np.full(s, value(k))) for k, s in lay.shapes.items()}


def test_cbam_with_saturated_gates_is_identity(rng):
    p = cbam_params(4, value=lambda k: 40.0 if k.endswith("mlp2.b") or k.endswith("spatial.b") else 0.0)
    x = rng.normal(size=(2, 4, 5, 5))
    np.testing.assert_array_equal(M.cbam(Tensor(x), p, "c").data, x)


@given(st.integers(0, 2**32 - 1), st.sampled_from([(4, 2), (8, 4), (6, 3)]))
def test_cbam_shape_and_contraction(seed, cr):
    rng = np.random.default_rng(seed)
    c, r = cr
    p = cbam_params(c, r, rng=rng)
    x = rng.normal(size=(c, 6, 6))
    out = M.cbam(Tensor(x), p, "c").data
    assert out.shape == x.shape
    assert np.all(np.abs(out) <= np.abs(x))


def test_cbam_rejects_mismatched_channels(rng):
    with pytest.raises(ValueError):
        M.cbam(Tensor(rng.normal(size=(6, 4, 4))), cbam_params(4, rng=rng), "c")


@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_lpg_fronto_parallel_patches_are_constant(k, rng):
    n4 = rng.uniform(5, 90, (1, 2, 3))
    z = lambda: Tensor(np.zeros((1, 2, 3)))  # noqa: E731
    out = M.lpg_from_coeffs(z(), Tensor(rng.uniform(0, 6, (1, 2, 3))), Tensor(n4), k, 2 * k, 3 * k).data
    np.testing.assert_allclose(out, np.kron(n4, np.ones((1, k, k))), rtol=1e-14)


def test_lpg_denominator_is_clamped():
    theta = Tensor(np.full((1, 1, 1), np.pi / 2))  # plane containing the viewing rays
    out = M.lpg_from_coeffs(theta, Tensor(np.zeros((1, 1, 1))), Tensor(np.ones((1, 1, 1))), 4, 4, 4).data
    assert np.all(np.isfinite(out)) and out.max() <= 1 / M.LPG_DENOM_MIN


def _reduction(name, cin, cout, value=None, rng=None):
    lay = M._Layout()
    lay.reduction(name, cin, cout)
    if value is not None:
        return {k: Tensor(np.full(s, value)) for k, s in lay.shapes.items()}
    return {k: Tensor(rng.normal(size=s)) for k, s in lay.shapes.items()}


def test_unc_pole_and_unit_norm(rng):
    out = M.unc_block(Tensor(rng.normal(size=(8, 4, 4))), _reduction("u", 8, 2, value=0.0), "u", 2).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.array([0, 0, 1.0])[:, None, None], (3, 8, 8)))
    out = M.unc_block(Tensor(rng.normal(size=(2, 8, 4, 4))), _reduction("u", 8, 2, rng=rng), "u", 4).data
    assert out.shape == (2, 3, 16, 16)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_reduction_widths_halve_to_target():
    assert M._reduction_widths(64, 3) == [64, 32, 16, 8, 4, 3]
    assert M._reduction_widths(8, 2) == [8, 4, 2]
    assert M._reduction_widths(4, 3) == [4, 3]


def test_output_shapes_and_ranges(rng):
    cfg = M.ModelConfig.for_mode("cbam-mtl-xtc")
    params = M.init_parameters(cfg, 0)
    full = M.forward_full(rng.uniform(size=(3, 32, 32)), params, cfg)
    assert full.depth.shape == (1, 32, 32) and full.normals.shape == (3, 32, 32)
    assert all(c.shape == (1, 32, 32) for c in full.depth_cues)
    assert all(c.shape == (3, 32, 32) for c in full.normal_cues)
    np.testing.assert_allclose(np.linalg.norm(full.normals.data, axis=0), 1.0, atol=1e-6)
    assert np.all(full.depth.data > 0) and np.all(full.depth.data <= cfg.max_depth)


@settings(max_examples=10)
@given(st.integers(0, 2**31), st.floats(0.1, 50))
def test_depth_range_for_any_weights(seed, gain):
    cfg = M.ModelConfig.for_mode("cbam", **SMALL)
    params = M.init_parameters(cfg, seed)
    for p in params.values():
        p.data = p.data * gain
    rgb = np.random.default_rng(seed).uniform(size=(1, 3, 8, 8))
    d, n = M.forward(rgb, params, cfg)
    assert n is None
    assert np.all(d.data > 0) and np.all(d.data <= cfg.max_depth)


def test_every_parameter_receives_a_finite_gradient(rng):
    cfg = M.ModelConfig.for_mode("cbam-mtl-xtc", **SMALL)
    params = M.init_parameters(cfg, 1)
    cam = CameraIntrinsics.centered(16, 16, 60.0)
    rgb = rng.uniform(size=(2, 3, 16, 16))
    gt = rng.uniform(20, 80, (2, 16, 16))
    gn = rng.normal(size=(2, 3, 16, 16))
    gn /= np.linalg.norm(gn, axis=1, keepdims=True)
    d, n = M.forward(rgb, params, cfg)
    d = d[:, 0]
    loss = losses.final_loss(losses.silog_loss(d, gt), losses.mae_normal_loss(n, gn),
                             losses.xtc_loss(n, depth_to_normals_t(d, cam)))
    loss.backward()
    for name, p in params.items():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name
        assert np.any(p.grad != 0), name


def test_init_is_seeded_and_shared_across_modes():
    a = M.init_parameters(M.ModelConfig.for_mode("cbam-mtl"), 3)
    b = M.init_parameters(M.ModelConfig.for_mode("cbam-mtl"), 3)
    c = M.init_parameters(M.ModelConfig.for_mode("cbam-mtl"), 4)
    base = M.init_parameters(M.ModelConfig.for_mode("baseline"), 3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a if k.endswith(".w"))
    assert set(base) < set(a)
    assert all(np.array_equal(base[k].data, a[k].data) for k in base)


def test_mode_layouts():
    names = {m: set(M.layout(M.ModelConfig.for_mode(m)).shapes) for m in M.MODES}
    assert not any("cbam" in k for k in names["baseline"])
    assert not any(k.startswith("nrm.") for k in names["cbam"])
    assert names["cbam-mtl"] == names["cbam-mtl-xtc"]
    sites = {k.rsplit(".cbam", 1)[0] for k in names["cbam"] if ".cbam." in k}
    assert sites == {f"dep.{s}{k}" for s in ("skip", "fuse") for k in (4, 2, 1)}
    assert not any(k.startswith("nrm.") and "cbam" in k for k in names["cbam-mtl"])


def test_input_checks(rng):
    cfg = M.ModelConfig(**SMALL)
    params = M.init_parameters(cfg, 0)
    with pytest.raises(T.ShapeError):
        M.forward(rng.uniform(size=(3, 12, 12)), params, cfg)
    with pytest.raises(ValueError):
        M.ModelConfig(channels=(6, 8, 8, 8), cbam_ratio=4)
    with pytest.raises(ValueError):
        M.ModelConfig.for_mode("mtl")


def test_config_round_trip():
    cfg = M.ModelConfig.for_mode("cbam-mtl", **SMALL)
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg
