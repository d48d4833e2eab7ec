"""Toy-scale multi-task network: shared encoder with ASPP-lite, attention-gated
depth decoder with local planar guidance (LPG) blocks, and a surface-normal
decoder with unit-normal computation (UNC) blocks.

All activations are ELU so that finite-difference gradient checks never sit
on a kink. Tensors are ``[N, C, H, W]``; unbatched ``[C, H, W]`` also works.
"""
from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from colgeo import tensor as T
from colgeo.geometry import angles_to_unit_normal_t, tiled_patch_coords
from colgeo.tensor import Tensor

MODES = ("baseline", "cbam", "cbam-mtl", "cbam-mtl-xtc")
LPG_DENOM_MIN = 0.05  # grazing clamp of the ray-plane denominator
THETA_MAX = np.pi / 3


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = (8, 16, 32, 64)
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    scales: tuple[int, ...] = (8, 4, 2)
    max_depth: float = 100.0
    cbam_ratio: int = 4
    cbam_kernel: int = 7
    use_cbam: bool = True
    normals: bool = True
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        self.scales = tuple(int(s) for s in self.scales)
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ValueError("channels must list four positive stage widths")
        if self.scales != (8, 4, 2):
            raise ValueError("scales must be (8, 4, 2): one per decoder stage")
        if not self.max_depth > 0:
            raise ValueError("max_depth must be positive")
        if self.cbam_ratio < 1:
            raise ValueError("cbam_ratio must be >= 1")
        if self.use_cbam:
            for c in self.channels[:3]:
                if c % self.cbam_ratio:
                    raise ValueError(f"cbam_ratio {self.cbam_ratio} does not divide {c} channels")

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "ModelConfig":
        if mode not in MODES:
            raise ValueError(f"unknown ablation mode {mode!r}; expected one of {MODES}")
        return cls(use_cbam=mode != "baseline", normals=mode in ("cbam-mtl", "cbam-mtl-xtc"), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Parameters(OrderedDict):
    """Named weight tensors (insertion order is the canonical order)."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "Parameters":
        return cls((k, Tensor(np.array(v, dtype=np.float64), requires_grad=True)) for k, v in arrays.items())

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def count(self) -> int:
        return sum(p.size for p in self.values())


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------
def _reduction_widths(c_in: int, c_out: int) -> list[int]:
    """1x1 reduction stack halving channels until ``c_out`` remain."""
    widths = [c_in]
    c = c_in
    while c // 2 > c_out:
        c //= 2
        widths.append(c)
    widths.append(c_out)
    return widths


@dataclass
class _Layout:
    shapes: "OrderedDict[str, tuple]" = field(default_factory=OrderedDict)
    bias_init: dict = field(default_factory=dict)

    def conv(self, name, cin, cout, k, bias=True):
        self.shapes[f"{name}.w"] = (cout, cin, k, k)
        if bias:
            self.shapes[f"{name}.b"] = (cout, 1, 1)

    def cbam(self, name, c, cfg: ModelConfig):
        hidden = c // cfg.cbam_ratio
        self.conv(f"{name}.mlp1", c, hidden, 1)
        self.conv(f"{name}.mlp2", hidden, c, 1)
        self.conv(f"{name}.spatial", 2, 1, cfg.cbam_kernel)

    def reduction(self, name, cin, cout):
        widths = _reduction_widths(cin, cout)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.conv(f"{name}.r{i}", a, b, 1)


def layout(cfg: ModelConfig) -> _Layout:
    c1, c2, c3, c4 = cfg.channels
    lay = _Layout()
    lay.conv("enc1", 3, c1, 3)
    lay.conv("enc2", c1, c2, 3)
    lay.conv("enc3", c2, c3, 3)
    lay.conv("enc4", c3, c4, 3)
    for r in cfg.aspp_rates:
        lay.conv(f"aspp.d{r}", c4, c4, 3)
    lay.conv("aspp.fuse", c4 * len(cfg.aspp_rates), c4, 1)

    skips = {4: c3, 2: c2, 1: c1}
    widths = {8: c4, 4: c3, 2: c2, 1: c1}
    # depth decoder
    for k in (4, 2, 1):
        lay.conv(f"dep.up{k}", widths[2 * k], widths[k], 3)
        lay.conv(f"dep.fuse{k}", widths[k] + skips[k], widths[k], 3)
        if cfg.use_cbam:
            lay.cbam(f"dep.skip{k}.cbam", skips[k], cfg)
            lay.cbam(f"dep.fuse{k}.cbam", widths[k], cfg)
    for k in cfg.scales:
        lay.reduction(f"dep.lpg{k}", widths[k], 3)
    lay.conv("dep.head1", c1, 1, 1)
    lay.conv("dep.out", len(cfg.scales) + 1, 1, 3)
    # normal decoder
    if cfg.normals:
        for k in (4, 2, 1):
            lay.conv(f"nrm.up{k}", widths[2 * k], widths[k], 3)
            lay.conv(f"nrm.fuse{k}", widths[k] + skips[k], widths[k], 3)
        for k in cfg.scales:
            lay.reduction(f"nrm.unc{k}", widths[k], 2)
        lay.conv("nrm.head1", c1, 3, 1)
        lay.conv("nrm.out", 3 * (len(cfg.scales) + 1), 3, 3)
    return lay


def init_parameters(cfg: ModelConfig, seed: int | None = None) -> Parameters:
    """Fan-in scaled uniform weights, zero biases.

    Each tensor draws from its own stream keyed by ``(seed, crc32(name))``, so
    the weights a layer receives do not depend on which other layers exist
    (ablation modes share their common layers exactly).
    """
    seed = cfg.seed if seed is None else seed
    params = Parameters()
    for name, shape in layout(cfg).shapes.items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(3.0 / fan_in)
            data = rng.uniform(-bound, bound, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
def _conv(x, params, name, stride=1, dilation=1):
    w = params[f"{name}.w"]
    pad = dilation * (w.shape[-1] // 2)
    out = T.conv2d(x, w, stride=stride, padding=pad, dilation=dilation)
    b = params.get(f"{name}.b")
    return out + b if b is not None else out


def _conv_act(x, params, name, **kw):
    return T.elu(_conv(x, params, name, **kw))


def cbam(feature: Tensor, params, name: str = "cbam") -> Tensor:
    """Channel attention from a shared bottleneck over spatial avg/max
    descriptors, then spatial attention from a conv over channel mean/max maps."""
    feature = T.as_tensor(feature)
    c = feature.shape[-3]
    hidden = params[f"{name}.mlp1.w"].shape[0]
    if params[f"{name}.mlp1.w"].shape[1] != c or hidden < 1 or c % hidden:
        raise ValueError(f"{name}: attention weights do not fit {c} channels")

    def mlp(d):
        return _conv(T.elu(_conv(d, params, f"{name}.mlp1")), params, f"{name}.mlp2")

    gate_c = T.sigmoid(mlp(T.spatial_mean(feature)) + mlp(T.spatial_max(feature)))
    f1 = feature * gate_c
    desc = T.concat([T.channel_mean(f1), T.channel_max(f1)], axis=-3)
    gate_s = T.sigmoid(_conv(desc, params, f"{name}.spatial"))
    return f1 * gate_s


def _reduce(feature, params, name, n_out):
    x = feature
    i = 0
    while f"{name}.r{i}.w" in params:
        x = _conv(x, params, f"{name}.r{i}")
        if f"{name}.r{i + 1}.w" in params:
            x = T.elu(x)
        i += 1
    if x.shape[-3] != n_out:
        raise ValueError(f"{name}: reduction stack ends with {x.shape[-3]} channels, expected {n_out}")
    return x


def _split_channels(x: Tensor, n: int) -> list[Tensor]:
    lead = (slice(None),) * (x.ndim - 3)
    return [x[lead + (slice(i, i + 1),)] for i in range(n)]


def lpg_from_coeffs(theta, phi, n4, k: int, height: int, width: int) -> Tensor:
    """Expand per-cell plane coefficients into a full-resolution depth map.

    ``theta``/``phi``/``n4`` are ``[..., 1, H/k, W/k]``; each cell becomes a
    k x k patch of ``n4 / (n1 u + n2 v + n3)`` over its local patch
    coordinates, with the denominator clamped from below.
    """
    n1, n2, n3 = angles_to_unit_normal_t(theta, phi)
    if k > 1:
        n1, n2, n3, n4 = (T.resize(t, k, "nearest") for t in (n1, n2, n3, n4))
    u, v = tiled_patch_coords(k, height, width)
    denom = T.clamp_min(n1 * u + n2 * v + n3, LPG_DENOM_MIN)
    return n4 / denom


def lpg_block(feature: Tensor, params, name: str, k: int, max_depth: float) -> Tensor:
    """Local planar guidance: ``[..., C, H/k, W/k]`` features to a ``[..., 1, H, W]`` depth cue."""
    h, w = feature.shape[-2] * k, feature.shape[-1] * k
    red = _reduce(feature, params, name, 3)
    c_theta, c_phi, c_dist = _split_channels(red, 3)
    theta = T.sigmoid(c_theta) * THETA_MAX
    phi = T.sigmoid(c_phi) * (2 * np.pi)
    n4 = T.sigmoid(c_dist) * max_depth
    return lpg_from_coeffs(theta, phi, n4, k, h, w)


def unc_block(feature: Tensor, params, name: str, k: int) -> Tensor:
    """Unit normal computation: ``[..., C, H/k, W/k]`` to unit normals ``[..., 3, H, W]``.

    The two reduced channels are used directly as polar and azimuth angles.
    """
    red = _reduce(feature, params, name, 2)
    theta, phi = _split_channels(red, 2)
    n1, n2, n3 = angles_to_unit_normal_t(theta, phi)
    out = T.concat([n1, n2, n3], axis=-3)
    return T.resize(out, k, "nearest") if k > 1 else out


def normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = T.sqrt(T.reduce_sum(x * x, axis=-3, keepdims=True) + eps)
    return x / norm


@dataclass
class Outputs:
    depth: Tensor  # [..., 1, H, W]
    normals: Tensor | None  # [..., 3, H, W]
    depth_cues: list  # per-scale LPG maps, coarse to fine
    normal_cues: list


def _encode(rgb, params, cfg):
    x = rgb - 0.5
    e1 = _conv_act(x, params, "enc1")
    e2 = _conv_act(e1, params, "enc2", stride=2)
    e3 = _conv_act(e2, params, "enc3", stride=2)
    e4 = _conv_act(e3, params, "enc4", stride=2)
    branches = [_conv_act(e4, params, f"aspp.d{r}", dilation=r) for r in cfg.aspp_rates]
    a = _conv_act(T.concat(branches, axis=-3), params, "aspp.fuse")
    return {1: e1, 2: e2, 4: e3, 8: a}


def _decode_stage(prev, skip, params, prefix, k, use_cbam):
    up = _conv_act(T.resize(prev, 2, "nearest"), params, f"{prefix}.up{k}")
    if use_cbam:
        skip = cbam(skip, params, f"{prefix}.skip{k}.cbam")
    out = _conv_act(T.concat([up, skip], axis=-3), params, f"{prefix}.fuse{k}")
    if use_cbam:
        out = cbam(out, params, f"{prefix}.fuse{k}.cbam")
    return out


def forward_full(rgb, params, cfg: ModelConfig) -> Outputs:
    rgb = T.as_tensor(rgb)
    h, w = rgb.shape[-2:]
    if rgb.shape[-3] != 3 or h % 8 or w % 8:
        raise T.ShapeError(f"input must be [...,3,H,W] with H, W divisible by 8, got {rgb.shape}")
    feats = _encode(rgb, params, cfg)
    md = cfg.max_depth

    # depth decoder
    dec = {8: feats[8]}
    for k in (4, 2, 1):
        dec[k] = _decode_stage(dec[2 * k], feats[k], params, "dep", k, cfg.use_cbam)
    cues = [lpg_block(dec[k], params, f"dep.lpg{k}", k, md) for k in cfg.scales]
    cues.append(T.sigmoid(_conv(dec[1], params, "dep.head1")) * md)
    stacked = T.concat(cues, axis=-3) * (1.0 / md)
    depth = T.sigmoid(_conv(stacked, params, "dep.out")) * md

    normals, ncues = None, []
    if cfg.normals:
        ndec = {8: feats[8]}
        for k in (4, 2, 1):
            ndec[k] = _decode_stage(ndec[2 * k], feats[k], params, "nrm", k, False)
        ncues = [unc_block(ndec[k], params, f"nrm.unc{k}", k) for k in cfg.scales]
        ncues.append(normalize(_conv(ndec[1], params, "nrm.head1")))
        normals = normalize(_conv(T.concat(ncues, axis=-3), params, "nrm.out"))
    return Outputs(depth, normals, cues, ncues)


def forward(rgb, params, cfg: ModelConfig):
    """``rgb [...,3,H,W]`` in [0, 1] to ``(depth [...,1,H,W], normals [...,3,H,W] or None)``."""
    out = forward_full(rgb, params, cfg)
    return out.depth, out.normals
