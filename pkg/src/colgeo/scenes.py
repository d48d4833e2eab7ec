"""Synthetic ray-cast scenes with analytic depth, normals and validity masks.

The light is co-located with the camera, so shading falls off with the
inverse square of the distance, as in endoscopy. The camera never rotates;
frames of a scene translate it along the scene's travel direction.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from colgeo.geometry import CameraIntrinsics, DepthMap, NormalMap

KINDS = ("plane", "sphere", "tube", "composite")
DEFAULT_MAX_DEPTH = 100.0


@dataclass
class SceneSpec:
    """Geometry, camera and rendering options of one scene (one "video").

    ``params`` by kind:

    * plane: ``normal`` (3, unit, pointing away from the camera), ``offset`` (mm)
    * sphere: ``center`` (3), ``radius``
    * tube: ``axis_x``/``axis_y`` cubic coefficients ``[c0, c1, c2, c3]`` of the
      axis ``(x(z), y(z), z)``, ``radius``, ``bumps`` list of
      ``{"s", "angle", "radius"}`` polyps, ``cam_offset`` (2), ``advance`` mm/frame
    * composite: ``plane`` and ``sphere`` sub-dicts (sphere in front of a wall)
    """

    kind: str
    intrinsics: CameraIntrinsics
    params: dict
    albedo: tuple[float, float, float] = (0.9, 0.55, 0.5)
    light_power: float = 400.0
    depth_quant: float = 0.0
    rgb_noise: float = 0.0
    max_depth: float = DEFAULT_MAX_DEPTH
    frames: int = 1
    seed: int = 0
    scene_id: str = "scene"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.frames < 1:
            raise ValueError("a scene needs at least one frame")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "intrinsics": self.intrinsics.to_dict(),
            "params": self.params,
            "albedo": list(self.albedo),
            "light_power": self.light_power,
            "depth_quant": self.depth_quant,
            "rgb_noise": self.rgb_noise,
            "max_depth": self.max_depth,
            "frames": self.frames,
            "seed": self.seed,
            "scene_id": self.scene_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["intrinsics"] = CameraIntrinsics.from_dict(d["intrinsics"])
        d["albedo"] = tuple(d["albedo"])
        return cls(**d)


@dataclass
class Frame:
    rgb: np.ndarray  # H x W x 3 in [0, 1]
    depth: DepthMap
    normals: NormalMap
    mask: np.ndarray
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# primitive intersections; all take ray origin o (3,) and directions d (..., 3)
# and return hit distance t (inf on miss) and camera-facing unit normals
# ---------------------------------------------------------------------------
def _hit_plane(o, d, normal, offset):
    n = np.asarray(normal, dtype=np.float64)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (offset - o @ n) / denom
    t = np.where((np.abs(denom) > 1e-12) & (t > 0), t, np.inf)
    nrm = np.broadcast_to(np.where(denom[..., None] > 0, -n, n), d.shape).copy()
    return t, nrm


def _hit_sphere(o, d, center, radius):
    c = np.asarray(center, dtype=np.float64)
    oc = o - c
    a = np.sum(d * d, axis=-1)
    b = 2.0 * (d @ oc)
    cc = oc @ oc - radius * radius
    disc = b * b - 4 * a * cc
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    t = np.where(hit, t, np.inf)
    p = o + d * np.where(np.isfinite(t), t, 0.0)[..., None]
    nrm = (p - c) / radius
    # a ray leaving the sphere from inside sees the inward normal
    inside = cc < 0
    if inside:
        nrm = -nrm
    return t, nrm


class TubeAxis:
    """Axis curve ``C(s) = (x(s), y(s), s)`` with cubic ``x``, ``y``."""

    def __init__(self, cx, cy):
        self.cx = np.asarray(cx, dtype=np.float64)
        self.cy = np.asarray(cy, dtype=np.float64)

    def _poly(self, c, s, der=0):
        if der == 0:
            return c[0] + s * (c[1] + s * (c[2] + s * c[3]))
        if der == 1:
            return c[1] + s * (2 * c[2] + 3 * s * c[3])
        return 2 * c[2] + 6 * s * c[3]

    def point(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.stack([self._poly(self.cx, s), self._poly(self.cy, s), s], axis=-1)

    def tangent(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.stack([self._poly(self.cx, s, 1), self._poly(self.cy, s, 1), np.ones_like(s)], axis=-1)

    def closest(self, p, iters: int = 6):
        """Axis parameter of the closest point to ``p`` (Newton from ``s = p_z``)."""
        s = p[..., 2].copy()
        for _ in range(iters):
            c = self.point(s)
            t1 = self.tangent(s)
            t2 = np.stack([self._poly(self.cx, s, 2), self._poly(self.cy, s, 2), np.zeros_like(s)], axis=-1)
            diff = c - p
            g = np.sum(diff * t1, axis=-1)
            h = np.sum(t1 * t1, axis=-1) + np.sum(diff * t2, axis=-1)
            s = s - g / h
        return s

    def distance(self, p):
        s = self.closest(p)
        return np.linalg.norm(p - self.point(s), axis=-1), s


def _hit_tube(o, d, axis: TubeAxis, radius, t_max, step=2.0):
    """First exit of rays starting inside the tube; march then bisect."""
    flat = d.reshape(-1, 3)
    n = flat.shape[0]
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    while active.any():
        t_next = t[active] + step
        p = o + flat[active] * t_next[:, None]
        dist, _ = axis.distance(p)
        crossed = dist >= radius
        idx = np.flatnonzero(active)
        hi[idx[crossed]] = t_next[crossed]
        lo[idx[crossed]] = t[idx[crossed]]
        t[idx] = t_next
        done = crossed | (t_next > t_max)
        active[idx[done]] = False
    hit = np.isfinite(hi)
    a, b = lo[hit], hi[hit]
    dh = flat[hit]
    for _ in range(50):
        mid = 0.5 * (a + b)
        dist, _ = axis.distance(o + dh * mid[:, None])
        out = dist >= radius
        b = np.where(out, mid, b)
        a = np.where(out, a, mid)
    th = 0.5 * (a + b)
    tt = np.full(n, np.inf)
    tt[hit] = th
    p = o + flat * np.where(np.isfinite(tt), tt, 0.0)[:, None]
    s = axis.closest(p)
    inward = axis.point(s) - p
    nrm = inward / np.maximum(np.linalg.norm(inward, axis=-1, keepdims=True), 1e-300)
    return tt.reshape(d.shape[:-1]), nrm.reshape(d.shape)


def _first_hit(hits):
    t = np.full(hits[0][0].shape, np.inf)
    nrm = np.zeros(hits[0][1].shape)
    for ti, ni in hits:
        closer = ti < t
        t = np.where(closer, ti, t)
        nrm = np.where(closer[..., None], ni, nrm)
    return t, nrm


def camera_origin(spec: SceneSpec, frame_index: int) -> np.ndarray:
    if spec.kind != "tube":
        return np.zeros(3)
    p = spec.params
    axis = TubeAxis(p["axis_x"], p["axis_y"])
    z = frame_index * float(p.get("advance", 0.0))
    off = np.asarray(p.get("cam_offset", (0.0, 0.0)), dtype=np.float64)
    return axis.point(z) + np.array([off[0], off[1], 0.0])


def _bump_center(axis: TubeAxis, radius: float, bump: dict) -> np.ndarray:
    s = float(bump["s"])
    ang = float(bump["angle"])
    return axis.point(s) + radius * np.array([np.cos(ang), np.sin(ang), 0.0])


def render(spec: SceneSpec, frame_index: int = 0) -> Frame:
    """Ray-cast one frame: exact depth/normals, shaded RGB, validity mask."""
    cam = spec.intrinsics
    u, v = cam.rays()
    d = np.stack([u, v, np.ones_like(u)], axis=-1)  # unit z-component, so t == depth
    o = camera_origin(spec, frame_index)
    p = spec.params
    if spec.kind == "plane":
        t, nrm = _hit_plane(o, d, p["normal"], p["offset"])
    elif spec.kind == "sphere":
        t, nrm = _hit_sphere(o, d, p["center"], p["radius"])
    elif spec.kind == "composite":
        t, nrm = _first_hit([
            _hit_plane(o, d, p["plane"]["normal"], p["plane"]["offset"]),
            _hit_sphere(o, d, p["sphere"]["center"], p["sphere"]["radius"]),
        ])
    else:
        axis = TubeAxis(p["axis_x"], p["axis_y"])
        hits = [_hit_tube(o, d, axis, p["radius"], spec.max_depth + 1.0)]
        for bump in p.get("bumps", []):
            hits.append(_hit_sphere(o, d, _bump_center(axis, p["radius"], bump), bump["radius"]))
        t, nrm = _first_hit(hits)
    valid = np.isfinite(t) & (t > 0) & (t <= spec.max_depth)
    depth = np.where(valid, t, 0.0)
    nrm = np.where(valid[..., None], nrm, 0.0)

    # co-located point light, Lambertian with inverse-square falloff
    dist2 = np.sum(d * d, axis=-1) * depth**2
    l = d / np.linalg.norm(d, axis=-1, keepdims=True)
    cosang = np.maximum(0.0, -np.sum(nrm * l, axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        irr = np.where(valid, spec.light_power * cosang / dist2, 0.0)
    rgb = np.asarray(spec.albedo)[None, None, :] * irr[..., None]
    rng = np.random.default_rng([spec.seed, frame_index])
    if spec.rgb_noise > 0:
        rgb = rgb + rng.normal(0.0, spec.rgb_noise, rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    if spec.depth_quant > 0:
        depth = np.where(valid, np.round(depth / spec.depth_quant) * spec.depth_quant, 0.0)
    return Frame(
        rgb=rgb,
        depth=DepthMap(depth, valid),
        normals=NormalMap(nrm, valid.copy()),
        mask=valid.copy(),
        meta={"scene_id": spec.scene_id, "frame": frame_index},
    )


# ---------------------------------------------------------------------------
# random scene generators
# ---------------------------------------------------------------------------
def _tint(rng) -> tuple[float, float, float]:
    base = np.array([0.9, 0.55, 0.5])
    return tuple(float(x) for x in np.clip(base * rng.uniform(0.8, 1.1, 3), 0.05, 1.0))


def random_plane(rng, cam: CameraIntrinsics, max_tilt: float = 0.8, **kw) -> SceneSpec:
    theta = rng.uniform(0.1, max_tilt)
    phi = rng.uniform(0, 2 * np.pi)
    n = np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    u, v = cam.rays()
    offset = rng.uniform(20.0, 40.0)
    # keep the whole image within range
    denom = n[0] * u + n[1] * v + n[2]
    offset = min(offset, 0.95 * DEFAULT_MAX_DEPTH * denom.min())
    return SceneSpec("plane", cam, {"normal": n.tolist(), "offset": float(offset)}, albedo=_tint(rng), **kw)


def random_sphere(rng, cam: CameraIntrinsics, **kw) -> SceneSpec:
    radius = rng.uniform(20.0, 35.0)
    z = rng.uniform(radius + 30.0, radius + 55.0)
    center = [rng.uniform(-5, 5), rng.uniform(-5, 5), z]
    return SceneSpec("sphere", cam, {"center": center, "radius": float(radius)}, albedo=_tint(rng), **kw)


def random_tube(rng, cam: CameraIntrinsics, n_bumps: int = 2, frames: int = 1, **kw) -> SceneSpec:
    """Curved colon-like tube viewed from inside, with optional polyps."""
    radius = rng.uniform(10.0, 16.0)
    # gentle bends: curvature radius stays well above the tube radius
    axis_x = [0.0, rng.uniform(-0.15, 0.15), rng.uniform(-4e-3, 4e-3), rng.uniform(-4e-5, 4e-5)]
    axis_y = [0.0, rng.uniform(-0.15, 0.15), rng.uniform(-4e-3, 4e-3), rng.uniform(-4e-5, 4e-5)]
    bumps = []
    for _ in range(n_bumps):
        bumps.append({
            "s": float(rng.uniform(15.0, 70.0)),
            "angle": float(rng.uniform(0, 2 * np.pi)),
            "radius": float(rng.uniform(2.5, 5.0)),
        })
    params = {
        "axis_x": axis_x,
        "axis_y": axis_y,
        "radius": float(radius),
        "bumps": bumps,
        "cam_offset": [float(rng.uniform(-0.4, 0.4) * radius), float(rng.uniform(-0.4, 0.4) * radius)],
        "advance": float(rng.uniform(1.0, 3.0)),
    }
    return SceneSpec("tube", cam, params, albedo=_tint(rng), frames=frames, **kw)


def random_composite(rng, cam: CameraIntrinsics, **kw) -> SceneSpec:
    wall = random_plane(rng, cam, max_tilt=0.5).params
    wall["offset"] = float(rng.uniform(70.0, 90.0) * min(1.0, 1.0))
    radius = rng.uniform(8.0, 15.0)
    sphere = {"center": [rng.uniform(-8, 8), rng.uniform(-8, 8), float(rng.uniform(35.0, 50.0))], "radius": float(radius)}
    spec = SceneSpec("composite", cam, {"plane": wall, "sphere": sphere}, albedo=_tint(rng), **kw)
    return spec


GENERATORS = {
    "plane": random_plane,
    "sphere": random_sphere,
    "tube": random_tube,
    "composite": random_composite,
}


def random_specs(
    kind: str,
    n_scenes: int,
    cam: CameraIntrinsics,
    seed: int = 0,
    frames: int = 1,
    rgb_noise: float = 0.0,
    depth_quant: float = 0.0,
) -> list[SceneSpec]:
    """``n_scenes`` random scenes; scene ``i`` draws from the stream ``(seed, i)``."""
    if kind not in GENERATORS:
        raise ValueError(f"unknown scene kind {kind!r}")
    specs = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        extra = {"frames": frames} if kind == "tube" else {}
        spec = GENERATORS[kind](rng, cam, **extra)
        specs.append(replace(
            spec,
            frames=frames,
            seed=int(np.random.default_rng([seed, i, 1]).integers(2**31)),
            scene_id=f"{kind}{i:03d}",
            rgb_noise=rgb_noise,
            depth_quant=depth_quant,
        ))
    return specs


def split_counts(n: int, ratios) -> list[int]:
    """Largest-remainder apportionment of ``n`` scenes to splits."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError("split ratios must be nonnegative and sum to 1")
    raw = ratios * n
    counts = np.floor(raw + 1e-9).astype(int)
    rem = raw - counts
    for i in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def make_dataset(specs, ratios, out_dir, splits=("train", "val", "test"), depth_scale: float = 0.01):
    """Render every frame of every scene and write a dataset with a video-wise split.

    Scenes are assigned whole to splits in order. Returns the manifest.
    """
    from colgeo import dataio

    counts = split_counts(len(specs), ratios)
    assignment = []
    for name, c in zip(splits, counts):
        assignment += [name] * c
    return dataio.write_dataset(
        Path(out_dir),
        [(spec, split, [render(spec, j) for j in range(spec.frames)]) for spec, split in zip(specs, assignment)],
        depth_scale=depth_scale,
        splits=splits,
    )
