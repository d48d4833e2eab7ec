"""Pinhole camera geometry, local plane parameterisation and depth-to-normal warping.

Conventions: pixel ``(x, y)`` is column ``x`` and row ``y``; the ray through
it is ``((x - cx)/f, (y - cy)/f, 1)``. Normals live in the camera frame and
face the camera (``n . ray < 0``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from colgeo import tensor as T
from colgeo.tensor import Tensor

DENOM_EPS = 1e-12


class GrazingRayError(ValueError):
    """The viewing ray is (numerically) parallel to the plane."""


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def centered(cls, width: int, height: int, fov_deg: float = 90.0) -> "CameraIntrinsics":
        """Principal point at the image centre, focal length from a horizontal field of view."""
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(float(f), (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def to_dict(self) -> dict:
        return {"f": self.f, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["f"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Normalised image coordinates ``u = (x-cx)/f``, ``v = (y-cy)/f`` as H x W maps."""
        x = np.arange(self.width, dtype=np.float64)
        y = np.arange(self.height, dtype=np.float64)
        u = np.broadcast_to((x - self.cx) / self.f, (self.height, self.width))
        v = np.broadcast_to(((y - self.cy) / self.f)[:, None], (self.height, self.width))
        return u, v


@dataclass
class DepthMap:
    values: np.ndarray  # H x W, millimetres
    valid: np.ndarray  # H x W bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.values) & (self.values > 0)

    @classmethod
    def dense(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class NormalMap:
    vectors: np.ndarray  # H x W x 3
    valid: np.ndarray  # H x W bool


@dataclass(frozen=True)
class PlaneCoeffs:
    n1: float
    n2: float
    n3: float
    n4: float

    def __post_init__(self):
        if abs(self.n1**2 + self.n2**2 + self.n3**2 - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")

    @classmethod
    def from_angles(cls, theta: float, phi: float, n4: float) -> "PlaneCoeffs":
        n = angles_to_unit_normal(theta, phi)
        return cls(float(n[0]), float(n[1]), float(n[2]), float(n4))


@dataclass
class PointCloud:
    points: np.ndarray  # H x W x 3
    valid: np.ndarray


def angles_to_unit_normal(theta, phi) -> np.ndarray:
    """Polar/azimuth angles to ``(sin t cos p, sin t sin p, cos t)``; last axis holds xyz."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def angles_to_unit_normal_t(theta: Tensor, phi: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    st = T.sin(theta)
    return st * T.cos(phi), st * T.sin(phi), T.cos(theta)


def ray_plane_depth(plane: PlaneCoeffs, u, v):
    """Depth where the ray through normalised patch coordinate ``(u, v)`` meets ``plane``."""
    denom = plane.n1 * np.asarray(u, dtype=np.float64) + plane.n2 * np.asarray(v, dtype=np.float64) + plane.n3
    if np.any(np.abs(denom) <= DENOM_EPS):
        raise GrazingRayError("ray is parallel to the plane")
    out = plane.n4 / denom
    return float(out) if np.ndim(out) == 0 else out


def patch_coords(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-centred k x k grid with spacing 1/k: ``u`` varies along columns, ``v`` along rows."""
    if k not in (1, 2, 4, 8):
        raise ValueError(f"unsupported patch size {k}; expected 1, 2, 4 or 8")
    c = (np.arange(k) - (k - 1) / 2.0) / k
    u, v = np.meshgrid(c, c)
    return u, v


def tiled_patch_coords(k: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Patch coordinates repeated across a full-resolution H x W map."""
    u, v = patch_coords(k)
    return np.tile(u, (height // k, width // k)), np.tile(v, (height // k, width // k))


def backproject(depth: DepthMap, cam: CameraIntrinsics) -> PointCloud:
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth extent {depth.shape} != camera {(cam.height, cam.width)}")
    u, v = cam.rays()
    z = np.where(depth.valid, depth.values, 0.0)
    pts = np.stack([u * z, v * z, z], axis=-1)
    return PointCloud(pts, depth.valid.copy())


def project(points: np.ndarray, cam: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(x, y)`` of camera-frame points (last axis xyz)."""
    z = points[..., 2]
    return cam.f * points[..., 0] / z + cam.cx, cam.f * points[..., 1] / z + cam.cy


def depth_gradients(depth: DepthMap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward differences ``dZ/dx``, ``dZ/dy`` (backward on the last column/row) and validity.

    A gradient is valid only when both pixels it uses are valid.
    """
    h, w = depth.shape
    if h < 2 or w < 2:
        raise ValueError("depth map must be at least 2 x 2")
    z = depth.values
    m = depth.valid
    dx = np.empty_like(z)
    dy = np.empty_like(z)
    vx = np.empty_like(m)
    vy = np.empty_like(m)
    dx[:, :-1] = z[:, 1:] - z[:, :-1]
    dx[:, -1] = z[:, -1] - z[:, -2]
    vx[:, :-1] = m[:, 1:] & m[:, :-1]
    vx[:, -1] = m[:, -1] & m[:, -2]
    dy[:-1] = z[1:] - z[:-1]
    dy[-1] = z[-1] - z[-2]
    vy[:-1] = m[1:] & m[:-1]
    vy[-1] = m[-1] & m[-2]
    return dx, dy, vx & vy


def gradient_validity(valid: np.ndarray) -> np.ndarray:
    """Validity of the warped normals given a (..., H, W) depth validity mask."""
    m = np.asarray(valid, dtype=bool)
    vx = np.concatenate([m[..., :, 1:] & m[..., :, :-1], m[..., :, -1:] & m[..., :, -2:-1]], axis=-1)
    vy = np.concatenate([m[..., 1:, :] & m[..., :-1, :], m[..., -1:, :] & m[..., -2:-1, :]], axis=-2)
    return vx & vy


def _diff_x(z: Tensor) -> Tensor:
    fwd = z[..., :, 1:] - z[..., :, :-1]
    return T.concat([fwd, fwd[..., :, -1:]], axis=-1)


def _diff_y(z: Tensor) -> Tensor:
    fwd = z[..., 1:, :] - z[..., :-1, :]
    return T.concat([fwd, fwd[..., -1:, :]], axis=-2)


SCHEMES = ("pointcloud", "analytic", "analytic-swapped")


def depth_to_normals_t(depth: Tensor, cam: CameraIntrinsics, scheme: str = "pointcloud") -> Tensor:
    """Differentiable depth-to-normal warp.

    ``depth`` has shape ``(..., H, W)`` (invalid pixels should hold any positive
    placeholder); the result has shape ``(..., 3, H, W)`` with unit,
    camera-facing normals.

    Tangent vectors come from forward differences (backward on the last
    row/column). ``scheme`` selects how the X/Y components are formed:

    * ``"pointcloud"``: differences of the back-projected points, i.e. the
      discrete product rule; exact on planes.
    * ``"analytic"``: continuous product rule evaluated at the pixel,
      ``dX/dx = Z/f + (x-cx)/f dZ/dx``, ``dY/dx = (y-cy)/f dZ/dx``,
      ``dX/dy = (x-cx)/f dZ/dy``, ``dY/dy = Z/f + (y-cy)/f dZ/dy``.
    * ``"analytic-swapped"``: as ``"analytic"`` but with
      ``dY/dx = (x-cx)/f dZ/dy``, a duplicate of ``dX/dy`` kept only for
      comparison; it does not recover plane normals.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    h, w = depth.shape[-2:]
    if (h, w) != (cam.height, cam.width):
        raise ValueError(f"depth extent {(h, w)} != camera {(cam.height, cam.width)}")
    u, v = cam.rays()
    u, v = np.ascontiguousarray(u), np.ascontiguousarray(v)
    zx, zy = _diff_x(depth), _diff_y(depth)
    if scheme == "pointcloud":
        px, py = depth * u, depth * v
        ax, ay = _diff_x(px), _diff_x(py)
        bx, by = _diff_y(px), _diff_y(py)
    else:
        zf = depth * (1.0 / cam.f)
        ax = zf + zx * u
        ay = (zy * u) if scheme == "analytic-swapped" else (zx * v)
        bx = zy * u
        by = zf + zy * v
    az, bz = zx, zy
    cx_ = ay * bz - az * by
    cy_ = az * bx - ax * bz
    cz_ = ax * by - ay * bx
    norm = T.sqrt(cx_ * cx_ + cy_ * cy_ + cz_ * cz_ + 1e-300)
    # flip so that n . ray < 0; the sign is treated as a constant
    facing = cx_.data * u + cy_.data * v + cz_.data
    sign = np.where(facing > 0, -1.0, 1.0)
    T.note_branch(sign)
    inv = sign / norm
    return T.concat([T.reshape(c * inv, c.shape[:-2] + (1, h, w)) for c in (cx_, cy_, cz_)], axis=-3)


def depth_to_normals(depth: DepthMap, cam: CameraIntrinsics, scheme: str = "pointcloud") -> NormalMap:
    """Surface normals from depth-image gradients (numpy in, numpy out).

    Pixels whose differences touch an invalid depth, or whose tangent cross
    product vanishes, are marked invalid.
    """
    z = np.where(depth.valid, depth.values, 1.0)
    with T.no_grad():
        n = depth_to_normals_t(Tensor(z), cam, scheme).data
    vec = np.moveaxis(n, -3, -1)
    valid = gradient_validity(depth.valid) & np.all(np.isfinite(vec), axis=-1)
    valid &= np.linalg.norm(vec, axis=-1) > 0.5  # vanishing cross products normalise to ~0
    vec = np.where(valid[..., None], vec, 0.0)
    return NormalMap(vec, valid)


def encode_normal_rgb(normals: np.ndarray) -> np.ndarray:
    """Map xyz components in [-1, 1] to RGB channels in [0, 1]."""
    normals = np.asarray(normals, dtype=np.float64)
    if not np.all(np.isfinite(normals)):
        raise ValueError("normal components must be finite")
    return (normals + 1.0) / 2.0


def decode_normal_rgb(rgb: np.ndarray) -> np.ndarray:
    n = np.asarray(rgb, dtype=np.float64) * 2.0 - 1.0
    if not np.all(np.isfinite(n)):
        raise ValueError("normal components must be finite")
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.divide(n, length, out=np.zeros_like(n), where=length > 0)


def angular_error_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle in degrees between unit vectors along the last axis."""
    dot = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dot))


def interior_mask(valid: np.ndarray, border: int = 1) -> np.ndarray:
    """``valid`` eroded by ``border`` pixels (4-neighbourhood) and cut away from the image edge."""
    m = np.asarray(valid, dtype=bool).copy()
    for _ in range(border):
        e = m.copy()
        e[1:] &= m[:-1]
        e[:-1] &= m[1:]
        e[:, 1:] &= m[:, :-1]
        e[:, :-1] &= m[:, 1:]
        m = e
    m[:border] = m[-border:] = False
    m[:, :border] = m[:, -border:] = False
    return m
