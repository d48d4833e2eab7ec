"""On-disk dataset format: PNG maps, JSON manifests, error maps and checkpoints.

Byte-level layouts are documented in ``docs/formats.md``.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from colgeo.geometry import CameraIntrinsics, DepthMap, NormalMap, decode_normal_rgb, encode_normal_rgb

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")
U16_MAX = 65535


class ManifestError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid manifest:\n  " + "\n  ".join(self.violations))


# ---------------------------------------------------------------------------
# image maps
# ---------------------------------------------------------------------------
def _write_png(path, img) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")


def _read_png(path, flags=cv2.IMREAD_UNCHANGED) -> np.ndarray:
    img = cv2.imread(str(path), flags)
    if img is None:
        raise OSError(f"could not read image {path}")
    return img


def save_depth(depth: DepthMap, path, scale: float) -> None:
    """16-bit PNG with ``raw = round(mm / scale)``; raw 0 marks invalid pixels."""
    if not scale > 0:
        raise ValueError("depth scale must be positive")
    raw = np.zeros(depth.shape, dtype=np.float64)
    raw[depth.valid] = np.round(depth.values[depth.valid] / scale)
    if raw.max(initial=0) > U16_MAX:
        raise OverflowError(f"depth {depth.values[depth.valid].max():.3f} mm exceeds 16-bit range at scale {scale}")
    if np.any(raw[depth.valid] < 1):
        raise ValueError("valid depth rounds to the invalid sentinel 0; use a finer scale")
    _write_png(path, raw.astype(np.uint16))


def load_depth(path, scale: float) -> DepthMap:
    raw = _read_png(path)
    if raw.dtype != np.uint16 or raw.ndim != 2:
        raise OSError(f"{path}: expected a 16-bit single-channel PNG")
    valid = raw > 0
    return DepthMap(raw.astype(np.float64) * scale, valid)


def save_normals(normals: NormalMap, path) -> None:
    """16-bit 3-channel PNG of ``(n + 1) / 2`` in x, y, z = R, G, B order; invalid = all zero."""
    enc = np.round(encode_normal_rgb(normals.vectors) * U16_MAX)
    enc[~normals.valid] = 0
    _write_png(path, enc.astype(np.uint16)[..., ::-1])  # OpenCV stores BGR


def load_normals(path) -> NormalMap:
    raw = _read_png(path)
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise OSError(f"{path}: expected a 16-bit 3-channel PNG")
    raw = raw[..., ::-1].astype(np.float64)
    valid = raw.any(axis=-1)
    vec = decode_normal_rgb(raw / U16_MAX)
    vec[~valid] = 0.0
    return NormalMap(vec, valid)


def save_rgb(rgb, path) -> None:
    img = np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)
    _write_png(path, img[..., ::-1])


def load_rgb(path) -> np.ndarray:
    img = _read_png(path, cv2.IMREAD_COLOR)
    return img[..., ::-1].astype(np.float64) / 255.0


def save_mask(mask, path) -> None:
    _write_png(path, np.where(mask, 255, 0).astype(np.uint8))


def load_mask(path) -> np.ndarray:
    return _read_png(path, cv2.IMREAD_GRAYSCALE) > 127


def save_error_map(err, path, max_error: float | None = None) -> float:
    """8-bit grayscale ``255 * err / max_error`` plus a JSON sidecar recording ``max_error``."""
    err = np.abs(np.asarray(err, dtype=np.float64))
    if max_error is None:
        max_error = float(err.max()) if err.size else 0.0
    img = np.zeros(err.shape, dtype=np.uint8)
    if max_error > 0:
        img = np.round(np.clip(err / max_error, 0.0, 1.0) * 255).astype(np.uint8)
    _write_png(path, img)
    Path(str(path) + ".json").write_text(json.dumps({"max_error": max_error}), encoding="utf-8")
    return max_error


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FrameRecord:
    scene: str
    index: int
    rgb: str
    depth: str
    normals: str
    mask: str | None = None

    def to_dict(self) -> dict:
        d = {"scene": self.scene, "index": self.index, "rgb": self.rgb, "depth": self.depth, "normals": self.normals}
        if self.mask is not None:
            d["mask"] = self.mask
        return d


@dataclass
class DatasetManifest:
    intrinsics: CameraIntrinsics
    max_depth: float
    depth_scale: float
    scenes: dict[str, str]  # scene id -> split
    frames: list[FrameRecord]
    split_counts: dict[str, int] = field(default_factory=dict)
    root: Path = Path(".")
    version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)

    def frames_in(self, split: str) -> list[FrameRecord]:
        return [fr for fr in self.frames if self.scenes[fr.scene] == split]

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in self.split_counts}
        for fr in self.frames:
            out[self.scenes[fr.scene]] = out.get(self.scenes[fr.scene], 0) + 1
        return out

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "intrinsics": self.intrinsics.to_dict(),
            "max_depth": self.max_depth,
            "depth_scale": self.depth_scale,
            "split_counts": self.split_counts,
            "scenes": [{"id": k, "split": v} for k, v in self.scenes.items()],
            "frames": [fr.to_dict() for fr in self.frames],
            **({"extra": self.extra} if self.extra else {}),
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=False) + "\n", encoding="utf-8")
        return path


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate_manifest(m, root=None, check_files: bool = True, warnings: list | None = None) -> list[str]:
    """Enumerate every violated manifest invariant; never raises.

    Accepts the parsed JSON (dict) or a ``DatasetManifest``. Empty splits are
    reported through ``warnings`` (and the log), not as violations.
    """
    try:
        return _validate(m, root, check_files, warnings)
    except Exception as exc:  # totality: any surprise becomes a diagnostic
        return [f"manifest could not be validated: {type(exc).__name__}: {exc}"]


def _validate(m, root, check_files, warnings) -> list[str]:
    if isinstance(m, DatasetManifest):
        root = m.root if root is None else root
        m = m.to_dict()
    out: list[str] = []
    warn = warnings if warnings is not None else []
    if not isinstance(m, dict):
        return [f"manifest must be a JSON object, got {type(m).__name__}"]
    root = Path(root) if root is not None else None

    version = m.get("version")
    if version is None:
        out.append("missing 'version'")
    elif version != MANIFEST_VERSION:
        out.append(f"unsupported version {version!r} (expected {MANIFEST_VERSION})")

    intr = m.get("intrinsics")
    if not isinstance(intr, dict):
        out.append("missing or non-object 'intrinsics'")
    else:
        try:
            CameraIntrinsics.from_dict(intr)
        except (TypeError, ValueError, KeyError) as exc:
            out.append(f"invalid intrinsics: {exc}")

    max_depth, scale = m.get("max_depth"), m.get("depth_scale")
    if not _is_num(max_depth) or max_depth <= 0:
        out.append(f"'max_depth' must be a positive number, got {max_depth!r}")
    if not _is_num(scale) or scale <= 0:
        out.append(f"'depth_scale' must be a positive number, got {scale!r}")
    elif _is_num(max_depth) and max_depth / scale > U16_MAX:
        out.append(f"max_depth {max_depth} overflows 16-bit storage at depth_scale {scale}")

    scenes: dict[str, str] = {}
    raw_scenes = m.get("scenes")
    if not isinstance(raw_scenes, list):
        out.append("missing or non-list 'scenes'")
        raw_scenes = []
    for i, sc in enumerate(raw_scenes):
        if not isinstance(sc, dict) or not isinstance(sc.get("id"), str) or not isinstance(sc.get("split"), str):
            out.append(f"scenes[{i}]: needs string 'id' and 'split'")
            continue
        sid, split = sc["id"], sc["split"]
        if split not in SPLITS:
            out.append(f"scene {sid!r}: unknown split {split!r}")
        if sid in scenes:
            if scenes[sid] != split:
                out.append(f"scene {sid!r} assigned to two splits ({scenes[sid]!r} and {split!r})")
            else:
                out.append(f"scene {sid!r} listed twice")
            continue
        scenes[sid] = split

    raw_frames = m.get("frames")
    if not isinstance(raw_frames, list):
        out.append("missing or non-list 'frames'")
        raw_frames = []
    seen = set()
    counts = {s: 0 for s in SPLITS}
    for i, fr in enumerate(raw_frames):
        if not isinstance(fr, dict):
            out.append(f"frames[{i}]: not an object")
            continue
        missing = [k for k in ("scene", "index", "rgb", "depth", "normals") if k not in fr]
        if missing:
            out.append(f"frames[{i}]: missing {', '.join(missing)}")
            continue
        sid, idx = fr["scene"], fr["index"]
        if not isinstance(idx, int) or isinstance(idx, bool) or idx < 0:
            out.append(f"frames[{i}]: index must be a nonnegative integer, got {idx!r}")
        if not isinstance(sid, str) or sid not in scenes:
            out.append(f"frames[{i}]: unknown scene {sid!r}")
        else:
            counts[scenes[sid]] = counts.get(scenes[sid], 0) + 1
        key = (str(sid), repr(idx))
        if key in seen:
            out.append(f"frames[{i}]: duplicate frame {sid!r}/{idx!r}")
        seen.add(key)
        for k in ("rgb", "depth", "normals", "mask"):
            if k not in fr or (k == "mask" and fr[k] is None):
                continue
            if not isinstance(fr[k], str) or not fr[k]:
                out.append(f"frames[{i}]: '{k}' must be a non-empty path")
            elif check_files and root is not None and not (root / fr[k]).is_file():
                out.append(f"frames[{i}]: missing file {fr[k]}")

    declared = m.get("split_counts", {})
    if not isinstance(declared, dict):
        out.append("'split_counts' must be an object")
        declared = {}
    for split, n in declared.items():
        if split not in SPLITS:
            out.append(f"split_counts: unknown split {split!r}")
        elif not isinstance(n, int) or isinstance(n, bool):
            out.append(f"split_counts[{split!r}] must be an integer")
        elif n != counts.get(split, 0):
            out.append(f"split {split!r}: declared {n} frames, found {counts.get(split, 0)}")
    for split in declared:
        if split in SPLITS and counts.get(split, 0) == 0:
            msg = f"split {split!r} is empty"
            warn.append(msg)
            log.warning(msg)
    return out


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest (a file or a dataset directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError([f"cannot read {path}: {exc}"]) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from exc
    violations = validate_manifest(raw, root=path.parent, check_files=check_files)
    if violations:
        raise ManifestError(violations)
    return DatasetManifest(
        intrinsics=CameraIntrinsics.from_dict(raw["intrinsics"]),
        max_depth=float(raw["max_depth"]),
        depth_scale=float(raw["depth_scale"]),
        scenes={sc["id"]: sc["split"] for sc in raw["scenes"]},
        frames=[FrameRecord(**fr) for fr in raw["frames"]],
        split_counts=dict(raw.get("split_counts", {})),
        root=path.parent,
        version=raw["version"],
        extra=raw.get("extra", {}),
    )


def write_dataset(root, items, depth_scale: float = 0.01, splits=SPLITS) -> DatasetManifest:
    """Write ``(spec, split, frames)`` triples to ``root`` and save the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    scenes, records, specs = {}, [], {}
    intr = max_depth = None
    for spec, split, frames in items:
        if spec.scene_id in scenes:
            raise ValueError(f"duplicate scene id {spec.scene_id!r}")
        if intr is None:
            intr, max_depth = spec.intrinsics, spec.max_depth
        elif spec.intrinsics != intr:
            raise ValueError("all scenes of a dataset must share intrinsics")
        scenes[spec.scene_id] = split
        specs[spec.scene_id] = spec.to_dict()
        for j, fr in enumerate(frames):
            stem = f"{split}/{spec.scene_id}/{j:04d}"
            rec = FrameRecord(spec.scene_id, j, f"{stem}_rgb.png", f"{stem}_depth.png", f"{stem}_normals.png", f"{stem}_mask.png")
            save_rgb(fr.rgb, root / rec.rgb)
            save_depth(fr.depth, root / rec.depth, depth_scale)
            save_normals(fr.normals, root / rec.normals)
            save_mask(fr.mask, root / rec.mask)
            records.append(rec)
    if intr is None:
        raise ValueError("no scenes to write")
    man = DatasetManifest(
        intrinsics=intr,
        max_depth=max_depth,
        depth_scale=depth_scale,
        scenes=scenes,
        frames=records,
        root=root,
        extra={"scene_specs": specs},
    )
    counts = man.counts()
    man.split_counts = {s: counts.get(s, 0) for s in splits}
    man.save()
    return man


@dataclass
class FrameArrays:
    """A split loaded into memory; channel-first like the model."""

    rgb: np.ndarray  # N x 3 x H x W
    depth: np.ndarray  # N x H x W (0 where invalid)
    normals: np.ndarray  # N x 3 x H x W
    mask: np.ndarray  # N x H x W, valid depth and valid normals
    scene: list[str]

    def __len__(self) -> int:
        return self.rgb.shape[0]


def load_split(man: DatasetManifest, split: str) -> FrameArrays:
    if split not in man.split_counts and split not in man.scenes.values():
        raise KeyError(f"dataset has no split {split!r}")
    recs = man.frames_in(split)
    rgb, depth, nrm, mask = [], [], [], []
    for rec in recs:
        d = load_depth(man.root / rec.depth, man.depth_scale)
        n = load_normals(man.root / rec.normals)
        mk = d.valid & n.valid
        if rec.mask is not None:
            mk &= load_mask(man.root / rec.mask)
        rgb.append(load_rgb(man.root / rec.rgb).transpose(2, 0, 1))
        depth.append(np.where(mk, d.values, 0.0))
        nrm.append(n.vectors.transpose(2, 0, 1))
        mask.append(mk)
    if not recs:
        h, w = man.intrinsics.height, man.intrinsics.width
        return FrameArrays(np.zeros((0, 3, h, w)), np.zeros((0, h, w)), np.zeros((0, 3, h, w)), np.zeros((0, h, w), bool), [])
    return FrameArrays(np.stack(rgb), np.stack(depth), np.stack(nrm), np.stack(mask), [r.scene for r in recs])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
CKPT_MAGIC = b"COLGEOCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    seed: int
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    table, blobs, offset = [], [], 0
    for name, arr in ckpt.params.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"config": ckpt.config, "seed": ckpt.seed, "meta": ckpt.meta, "params": table},
        sort_keys=True,
    ).encode("utf-8")
    pad = (-(len(CKPT_MAGIC) + 8 + len(header))) % 8
    header += b" " * pad
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    params = {}
    for ent in header["params"]:
        start = base + ent["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=ent["count"], offset=start)
        params[ent["name"]] = arr.reshape(ent["shape"]).astype(np.float64)
    return Checkpoint(params, header["config"], header["seed"], header.get("meta", {}))
