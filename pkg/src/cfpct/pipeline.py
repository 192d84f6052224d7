"""Volumes, the on-disk volume container, and the preprocessing chain.

Voxel arrays are held slice-major, shape ``(D, H, W)``, which is also the
on-disk order (slice, row, column). ``x`` is the column axis and ``y`` the
row axis throughout.

The preprocessing chain is fixed: rigid alignment, then
mask -> crop/resize -> HU clip -> HU to LAC.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import BoundsError, DomainError, ShapeError, ValidationError

MU_WATER = 0.192
HU_CLIP = (-1000.0, 200.0)
HU_VALID = (-1024.0, 3071.0)
DOMAINS = ("HU", "LAC", "unitless")
CONTAINER_VERSION = 1


@dataclass(frozen=True)
class Volume:
    """A stack of 2D slices with geometry metadata.

    ``voxels`` has shape ``(D, H, W)``; ``spacing`` is ``(row_mm, col_mm,
    slice_mm)``. Masks use ``value_domain="unitless"`` and dtype uint8.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    value_domain: str = "HU"
    provenance: str = ""

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3:
            raise ShapeError(f"voxels must be (D, H, W), got shape {v.shape}")
        if v.dtype != np.uint8:
            v = v.astype(np.float32, copy=False)
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.value_domain not in DOMAINS:
            raise ValidationError(f"value_domain must be one of {DOMAINS}, got {self.value_domain!r}")
        if v.dtype != np.uint8 and not np.all(np.isfinite(v)):
            raise ValidationError("voxels must be finite")
        if self.value_domain == "HU" and v.size:
            lo, hi = float(v.min()), float(v.max())
            if lo < HU_VALID[0] or hi > HU_VALID[1]:
                raise ValidationError(f"HU values must lie in {HU_VALID}, got [{lo}, {hi}]")
        if self.value_domain == "LAC" and v.size and float(v.min()) < 0:
            raise ValidationError("LAC values must be >= 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray, **changes) -> "Volume":
        return replace(self, voxels=voxels, **changes)


@dataclass(frozen=True)
class RigidTransform:
    """In-plane rigid motion: rotation in degrees about the image centre, then offset in pixels.

    Applying the transform moves image content: a feature at ``p`` ends up at
    ``R (p - c) + c + (dx, dy)``.
    """

    rotation: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    def validate(self, image_size: int | None = None) -> "RigidTransform":
        if not np.isfinite([self.rotation, self.dx, self.dy]).all():
            raise ValidationError("rigid transform parameters must be finite")
        if abs(self.rotation) > 45:
            raise ValidationError(f"|rotation| must be <= 45 degrees, got {self.rotation}")
        if image_size is not None and max(abs(self.dx), abs(self.dy)) > image_size / 2:
            raise ValidationError(f"|offset| must be <= image_size/2 = {image_size / 2}")
        return self

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0 and self.dx == 0 and self.dy == 0

    def magnitude(self) -> float:
        return float(np.sqrt(self.rotation**2 + self.dx**2 + self.dy**2))

    def to_dict(self) -> dict:
        return {"rotation": float(self.rotation), "dx": float(self.dx), "dy": float(self.dy)}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(float(d["rotation"]), float(d["dx"]), float(d["dy"]))


IDENTITY = RigidTransform()


# --------------------------------------------------------------------------
# container I/O


def save_volume(v: Volume, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        D, H, W = v.shape
        is_mask = v.voxels.dtype == np.uint8
        meta = {
            "format_version": CONTAINER_VERSION,
            "dims": {"H": H, "W": W, "D": D},
            "spacing": list(v.spacing),
            "value_domain": v.value_domain,
            "dtype": "uint8" if is_mask else "float32le",
            "provenance": v.provenance,
        }
        data = v.voxels if is_mask else v.voxels.astype("<f4")
        (path / "voxels.raw").write_bytes(np.ascontiguousarray(data).tobytes())
        (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write volume container at {path}: {exc}") from exc
    return path


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
        raw = (path / "voxels.raw").read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read volume container at {path}: {exc}") from exc
    dims = meta["dims"]
    dtype = np.uint8 if meta["dtype"] == "uint8" else np.dtype("<f4")
    vox = np.frombuffer(raw, dtype=dtype).reshape(dims["D"], dims["H"], dims["W"]).copy()
    if dtype != np.uint8:
        vox = vox.astype(np.float32)
    return Volume(vox, tuple(meta["spacing"]), meta["value_domain"], meta.get("provenance", ""))


def mask_volume(mask: np.ndarray, spacing=(1.0, 1.0, 1.0), provenance: str = "mask") -> Volume:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValidationError("mask values must be 0 or 1")
    return Volume(m.astype(np.uint8), spacing, "unitless", provenance)


# --------------------------------------------------------------------------
# intensity operations


def _require(v: Volume, domain: str, op: str) -> None:
    if v.value_domain != domain:
        raise DomainError(f"{op} expects a {domain} volume, got {v.value_domain}")


def clip_hu(v: Volume) -> Volume:
    _require(v, "HU", "clip_hu")
    return v.with_voxels(np.clip(v.voxels, *HU_CLIP).astype(np.float32))


def apply_mask(v: Volume, mask: Volume) -> Volume:
    """Set every voxel outside ``mask`` to exactly 0 (0 HU for HU volumes)."""
    if mask.shape != v.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match volume shape {v.shape}")
    m = mask.voxels
    if not np.isin(m, (0, 1)).all():
        raise ValidationError("mask must be binary")
    out = np.where(m.astype(bool), v.voxels, np.zeros((), v.voxels.dtype))
    return v.with_voxels(out)


def hu_to_lac(v: Volume, mu_water: float = MU_WATER) -> Volume:
    _require(v, "HU", "hu_to_lac")
    lac = v.voxels.astype(np.float64) * mu_water / 1000.0 + mu_water
    return v.with_voxels(lac.astype(np.float32), value_domain="LAC")


def lac_to_hu(v: Volume, mu_water: float = MU_WATER) -> Volume:
    _require(v, "LAC", "lac_to_hu")
    hu = (v.voxels.astype(np.float64) - mu_water) * 1000.0 / mu_water
    return v.with_voxels(hu.astype(np.float32), value_domain="HU")


def hu_to_lac_array(hu, mu_water: float = MU_WATER):
    return hu * mu_water / 1000.0 + mu_water


def lac_to_hu_array(lac, mu_water: float = MU_WATER):
    return (lac - mu_water) * 1000.0 / mu_water


# --------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Roi:
    row: int
    col: int
    height: int
    width: int

    @classmethod
    def full(cls, v: Volume) -> "Roi":
        return cls(0, 0, v.shape[1], v.shape[2])


def crop_resize(v: Volume, roi: Roi, out_size: int) -> Volume:
    """Crop ``roi`` from each slice and resample it bilinearly to ``out_size`` squared.

    Sample positions use pixel-centre alignment and are clamped to the ROI,
    so constant images stay constant and a full-frame ROI at the input size
    is the identity.
    """
    _, H, W = v.shape
    if roi.height <= 0 or roi.width <= 0 or roi.row < 0 or roi.col < 0:
        raise BoundsError(f"invalid roi {roi}")
    if roi.row + roi.height > H or roi.col + roi.width > W:
        raise BoundsError(f"roi {roi} exceeds image bounds {H}x{W}")
    if out_size <= 0 or out_size % 8:
        raise ValidationError(f"out_size must be a positive multiple of 8, got {out_size}")
    crop = v.voxels[:, roi.row : roi.row + roi.height, roi.col : roi.col + roi.width]
    if (roi.height, roi.width) == (out_size, out_size):
        out = crop.copy()
    else:
        ys = (np.arange(out_size) + 0.5) * (roi.height / out_size) - 0.5
        xs = (np.arange(out_size) + 0.5) * (roi.width / out_size) - 0.5
        ys = np.clip(ys, 0, roi.height - 1)
        xs = np.clip(xs, 0, roi.width - 1)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        src = crop.astype(np.float64)
        out = np.stack([ndimage.map_coordinates(s, [yy, xx], order=1, mode="nearest") for s in src])
        if v.voxels.dtype == np.uint8:
            out = (out >= 0.5).astype(np.uint8)
        else:
            out = out.astype(np.float32)
    sy, sx, sz = v.spacing
    spacing = (sy * roi.height / out_size, sx * roi.width / out_size, sz)
    return v.with_voxels(out, spacing=spacing)


def _source_coords(shape: tuple[int, int], t: RigidTransform, inverse: bool):
    """Sampling coordinates for resampling a slice under ``t``.

    ``inverse=True`` samples at ``T(q)`` (undoes the motion); otherwise at
    ``T^-1(q)`` (applies it).
    """
    H, W = shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    th = np.deg2rad(t.rotation)
    c, s = np.cos(th), np.sin(th)
    if inverse:
        px, py = xx - cx, yy - cy
        sx = c * px - s * py + cx + t.dx
        sy = s * px + c * py + cy + t.dy
    else:
        px, py = xx - cx - t.dx, yy - cy - t.dy
        sx = c * px + s * py + cx
        sy = -s * px + c * py + cy
    return sy, sx


def _resample(vox: np.ndarray, t: RigidTransform, inverse: bool) -> np.ndarray:
    sy, sx = _source_coords(vox.shape[1:], t, inverse)
    out = [ndimage.map_coordinates(s.astype(np.float64), [sy, sx], order=1, mode="constant", cval=0.0) for s in vox]
    return np.stack(out).astype(vox.dtype if vox.dtype != np.uint8 else np.float32)


def apply_rigid(v: Volume, t: RigidTransform) -> Volume:
    """Move the content of ``v`` by ``t`` (bilinear, zero fill)."""
    t.validate(max(v.shape[1:]))
    if t.is_identity:
        return v.with_voxels(v.voxels.copy())
    out = _resample(v.voxels, t, inverse=False)
    if v.voxels.dtype == np.uint8:
        out = (out >= 0.5).astype(np.uint8)
    return v.with_voxels(out)


def rigid_align(moving: Volume, t: RigidTransform) -> Volume:
    """Undo the misalignment ``t`` of ``moving``: samples ``moving`` at ``T(q)``.

    ``rigid_align(apply_rigid(v, t), t)`` recovers ``v`` up to interpolation
    and zero-filled borders. The identity transform is an exact copy.
    """
    t.validate(max(moving.shape[1:]))
    if t.is_identity:
        return moving.with_voxels(moving.voxels.copy())
    out = _resample(moving.voxels, t, inverse=True)
    if moving.voxels.dtype == np.uint8:
        out = (out >= 0.5).astype(np.uint8)
    return moving.with_voxels(out)


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel() - a.mean()
    b = b.astype(np.float64).ravel() - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0:
        return 0.0
    return float((a * b).sum() / den)


@dataclass(frozen=True)
class SearchGrid:
    rotations: Sequence[float] = field(default_factory=lambda: tuple(range(-3, 4)))
    offsets_x: Sequence[float] = field(default_factory=lambda: tuple(range(-5, 6)))
    offsets_y: Sequence[float] = field(default_factory=lambda: tuple(range(-5, 6)))

    def points(self) -> Iterable[RigidTransform]:
        for r, dx, dy in itertools.product(self.rotations, self.offsets_x, self.offsets_y):
            yield RigidTransform(float(r), float(dx), float(dy))


def estimate_rigid(moving: Volume, fixed: Volume, search: SearchGrid | None = None) -> RigidTransform:
    """Grid search for the transform maximising NCC(rigid_align(moving, t), fixed).

    Ties resolve to the smallest transform magnitude, then lexicographically
    on ``(rotation, dx, dy)``.
    """
    if moving.shape != fixed.shape:
        raise ShapeError(f"moving {moving.shape} and fixed {fixed.shape} differ")
    search = search or SearchGrid()
    candidates = list(search.points())
    if not candidates:
        raise ValidationError("search grid is empty")
    fixed_vox = fixed.voxels.astype(np.float64)
    best_key, best_t = None, None
    for t in candidates:
        aligned = rigid_align(moving, t).voxels
        score = round(_ncc(aligned, fixed_vox), 12)
        key = (-score, t.magnitude(), t.rotation, t.dx, t.dy)
        if best_key is None or key < best_key:
            best_key, best_t = key, t
    return best_t
