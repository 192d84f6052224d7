"""Procedural lung phantoms and a stylised CBCT degradation model.

The phantoms stand in for paired clinical CT/CBCT scans: a CT-like slice
stack with one or two lungs, a branching vessel tree and an optional
lesion, plus a degraded copy carrying elastic drift, a rigid misalignment,
streaks, cupping and noise. Everything is a pure function of its inputs and
seed.

Streaks are straight additive lines through high-gradient points. They
mimic the look of sparse-view streaking but are not a projection-domain
simulation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DomainError, ShapeError, ValidationError
from .pipeline import HU_CLIP, HU_VALID, RigidTransform, Volume, apply_rigid, load_volume, mask_volume, save_volume
from .seeding import derive_seed

DEFAULT_HU_LEVELS = {"parenchyma": -850.0, "vessel": -150.0, "lesion": 30.0, "background": 0.0}


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    n_slices: int = 1
    lung_count: int = 2
    vessel_tree_depth: int = 4
    lesion_present: bool = True
    hu_levels: dict = field(default_factory=lambda: dict(DEFAULT_HU_LEVELS))

    def validate(self) -> "PhantomSpec":
        if self.image_size < 32:
            raise ValidationError(f"image_size must be >= 32, got {self.image_size}")
        if self.image_size % 8:
            raise ValidationError(f"image_size must be divisible by 8, got {self.image_size}")
        if self.n_slices < 1:
            raise ValidationError(f"n_slices must be >= 1, got {self.n_slices}")
        if self.lung_count not in (1, 2):
            raise ValidationError(f"lung_count must be 1 or 2, got {self.lung_count}")
        if self.vessel_tree_depth < 0:
            raise ValidationError(f"vessel_tree_depth must be >= 0, got {self.vessel_tree_depth}")
        for key in DEFAULT_HU_LEVELS:
            if key not in self.hu_levels:
                raise ValidationError(f"hu_levels is missing {key!r}")
        for key, val in self.hu_levels.items():
            if not HU_CLIP[0] <= val <= HU_CLIP[1]:
                raise ValidationError(f"hu_levels[{key!r}]={val} outside {HU_CLIP}")
        return self


@dataclass(frozen=True)
class DegradationParams:
    n_streaks: int = 0
    streak_amplitude: float = 0.0
    noise_sigma: float = 0.0
    cupping_amplitude: float = 0.0
    elastic_max_disp: float = 0.0
    rigid_rotation: float = 0.0
    rigid_offset: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def validate(self, image_size: int) -> "DegradationParams":
        mags = {
            "n_streaks": self.n_streaks,
            "streak_amplitude": self.streak_amplitude,
            "noise_sigma": self.noise_sigma,
            "cupping_amplitude": self.cupping_amplitude,
            "elastic_max_disp": self.elastic_max_disp,
        }
        for name, val in mags.items():
            if not np.isfinite(val) or val < 0:
                raise ValidationError(f"{name} must be a finite value >= 0, got {val}")
        if self.elastic_max_disp >= image_size / 8:
            raise ValidationError(
                f"elastic_max_disp must be < image_size/8 = {image_size / 8}, got {self.elastic_max_disp}"
            )
        RigidTransform(self.rigid_rotation, *self.rigid_offset).validate(image_size)
        return self


@dataclass(frozen=True)
class DegradationRanges:
    """Sampling ranges for per-pair degradation parameters."""

    rotation: float = 3.0
    offset: float = 5.0
    n_streaks: tuple[int, int] = (4, 12)
    streak_amplitude: tuple[float, float] = (80.0, 200.0)
    noise_sigma: tuple[float, float] = (10.0, 30.0)
    cupping_amplitude: tuple[float, float] = (0.0, 60.0)
    elastic_max_disp: tuple[float, float] = (0.5, 1.5)

    def sample(self, rng: np.random.Generator, seed: int) -> DegradationParams:
        return DegradationParams(
            n_streaks=int(rng.integers(self.n_streaks[0], self.n_streaks[1] + 1)),
            streak_amplitude=float(rng.uniform(*self.streak_amplitude)),
            noise_sigma=float(rng.uniform(*self.noise_sigma)),
            cupping_amplitude=float(rng.uniform(*self.cupping_amplitude)),
            elastic_max_disp=float(rng.uniform(*self.elastic_max_disp)),
            rigid_rotation=float(np.round(rng.uniform(-self.rotation, self.rotation), 1)),
            rigid_offset=(
                float(np.round(rng.uniform(-self.offset, self.offset), 1)),
                float(np.round(rng.uniform(-self.offset, self.offset), 1)),
            ),
            seed=int(seed),
        )


@dataclass(frozen=True)
class Streak:
    """One additive line: passes through ``(y, x)`` at ``angle`` radians."""

    y: float
    x: float
    angle: float
    amplitude: float

    def support(self, shape: tuple[int, int]) -> np.ndarray:
        H, W = shape
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        # perpendicular distance to the line; half-pixel width gives a 1 px line
        dist = np.abs(-(xx - self.x) * np.sin(self.angle) + (yy - self.y) * np.cos(self.angle))
        return dist < 0.5


@dataclass
class PhantomPair:
    ct: Volume
    cbct: Volume
    lung_mask: Volume
    true_rigid: RigidTransform
    seed: int
    streaks: list = field(default_factory=list)


# --------------------------------------------------------------------------
# CT phantom


def _lung_masks(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    S, D = spec.image_size, spec.n_slices
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) / S
    if spec.lung_count == 2:
        centres = [(0.5, 0.3), (0.5, 0.7)]
        radii = (0.34, 0.15)
    else:
        centres = [(0.5, 0.5 + rng.choice([-0.1, 0.1]))]
        radii = (0.36, 0.22)
    # low-frequency boundary wobble shared by all slices
    n_harm = 3
    phases = rng.uniform(0, 2 * np.pi, size=(len(centres), n_harm))
    amps = rng.uniform(0.0, 0.06, size=(len(centres), n_harm))
    jitter = rng.uniform(-0.03, 0.03, size=(len(centres), 2))
    masks = np.zeros((D, S, S), dtype=bool)
    for d in range(D):
        scale = 1.0 - 0.15 * abs(d - (D - 1) / 2) / max(D, 1)
        for k, (cy, cx) in enumerate(centres):
            ry, rx = radii[0] * scale, radii[1] * scale
            dy, dx = yy - cy - jitter[k, 0], xx - cx - jitter[k, 1]
            theta = np.arctan2(dy / ry, dx / rx)
            r = np.sqrt((dy / ry) ** 2 + (dx / rx) ** 2)
            wobble = 1.0 + sum(amps[k, h] * np.cos((h + 2) * theta + phases[k, h]) for h in range(n_harm))
            masks[d] |= r <= wobble
    return masks


def _segment_distance(yy, xx, p0, p1):
    (y0, x0), (y1, x1) = p0, p1
    vy, vx = y1 - y0, x1 - x0
    L2 = vy * vy + vx * vx
    if L2 == 0:
        return np.hypot(yy - y0, xx - x0)
    t = np.clip(((yy - y0) * vy + (xx - x0) * vx) / L2, 0.0, 1.0)
    return np.hypot(yy - (y0 + t * vy), xx - (x0 + t * vx))


def _vessel_tree(shape, root, direction, length, width, depth, rng) -> np.ndarray:
    """Soft occupancy map in [0, 1] of a recursively branching tree."""
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    occ = np.zeros(shape)
    stack = [(root, direction, length, width, depth)]
    while stack:
        p0, ang, ln, wd, dp = stack.pop()
        p1 = (p0[0] + ln * np.sin(ang), p0[1] + ln * np.cos(ang))
        dist = _segment_distance(yy, xx, p0, p1)
        occ = np.maximum(occ, np.clip(wd / 2 + 0.5 - dist, 0.0, 1.0))
        if dp > 0:
            spread = rng.uniform(0.35, 0.7)
            for sgn in (-1, 1):
                stack.append((p1, ang + sgn * spread, ln * rng.uniform(0.6, 0.8), max(wd * 0.72, 0.6), dp - 1))
    return occ


def generate_phantom_ct(spec: PhantomSpec, seed: int) -> tuple[Volume, Volume]:
    """Return ``(ct, lung_mask)``; the CT is in HU with background exactly 0."""
    spec.validate()
    rng = np.random.default_rng(derive_seed(seed, "phantom-ct"))
    S, D = spec.image_size, spec.n_slices
    lv = spec.hu_levels
    masks = _lung_masks(spec, rng)
    ct = np.full((D, S, S), lv["background"], dtype=np.float64)
    n_lungs = spec.lung_count
    hila = [(0.5 * S, 0.42 * S), (0.5 * S, 0.58 * S)] if n_lungs == 2 else [(0.5 * S, 0.5 * S)]
    for d in range(D):
        tex = ndimage.gaussian_filter(rng.standard_normal((S, S)), sigma=max(S / 64, 0.8))
        tex *= 25.0 / max(tex.std(), 1e-12)
        slice_hu = lv["parenchyma"] + tex
        occ = np.zeros((S, S))
        for k, hilum in enumerate(hila):
            base = np.pi if (n_lungs == 2 and k == 0) else 0.0
            for direction in (base - 0.9, base, base + 0.9):
                occ = np.maximum(
                    occ,
                    _vessel_tree(
                        (S, S),
                        hilum,
                        direction + rng.uniform(-0.3, 0.3),
                        S * rng.uniform(0.08, 0.12),
                        max(S / 40, 1.2),
                        spec.vessel_tree_depth,
                        rng,
                    ),
                )
        slice_hu = slice_hu * (1 - occ) + lv["vessel"] * occ
        if spec.lesion_present:
            inside = np.argwhere(ndimage.binary_erosion(masks[d], iterations=max(S // 16, 1)))
            if len(inside):
                cy, cx = inside[rng.integers(len(inside))]
                r = S * rng.uniform(0.04, 0.07)
                yy, xx = np.mgrid[0:S, 0:S]
                slice_hu[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = lv["lesion"]
        ct[d] = np.where(masks[d], slice_hu, lv["background"])
    ct = np.clip(ct, *HU_CLIP)
    ct[~masks] = 0.0
    spacing = (1.0, 1.0, 3.0)
    return (
        Volume(ct.astype(np.float32), spacing, "HU", f"phantom-ct seed={seed}"),
        mask_volume(masks.astype(np.uint8), spacing, f"lung-mask seed={seed}"),
    )


# --------------------------------------------------------------------------
# degradation


def _elastic_field(shape, max_disp, rng) -> np.ndarray:
    H, W = shape
    sigma = max(H, W) / 16.0
    field_ = np.stack([ndimage.gaussian_filter(rng.standard_normal((H, W)), sigma, mode="reflect") for _ in range(2)])
    peak = np.abs(field_).max()
    if peak > 0:
        field_ *= max_disp / peak
    return field_


def _warp_slice(img, disp):
    H, W = img.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    return ndimage.map_coordinates(img.astype(np.float64), [yy + disp[1], xx + disp[0]], order=1, mode="constant")


def _cupping(shape, amplitude):
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    r2 = ((yy - (H - 1) / 2) ** 2 + (xx - (W - 1) / 2) ** 2) / ((max(H, W) / 2) ** 2)
    return -amplitude * np.clip(1.0 - r2, 0.0, 1.0)


def _sample_streaks(img, n, amplitude, rng) -> list[Streak]:
    if n == 0:
        return []
    gy, gx = np.gradient(img.astype(np.float64))
    gmag = np.hypot(gy, gx)
    thresh = np.quantile(gmag, 0.9)
    cands = np.argwhere(gmag >= thresh) if thresh > 0 else np.argwhere(np.ones_like(gmag, bool))
    picks = cands[rng.integers(len(cands), size=n)]
    streaks = []
    for y, x in picks:
        amp = amplitude * rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
        streaks.append(Streak(float(y), float(x), float(rng.uniform(0, np.pi)), float(amp)))
    return streaks


def degrade_to_cbct(ct: Volume, mask: Volume, params: DegradationParams):
    """CBCT-like copy of ``ct``: rigid(elastic(ct)) + streaks + cupping + noise.

    Returns ``(cbct, rigid_transform, streaks)`` where ``streaks[d]`` lists
    the lines added to slice ``d``. Output is clamped to the valid HU range.
    """
    if ct.value_domain != "HU":
        raise DomainError(f"degrade_to_cbct expects HU, got {ct.value_domain}")
    if mask.shape != ct.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match ct {ct.shape}")
    D, H, W = ct.shape
    params.validate(min(H, W))
    rng = np.random.default_rng(derive_seed(params.seed, "degrade"))
    t = RigidTransform(params.rigid_rotation, *params.rigid_offset)
    out = ct.voxels.astype(np.float64).copy()
    if params.elastic_max_disp > 0:
        for d in range(D):
            out[d] = _warp_slice(out[d], _elastic_field((H, W), params.elastic_max_disp, rng))
    if not t.is_identity:
        out = apply_rigid(Volume(out.astype(np.float32), ct.spacing, "unitless"), t).voxels.astype(np.float64)
    streaks = []
    for d in range(D):
        ss = _sample_streaks(out[d], params.n_streaks, params.streak_amplitude, rng)
        for s in ss:
            out[d][s.support((H, W))] += s.amplitude
        streaks.append(ss)
    if params.cupping_amplitude > 0:
        out += _cupping((H, W), params.cupping_amplitude)[None]
    if params.noise_sigma > 0:
        out += rng.normal(0.0, params.noise_sigma, size=out.shape)
    out = np.clip(out, *HU_VALID)
    cbct = Volume(out.astype(np.float32), ct.spacing, "HU", f"phantom-cbct seed={params.seed}")
    return cbct, t, streaks


def make_pair(spec: PhantomSpec, params: DegradationParams, seed: int) -> PhantomPair:
    ct, mask = generate_phantom_ct(spec, seed)
    cbct, t, streaks = degrade_to_cbct(ct, mask, params)
    return PhantomPair(ct, cbct, mask, t, seed, streaks)


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetManifest:
    root: str
    spec: dict
    ranges: dict
    seed: int
    pairs: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def content_hash(self) -> str:
        doc = asdict(self)
        doc.pop("root")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text())
        return cls(**doc)


def _file_hash(path: Path) -> str:
    h = hashlib.sha256()
    for name in ("meta.json", "voxels.raw"):
        h.update((path / name).read_bytes())
    return h.hexdigest()


def make_dataset(
    n_pairs: int,
    spec: PhantomSpec,
    ranges: DegradationRanges,
    out_dir: str | Path,
    seed: int,
) -> DatasetManifest:
    """Write ``n_pairs`` phantom pairs as volume containers plus ``manifest.json``."""
    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    manifest = DatasetManifest(str(out_dir), asdict(spec), asdict(ranges), int(seed))
    for i in range(n_pairs):
        pair_seed = derive_seed(seed, "pair", i)
        rng = np.random.default_rng(pair_seed)
        params = ranges.sample(rng, derive_seed(pair_seed, "degrade-params"))
        pair = make_pair(spec, params, pair_seed)
        pid = f"pair_{i:05d}"
        base = out_dir / pid
        paths = {
            "ct": save_volume(pair.ct, base / "ct"),
            "cbct": save_volume(pair.cbct, base / "cbct"),
            "lung_mask": save_volume(pair.lung_mask, base / "lung_mask"),
        }
        manifest.pairs.append(
            {
                "id": pid,
                "seed": pair_seed,
                "params": asdict(params),
                "true_rigid": pair.true_rigid.to_dict(),
                "files": {k: str(p.relative_to(out_dir)) for k, p in paths.items()},
                "hashes": {k: _file_hash(p) for k, p in paths.items()},
            }
        )
    (out_dir / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_pair(manifest: DatasetManifest, entry: dict) -> PhantomPair:
    root = Path(manifest.root)
    f = entry["files"]
    return PhantomPair(
        load_volume(root / f["ct"]),
        load_volume(root / f["cbct"]),
        load_volume(root / f["lung_mask"]),
        RigidTransform.from_dict(entry["true_rigid"]),
        entry["seed"],
    )
