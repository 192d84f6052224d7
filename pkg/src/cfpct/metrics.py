"""Full-reference image quality and region agreement metrics, plus per-pair reports.

The metric functions take any consistent intensity scale. Per-pair reports
compare images in window units, HU shifted by +1000 so the [-1000, 200] clip
window maps to [0, 1200] with ``data_range = 1200``. The shift leaves every
metric unchanged except SSIM, whose luminance term is not shift invariant:
in raw HU it becomes unstable around the 0 HU fill outside the mask, where a
20 HU offset alone drags local SSIM towards 0.2.

VIF and IFC are the pixel-domain variants over a four-scale Gaussian
pyramid, and they are reference-directional: the first argument is the
reference. Numbers are not comparable with steerable-pyramid implementations.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ShapeError, UndefinedMetricError, ValidationError
from .pipeline import HU_CLIP, lac_to_hu_array

DATA_RANGE_HU = HU_CLIP[1] - HU_CLIP[0]
PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K = (0.01, 0.03)
VIF_SCALES = 4
VIF_SIGMA_NSQ = 2.0
EPS = 1e-10
WINDOW_DOMAIN = "HU+1000 (clip window [0, 1200])"

VARIANTS = {
    "psnr": f"10log10(range^2/mse), zero-mse capped at {PSNR_CAP} dB",
    "ssim": f"gaussian {SSIM_WINDOW}x{SSIM_WINDOW} sigma={SSIM_SIGMA} K1={SSIM_K[0]} K2={SSIM_K[1]} valid-window mean",
    "vif": f"pixel-domain vifp, {VIF_SCALES}-scale gaussian pyramid, sigma_nsq={VIF_SIGMA_NSQ} on 8-bit-equivalent scale",
    "ifc": "sum over scales of VIF numerator terms (log2), same pyramid",
    "ncc": "zero-normalized cross-correlation",
    "dsc": "2|A&B|/(|A|+|B|), 1 when both empty",
    "pearson": "sample correlation over in-mask voxels",
}


def _check_pair(a, b, name: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = DATA_RANGE_HU) -> float:
    a, b = _check_pair(a, b, "psnr")
    if data_range <= 0:
        raise ValidationError(f"data_range must be > 0, got {data_range}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(10.0 * np.log10(data_range**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    full = ndimage.correlate(x, win, mode="constant")
    ph, pw = win.shape[0] // 2, win.shape[1] // 2
    return full[ph : x.shape[0] - ph, pw : x.shape[1] - pw]


def ssim(a, b, data_range: float = DATA_RANGE_HU) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows of a 2D image."""
    a, b = _check_pair(a, b, "ssim")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs a 2D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    win = gaussian_window()
    c1 = (SSIM_K[0] * data_range) ** 2
    c2 = (SSIM_K[1] * data_range) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a**2
    sbb = _filter_valid(b * b, win) - mu_b**2
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ncc(a, b) -> float:
    a, b = _check_pair(a, b, "ncc")
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    na, nb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if na == 0 or nb == 0:
        raise UndefinedMetricError("ncc is undefined for a constant image")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def _vif_terms(ref, dist, data_range: float | None):
    """Per-scale (numerator, denominator) of pixel-domain VIF, in bits."""
    ref, dist = _check_pair(ref, dist, "vif")
    if ref.ndim != 2:
        raise ShapeError(f"vif expects 2D images, got {ref.shape}")
    if data_range is not None:
        ref = ref * (255.0 / data_range)
        dist = dist * (255.0 / data_range)
    nums, dens = [], []
    for scale in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES - scale + 1) + 1
        win = gaussian_window(n, n / 5.0)
        if scale > 1:
            ref = _filter_valid(ref, win)[::2, ::2]
            dist = _filter_valid(dist, win)[::2, ::2]
        if min(ref.shape) < n:
            raise ShapeError(f"image too small for {VIF_SCALES}-scale VIF")
        mu1 = _filter_valid(ref, win)
        mu2 = _filter_valid(dist, win)
        s1 = np.maximum(_filter_valid(ref * ref, win) - mu1**2, 0.0)
        s2 = np.maximum(_filter_valid(dist * dist, win) - mu2**2, 0.0)
        s12 = _filter_valid(ref * dist, win) - mu1 * mu2
        g = s12 / (s1 + EPS)
        sv = s2 - g * s12
        low1 = s1 < EPS
        g[low1] = 0.0
        sv[low1] = s2[low1]
        s1[low1] = 0.0
        low2 = s2 < EPS
        g[low2] = 0.0
        sv[low2] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, EPS)
        nums.append(float(np.sum(np.log2(1.0 + g * g * s1 / (sv + VIF_SIGMA_NSQ)))))
        dens.append(float(np.sum(np.log2(1.0 + s1 / VIF_SIGMA_NSQ))))
    return nums, dens


def vif(ref, dist, data_range: float | None = DATA_RANGE_HU) -> float:
    nums, dens = _vif_terms(ref, dist, data_range)
    den = sum(dens)
    if den <= 0:
        raise UndefinedMetricError("vif is undefined for a constant reference")
    return float(sum(nums) / den)


def ifc(ref, dist, data_range: float | None = DATA_RANGE_HU, return_scales: bool = False):
    nums, _ = _vif_terms(ref, dist, data_range)
    total = float(sum(nums))
    return (total, nums) if return_scales else total


def _binary(m, name):
    m = np.asarray(m)
    if not np.isin(m, (0, 1)).all():
        raise ValidationError(f"{name} must be binary")
    return m.astype(bool)


def dsc(mask_a, mask_b) -> float:
    a = _binary(mask_a, "mask_a")
    b = _binary(mask_b, "mask_b")
    if a.shape != b.shape:
        raise ShapeError(f"dsc: shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def pearson(a, b, mask=None) -> float:
    a, b = _check_pair(a, b, "pearson")
    m = np.ones(a.shape, bool) if mask is None else _binary(mask, "mask")
    if m.shape != a.shape:
        raise ShapeError(f"pearson: mask shape {m.shape} vs {a.shape}")
    x, y = a[m], b[m]
    if x.size < 2:
        raise UndefinedMetricError("pearson needs at least 2 in-mask voxels")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.dot(dx, dx)), np.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise UndefinedMetricError("pearson is undefined for constant input")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class RegionRule:
    """High-function region: in-mask voxels at or above the given in-mask intensity percentile."""

    percentile: float = 70.0

    def __call__(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        m = mask.astype(bool)
        if not m.any():
            return np.zeros_like(m)
        thr = np.percentile(image[m], self.percentile)
        return (m & (image >= thr)).astype(np.uint8)


IMAGE_METRICS: dict[str, Callable] = {
    "ssim": ssim,
    "psnr": psnr,
    "vif": vif,
    "ifc": ifc,
    "ncc": ncc,
}
REGION_METRICS = ("dsc", "pearson")
DEFAULT_METRICS = ("ssim", "psnr", "vif", "ifc", "ncc", "dsc", "pearson")


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    header: dict = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        return [k for k in self.rows[0] if k != "pair_id"] if self.rows else []

    def aggregate(self) -> dict[str, dict]:
        """Mean and sample (n-1) standard deviation per column."""
        out = {}
        for col in self.columns:
            vals = np.array([r[col] for r in self.rows], dtype=np.float64)
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            out[col] = {"mean": float(np.mean(vals)), "std": std, "n": int(len(vals))}
        return out

    def mean(self, col: str) -> float:
        return self.aggregate()[col]["mean"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in sorted(self.header.items()):
            buf.write(f"# {k}: {v}\n")
        if self.rows:
            w = csv.DictWriter(buf, fieldnames=["pair_id"] + self.columns, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(float(v)) if k != "pair_id" else v) for k, v in r.items()})
        return buf.getvalue()

    def write(self, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        json_path = out_dir / f"{stem}_aggregate.json"
        csv_path.write_text(self.to_csv())
        doc = {"header": self.header, "std": "sample (ddof=1)", "aggregate": self.aggregate()}
        json_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return csv_path, json_path


def image_metrics(ref_hu: np.ndarray, img_hu: np.ndarray, mask: np.ndarray, metrics: Sequence[str], rule: RegionRule) -> dict:
    out = {}
    for m in metrics:
        if m in IMAGE_METRICS:
            out[m] = float(IMAGE_METRICS[m](ref_hu, img_hu))
        elif m == "dsc":
            out[m] = dsc(rule(ref_hu, mask), rule(img_hu, mask))
        elif m == "pearson":
            out[m] = pearson(ref_hu, img_hu, mask)
        else:
            raise ValidationError(f"unknown metric {m!r}")
    return out


def to_window(lac: np.ndarray) -> np.ndarray:
    """LAC slice -> clipped HU shifted by +1000, in float64."""
    return np.clip(lac_to_hu_array(np.asarray(lac, dtype=np.float64)), *HU_CLIP) - HU_CLIP[0]


def evaluate_pairs(dataset, model=None, metrics: Sequence[str] = DEFAULT_METRICS, region_rule: RegionRule = RegionRule(), label: str = "") -> MetricsReport:
    """Per-pair ``base_*`` (CBCT vs CT) and ``sct_*`` (sCT vs CT) metrics in window units.

    ``model`` is a translation model, a checkpoint path, or the string
    ``"identity"`` for a passthrough.
    """
    from .translate import TranslationModel, load_translation, translate_slices

    if model is None:
        raise ConfigurationError("evaluate_pairs needs a translation checkpoint (or 'identity') for sCT metrics")
    if isinstance(model, (str, Path)) and str(model) == "identity":
        sct = np.asarray(dataset.cbct, dtype=np.float32).copy()
        model_tag = "identity"
    else:
        if not isinstance(model, TranslationModel):
            model = load_translation(model)
        sct = translate_slices(model.generator, dataset.cbct)
        model_tag = f"{model.cfg.model_kind}-{model.cfg.loss_kind}"
    report = MetricsReport(header={"model": model_tag, "label": label, "domain": WINDOW_DOMAIN, "data_range": DATA_RANGE_HU,
                                   "region_rule": f"top {100 - region_rule.percentile:g}% in-mask intensity",
                                   **{f"variant.{k}": VARIANTS[k] for k in metrics}})
    for i, pid in enumerate(dataset.pair_ids):
        ct_hu = to_window(dataset.ct[i])
        cb_hu = to_window(dataset.cbct[i])
        sct_hu = to_window(sct[i])
        mask = dataset.mask[i]
        row = {"pair_id": pid}
        for k, v in image_metrics(ct_hu, cb_hu, mask, metrics, region_rule).items():
            row[f"base_{k}"] = v
        for k, v in image_metrics(ct_hu, sct_hu, mask, metrics, region_rule).items():
            row[f"sct_{k}"] = v
        report.rows.append(row)
    return report
