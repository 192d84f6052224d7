"""Prepared (LAC-domain) datasets: the preprocessing run over a phantom dataset, splits, and slice arrays."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .phantom import DatasetManifest, load_pair
from .pipeline import (
    RigidTransform,
    Roi,
    SearchGrid,
    Volume,
    apply_mask,
    clip_hu,
    crop_resize,
    estimate_rigid,
    hu_to_lac,
    load_volume,
    rigid_align,
    save_volume,
)

SPLIT_FRACTIONS = {"train": 0.56, "val": 0.14, "test": 0.30}


def refine_rigid(moving: Volume, fixed: Volume, coarse: SearchGrid | None = None, step: float = 0.25) -> RigidTransform:
    """Integer-grid search followed by a sub-pixel search around the coarse optimum."""
    t0 = estimate_rigid(moving, fixed, coarse)
    offs = np.arange(-2, 3) * step
    fine = SearchGrid(
        rotations=tuple(float(t0.rotation + r) for r in (-0.5, 0.0, 0.5)),
        offsets_x=tuple(float(t0.dx + o) for o in offs),
        offsets_y=tuple(float(t0.dy + o) for o in offs),
    )
    return estimate_rigid(moving, fixed, fine)


def preprocess_pair(ct: Volume, cbct: Volume, mask: Volume, out_size: int, roi: Roi | None = None, transform=None):
    """Rigid alignment, then mask -> crop/resize -> clip -> HU to LAC for both images.

    ``transform`` defaults to an NCC grid-search estimate of the CBCT misalignment.
    Returns ``(ct_lac, cbct_lac, mask, transform)``.
    """
    if transform is None:
        transform = refine_rigid(cbct, ct)
    aligned = rigid_align(cbct, transform)
    roi = roi or Roi.full(ct)
    out = []
    for v in (ct, aligned):
        v = apply_mask(v, mask)
        v = crop_resize(v, roi, out_size)
        v = clip_hu(v)
        out.append(hu_to_lac(v))
    mask_out = crop_resize(mask, roi, out_size)
    return out[0], out[1], mask_out, transform


def split_of(pair_ids: list[str], seed: int = 0) -> dict[str, str]:
    """Deterministic 56/14/30 train/val/test assignment by pair-id hash rank."""
    ranked = sorted(pair_ids, key=lambda p: hashlib.sha256(f"{seed}:{p}".encode()).hexdigest())
    n = len(ranked)
    n_test = int(round(SPLIT_FRACTIONS["test"] * n))
    n_val = int(round(SPLIT_FRACTIONS["val"] * n))
    out = {}
    for i, pid in enumerate(ranked):
        out[pid] = "test" if i < n_test else ("val" if i < n_test + n_val else "train")
    return out


def prepare_dataset(manifest: DatasetManifest, out_dir: str | Path, out_size: int, use_true_rigid: bool = False) -> dict:
    """Run preprocessing over every pair and write LAC containers plus ``prepared.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = [e["id"] for e in manifest.pairs]
    splits = split_of(ids, manifest.seed)
    entries = []
    for entry in manifest.pairs:
        pair = load_pair(manifest, entry)
        t = pair.true_rigid if use_true_rigid else None
        ct, cbct, mask, t = preprocess_pair(pair.ct, pair.cbct, pair.lung_mask, out_size, transform=t)
        base = out_dir / entry["id"]
        save_volume(ct, base / "ct")
        save_volume(cbct, base / "cbct")
        save_volume(mask, base / "lung_mask")
        entries.append(
            {
                "id": entry["id"],
                "split": splits[entry["id"]],
                "estimated_rigid": t.to_dict(),
                "true_rigid": entry["true_rigid"],
            }
        )
    doc = {
        "source_manifest_hash": manifest.content_hash(),
        "out_size": out_size,
        "pairs": entries,
    }
    (out_dir / "prepared.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return doc


@dataclass
class SliceSet:
    """Index-aligned LAC slice arrays, shape ``(N, S, S)``."""

    cbct: np.ndarray
    ct: np.ndarray
    mask: np.ndarray
    pair_ids: list

    def __len__(self) -> int:
        return len(self.ct)

    def subset(self, n: int | None) -> "SliceSet":
        if n is None or n >= len(self):
            return self
        return SliceSet(self.cbct[:n], self.ct[:n], self.mask[:n], self.pair_ids[:n])


def load_prepared(prepared_dir: str | Path, split: str | None = None, limit: int | None = None) -> SliceSet:
    prepared_dir = Path(prepared_dir)
    doc = json.loads((prepared_dir / "prepared.json").read_text())
    cb, ct, mk, ids = [], [], [], []
    for e in doc["pairs"]:
        if split is not None and e["split"] != split:
            continue
        base = prepared_dir / e["id"]
        c = load_volume(base / "ct").voxels
        b = load_volume(base / "cbct").voxels
        m = load_volume(base / "lung_mask").voxels
        for d in range(c.shape[0]):
            ct.append(c[d])
            cb.append(b[d])
            mk.append(m[d])
            ids.append(e["id"] if c.shape[0] == 1 else f"{e['id']}:{d}")
    if not ct:
        return SliceSet(np.zeros((0, 0, 0), np.float32), np.zeros((0, 0, 0), np.float32), np.zeros((0, 0, 0), np.uint8), [])
    out = SliceSet(np.stack(cb), np.stack(ct), np.stack(mk), ids)
    return out.subset(limit)
