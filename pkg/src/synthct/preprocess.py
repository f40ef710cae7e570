"""Dataset preparation: per-scan MRI z-score, clipped CT z-scored with train-split statistics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .phantom import read_manifest, write_manifest
from .volume import (
    HU_MAX,
    HU_MIN,
    IntensitySpace,
    Mask,
    NormStats,
    Volume,
    VolumeError,
    clip_hu,
    load_mask,
    load_volume,
    normalize,
    save_volume,
    zscore_dataset,
    zscore_per_scan,
)

STATS_FILE = "norm_stats.json"
MANIFEST_FILE = "manifest.jsonl"


class DatasetError(VolumeError):
    pass


@dataclass
class RawCase:
    case_id: str
    mri: Volume
    ct: Volume
    outline: Mask
    split: str = "train"


@dataclass
class Case:
    """One normalized training/evaluation case."""

    case_id: str
    mri: Volume  # per-scan normalized
    ct: Volume  # dataset normalized
    outline: Mask
    split: str


@dataclass
class Dataset:
    cases: list[Case]
    ct_stats: NormStats

    def split(self, name: str) -> list[Case]:
        return [c for c in self.cases if c.split == name]

    def ct_hu(self, case: Case) -> np.ndarray:
        """Target CT in HU (clipped), recovered from the normalized volume."""
        return case.ct.data.astype(np.float64) * self.ct_stats.std + self.ct_stats.mean


def preprocess_cases(raw: Sequence[RawCase], clip_lo: float = HU_MIN, clip_hi: float = HU_MAX,
                     stats_in_outline: bool = False) -> Dataset:
    """Normalize all cases; CT statistics come from the train split only.

    Statistics pool every voxel by default, or only voxels inside the outline
    when ``stats_in_outline`` is set.
    """
    train = [c for c in raw if c.split == "train"]
    if not train:
        raise DatasetError("no training cases: CT statistics need at least one train-split case")
    clipped = {c.case_id: clip_hu(c.ct, clip_lo, clip_hi) for c in raw}
    masks = [c.outline for c in train] if stats_in_outline else None
    _, stats = zscore_dataset([clipped[c.case_id] for c in train], clip_lo, clip_hi, masks)
    cases = []
    for c in raw:
        mri_n, _ = zscore_per_scan(c.mri)
        cases.append(Case(c.case_id, mri_n, normalize(clipped[c.case_id], stats), c.outline, c.split))
    return Dataset(cases, stats)


def load_raw_cases(raw_dir) -> list[RawCase]:
    root = Path(raw_dir)
    records = read_manifest(root / MANIFEST_FILE)
    cases = []
    for rec in records:
        mri, _ = load_volume(root / rec["mri"])
        ct, _ = load_volume(root / rec["ct"])
        outline = load_mask(root / rec["outline"])
        if ct.intensity_space is not IntensitySpace.HU:
            raise DatasetError(f"{rec['ct']}: CT must be stored in HU, found {ct.intensity_space.value}")
        cases.append(RawCase(rec["case_id"], mri, ct, outline, rec.get("split", "train")))
    return cases


def preprocess_dataset(raw_dir, out_dir, clip_lo: float = HU_MIN, clip_hi: float = HU_MAX,
                       stats_in_outline: bool = False) -> Dataset:
    """Read a raw manifest, normalize, and write volumes + ``norm_stats.json`` + manifest to ``out_dir``."""
    data = preprocess_cases(load_raw_cases(raw_dir), clip_lo, clip_hi, stats_in_outline)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for c in data.cases:
        save_volume(c.mri, out / f"{c.case_id}_mri")
        save_volume(c.ct, out / f"{c.case_id}_ct")
        save_volume(c.outline, out / f"{c.case_id}_outline")
        records.append({"case_id": c.case_id, "mri": f"{c.case_id}_mri", "ct": f"{c.case_id}_ct",
                        "outline": f"{c.case_id}_outline", "split": c.split})
    data.ct_stats.save(out / STATS_FILE)
    write_manifest(out / MANIFEST_FILE, records)
    return data


def load_stats(data_dir) -> NormStats:
    path = Path(data_dir) / STATS_FILE
    if not path.exists():
        raise DatasetError(f"missing normalization stats {path}; run preprocess first")
    return NormStats.load(path)


def load_dataset(data_dir) -> Dataset:
    """Load a directory written by :func:`preprocess_dataset`."""
    root = Path(data_dir)
    stats = load_stats(root)
    cases = []
    for rec in read_manifest(root / MANIFEST_FILE):
        mri, _ = load_volume(root / rec["mri"])
        ct, _ = load_volume(root / rec["ct"])
        if ct.intensity_space is not IntensitySpace.NORMALIZED:
            raise DatasetError(f"{rec['ct']}: expected a normalized CT, found {ct.intensity_space.value}")
        cases.append(Case(rec["case_id"], mri, ct, load_mask(root / rec["outline"]), rec["split"]))
    return Dataset(cases, stats)
