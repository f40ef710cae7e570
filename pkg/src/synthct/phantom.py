"""Deterministic paired MRI/CT phantoms with body outline and tissue labels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .volume import HU_MAX, HU_MIN, IntensitySpace, Mask, Volume, save_volume

AIR, SOFT, BONE = 0, 1, 2

BACKGROUND_HU = -1000.0
POCKET_HU = -900.0
SOFT_HU = 40.0
BONE_HU_VALUE = 700.0
RAMP_HU = 30.0

MRI_AIR = 0.05
MRI_SOFT = 0.6
MRI_BONE = 0.15


class PhantomConfigError(ValueError):
    pass


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (48, 64, 64)
    spacing_mm: tuple[float, float, float] = (3.0, 1.0, 1.0)
    seed: int = 0
    n_bone_shells: int = 2
    n_air_pockets: int = 2
    ct_noise_sigma: float = 10.0
    mri_noise_sigma: float = 0.05
    bias_field_amplitude: float = 0.2

    def validate(self) -> None:
        if len(self.shape) != 3 or any(int(s) < 16 for s in self.shape):
            raise PhantomConfigError(f"shape: every dimension must be >= 16, got {tuple(self.shape)}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise PhantomConfigError(f"spacing_mm: must be three positive reals, got {tuple(self.spacing_mm)}")
        if self.ct_noise_sigma < 0 or self.mri_noise_sigma < 0:
            raise PhantomConfigError("noise sigmas must be >= 0")
        if self.n_bone_shells < 0 or self.n_air_pockets < 0:
            raise PhantomConfigError("structure counts must be >= 0")
        if not 0 <= self.bias_field_amplitude < 1:
            raise PhantomConfigError(f"bias_field_amplitude: must be in [0, 1), got {self.bias_field_amplitude}")


@dataclass
class PhantomPair:
    mri: Volume
    ct: Volume
    outline: Mask
    labels: np.ndarray
    ct_clean: np.ndarray  # class HU + ramp, before noise and clipping


def _grid(shape):
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(grid, center, semi_axes) -> np.ndarray:
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, semi_axes))
    return r <= 1.0


def _smooth_field(rng, grid) -> np.ndarray:
    """Low-order polynomial of normalized coordinates scaled into [-1, 1]."""
    z, y, x = grid
    terms = [z, y, x, z * y, y * x, z * x, x * x - 0.5, y * y - 0.5]
    coef = rng.uniform(-1, 1, size=len(terms))
    field = sum(c * t for c, t in zip(coef, terms))
    return field / np.abs(field).max()


def generate_pair(config: PhantomConfig) -> PhantomPair:
    config.validate()
    rng = np.random.default_rng(config.seed)
    shape = tuple(int(s) for s in config.shape)
    grid = _grid(shape)

    body_axes = rng.uniform(0.88, 0.97, size=3)
    body_center = rng.uniform(-0.04, 0.04, size=3)
    body = _ellipsoid(grid, body_center, body_axes)
    labels = np.full(shape, AIR, dtype=np.uint8)
    labels[body] = SOFT

    for _ in range(config.n_bone_shells):
        center = body_center + rng.uniform(-0.35, 0.35, size=3) * body_axes
        outer = rng.uniform(0.3, 0.42, size=3)
        thickness = rng.uniform(0.3, 0.45)
        shell = _ellipsoid(grid, center, outer) & ~_ellipsoid(grid, center, outer * (1 - thickness))
        labels[shell & body] = BONE

    for _ in range(config.n_air_pockets):
        center = body_center + rng.uniform(-0.5, 0.5, size=3) * body_axes
        pocket = _ellipsoid(grid, center, rng.uniform(0.06, 0.12, size=3))
        labels[pocket & body & (labels == SOFT)] = AIR

    pocket_mask = body & (labels == AIR)
    hu = np.where(labels == BONE, BONE_HU_VALUE, np.where(labels == SOFT, SOFT_HU, BACKGROUND_HU))
    hu = np.where(pocket_mask, POCKET_HU, hu)

    gz, gy, gx = rng.uniform(-1, 1, size=3)
    ramp = (gz * grid[0] + gy * grid[1] + gx * grid[2]) / (abs(gz) + abs(gy) + abs(gx))
    ct_clean = hu + RAMP_HU * ramp
    ct = ct_clean + rng.normal(0.0, config.ct_noise_sigma, size=shape)
    ct = np.clip(ct, HU_MIN, HU_MAX)

    base = np.where(labels == BONE, MRI_BONE, np.where(labels == SOFT, MRI_SOFT, MRI_AIR))
    bias = 1.0 + config.bias_field_amplitude * _smooth_field(rng, grid)
    mri = base * bias + rng.normal(0.0, config.mri_noise_sigma, size=shape)

    spacing = tuple(float(s) for s in config.spacing_mm)
    return PhantomPair(
        mri=Volume(mri, spacing, IntensitySpace.MRI_RAW),
        ct=Volume(ct, spacing, IntensitySpace.HU),
        outline=Mask(body, spacing),
        labels=labels,
        ct_clean=ct_clean.astype(np.float32),
    )


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0] >> 1)


def split_cases(case_ids: list[str], seed: int, test_fraction: float = 0.1) -> dict[str, str]:
    """Deterministic train/test assignment; at least one test case once there are two cases."""
    n = len(case_ids)
    n_test = 0 if n < 2 else max(1, int(round(test_fraction * n)))
    order = np.random.default_rng([seed, 9001]).permutation(n)
    test = {case_ids[i] for i in order[:n_test]}
    return {cid: ("test" if cid in test else "train") for cid in case_ids}


def generate_dataset(n_cases: int, config: PhantomConfig, out_dir) -> list[dict]:
    """Write ``n_cases`` phantom pairs plus ``manifest.jsonl``; returns the manifest records."""
    if n_cases < 1:
        raise PhantomConfigError(f"n_cases: must be >= 1, got {n_cases}")
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [f"case_{i:03d}" for i in range(n_cases)]
    split = split_cases(ids, config.seed)
    records = []
    for i, cid in enumerate(ids):
        cfg = PhantomConfig(**{**asdict(config), "seed": case_seed(config.seed, i)})
        pair = generate_pair(cfg)
        save_volume(pair.mri, out / f"{cid}_mri")
        save_volume(pair.ct, out / f"{cid}_ct")
        save_volume(pair.outline, out / f"{cid}_outline")
        records.append({
            "case_id": cid,
            "mri": f"{cid}_mri",
            "ct": f"{cid}_ct",
            "outline": f"{cid}_outline",
            "split": split[cid],
        })
    write_manifest(out / "manifest.jsonl", records)
    return records


def write_manifest(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
