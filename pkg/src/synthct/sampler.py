"""Outline-guided patch sampling for training and sliding-window stitching for inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .volume import IntensitySpace, Mask, Volume


class BoundsError(ValueError):
    pass


class SamplingExhaustedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    size: tuple[int, int, int] = (32, 32, 32)
    min_coverage: float = 0.70
    max_attempts: int = 1000
    seed: int = 0

    def __post_init__(self):
        if len(self.size) != 3 or any(int(s) < 1 for s in self.size):
            raise ValueError(f"patch size must be three positive integers, got {self.size}")
        if not 0.0 <= self.min_coverage <= 1.0:
            raise ValueError(f"min_coverage must lie in [0, 1], got {self.min_coverage}")
        if self.max_attempts < 1:
            raise ValueError(f"max_attempts must be >= 1, got {self.max_attempts}")


@dataclass
class PatchPair:
    mri_patch: np.ndarray
    ct_patch: np.ndarray
    origin: tuple[int, int, int]
    coverage: float


def _window(origin, size):
    return tuple(slice(o, o + s) for o, s in zip(origin, size))


def _check_window(shape, origin, size):
    for o, s, n in zip(origin, size, shape):
        if o < 0 or s < 1 or o + s > n:
            raise BoundsError(f"window origin {tuple(origin)} size {tuple(size)} exceeds volume {tuple(shape)}")


def coverage(outline: Mask, origin, size) -> float:
    """Fraction of outline voxels inside the window."""
    _check_window(outline.shape, origin, size)
    count = int(np.count_nonzero(outline.data[_window(origin, size)]))
    return count / float(np.prod(size))


def extract(volume: np.ndarray, origin, size) -> np.ndarray:
    _check_window(volume.shape, origin, size)
    return np.array(volume[_window(origin, size)])


def sample_patch(mri: Volume, ct: Volume, outline: Mask, spec: PatchSpec, rng: np.random.Generator) -> PatchPair:
    """Draw uniform window origins until the outline covers ``spec.min_coverage`` of the window."""
    if not (mri.shape == ct.shape == outline.shape):
        raise BoundsError(f"shape mismatch: mri {mri.shape}, ct {ct.shape}, outline {outline.shape}")
    if not (mri.spacing_mm == ct.spacing_mm == outline.spacing_mm):
        raise BoundsError("mri, ct and outline spacing differ")
    size = tuple(int(s) for s in spec.size)
    if any(s > n for s, n in zip(size, mri.shape)):
        raise BoundsError(f"patch {size} larger than volume {mri.shape}")
    hi = [n - s + 1 for n, s in zip(mri.shape, size)]
    for _ in range(spec.max_attempts):
        origin = tuple(int(rng.integers(0, h)) for h in hi)
        cov = coverage(outline, origin, size)
        if cov >= spec.min_coverage:
            return PatchPair(extract(mri.data, origin, size), extract(ct.data, origin, size), origin, cov)
    raise SamplingExhaustedError(
        f"no window reached coverage {spec.min_coverage} in {spec.max_attempts} attempts"
    )


def tile_origins(shape, patch_size, overlap_fraction: float = 0.5) -> list[tuple[int, int, int]]:
    """Tile starts per axis with stride ``patch * (1 - overlap)``; the last tile is clamped to the border."""
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    per_axis = []
    for n, p in zip(shape, patch_size):
        if p > n:
            raise BoundsError(f"patch {tuple(patch_size)} larger than volume {tuple(shape)}")
        stride = max(1, int(p * (1.0 - overlap_fraction)))
        starts = list(range(0, n - p + 1, stride))
        if starts[-1] != n - p:
            starts.append(n - p)
        per_axis.append(starts)
    return [(z, y, x) for z in per_axis[0] for y in per_axis[1] for x in per_axis[2]]


def sliding_window_predict(
    model,
    mri: Volume,
    patch_size,
    overlap_fraction: float = 0.5,
    order: list[int] | None = None,
) -> Volume:
    """Predict every tile and average overlaps with uniform weights.

    ``model`` is anything with ``predict(patch) -> patch`` or a plain callable.
    Tile results are accumulated in raster order of their origins whatever
    order they were evaluated in (``order`` permutes evaluation, for testing).
    """
    predict: Callable[[np.ndarray], np.ndarray] = getattr(model, "predict", model)
    size = tuple(int(s) for s in patch_size)
    origins = tile_origins(mri.shape, size, overlap_fraction)
    visit = range(len(origins)) if order is None else order
    results = {}
    for i in visit:
        patch = extract(mri.data, origins[i], size)
        out = np.asarray(predict(patch), dtype=np.float64)
        if out.shape != size:
            raise BoundsError(f"model returned {out.shape} for a {size} tile")
        results[i] = out
    acc = np.zeros(mri.shape, dtype=np.float64)
    count = np.zeros(mri.shape, dtype=np.int32)
    for i in sorted(results):
        w = _window(origins[i], size)
        acc[w] += results[i]
        count[w] += 1
    if count.min() < 1:
        raise BoundsError("tiling left voxels uncovered")
    return Volume(acc / count, mri.spacing_mm, IntensitySpace.NORMALIZED)
