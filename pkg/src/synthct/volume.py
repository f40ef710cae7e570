"""Volume data model, HU clipping, z-score normalization, resampling and the on-disk container.

Voxel order is (z, y, x) row-major; spacing is stored as (sz, sy, sx) in mm.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

HU_MIN = -1024.0
HU_MAX = 1500.0
# Tissue band thresholds shared by the loss weights and surrogate segmentation.
BONE_HU = 300.0
AIR_HU = -700.0


class IntensitySpace(str, enum.Enum):
    HU = "HU"
    MRI_RAW = "MRI_RAW"
    NORMALIZED = "NORMALIZED"


class VolumeError(ValueError):
    pass


class InvalidRangeError(VolumeError):
    pass


class DegenerateInputError(VolumeError):
    pass


class EmptyInputError(VolumeError):
    pass


class FormatError(VolumeError):
    pass


def _spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise InvalidRangeError(f"spacing_mm must be three positive reals, got {spacing}")
    return sp


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_space: IntensitySpace = IntensitySpace.HU

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume data must be a non-empty 3-d grid, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise VolumeError("volume data contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", _spacing(self.spacing_mm))
        object.__setattr__(self, "intensity_space", IntensitySpace(self.intensity_space))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data, intensity_space=None) -> "Volume":
        return Volume(data, self.spacing_mm, intensity_space or self.intensity_space)


@dataclass(frozen=True)
class Mask:
    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=bool)
        if data.ndim != 3:
            raise VolumeError(f"mask must be 3-d, got shape {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", _spacing(self.spacing_mm))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    clip_lo: float = HU_MIN
    clip_hi: float = HU_MAX
    scope: str = "DATASET"

    def __post_init__(self):
        if not self.std > 0:
            raise InvalidRangeError(f"NormStats.std must be > 0, got {self.std}")
        if not self.clip_lo < self.clip_hi:
            raise InvalidRangeError(f"clip_lo {self.clip_lo} must be < clip_hi {self.clip_hi}")
        if self.scope not in ("PER_SCAN", "DATASET"):
            raise VolumeError(f"unknown NormStats scope {self.scope!r}")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "clip_lo": self.clip_lo,
                "clip_hi": self.clip_hi, "scope": self.scope}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(float(d["mean"]), float(d["std"]), float(d["clip_lo"]), float(d["clip_hi"]), d["scope"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def clip_hu(v: Volume, lo: float = HU_MIN, hi: float = HU_MAX) -> Volume:
    if not lo < hi:
        raise InvalidRangeError(f"clip range [{lo}, {hi}] is empty")
    return v.with_data(np.clip(v.data, lo, hi), IntensitySpace.HU)


def _moments(values: np.ndarray) -> tuple[float, float]:
    # float64 accumulation keeps the reduction independent of chunking
    x = values.astype(np.float64).ravel()
    mean = float(x.mean())
    std = float(np.sqrt(((x - mean) ** 2).mean()))
    return mean, std


def zscore_per_scan(v: Volume) -> tuple[Volume, NormStats]:
    mean, std = _moments(v.data)
    if std < 1e-8:
        raise DegenerateInputError("cannot z-score a constant volume")
    out = (v.data.astype(np.float64) - mean) / std
    lo, hi = float(v.data.min()), float(v.data.max())
    return v.with_data(out, IntensitySpace.NORMALIZED), NormStats(mean, std, lo, hi if hi > lo else lo + 1, "PER_SCAN")


def zscore_dataset(
    vols: Sequence[Volume],
    clip_lo: float = HU_MIN,
    clip_hi: float = HU_MAX,
    masks: Sequence[Mask] | None = None,
) -> tuple[list[Volume], NormStats]:
    """Normalize a collection with one pooled mean/std.

    Statistics are taken over every voxel of every volume unless ``masks`` is
    given, in which case only voxels inside the masks are pooled.
    """
    if len(vols) == 0:
        raise EmptyInputError("zscore_dataset needs at least one volume")
    if masks is None:
        pooled = np.concatenate([v.data.ravel() for v in vols])
    else:
        pooled = np.concatenate([v.data[m.data] for v, m in zip(vols, masks)])
    mean, std = _moments(pooled)
    if std < 1e-8:
        raise DegenerateInputError("pooled intensities are constant")
    stats = NormStats(mean, std, clip_lo, clip_hi, "DATASET")
    return [normalize(v, stats) for v in vols], stats


def normalize(v: Volume, stats: NormStats) -> Volume:
    out = (v.data.astype(np.float64) - stats.mean) / stats.std
    return v.with_data(out, IntensitySpace.NORMALIZED)


def denormalize(v: Volume, stats: NormStats) -> Volume:
    out = np.clip(v.data.astype(np.float64) * stats.std + stats.mean, stats.clip_lo, stats.clip_hi)
    return v.with_data(out, IntensitySpace.HU)


def _interp_axis(data: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = data.shape[axis]
    c = np.clip(coords, 0, n - 1)
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = (c - i0).astype(data.dtype)
    shape = [1] * data.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(data, i0, axis=axis)
    b = np.take(data, i1, axis=axis)
    return a + (b - a) * frac


def resample_trilinear(v: Volume, new_spacing_mm) -> Volume:
    """Resample onto a grid with ``new_spacing_mm``, keeping the physical extent.

    Voxel centers are aligned so that output voxel ``i`` sits at input
    coordinate ``(i + 0.5) * new / old - 0.5``; samples outside the grid clamp
    to the border.
    """
    new = _spacing(new_spacing_mm)
    if new == v.spacing_mm:
        return Volume(v.data.copy(), new, v.intensity_space)
    data = v.data.astype(np.float64)
    for axis in range(3):
        old_n, old_s, new_s = v.shape[axis], v.spacing_mm[axis], new[axis]
        n_out = max(1, int(round(old_n * old_s / new_s)))
        coords = (np.arange(n_out) + 0.5) * (new_s / old_s) - 0.5
        data = _interp_axis(data, coords, axis)
    return Volume(data, new, v.intensity_space)


# --- container format -------------------------------------------------------

def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def save_volume(v: Volume | Mask, path) -> None:
    """Write ``<path>.json`` (header) and ``<path>.raw`` (float32 LE payload)."""
    hpath, rpath = _paths(path)
    is_mask = isinstance(v, Mask)
    header = {
        "shape": list(v.shape),
        "spacing_mm": list(v.spacing_mm),
        "dtype": "f32le",
        "intensity_space": IntensitySpace.NORMALIZED.value if is_mask else v.intensity_space.value,
        "mask": is_mask,
    }
    hpath.parent.mkdir(parents=True, exist_ok=True)
    rpath.write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    hpath.write_text(json.dumps(header) + "\n", encoding="utf-8")


def load_volume(path) -> tuple[Volume, Mask | None]:
    """Read a container. Mask files (``"mask": true``) also return the boolean Mask."""
    hpath, rpath = _paths(path)
    try:
        header = json.loads(hpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{hpath}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{hpath}: header must be a JSON object")
    for key in ("shape", "spacing_mm", "dtype", "intensity_space", "mask"):
        if key not in header:
            raise FormatError(f"{hpath}: missing field {key!r}")
    shape = header["shape"]
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s > 0 for s in shape)):
        raise FormatError(f"{hpath}: field 'shape' must be three positive integers, got {shape!r}")
    if header["dtype"] != "f32le":
        raise FormatError(f"{hpath}: field 'dtype' must be 'f32le', got {header['dtype']!r}")
    try:
        space = IntensitySpace(header["intensity_space"])
    except ValueError:
        raise FormatError(f"{hpath}: unknown field 'intensity_space' value {header['intensity_space']!r}") from None
    if not isinstance(header["mask"], bool):
        raise FormatError(f"{hpath}: field 'mask' must be true or false")
    sp = header["spacing_mm"]
    if not (isinstance(sp, list) and len(sp) == 3 and all(isinstance(s, (int, float)) and s > 0 for s in sp)):
        raise FormatError(f"{hpath}: field 'spacing_mm' must be three positive reals, got {sp!r}")
    payload = np.frombuffer(rpath.read_bytes(), dtype="<f4")
    expected = shape[0] * shape[1] * shape[2]
    if payload.size != expected:
        raise FormatError(f"{rpath}: field 'shape' {shape} needs {expected} values, payload has {payload.size}")
    data = payload.reshape(shape).astype(np.float32)
    vol = Volume(data, tuple(sp), space)
    mask = Mask(data != 0, tuple(sp)) if header["mask"] else None
    return vol, mask


def load_mask(path) -> Mask:
    vol, mask = load_volume(path)
    if mask is None:
        raise FormatError(f"{path}: container is not a mask")
    return mask
