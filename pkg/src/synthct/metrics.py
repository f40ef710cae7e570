"""Evaluation in HU: MAE, PSNR, MS-SSIM, plus DSC / HD95 over surrogate threshold segmentations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import AIR_HU, BONE_HU, HU_MAX, HU_MIN, Mask, Volume

DATA_RANGE = HU_MAX - HU_MIN
# Standard five-scale MS-SSIM exponents; fewer scales use a renormalized prefix.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MIN_COMPONENT_VOXELS = 10


class MetricError(ValueError):
    pass


class EmptyMaskError(MetricError):
    pass


class UndefinedMetricError(MetricError):
    pass


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, (Volume, Mask)) else x)


def _scope(pred, target, scope) -> np.ndarray:
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise MetricError(f"shape mismatch: {p.shape} vs {t.shape}")
    m = np.ones(p.shape, dtype=bool) if scope is None else _arr(scope).astype(bool)
    if m.shape != p.shape:
        raise MetricError(f"scope shape {m.shape} != volume shape {p.shape}")
    if not m.any():
        raise EmptyMaskError("evaluation scope is empty")
    return m


def mae_hu(pred, target, scope=None) -> float:
    m = _scope(pred, target, scope)
    diff = _arr(pred).astype(np.float64)[m] - _arr(target).astype(np.float64)[m]
    return float(np.abs(diff).mean())


def psnr(pred, target, scope=None, data_range: float = DATA_RANGE) -> float:
    """PSNR in dB; zero error returns ``math.inf`` (the perfect-prediction sentinel)."""
    m = _scope(pred, target, scope)
    diff = _arr(pred).astype(np.float64)[m] - _arr(target).astype(np.float64)[m]
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gauss(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    for axis in range(3):
        m = x.shape[axis] - k.size + 1
        xm = np.moveaxis(x, axis, 0)
        acc = sum(k[i] * xm[i:i + m] for i in range(k.size))
        x = np.moveaxis(acc, 0, axis)
    return x


def _ssim_maps(x: np.ndarray, y: np.ndarray, win: int, sigma: float, data_range: float):
    k = _gauss(win, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    vx = _filter_valid(x * x, k) - mx * mx
    vy = _filter_valid(y * y, k) - my * my
    cxy = _filter_valid(x * y, k) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * cxy + c2) / (vx + vy + c2)
    return lum, cs


def ssim(pred, target, win_size: int = 7, sigma: float = 1.5, data_range: float = DATA_RANGE) -> float:
    x, y = _arr(pred).astype(np.float64), _arr(target).astype(np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < win_size:
        raise MetricError(f"volume {x.shape} smaller than the {win_size}^3 SSIM window")
    lum, cs = _ssim_maps(x, y, win_size, sigma, data_range)
    return float((lum * cs).mean())


def _pool2(x: np.ndarray) -> np.ndarray:
    d, h, w = (s // 2 * 2 for s in x.shape)
    x = x[:d, :h, :w]
    return x.reshape(d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(1, 3, 5))


def max_ms_ssim_scales(shape, win_size: int = 7) -> int:
    scales, s = 0, min(shape)
    while s >= win_size:
        scales += 1
        s //= 2
    return scales


def ms_ssim(pred, target, scales: int = 3, win_size: int = 7, sigma: float = 1.5,
            data_range: float = DATA_RANGE) -> float:
    """Multi-scale SSIM: mean contrast-structure at each finer scale, full SSIM at the coarsest.

    Exponents are the standard published weights truncated to ``scales`` and
    renormalized; scales are linked by 2x average pooling. Negative
    contrast-structure means are clamped to 0, so the result lies in [0, 1].
    """
    x, y = _arr(pred).astype(np.float64), _arr(target).astype(np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise MetricError(f"scales must be in [1, {len(MS_SSIM_WEIGHTS)}], got {scales}")
    feasible = max_ms_ssim_scales(x.shape, win_size)
    if scales > feasible:
        raise MetricError(f"volume {x.shape} supports at most {feasible} scales with a {win_size}^3 window")
    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    value = 1.0
    for j in range(scales):
        lum, cs = _ssim_maps(x, y, win_size, sigma, data_range)
        if j == scales - 1:
            term = (lum * cs).mean()
        else:
            term = cs.mean()
            x, y = _pool2(x), _pool2(y)
        value *= max(float(term), 0.0) ** weights[j]
    return float(value)


def threshold_segment(ct, kind: str, scope=None) -> Mask:
    """Surrogate segmentation on HU thresholds shared with the loss weight bands.

    ``bone``: voxels above the bone threshold (inside ``scope``), with
    components smaller than 10 voxels removed. ``body``: largest connected
    component above the air threshold, holes filled.
    """
    data = _arr(ct)
    spacing = ct.spacing_mm if isinstance(ct, Volume) else (1.0, 1.0, 1.0)
    if kind == "bone":
        m = data > BONE_HU
        if scope is not None:
            m &= _arr(scope).astype(bool)
        lab, n = ndimage.label(m)
        if n:
            sizes = np.bincount(lab.ravel())
            keep = sizes >= MIN_COMPONENT_VOXELS
            keep[0] = False
            m = keep[lab]
    elif kind == "body":
        m = data > AIR_HU
        lab, n = ndimage.label(m)
        if n:
            sizes = np.bincount(lab.ravel())
            sizes[0] = 0
            m = lab == int(np.argmax(sizes))
            m = ndimage.binary_fill_holes(m)
    else:
        raise MetricError(f"unknown segmentation kind {kind!r}")
    return Mask(m, spacing)


def dice(a, b) -> tuple[float, bool]:
    """Return ``(dsc, degenerate)``; two empty masks give ``(1.0, True)``."""
    x, y = _arr(a).astype(bool), _arr(b).astype(bool)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    sa, sb = int(x.sum()), int(y.sum())
    if sa + sb == 0:
        return 1.0, True
    return 2.0 * int((x & y).sum()) / (sa + sb), False


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (the grid border counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return m & ~interior


def directed_surface_distances(a, b, spacing_mm) -> tuple[np.ndarray, np.ndarray]:
    """Distances (mm) from each surface voxel of ``a`` to the nearest surface voxel of ``b`` and vice versa."""
    sa, sb = surface_voxels(_arr(a)), surface_voxels(_arr(b))
    if not sa.any() or not sb.any():
        raise UndefinedMetricError("HD95 is undefined for an empty mask")
    sp = np.asarray(spacing_mm, dtype=np.float64)
    pa = np.argwhere(sa) * sp
    pb = np.argwhere(sb) * sp
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return d_ab, d_ba


def hd95(a, b, spacing_mm=(1.0, 1.0, 1.0), pooled: bool = True) -> float:
    """95th percentile surface distance in mm.

    ``pooled=True`` takes the percentile over both directed distance sets
    together; ``pooled=False`` returns the larger of the two per-direction
    95th percentiles. Percentiles interpolate linearly.
    """
    if _arr(a).shape != _arr(b).shape:
        raise MetricError(f"shape mismatch: {_arr(a).shape} vs {_arr(b).shape}")
    d_ab, d_ba = directed_surface_distances(a, b, spacing_mm)
    if pooled:
        return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


# --- reports -----------------------------------------------------------------

METRIC_KEYS = ("mae_hu", "psnr_db", "ms_ssim", "dsc_bone", "dsc_body", "hd95_bone_mm", "hd95_body_mm")


@dataclass
class CaseReport:
    case_id: str
    mae_hu: float | None = None
    psnr_db: float | None = None
    ms_ssim: float | None = None
    dsc: dict[str, float | None] = field(default_factory=dict)
    hd95_mm: dict[str, float | None] = field(default_factory=dict)
    scope: str = "outline"
    flags: list[str] = field(default_factory=list)

    def values(self) -> dict[str, float | None]:
        out = {"mae_hu": self.mae_hu, "psnr_db": self.psnr_db, "ms_ssim": self.ms_ssim}
        for s in ("bone", "body"):
            out[f"dsc_{s}"] = self.dsc.get(s)
            out[f"hd95_{s}_mm"] = self.hd95_mm.get(s)
        return out

    def to_record(self) -> dict:
        vals = {k: (None if v is None else ("inf" if v == math.inf else v)) for k, v in self.values().items()}
        return {"case_id": self.case_id, **vals, "scope": self.scope, "flags": list(self.flags)}


@dataclass
class AggregateReport:
    mean: dict[str, float]
    std: dict[str, float]
    n_cases: int
    n_used: dict[str, int]
    notes: list[str] = field(default_factory=list)

    def format(self) -> str:
        lines = [f"cases: {self.n_cases}"]
        for k in METRIC_KEYS:
            if k in self.mean:
                lines.append(f"{k}: {self.mean[k]:.4f} ± {self.std[k]:.4f}  (n={self.n_used[k]})")
            else:
                lines.append(f"{k}: n/a")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def evaluate_case(case_id: str, pred: Volume, target: Volume, outline: Mask | None = None,
                  ms_ssim_scales: int = 3, masked: bool = True) -> CaseReport:
    """All five metrics for one case. Failures become flags rather than exceptions."""
    rep = CaseReport(case_id, scope="outline" if masked and outline is not None else "full")
    scope = outline if masked else None
    try:
        rep.mae_hu = mae_hu(pred, target, scope)
        rep.psnr_db = psnr(pred, target, scope)
        if rep.psnr_db == math.inf:
            rep.flags.append("psnr_infinite")
    except MetricError as exc:
        rep.flags.append(f"similarity_error: {exc}")
    try:
        p, t = pred.data.astype(np.float64), target.data.astype(np.float64)
        if scope is not None:
            inside = _arr(scope).astype(bool)
            p = np.where(inside, p, HU_MIN)
            t = np.where(inside, t, HU_MIN)
        scales = min(ms_ssim_scales, max_ms_ssim_scales(p.shape))
        if scales < ms_ssim_scales:
            rep.flags.append(f"ms_ssim_scales_reduced_to_{scales}")
        rep.ms_ssim = ms_ssim(p, t, scales=scales)
    except MetricError as exc:
        rep.flags.append(f"ms_ssim_error: {exc}")
    for kind in ("bone", "body"):
        seg_scope = outline if kind == "bone" else None
        mp = threshold_segment(pred, kind, seg_scope)
        mt = threshold_segment(target, kind, seg_scope)
        d, degenerate = dice(mp, mt)
        rep.dsc[kind] = d
        if degenerate:
            rep.flags.append(f"dsc_{kind}_both_empty")
        try:
            rep.hd95_mm[kind] = hd95(mp, mt, target.spacing_mm)
        except UndefinedMetricError:
            rep.hd95_mm[kind] = None
            rep.flags.append(f"hd95_{kind}_undefined_empty_mask")
    return rep


def aggregate(reports: Sequence[CaseReport]) -> AggregateReport:
    """Unweighted mean and population std per metric; missing or infinite values are excluded with a note."""
    mean, std, used, notes = {}, {}, {}, []
    for key in METRIC_KEYS:
        vals = [r.values()[key] for r in reports]
        finite = [v for v in vals if v is not None and math.isfinite(v)]
        dropped = len(vals) - len(finite)
        if dropped:
            notes.append(f"{key}: {dropped} case(s) excluded (undefined or infinite)")
        used[key] = len(finite)
        if finite:
            arr = np.asarray(finite, dtype=np.float64)
            mean[key] = float(arr.mean())
            std[key] = float(arr.std())
    return AggregateReport(mean, std, len(reports), used, notes)


def write_reports(reports: Sequence[CaseReport], out_dir) -> AggregateReport:
    """Write ``report.jsonl`` (one record per case) and ``report.txt`` (table + aggregate block)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    agg = aggregate(reports)
    with open(out / "report.jsonl", "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
    header = ["case_id", *METRIC_KEYS]
    rows = ["\t".join(header)]
    for r in reports:
        vals = r.values()
        rows.append("\t".join([r.case_id] + ["-" if vals[k] is None else f"{vals[k]:.4f}" for k in METRIC_KEYS]))
    text = "\n".join(rows) + "\n\n" + agg.format() + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    return agg
