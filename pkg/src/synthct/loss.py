"""Compound training objective in HU space.

Terms: HU-banded weighted MAE, SSIM loss, and a feature-space loss over a
frozen multi-scale extractor, combined by an epoch-staged schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import check_manifest, load_tensors, save_tensors
from .tensor import Tensor
from .volume import AIR_HU, BONE_HU, HU_MAX, HU_MIN, IntensitySpace, Volume

BONE_WEIGHT = 3.0
SOFT_WEIGHT = 1.5
AIR_WEIGHT = 0.5
DATA_RANGE = HU_MAX - HU_MIN  # 2524 HU


class IntensitySpaceError(ValueError):
    pass


class LossConfigError(ValueError):
    pass


def hu_weight_map(target_hu, bone_threshold: float = BONE_HU, air_threshold: float = AIR_HU) -> np.ndarray:
    """Per-voxel weights: 3 above the bone threshold, 0.5 at or below the air threshold, 1.5 between."""
    if isinstance(target_hu, Volume):
        if target_hu.intensity_space is not IntensitySpace.HU:
            raise IntensitySpaceError(f"weight map needs an HU target, got {target_hu.intensity_space.value}")
        target_hu = target_hu.data
    t = np.asarray(target_hu)
    w = np.full(t.shape, SOFT_WEIGHT, dtype=np.float64)
    w[t > bone_threshold] = BONE_WEIGHT
    w[t <= air_threshold] = AIR_WEIGHT
    return w


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, (Tensor, Volume)) else np.asarray(x)


def weighted_mae(pred_hu: Tensor, target_hu, weights: np.ndarray | None = None, literal: bool = False) -> Tensor:
    """Weighted mean absolute error ``sum(w |pred - t|) / sum(w)``.

    ``literal=True`` divides the weighted sum by the mean weight instead,
    which grows with the voxel count. Weights never carry gradient.
    """
    if not isinstance(pred_hu, Tensor):
        pred_hu = Tensor(pred_hu)
    t = _as_array(target_hu)
    if pred_hu.shape != t.shape:
        raise T.ShapeError(f"weighted_mae: pred {pred_hu.shape} vs target {t.shape}")
    w = hu_weight_map(t) if weights is None else np.asarray(weights, dtype=np.float64)
    norm = w.mean() if literal else w.sum()
    wt = Tensor(w / norm, dtype=pred_hu.dtype)
    err = T.abs(T.sub(pred_hu, Tensor(t, dtype=pred_hu.dtype)))
    return T.sum(T.mul(err, wt))


def gaussian_kernel1d(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def ssim(pred: Tensor, target, window: int = 7, sigma: float = 1.5, data_range: float = DATA_RANGE) -> Tensor:
    """Mean SSIM over all valid window positions (and batch items), differentiable in ``pred``.

    Inputs are ``[D, H, W]`` or ``[..., D, H, W]``; the Gaussian window is separable.
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    t = Tensor(_as_array(target), dtype=pred.dtype)
    if pred.shape != t.shape:
        raise T.ShapeError(f"ssim: pred {pred.shape} vs target {t.shape}")
    if any(n < window for n in pred.shape[-3:]):
        raise T.ShapeError(f"ssim: spatial dims {pred.shape[-3:]} smaller than window {window}")
    k = gaussian_kernel1d(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    f = lambda v: T.separable_filter3d(v, k)  # noqa: E731
    mu_x, mu_y = f(pred), f(t)
    xx, yy, xy = f(T.mul(pred, pred)), f(T.mul(t, t)), f(T.mul(pred, t))
    mu_xx, mu_yy, mu_xy = T.mul(mu_x, mu_x), T.mul(mu_y, mu_y), T.mul(mu_x, mu_y)
    var_x, var_y, cov = T.sub(xx, mu_xx), T.sub(yy, mu_yy), T.sub(xy, mu_xy)
    num = T.mul(T.add(T.scalar_mul(mu_xy, 2.0), c1), T.add(T.scalar_mul(cov, 2.0), c2))
    den = T.mul(T.add(T.add(mu_xx, mu_yy), c1), T.add(T.add(var_x, var_y), c2))
    return T.mean(T.div(num, den))


def ssim_loss(pred: Tensor, target, **kwargs) -> Tensor:
    return T.sub(1.0, ssim(pred, target, **kwargs))


class FeatureExtractor(Protocol):
    n_scales: int

    def __call__(self, x: Tensor) -> list[Tensor]: ...


class RandomPyramidExtractor:
    """Frozen random 3-scale conv pyramid used as a stand-in anatomical feature model.

    Each scale is ``relu(conv3x3x3(previous))``; scales after the first use
    stride 2. Inputs in HU are divided by ``input_scale`` first. Kernels are
    plain tensors without ``requires_grad``, so gradient reaches only the input.
    """

    def __init__(self, seed: int = 1234, channels: Sequence[int] = (8, 16, 32), input_scale: float = 1000.0,
                 dtype=None):
        self.seed = seed
        self.channels = tuple(channels)
        self.input_scale = float(input_scale)
        rng = np.random.default_rng(seed)
        self.kernels: list[Tensor] = []
        cin = 1
        for c in self.channels:
            w = rng.standard_normal((c, cin, 3, 3, 3)) * np.sqrt(2.0 / (cin * 27))
            self.kernels.append(Tensor(w, dtype=dtype))
            cin = c

    @property
    def n_scales(self) -> int:
        return len(self.kernels)

    def __call__(self, x: Tensor) -> list[Tensor]:
        if x.ndim == 3:
            x = T.reshape(x, (1, 1) + x.shape)
        elif x.ndim == 4:
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
        h = T.scalar_mul(x, 1.0 / self.input_scale)
        feats = []
        for i, w in enumerate(self.kernels):
            wt = w if w.dtype == h.dtype else Tensor(w.data, dtype=h.dtype)
            h = T.relu(T.conv3d(h, wt, stride=1 if i == 0 else 2, padding=1))
            feats.append(h)
        return feats

    def save(self, path) -> None:
        tensors = {f"scale{i}": k.data for i, k in enumerate(self.kernels)}
        config = {"kind": "conv_pyramid", "seed": self.seed, "channels": list(self.channels),
                  "input_scale": self.input_scale}
        save_tensors(path, tensors, config=config)

    @classmethod
    def load(cls, path) -> "RandomPyramidExtractor":
        """Load per-scale kernels from a checkpoint-format manifest (external embeddings welcome)."""
        tensors, header = load_tensors(path)
        cfg = header["config"]
        if cfg.get("kind") != "conv_pyramid":
            raise LossConfigError(f"{path}: not a conv_pyramid extractor")
        ext = cls(seed=cfg.get("seed", 0), channels=cfg["channels"], input_scale=cfg.get("input_scale", 1000.0))
        expected = {f"scale{i}": k.shape for i, k in enumerate(ext.kernels)}
        check_manifest(expected, tensors, "feature extractor")
        ext.kernels = [Tensor(tensors[f"scale{i}"]) for i in range(len(ext.kernels))]
        return ext


def afp_loss(pred_hu: Tensor, target_hu, extractor: FeatureExtractor) -> Tensor:
    """Mean over scales of the mean absolute feature difference."""
    if not isinstance(pred_hu, Tensor):
        pred_hu = Tensor(pred_hu)
    target = Tensor(_as_array(target_hu), dtype=pred_hu.dtype)
    fp = extractor(pred_hu)
    with T.no_grad():
        ft = extractor(target)
    if len(fp) != len(ft) or len(fp) != extractor.n_scales:
        raise LossConfigError(f"extractor returned {len(fp)}/{len(ft)} scales, expected {extractor.n_scales}")
    terms = []
    for a, b in zip(fp, ft):
        if a.shape != b.shape:
            raise LossConfigError(f"feature scale shapes differ: {a.shape} vs {b.shape}")
        terms.append(T.mean(T.abs(T.sub(a, b))))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scalar_mul(total, 1.0 / len(terms))


@dataclass
class LossWeights:
    w1: float = 1.0
    w2: float = 0.1
    w3: float = 0.5

    def __post_init__(self):
        ws = (self.w1, self.w2, self.w3)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise LossConfigError(f"loss weights must be >= 0 with at least one > 0, got {ws}")


@dataclass
class LossSchedule:
    switch_epoch: int = 100
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.switch_epoch < 0:
            raise LossConfigError(f"switch_epoch must be >= 0, got {self.switch_epoch}")


def staged_loss(
    epoch: int,
    pred_hu: Tensor,
    target_hu,
    schedule: LossSchedule,
    extractor: FeatureExtractor | None,
    literal_wmae: bool = False,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted MAE alone before ``switch_epoch``; afterwards ``w1*wMAE + w2*AFP + w3*SSIM_loss``.

    Returns the scalar loss and the per-term values actually evaluated.
    """
    if epoch < 0:
        raise LossConfigError(f"epoch must be >= 0, got {epoch}")
    wmae = weighted_mae(pred_hu, target_hu, literal=literal_wmae)
    if epoch < schedule.switch_epoch:
        return wmae, {"wmae": float(wmae.data)}
    if extractor is None:
        raise LossConfigError("staged loss after the switch epoch needs a feature extractor")
    w = schedule.weights
    afp = afp_loss(pred_hu, target_hu, extractor)
    sl = ssim_loss(pred_hu, target_hu)
    total = T.add(T.add(T.scalar_mul(wmae, w.w1), T.scalar_mul(afp, w.w2)), T.scalar_mul(sl, w.w3))
    return total, {"wmae": float(wmae.data), "afp": float(afp.data), "ssim_loss": float(sl.data)}
