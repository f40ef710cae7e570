"""Encoder-decoder translation networks: ``unet_lite`` and the hybrid ``mamba_lite``."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import check_manifest, load_tensors, save_tensors
from .layers import Conv3d, ConvBlock, Module
from .ssm import FORWARD_RASTER, MambaBlock
from .tensor import ShapeError, Tensor, no_grad

UNET_LITE = "unet_lite"
MAMBA_LITE = "mamba_lite"
BOTTLENECK_ONLY = "bottleneck_only"
ALL_ENCODER_STAGES = "all_encoder_stages"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = MAMBA_LITE
    levels: int = 3
    base_channels: int = 16
    mamba_placement: str = BOTTLENECK_ONLY
    patch_size: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    state_dim: int = 8
    expand: int = 2
    conv_width: int = 4
    orientations: tuple[str, ...] = (FORWARD_RASTER,)

    def validate(self) -> None:
        if self.variant not in (UNET_LITE, MAMBA_LITE):
            raise ConfigError(f"variant: unknown {self.variant!r}")
        if self.levels < 2:
            raise ConfigError(f"levels: must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels: must be >= 1, got {self.base_channels}")
        if self.mamba_placement not in (BOTTLENECK_ONLY, ALL_ENCODER_STAGES):
            raise ConfigError(f"mamba_placement: unknown {self.mamba_placement!r}")
        div = 2 ** (self.levels - 1)
        if len(self.patch_size) != 3 or any(p <= 0 or p % div for p in self.patch_size):
            raise ConfigError(f"patch_size: {tuple(self.patch_size)} must be positive and divisible by {div}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_size"] = list(self.patch_size)
        d["orientations"] = list(self.orientations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["patch_size"] = tuple(d["patch_size"])
        d["orientations"] = tuple(d.get("orientations", (FORWARD_RASTER,)))
        return cls(**d)


class UNetLite(Module):
    """U-shaped encoder-decoder with concatenation skips and an unbounded 1x1x1 head.

    With ``variant="mamba_lite"`` a :class:`MambaBlock` follows the conv pair of
    the bottleneck (or of every encoder stage).
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        chans = [config.base_channels * 2**i for i in range(config.levels)]
        self.encoders = []
        self.downs = []
        self.mambas = []
        cin = 1
        for i, c in enumerate(chans):
            if i > 0:
                self.downs.append(Conv3d(rng, chans[i - 1], chans[i - 1], kernel=2, stride=2, padding=0))
            self.encoders.append(ConvBlock(rng, cin, c))
            cin = c
        if config.variant == MAMBA_LITE:
            stages = range(config.levels) if config.mamba_placement == ALL_ENCODER_STAGES else [config.levels - 1]
            self.mamba_stages = list(stages)
            for i in self.mamba_stages:
                self.mambas.append(MambaBlock(rng, chans[i], config.state_dim, config.expand,
                                              config.conv_width, config.orientations))
        else:
            self.mamba_stages = []
        self.decoders = []
        for i in range(config.levels - 2, -1, -1):
            self.decoders.append(ConvBlock(rng, chans[i + 1] + chans[i], chans[i]))
        self.head = Conv3d(rng, chans[0], 1, kernel=1, padding=0)
        self.skip_scale = [1.0] * (config.levels - 1)

    def forward(self, x: Tensor) -> Tensor:
        ps = tuple(self.config.patch_size)
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != ps:
            raise ShapeError(f"model expects input [N, 1, {ps[0]}, {ps[1]}, {ps[2]}], got {x.shape}")
        skips = []
        mamba_of = dict(zip(self.mamba_stages, self.mambas))
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = self.downs[i - 1](x)
            x = enc(x)
            if i in mamba_of:
                x = mamba_of[i](x)
            skips.append(x)
        x = skips.pop()
        for j, dec in enumerate(self.decoders):
            skip = skips.pop()
            level = len(skips)
            if self.skip_scale[level] != 1.0:
                skip = T.scalar_mul(skip, self.skip_scale[level])
            x = dec(T.concat([T.upsample_nearest(x, 2), skip], axis=1))
        return self.head(x)

    def predict(self, patch: np.ndarray) -> np.ndarray:
        """Inference on a single ``[D, H, W]`` or batched ``[N, 1, D, H, W]`` array."""
        arr = np.asarray(patch, dtype=self.parameters()[0].dtype)
        single = arr.ndim == 3
        if single:
            arr = arr[None, None]
        with no_grad():
            out = self.forward(Tensor(arr, dtype=arr.dtype)).data
        return out[0, 0] if single else out

    def parameter_count(self) -> int:
        return parameter_count(self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        expected = {name: p.shape for name, p in self.named_parameters()}
        check_manifest(expected, tensors, "model")
        for name, p in self.named_parameters():
            p.data = tensors[name].astype(p.dtype)


def build(config: ModelConfig) -> UNetLite:
    return UNetLite(config)


def forward(model: UNetLite, mri_patch: Tensor) -> Tensor:
    return model.forward(mri_patch)


def parameter_count(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


def save_model(model: UNetLite, path, meta: dict | None = None) -> None:
    save_tensors(path, model.state_dict(), config=model.config.to_dict(), meta=meta)


def load_model(path) -> UNetLite:
    tensors, header = load_tensors(path)
    model = build(ModelConfig.from_dict(header["config"]))
    params = {k: v for k, v in tensors.items() if not k.startswith(("adam_m/", "adam_v/"))}
    params = {k.removeprefix("param/"): v for k, v in params.items()}
    model.load_state_dict(params)
    return model
