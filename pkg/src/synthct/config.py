"""Declarative run configuration: YAML file + ``key=value`` overrides, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .loss import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig

RESOLVED_CONFIG_FILE = "resolved_config.yaml"


class RunConfigError(ValueError):
    pass


@dataclass
class PhantomSection:
    n_cases: int = 10
    shape: tuple[int, int, int] = (48, 64, 64)
    spacing_mm: tuple[float, float, float] = (3.0, 1.0, 1.0)
    n_bone_shells: int = 2
    n_air_pockets: int = 2
    ct_noise_sigma: float = 10.0
    mri_noise_sigma: float = 0.05
    bias_field_amplitude: float = 0.2


@dataclass
class PreprocessSection:
    raw_dir: str = "runs/phantom"
    clip_lo: float = -1024.0
    clip_hi: float = 1500.0
    stats_in_outline: bool = False


@dataclass
class TrainSection(TrainConfig):
    data_dir: str = "runs/preprocess"
    resume_from: str | None = None

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in dataclasses.fields(TrainConfig)})


@dataclass
class SynthesizeSection:
    data_dir: str = "runs/preprocess"
    checkpoint: str = "runs/train/checkpoint_e0200.ckpt"
    split: str = "test"  # "train", "test" or "all"
    cases: list[str] = field(default_factory=list)  # explicit case ids override ``split``
    overlap: float = 0.5


@dataclass
class EvaluateSection:
    pred_dir: str = "runs/synthesize"
    ref_dir: str = "runs/phantom"
    split: str = "test"
    cases: list[str] = field(default_factory=list)
    masked: bool = True
    ms_ssim_scales: int = 3


@dataclass
class GradcheckSection:
    tol: float = 1e-3
    checks: list[str] = field(default_factory=list)  # empty = full suite


@dataclass
class RunConfig:
    """All tunables. The global ``seed`` overrides the seeds of the phantom, model and trainer."""

    seed: int = 0
    phantom: PhantomSection = field(default_factory=PhantomSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    train: TrainSection = field(default_factory=TrainSection)
    synthesize: SynthesizeSection = field(default_factory=SynthesizeSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def apply_seed(self) -> None:
        self.train.seed = self.seed
        self.train.model.seed = self.seed

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise RunConfigError(f"{where}: expected a list, got {value!r}")
        elem = args[0]
        n = len(args) if args[-1] is not Ellipsis else len(value)
        if len(value) != n:
            raise RunConfigError(f"{where}: expected {n} values, got {len(value)}")
        return tuple(_coerce(v, elem, where) for v in value)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise RunConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(v, args[0], where) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise RunConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise RunConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-3) as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RunConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise RunConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _merge(obj, data: dict, prefix: str = ""):
    """Return a copy of dataclass ``obj`` with ``data`` applied; unknown keys raise."""
    if not isinstance(data, dict):
        raise RunConfigError(f"{prefix or 'config'}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in data.items():
        where = f"{prefix}{key}"
        if key not in names:
            raise RunConfigError(f"unknown config key {where!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _merge(current, value, where + ".")
        else:
            updates[key] = _coerce(value, hints[key], where)
    try:
        return dataclasses.replace(obj, **updates)
    except (ValueError, TypeError) as exc:
        raise RunConfigError(f"{prefix or 'config'}: {exc}") from exc


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise RunConfigError(f"--set {dotted}: {k!r} is not a section")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise RunConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise RunConfigError(f"--set {key}: cannot parse value {raw!r}: {exc}") from exc


def resolve(path=None, overrides: list[str] | None = None, seed: int | None = None) -> RunConfig:
    """Defaults <- config file <- ``--set`` overrides <- ``--seed``."""
    tree: dict = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise RunConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise RunConfigError(f"{path}: invalid YAML: {exc}") from exc
        tree = loaded or {}
        if not isinstance(tree, dict):
            raise RunConfigError(f"{path}: top level must be a mapping")
    for item in overrides or []:
        key, value = parse_override(item)
        _set_path(tree, key, value)
    if seed is not None:
        tree["seed"] = seed
    cfg = _merge(RunConfig(), tree)
    cfg.apply_seed()
    return cfg


def dump(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_CONFIG_FILE
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    return path


__all__ = [
    "EvaluateSection",
    "GradcheckSection",
    "LossWeights",
    "ModelConfig",
    "PhantomSection",
    "PreprocessSection",
    "RESOLVED_CONFIG_FILE",
    "RunConfig",
    "RunConfigError",
    "SynthesizeSection",
    "TrainSection",
    "dump",
    "parse_override",
    "resolve",
]
