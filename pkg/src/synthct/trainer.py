"""AdamW + polynomial decay training loop with the staged loss, checkpoints and a line-delimited log."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, check_manifest, load_tensors, save_tensors
from .loss import LossSchedule, LossWeights, RandomPyramidExtractor, hu_weight_map, staged_loss
from .model import ModelConfig, UNetLite, build
from .preprocess import Case, Dataset
from .sampler import PatchSpec, sample_patch, sliding_window_predict
from .tensor import NonFiniteError, Tensor


class TrainError(RuntimeError):
    pass


class NonFiniteGradientError(TrainError):
    pass


class DivergedError(TrainError):
    """Training produced a non-finite loss or gradient; ``last_good`` names the surviving checkpoint."""

    def __init__(self, message: str, last_good: Path | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    poly_power: float = 0.9
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 2
    patches_per_epoch: int = 32
    switch_epoch: int = 100
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    min_coverage: float = 0.70
    max_attempts: int = 1000
    seed: int = 0
    checkpoint_every: int = 50
    val_every: int = 10
    val_overlap: float = 0.5
    extractor_seed: int = 1234
    literal_wmae: bool = False

    def validate(self) -> None:
        if not self.lr0 > 0:
            raise ValueError(f"lr0: must be > 0, got {self.lr0}")
        if not self.poly_power > 0:
            raise ValueError(f"poly_power: must be > 0, got {self.poly_power}")
        if self.epochs < 1:
            raise ValueError(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.patches_per_epoch < 1:
            raise ValueError("batch_size and patches_per_epoch must be >= 1")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay: must be >= 0, got {self.weight_decay}")
        if self.checkpoint_every < 1 or self.val_every < 1:
            raise ValueError("checkpoint_every and val_every must be >= 1")
        self.model.validate()
        LossSchedule(self.switch_epoch, self.loss_weights)
        self.patch_spec()

    def patch_spec(self) -> PatchSpec:
        return PatchSpec(tuple(self.model.patch_size), self.min_coverage, self.max_attempts, self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)


def poly_lr(epoch: int, total_epochs: int, lr0: float, power: float = 0.9) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * (1.0 - epoch / total_epochs) ** power


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """In-place AdamW update from ``p.grad``; parameters without a gradient count as zero gradient."""
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.m[name].shape != p.shape:
            raise TrainError(f"optimizer buffer shape {state.m[name].shape} != parameter {name} {p.shape}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - lr * update - lr * weight_decay * p.data).astype(p.dtype)


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: UNetLite, state: OptimizerState, epoch: int, config: TrainConfig) -> None:
    """``epoch`` is the number of completed epochs."""
    params = dict(model.named_parameters())
    tensors = {}
    for name, p in params.items():
        tensors[f"param/{name}"] = p.data
        tensors[f"adam_m/{name}"] = state.m[name]
        tensors[f"adam_v/{name}"] = state.v[name]
    meta = {"epoch": int(epoch), "step": int(state.step), "train": config.to_dict()}
    save_tensors(path, tensors, config=model.config.to_dict(), meta=meta)


def load_checkpoint(path, expected_model: ModelConfig | None = None) -> tuple[UNetLite, OptimizerState, int]:
    tensors, header = load_tensors(path)
    cfg = ModelConfig.from_dict(header["config"])
    if expected_model is not None and cfg.to_dict() != expected_model.to_dict():
        diff = sorted(k for k, v in expected_model.to_dict().items() if cfg.to_dict().get(k) != v)
        raise CheckpointError(f"{path}: checkpoint model config differs in {diff}")
    model = build(cfg)
    names = [n for n, _ in model.named_parameters()]
    shapes = {n: p.shape for n, p in model.named_parameters()}
    expected = {f"{kind}/{n}": shapes[n] for kind in ("param", "adam_m", "adam_v") for n in names}
    check_manifest(expected, tensors, "training checkpoint")
    model.load_state_dict({n: tensors[f"param/{n}"] for n in names})
    state = OptimizerState({n: tensors[f"adam_m/{n}"].copy() for n in names},
                           {n: tensors[f"adam_v/{n}"].copy() for n in names},
                           int(header["meta"]["step"]))
    return model, state, int(header["meta"]["epoch"])


# --- training ----------------------------------------------------------------


def _sample_batch(data: Dataset, train_cases: list[Case], spec: PatchSpec, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    mris, cts = [], []
    for _ in range(n):
        case = train_cases[int(rng.integers(len(train_cases)))]
        pair = sample_patch(case.mri, case.ct, case.outline, spec, rng)
        mris.append(pair.mri_patch)
        cts.append(pair.ct_patch)
    mri = np.stack(mris)[:, None]
    ct_hu = np.stack(cts)[:, None].astype(np.float64) * data.ct_stats.std + data.ct_stats.mean
    return mri, ct_hu


def validation_wmae(model: UNetLite, data: Dataset, cases: list[Case], overlap: float = 0.5) -> float:
    """Mean over cases of the HU-weighted MAE inside the outline, from sliding-window predictions."""
    vals = []
    for case in cases:
        pred = sliding_window_predict(model, case.mri, model.config.patch_size, overlap)
        pred_hu = np.clip(pred.data.astype(np.float64) * data.ct_stats.std + data.ct_stats.mean,
                          data.ct_stats.clip_lo, data.ct_stats.clip_hi)
        target = data.ct_hu(case)
        inside = case.outline.data
        w = hu_weight_map(target)[inside]
        vals.append(float((w * np.abs(pred_hu[inside] - target[inside])).sum() / w.sum()))
    return float(np.mean(vals))


@dataclass
class TrainResult:
    model: UNetLite
    state: OptimizerState
    epochs_completed: int
    log: list[dict]
    validation: list[dict]
    final_checkpoint: Path


def train(config: TrainConfig, data: Dataset, out_dir, resume_from=None, progress=None,
          until_epoch: int | None = None) -> TrainResult:
    """Run (or resume) training; writes ``train_log.jsonl``, ``val_log.jsonl`` and checkpoints to ``out_dir``.

    Each epoch draws its patches from ``default_rng([seed, epoch])``, so resuming
    from a checkpoint after epoch k replays exactly what an uninterrupted run does.
    ``until_epoch`` stops early (with a checkpoint) without changing the schedule,
    for chunked runs that are continued with ``resume_from``.
    """
    config.validate()
    stop = config.epochs if until_epoch is None else int(until_epoch)
    if not 1 <= stop <= config.epochs:
        raise TrainError(f"until_epoch must be in [1, {config.epochs}], got {until_epoch}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_cases = data.split("train")
    val_cases = data.split("test")
    if not train_cases:
        raise TrainError("dataset has no training cases")
    spec = config.patch_spec()
    schedule = LossSchedule(config.switch_epoch, config.loss_weights)
    extractor = RandomPyramidExtractor(seed=config.extractor_seed)
    std, mean = data.ct_stats.std, data.ct_stats.mean

    log_path, val_path = out / "train_log.jsonl", out / "val_log.jsonl"
    if resume_from is not None:
        model, state, start = load_checkpoint(resume_from, config.model)
        log = [r for r in _read_jsonl(log_path) if r["epoch"] < start]
        validation = [r for r in _read_jsonl(val_path) if r["epochs_trained"] <= start]
        last_good: Path | None = Path(resume_from)
    else:
        model = build(config.model)
        state = OptimizerState.zeros_like(dict(model.named_parameters()))
        start, log, validation, last_good = 0, [], [], None
        if val_cases:
            validation.append({"epochs_trained": 0, "val_wmae": validation_wmae(model, data, val_cases, config.val_overlap)})
    _write_jsonl(log_path, log)
    _write_jsonl(val_path, validation)
    params = dict(model.named_parameters())
    for p in params.values():
        p.requires_grad = True

    steps = -(-config.patches_per_epoch // config.batch_size)
    for epoch in range(start, stop):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        lr = poly_lr(epoch, config.epochs, config.lr0, config.poly_power)
        totals: dict[str, float] = {}
        losses = []
        remaining = config.patches_per_epoch
        for _ in range(steps):
            n = min(config.batch_size, remaining)
            remaining -= n
            mri, ct_hu = _sample_batch(data, train_cases, spec, n, rng)
            model.zero_grad()
            try:
                pred = model(Tensor(mri))
                pred_hu = T.add(T.scalar_mul(pred, std), mean)
                loss, terms = staged_loss(epoch, pred_hu, ct_hu, schedule, extractor, config.literal_wmae)
                if not np.isfinite(loss.data):
                    raise NonFiniteError("loss is not finite")
                loss.backward()
                adamw_step(params, state, lr, config.betas, config.eps, config.weight_decay)
            except (NonFiniteError, NonFiniteGradientError) as exc:
                raise DivergedError(f"epoch {epoch}: {exc}; last good checkpoint: {last_good}", last_good) from exc
            losses.append(float(loss.data))
            for k, v in terms.items():
                totals[k] = totals.get(k, 0.0) + v
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.mean(losses)),
            "wmae": totals["wmae"] / steps,
            "ssim_loss": totals["ssim_loss"] / steps if "ssim_loss" in totals else None,
            "afp": totals["afp"] / steps if "afp" in totals else None,
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 1),
        }
        log.append(record)
        _append_jsonl(log_path, record)
        done = epoch + 1
        if val_cases and (done % config.val_every == 0 or done == config.epochs):
            v = {"epochs_trained": done, "val_wmae": validation_wmae(model, data, val_cases, config.val_overlap)}
            validation.append(v)
            _append_jsonl(val_path, v)
        if done % config.checkpoint_every == 0 or done == stop:
            last_good = out / f"checkpoint_e{done:04d}.ckpt"
            save_checkpoint(last_good, model, state, done, config)
        if progress is not None:
            progress(record)
    done = max(start, stop)
    final = out / f"checkpoint_e{done:04d}.ckpt"
    if not final.exists():
        save_checkpoint(final, model, state, done, config)
    return TrainResult(model, state, done, log, validation, final)


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")
