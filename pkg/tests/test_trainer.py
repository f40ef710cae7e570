import hashlib
import json
import math

import numpy as np
import pytest

from synthct import trainer as trainer_mod
from synthct.checkpoint import CheckpointError
from synthct.model import MAMBA_LITE, ModelConfig
from synthct.phantom import PhantomConfig, case_seed, generate_pair, split_cases
from synthct.preprocess import RawCase, preprocess_cases
from synthct.tensor import Tensor, precision
from synthct.trainer import (
    DivergedError,
    NonFiniteGradientError,
    OptimizerState,
    TrainConfig,
    adamw_step,
    load_checkpoint,
    poly_lr,
    train,
)

TINY_MODEL = ModelConfig(variant=MAMBA_LITE, levels=2, base_channels=4, patch_size=(16, 16, 16), state_dim=4)


@pytest.fixture(scope="module")
def tiny_data():
    ids = [f"case_{i:03d}" for i in range(4)]
    split = split_cases(ids, 0)
    raw = []
    for i, cid in enumerate(ids):
        p = generate_pair(PhantomConfig(shape=(24, 32, 32), seed=case_seed(0, i)))
        raw.append(RawCase(cid, p.mri, p.ct, p.outline, split[cid]))
    return preprocess_cases(raw)


def tiny_config(**kw):
    base = dict(epochs=4, switch_epoch=2, batch_size=2, patches_per_epoch=2, model=TINY_MODEL,
                checkpoint_every=2, val_every=2, val_overlap=0.0)
    base.update(kw)
    return TrainConfig(**base)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- schedule and optimizer ----------------------------------------------------------

def test_poly_lr_values():
    assert poly_lr(0, 200, 5e-4) == 5e-4
    assert poly_lr(100, 200, 5e-4) == pytest.approx(2.679e-4, abs=5e-8)
    assert poly_lr(200, 200, 5e-4) == 0.0
    lrs = [poly_lr(e, 200, 5e-4) for e in range(201)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        poly_lr(201, 200, 5e-4)


def _param(values, grad):
    with precision(np.float64):
        p = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
    p.grad = None if grad is None else np.array(grad, dtype=np.float64)
    return p


def test_adamw_zero_grad_only_decays():
    p = _param([1.0, -2.0], [0.0, 0.0])
    state = OptimizerState.zeros_like({"p": p})
    adamw_step({"p": p}, state, lr=0.1, weight_decay=0.0)
    assert np.array_equal(p.data, [1.0, -2.0])
    adamw_step({"p": p}, state, lr=0.1, weight_decay=0.5)
    assert np.allclose(p.data, [0.95, -1.9])


def test_adamw_first_step_is_minus_lr_times_sign():
    p = _param([0.3, 0.3, 0.3], [2.0, -0.01, 50.0])
    state = OptimizerState.zeros_like({"p": p})
    adamw_step({"p": p}, state, lr=1e-3, weight_decay=0.0)
    assert np.allclose(p.data - 0.3, [-1e-3, 1e-3, -1e-3], atol=1e-9)
    assert state.step == 1


def test_adamw_matches_scalar_reference():
    grads = [0.5, -1.2, 0.3, 2.0, -0.7]
    lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 0.01
    x, m, v = 1.5, 0.0, 0.0
    p = _param([1.5], None)
    state = OptimizerState.zeros_like({"p": p})
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps) - lr * wd * x
        p.grad = np.array([g])
        adamw_step({"p": p}, state, lr, (b1, b2), eps, wd)
        assert p.data[0] == pytest.approx(x, abs=1e-7)


def test_adamw_rejects_nan_before_touching_anything():
    p = _param([1.0], [np.nan])
    state = OptimizerState.zeros_like({"p": p})
    with pytest.raises(NonFiniteGradientError, match="'p'"):
        adamw_step({"p": p}, state, lr=0.1)
    assert state.step == 0 and p.data[0] == 1.0


def test_config_validation():
    with pytest.raises(ValueError, match="lr0"):
        tiny_config(lr0=0.0).validate()
    with pytest.raises(ValueError):
        tiny_config(epochs=0).validate()
    cfg = tiny_config()
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# --- training loop ----------------------------------------------------------------

def test_smoke_run_logs_and_checkpoints(tiny_data, tmp_path):
    res = train(tiny_config(), tiny_data, tmp_path)
    log = [json.loads(s) for s in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1, 2, 3]
    assert all(np.isfinite(r["loss"]) for r in log)
    assert [r["lr"] for r in log] == [poly_lr(e, 4, 5e-4) for e in range(4)]
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["checkpoint_e0002.ckpt", "checkpoint_e0004.ckpt"]
    assert [v["epochs_trained"] for v in res.validation] == [0, 2, 4]
    model, state, epoch = load_checkpoint(res.final_checkpoint)
    assert epoch == 4 and state.step == 4
    for (n, a), (_, b) in zip(model.named_parameters(), res.model.named_parameters()):
        assert np.array_equal(a.data, b.data), n


def test_switch_boundary(tiny_data, tmp_path):
    train(tiny_config(switch_epoch=2), tiny_data, tmp_path)
    log = [json.loads(s) for s in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    for r in log:
        after = r["epoch"] >= 2
        assert (r["ssim_loss"] is not None) == after and (r["afp"] is not None) == after
        if not after:
            assert r["loss"] == r["wmae"]


def test_same_seed_same_checkpoint(tiny_data, tmp_path):
    a = train(tiny_config(epochs=2), tiny_data, tmp_path / "a")
    b = train(tiny_config(epochs=2), tiny_data, tmp_path / "b")
    assert digest(a.final_checkpoint) == digest(b.final_checkpoint)
    c = train(tiny_config(epochs=2, seed=1), tiny_data, tmp_path / "c")
    assert digest(a.final_checkpoint) != digest(c.final_checkpoint)


def test_resume_is_exact(tiny_data, tmp_path):
    full = train(tiny_config(), tiny_data, tmp_path / "full")
    # an interruption after epoch 2: resume from the mid checkpoint in a fresh directory
    resumed_dir = tmp_path / "resumed"
    resumed_dir.mkdir()
    mid = tmp_path / "full" / "checkpoint_e0002.ckpt"
    res = train(tiny_config(), tiny_data, resumed_dir, resume_from=mid)
    assert digest(res.final_checkpoint) == digest(full.final_checkpoint)
    assert [r["epoch"] for r in res.log] == [2, 3]


def test_resume_with_other_model_is_rejected(tiny_data, tmp_path):
    res = train(tiny_config(epochs=2, checkpoint_every=1), tiny_data, tmp_path / "a")
    other = tiny_config(model=ModelConfig(**{**TINY_MODEL.to_dict(), "base_channels": 5, "patch_size": (16, 16, 16)}))
    with pytest.raises(CheckpointError, match="base_channels"):
        train(other, tiny_data, tmp_path / "b", resume_from=res.final_checkpoint)


def test_nan_aborts_and_keeps_last_good_checkpoint(tiny_data, tmp_path, monkeypatch):
    real = trainer_mod.staged_loss

    def poisoned(epoch, pred, target, *args, **kwargs):
        loss, terms = real(epoch, pred, target, *args, **kwargs)
        if epoch == 2:
            loss = Tensor(np.array(np.nan))
        return loss, terms

    monkeypatch.setattr(trainer_mod, "staged_loss", poisoned)
    with pytest.raises(DivergedError) as info:
        train(tiny_config(checkpoint_every=1), tiny_data, tmp_path)
    assert info.value.last_good == tmp_path / "checkpoint_e0002.ckpt"
    _, _, epoch = load_checkpoint(info.value.last_good)
    assert epoch == 2
    assert not (tmp_path / "checkpoint_e0003.ckpt").exists()


def test_chunked_run_matches_uninterrupted(tiny_data, tmp_path):
    full = train(tiny_config(checkpoint_every=10), tiny_data, tmp_path / "full")
    part = train(tiny_config(checkpoint_every=10), tiny_data, tmp_path / "chunk", until_epoch=1)
    assert part.epochs_completed == 1 and part.final_checkpoint.name == "checkpoint_e0001.ckpt"
    rest = train(tiny_config(checkpoint_every=10), tiny_data, tmp_path / "chunk", resume_from=part.final_checkpoint)
    assert digest(rest.final_checkpoint) == digest(full.final_checkpoint)
    with pytest.raises(trainer_mod.TrainError, match="until_epoch"):
        train(tiny_config(), tiny_data, tmp_path / "x", until_epoch=5)
