"""64-bit finite-difference suite over tensor ops, the scan, the SSM block, the staged loss and a micro model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .loss import LossSchedule, RandomPyramidExtractor, staged_loss
from .model import MAMBA_LITE, ModelConfig, build
from .ssm import FORWARD_RASTER, REVERSE_RASTER, MambaBlock, selective_scan
from .tensor import Tensor, grad_check64

DEFAULT_TOL = 1e-3


@dataclass
class CheckOutcome:
    name: str
    max_rel_error: float
    checked: int
    skipped: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_rel_err={self.max_rel_error:.2e} checked={self.checked} skipped={self.skipped}"


def _weighted_sum(y: Tensor, rng) -> Tensor:
    """Contract ``y`` with fixed random weights so every output coordinate matters."""
    r = Tensor(rng.standard_normal(y.shape))
    return T.sum(T.mul(y, r))


def _leaf(rng, shape, low=None, high=None) -> Tensor:
    if low is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _unary(op, low=None, high=None, shape=(3, 4)):
    def build(rng):
        x = _leaf(rng, shape, low, high)
        return (lambda a: _weighted_sum(op(a), np.random.default_rng(7))), [x]
    return build


def _binary(op, shape_a=(3, 4), shape_b=(4,), positive_b=False):
    def build(rng):
        a = _leaf(rng, shape_a)
        b = _leaf(rng, shape_b, 0.5, 2.0) if positive_b else _leaf(rng, shape_b)
        return (lambda x, y: _weighted_sum(op(x, y), np.random.default_rng(7))), [a, b]
    return build


def _op_cases() -> dict[str, tuple[Callable, dict]]:
    smooth = {"eps": 1e-6}
    kinks = {"eps": 1e-6, "skip_kinks": True}
    cases = {
        "add": (_binary(T.add), smooth),
        "sub": (_binary(T.sub, (2, 3, 4), (3, 1)), smooth),
        "mul": (_binary(T.mul), smooth),
        "div": (_binary(T.div, positive_b=True), smooth),
        "scalar_mul": (_unary(lambda a: T.scalar_mul(a, -2.5)), smooth),
        "abs": (_unary(T.abs), kinks),
        "exp": (_unary(T.exp), smooth),
        "log": (_unary(T.log, 0.5, 3.0), smooth),
        "sqrt": (_unary(T.sqrt, 0.5, 3.0), smooth),
        "square": (_unary(T.square), smooth),
        "sigmoid": (_unary(T.sigmoid), smooth),
        "silu": (_unary(T.silu), smooth),
        "softplus": (_unary(T.softplus), smooth),
        "relu": (_unary(T.relu), kinks),
        "sum_axis": (_unary(lambda a: T.sum(a, axis=1, keepdims=True), shape=(3, 4, 2)), smooth),
        "mean_axis": (_unary(lambda a: T.mean(a, axis=0), shape=(3, 4)), smooth),
        "reshape": (_unary(lambda a: T.reshape(a, (4, 3))), smooth),
        "transpose": (_unary(lambda a: T.transpose(a, (2, 0, 1)), shape=(2, 3, 4)), smooth),
        "flip": (_unary(lambda a: T.flip(a, 1)), smooth),
        "getitem": (_unary(lambda a: a[1:, ::2]), smooth),
        "getitem_fancy": (_unary(lambda a: a[np.array([0, 2, 0])]), smooth),
        "concat": (_binary(lambda a, b: T.concat([a, b], axis=0), (2, 4), (3, 4)), smooth),
        "stack": (_binary(lambda a, b: T.stack([a, b], axis=1), (3, 4), (3, 4)), smooth),
    }

    def conv(stride, padding, bias):
        def build(rng):
            x = _leaf(rng, (2, 2, 5, 4, 6))
            w = _leaf(rng, (3, 2, 3, 3, 3))
            b = _leaf(rng, (3,))
            fn = (lambda x_, w_, b_: _weighted_sum(T.conv3d(x_, w_, b_ if bias else None, stride, padding),
                                                   np.random.default_rng(7)))
            return fn, [x, w, b]
        return build

    cases["conv3d"] = (conv(1, 1, True), smooth)
    cases["conv3d_stride2"] = (conv(2, 0, False), smooth)

    def inorm(rng):
        x = _leaf(rng, (2, 3, 3, 4, 2))
        g, o = _leaf(rng, (3,)), _leaf(rng, (3,))
        return (lambda a, b, c: _weighted_sum(T.instance_norm(a, b, c), np.random.default_rng(7))), [x, g, o]

    def upsample(rng):
        x = _leaf(rng, (1, 2, 2, 3, 2))
        return (lambda a: _weighted_sum(T.upsample_nearest(a, 2), np.random.default_rng(7))), [x]

    def linear(rng):
        x, w, b = _leaf(rng, (2, 5, 3)), _leaf(rng, (3, 4)), _leaf(rng, (4,))
        return (lambda a, b_, c: _weighted_sum(T.linear(a, b_, c), np.random.default_rng(7))), [x, w, b]

    def cconv(rng):
        x, w, b = _leaf(rng, (2, 7, 3)), _leaf(rng, (3, 4)), _leaf(rng, (3,))
        return (lambda a, b_, c: _weighted_sum(T.causal_conv1d(a, b_, c), np.random.default_rng(7))), [x, w, b]

    def sep(rng):
        x = _leaf(rng, (2, 9, 8, 7))
        k = np.array([0.25, 0.5, 0.25])
        return (lambda a: _weighted_sum(T.separable_filter3d(a, k), np.random.default_rng(7))), [x]

    cases["instance_norm"] = (inorm, smooth)
    cases["upsample_nearest"] = (upsample, smooth)
    cases["linear"] = (linear, smooth)
    cases["causal_conv1d"] = (cconv, smooth)
    cases["separable_filter3d"] = (sep, smooth)
    return cases


def _scan_case(rng):
    b, length, c, n = 2, 16, 4, 4
    u = _leaf(rng, (b, length, c))
    delta = Tensor(rng.uniform(0.05, 0.8, size=(b, length, c)), requires_grad=True)
    A = Tensor(-rng.uniform(0.2, 1.5, size=(c, n)), requires_grad=True)
    B, C = _leaf(rng, (b, length, n)), _leaf(rng, (b, length, n))
    D = _leaf(rng, (c,))
    return (lambda *xs: _weighted_sum(selective_scan(*xs), np.random.default_rng(7))), [u, delta, A, B, C, D]


def _mamba_case(rng):
    block = MambaBlock(np.random.default_rng(3), 4, state_dim=4, expand=2, conv_width=4,
                       orientations=(FORWARD_RASTER, REVERSE_RASTER))
    x = _leaf(rng, (1, 4, 2, 3, 2))
    params = [p for _, p in block.named_parameters()]

    def f(x_, *_):
        return _weighted_sum(block(x_), np.random.default_rng(7))

    return f, [x, *params]


def micro_model_config() -> ModelConfig:
    return ModelConfig(variant=MAMBA_LITE, levels=2, base_channels=3, patch_size=(8, 8, 8), seed=5,
                       state_dim=4, expand=2)


def _micro_model_case(rng):
    model = build(micro_model_config())
    x = Tensor(rng.standard_normal((1, 1, 8, 8, 8)))
    target = rng.standard_normal((1, 1, 8, 8, 8))
    params = [p for _, p in model.named_parameters()]

    def f(*_):
        pred = model(x)
        diff = T.sub(pred, Tensor(target))
        return T.mean(T.mul(diff, diff))

    return f, params


def _staged_case(epoch: int):
    def build(rng):
        shape = (1, 1, 8, 8, 8)
        target = rng.uniform(-1000, 1000, size=shape)
        pred = Tensor(target + rng.normal(0, 150, size=shape), requires_grad=True)
        schedule = LossSchedule(switch_epoch=1)
        extractor = RandomPyramidExtractor(seed=11, channels=(2, 3, 4))
        return (lambda p: staged_loss(epoch, p, target, schedule, extractor)[0]), [pred]
    return build


def suite() -> dict[str, tuple[Callable, dict]]:
    """Name -> (builder(rng) -> (f, inputs), grad_check keyword arguments)."""
    cases = {f"op/{k}": v for k, v in _op_cases().items()}
    cases["selective_scan"] = (_scan_case, {"eps": 1e-6})
    cases["mamba_block"] = (_mamba_case, {"eps": 1e-6, "probes": 12})
    cases["staged_loss/before_switch"] = (_staged_case(0), {"eps": 1e-3, "skip_kinks": True, "probes": 96})
    cases["staged_loss/after_switch"] = (_staged_case(1), {"eps": 1e-3, "skip_kinks": True, "probes": 96})
    # conv biases ahead of instance norm have an exactly zero gradient; compare those absolutely
    cases["micro_model"] = (_micro_model_case, {"eps": 1e-5, "skip_kinks": True, "probes": 6, "floor": 1e-6})
    return cases


def run_check(name: str, seed: int = 0, tol: float = DEFAULT_TOL) -> CheckOutcome:
    builder, kwargs = suite()[name]
    rng = np.random.default_rng(seed)
    res = grad_check64(lambda: builder(rng), seed=seed, **kwargs)
    return CheckOutcome(name, res.max_rel_error, res.checked, res.skipped, res.passed(tol) and res.checked > 0)


def run_suite(seed: int = 0, tol: float = DEFAULT_TOL, names=None) -> list[CheckOutcome]:
    return [run_check(n, seed, tol) for n in (names or suite())]
