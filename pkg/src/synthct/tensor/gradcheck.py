"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Tensor, precision


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst_index: tuple | None = None
    errors: list[float] = field(default_factory=list, repr=False)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-3,
    probes: int | None = None,
    seed: int = 0,
    skip_near_zero: bool = False,
    skip_kinks: bool = False,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare backward() gradients of scalar ``f(*inputs)`` with central differences.

    Every coordinate of every input that requires grad is perturbed, unless
    ``probes`` limits the check to a random subset per input. With
    ``skip_near_zero`` coordinates with ``|x| < eps`` are excluded (kinks of
    abs/relu at the origin); ``skip_kinks`` excludes coordinates whose
    one-sided differences disagree, i.e. where a kink lies inside the probe
    interval. ``floor`` bounds the relative-error denominator from below, so
    gradients that are structurally zero are compared on an absolute scale.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    loss = f(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate() -> float:
        return float(f(*inputs).data)

    rng = np.random.default_rng(seed)
    worst, worst_idx = 0.0, None
    checked = skipped = 0
    errors = []
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if probes is not None and probes < flat.size:
            idx = np.sort(rng.choice(flat.size, size=probes, replace=False))
        for i in idx:
            orig = flat[i]
            if skip_near_zero and abs(orig) < eps:
                skipped += 1
                continue
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            if skip_kinks:
                flat[i] = orig
                f0 = evaluate()
                fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
                if rel_error(fwd, bwd) > 1e-2 and abs(fwd - bwd) > 1e-6:
                    skipped += 1
                    continue
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            err = rel_error(float(analytic[k].reshape(-1)[i]), numeric, floor)
            errors.append(err)
            checked += 1
            if err > worst:
                worst, worst_idx = err, (k, int(i))
    return GradCheckResult(worst, checked, skipped, worst_idx, errors)


def grad_check64(build: Callable[[], tuple[Callable[..., Tensor], Sequence[Tensor]]], **kwargs) -> GradCheckResult:
    """Construct the function and its inputs in 64-bit mode, then run :func:`grad_check`."""
    with precision(np.float64):
        f, inputs = build()
        return grad_check(f, inputs, **kwargs)
