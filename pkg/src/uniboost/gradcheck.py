"""Finite-difference gradient checking.

Central differences with a fixed probe size, compared against analytic
gradients under a guarded relative error. This is the ground-truth oracle
for every differentiable op and for composite models.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

__all__ = ["GradCheckReport", "grad_check"]

REL_GUARD = 1e-2


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst: str = ""
    failures: list[str] = field(default_factory=list)

    def __bool__(self):
        return self.passed


def _rel_err(analytic: float, numeric: float) -> float:
    # The guard keeps near-zero entries from amplifying finite-difference
    # noise into spurious relative errors.
    return abs(analytic - numeric) / (REL_GUARD + max(abs(analytic), abs(numeric)))


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-3, tol: float = 1e-4,
               max_probes_per_input: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` against central
    differences.

    ``fn`` must return a scalar Tensor. All inputs with ``requires_grad``
    are checked, every coordinate by default; pass ``max_probes_per_input``
    to spot-check a random subset of coordinates on large tensors.
    Non-finite values on either side count as failures.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out, params=[t for t in inputs if t.requires_grad])

    def eval_fn() -> float:
        return fn(*inputs).item()

    max_err = 0.0
    worst = ""
    failures: list[str] = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = t.values.reshape(-1)
        gflat = t.grad.reshape(-1)
        idxs = range(flat.size)
        if max_probes_per_input is not None and flat.size > max_probes_per_input:
            gen = rng or np.random.default_rng(0)
            idxs = gen.choice(flat.size, size=max_probes_per_input, replace=False)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = eval_fn()
            flat[j] = orig - eps
            f_minus = eval_fn()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = gflat[j]
            where = f"input[{i}]{np.unravel_index(j, t.shape)}"
            if not (np.isfinite(numeric) and np.isfinite(analytic)):
                failures.append(f"{where}: non-finite (analytic={analytic}, numeric={numeric})")
                continue
            err = _rel_err(analytic, numeric)
            if err > max_err:
                max_err = err
                worst = f"{where}: analytic={analytic:.6g} numeric={numeric:.6g} rel={err:.3g}"
            if err > tol:
                failures.append(
                    f"{where}: analytic={analytic:.6g} numeric={numeric:.6g} rel={err:.3g}")
    return GradCheckReport(passed=not failures, max_rel_err=max_err,
                           worst=worst, failures=failures)
