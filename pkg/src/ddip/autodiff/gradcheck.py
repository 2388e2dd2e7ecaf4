"""Finite-difference audit of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    excluded: list[tuple[int, ...]] = field(default_factory=list)

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-4,
    coords: int | None = None,
    kink_tol: float = 0.1,
    seed: int = 0,
) -> GradCheckResult:
    """Compare the autodiff gradient of scalar ``f`` with central differences.

    The error per coordinate is ``|a - d| / (|a| + |d| + 1e-12)``. Coordinates
    whose one-sided slopes disagree by more than ``kink_tol`` (relative, with
    an absolute floor of ``sqrt(eps)``) are treated as non-smooth and reported
    in ``excluded`` instead of being scored. ``coords`` limits the audit to a
    random subset of coordinates.
    """
    x0 = np.array(point, dtype=np.float64, copy=True)
    x = Tensor(x0, requires_grad=True)
    f0 = f(x)
    if not np.isfinite(f0.data).all():
        raise FloatingPointError("grad_check: f is not finite at the point")
    (analytic,) = grad(f0, [x])

    flat = np.arange(x0.size)
    if coords is not None and coords < x0.size:
        flat = np.sort(np.random.default_rng(seed).choice(x0.size, coords, replace=False))

    def evaluate(v: np.ndarray) -> float:
        val = float(f(Tensor(v)).data)
        if not np.isfinite(val):
            raise FloatingPointError("grad_check: f is not finite at a perturbed point")
        return val

    base = float(f0.data)
    numeric = np.zeros_like(x0)
    errors = []
    excluded = []
    for k in flat:
        idx = np.unravel_index(k, x0.shape)
        xp = x0.copy()
        xp[idx] += eps
        xm = x0.copy()
        xm[idx] -= eps
        fp, fm = evaluate(xp), evaluate(xm)
        fwd, bwd = (fp - base) / eps, (base - fm) / eps
        numeric[idx] = (fp - fm) / (2 * eps)
        if abs(fwd - bwd) > max(kink_tol * (abs(fwd) + abs(bwd)), np.sqrt(eps)):
            excluded.append(tuple(int(i) for i in idx))
            continue
        a, d = analytic[idx], numeric[idx]
        errors.append(abs(a - d) / (abs(a) + abs(d) + 1e-12))
    return GradCheckResult(
        max_rel_error=float(max(errors)) if errors else 0.0,
        analytic=analytic,
        numeric=numeric,
        excluded=excluded,
    )
