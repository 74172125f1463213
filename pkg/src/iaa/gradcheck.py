"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import FreezeError, Tensor


class PrecisionError(RuntimeError):
    """Gradient checking requested on tensors that are not 64-bit."""


@dataclass
class CoordinateCheck:
    name: str
    index: int
    analytic: float
    numeric: float
    method: str = "central"

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / (abs(self.analytic) + abs(self.numeric) + 1e-12)


@dataclass
class GradCheckReport:
    checks: list[CoordinateCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return all(c.rel_error < tol for c in self.checks)

    def worst(self, k: int = 5) -> list[CoordinateCheck]:
        return sorted(self.checks, key=lambda c: -c.rel_error)[:k]


def sample_coordinates(named_params, n: int, rng: np.random.Generator) -> list[tuple[str, Tensor, int]]:
    """Draw ``n`` coordinates uniformly over all elements of the given tensors."""
    named = [(name, t) for name, t in named_params]
    sizes = np.array([t.size for _, t in named])
    if sizes.sum() == 0:
        return []
    flat = rng.choice(int(sizes.sum()), size=min(n, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for f in np.sort(flat):
        k = int(np.searchsorted(bounds, f, side="right"))
        start = 0 if k == 0 else int(bounds[k - 1])
        out.append((named[k][0], named[k][1], int(f - start)))
    return out


def _loss_value(build_loss: Callable[[], Tensor]) -> float:
    val = float(build_loss().data)
    if not np.isfinite(val):
        raise FloatingPointError(f"gradient check: loss is not finite ({val})")
    return val


def ridders_derivative(
    f: Callable[[], float], t: Tensor, index: int, step: float = 0.05, shrink: float = 1.4, levels: int = 8
) -> tuple[float, float]:
    """Derivative of f along one element of t by Ridders' extrapolation.

    Central differences at geometrically shrinking steps are extrapolated
    towards step 0, so large steps can be used without truncation error.
    Returns (estimate, error estimate).
    """
    flat = t.data.reshape(-1)
    orig = flat[index]

    def central(h):
        flat[index] = orig + h
        up = f()
        flat[index] = orig - h
        down = f()
        flat[index] = orig
        return (up - down) / (2 * h)

    table = np.zeros((levels, levels))
    table[0, 0] = best = central(step)
    err = np.inf
    h = step
    for k in range(1, levels):
        h /= shrink
        table[0, k] = central(h)
        fac = shrink * shrink
        for j in range(1, k + 1):
            table[j, k] = (table[j - 1, k] * fac - table[j - 1, k - 1]) / (fac - 1)
            fac *= shrink * shrink
            e = max(abs(table[j, k] - table[j - 1, k]), abs(table[j, k] - table[j - 1, k - 1]))
            if e <= err:
                err, best = e, table[j, k]
        # higher orders stopped helping: round-off has taken over
        if abs(table[k, k] - table[k - 1, k - 1]) >= 2 * err:
            break
    return float(best), float(err)


def check_gradients(
    build_loss: Callable[[], Tensor],
    coords: Sequence[tuple[str, Tensor, int]],
    epsilon: float = 1e-5,
    refine_above: float | None = None,
) -> GradCheckReport:
    """Compare backprop gradients with (f(x+eps) - f(x-eps)) / 2eps per coordinate.

    ``build_loss`` must rebuild the forward graph from the current parameter
    values on every call. With ``refine_above`` set, coordinates whose central
    difference disagrees by more than that relative error are re-estimated
    with Ridders' extrapolation (tiny gradients on an O(1) loss are
    round-off limited at any single step).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    tensors = {id(t): t for _, t, _ in coords}
    for name, t, _ in coords:
        if not t.trainable:
            raise FreezeError(f"{name} is frozen; frozen coordinates have no gradient to check")
        if t.dtype != np.float64:
            raise PrecisionError(f"{name} is {t.dtype}; gradient checks need float64")
    for t in tensors.values():
        t.grad = None
    loss = build_loss()
    if not np.isfinite(float(loss.data)):
        raise FloatingPointError("gradient check: loss is not finite")
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}

    report = GradCheckReport()
    for name, t, i in coords:
        flat = t.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        up = _loss_value(build_loss)
        flat[i] = orig - epsilon
        down = _loss_value(build_loss)
        flat[i] = orig
        numeric = (up - down) / (2 * epsilon)
        check = CoordinateCheck(name, i, float(analytic[id(t)].reshape(-1)[i]), numeric)
        if refine_above is not None and check.rel_error >= refine_above:
            refined, _ = ridders_derivative(lambda: _loss_value(build_loss), t, i)
            check = CoordinateCheck(name, i, check.analytic, refined, "ridders")
        report.checks.append(check)
    for t in tensors.values():
        t.grad = None
    return report
