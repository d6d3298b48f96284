"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, kink_monitor, mul, no_grad, sum_

STEP = 1e-5


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    n_points: int
    errors: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e}, {self.n_points} points)"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray],
                     which: int, h: float = STEP, coords=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arrays[which]``.

    With ``coords`` only those flat positions are perturbed; the result is then
    a 1-D array aligned with ``coords``.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    flat = base[which].reshape(-1)
    positions = range(flat.size) if coords is None else coords
    out = np.zeros(len(positions))
    for j, i in enumerate(positions):
        orig = flat[i]
        flat[i] = orig + h
        up = f(base)
        flat[i] = orig - h
        down = f(base)
        flat[i] = orig
        out[j] = (up - down) / (2.0 * h)
    return out.reshape(base[which].shape) if coords is None else out


def check_arrays(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                 differentiable: Sequence[bool] | None = None, projection_seed: int = 0,
                 floor: float = 1e-5, coords_per_input: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients of
    ``sum(w * fn(*inputs))`` for a fixed random projection ``w``.

    ``coords_per_input`` caps how many entries of each input are perturbed
    (sampled without replacement); ``None`` checks every entry.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    if differentiable is None:
        differentiable = [True] * len(arrays)

    with no_grad():
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    w = np.random.default_rng(projection_seed).standard_normal(out_shape)
    w_t = Tensor(w)

    def scalar(vals):
        with no_grad():
            return float(np.sum(fn(*[Tensor(v) for v in vals]).data * w))

    leaves = [Tensor(a, requires_grad=d) for a, d in zip(arrays, differentiable)]
    loss = sum_(mul(fn(*leaves), w_t))
    backward(loss)

    pick = np.random.default_rng(projection_seed + 7919)
    worst = 0.0
    for i, (leaf, d) in enumerate(zip(leaves, differentiable)):
        if not d:
            continue
        if coords_per_input is None or leaf.size <= coords_per_input:
            num = numeric_gradient(scalar, arrays, i)
            worst = max(worst, relative_error(leaf.grad, num, floor=floor))
        else:
            coords = np.sort(pick.choice(leaf.size, coords_per_input, replace=False))
            num = numeric_gradient(scalar, arrays, i, coords=list(coords))
            worst = max(worst, relative_error(leaf.grad.reshape(-1)[coords], num, floor=floor))
    return worst


def grad_check(fn: Callable[..., Tensor], input_shapes: Sequence[tuple], tolerance: float = 1e-4,
               n_points: int = 10, seed: int = 0, sampler: Callable | None = None,
               differentiable: Sequence[bool] | None = None, name: str = "op",
               coords_per_input: int | None = None, kink_margin: float = 1e-3,
               max_draws: int = 50) -> GradCheckReport:
    """Check ``fn`` at ``n_points`` random inputs; failures are reported, not raised.

    ``sampler(rng)`` overrides the default standard-normal draw and must return
    one array per input. A draw is rejected when any relu/abs input inside
    ``fn`` lies within ``kink_margin`` of its kink, since central differences
    are meaningless there.
    """
    rng = np.random.default_rng(seed)
    errors = []

    def draw():
        for _ in range(max_draws):
            arrays = sampler(rng) if sampler is not None else [rng.standard_normal(s) for s in input_shapes]
            with no_grad(), kink_monitor() as margins:
                fn(*[Tensor(a) for a in arrays])
            if not margins or min(margins) >= kink_margin:
                return arrays
        raise RuntimeError(f"no draw of {max_draws} stayed {kink_margin} away from every kink")

    for point in range(n_points):
        try:
            arrays = draw()
            errors.append(check_arrays(fn, arrays, differentiable, projection_seed=seed + point,
                                       coords_per_input=coords_per_input))
        except Exception as exc:  # reported, not thrown
            errors.append(float("inf"))
            name = f"{name} [{type(exc).__name__}: {exc}]"
            break
    worst = max(errors) if errors else 0.0
    return GradCheckReport(name=name, max_rel_error=worst, tolerance=tolerance,
                           n_points=len(errors), errors=errors)
