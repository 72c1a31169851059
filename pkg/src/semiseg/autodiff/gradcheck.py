"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, default_dtype


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    # floor keeps near-zero coordinates from dividing roundoff by ~0
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
              n_coords: int = 100, rng: np.random.Generator | None = None,
              skip: Callable[[int, tuple], bool] | None = None) -> GradCheckResult:
    """Compare backprop gradients of scalar ``fn(*tensors)`` with central differences.

    Runs in float64. Up to ``n_coords`` coordinates per input are sampled;
    ``skip(input_index, coord)`` can exclude coordinates (e.g. at kinks).
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with default_dtype(np.float64):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        loss = fn(*tensors)
        loss.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def evaluate() -> float:
            return float(fn(*[Tensor(a) for a in arrays]).data)

        worst, worst_at, checked = 0.0, (), 0
        for i, arr in enumerate(arrays):
            flat = arr.reshape(-1)
            idx = np.arange(flat.size)
            if flat.size > n_coords:
                idx = rng.choice(flat.size, size=n_coords, replace=False)
            for k in idx:
                coord = np.unravel_index(k, arr.shape)
                if skip is not None and skip(i, coord):
                    continue
                orig = flat[k]
                flat[k] = orig + h
                fp = evaluate()
                flat[k] = orig - h
                fm = evaluate()
                flat[k] = orig
                numeric = (fp - fm) / (2 * h)
                err = relative_error(float(analytic[i][coord]), numeric)
                checked += 1
                if err > worst:
                    worst, worst_at = err, (i, coord)
    return GradCheckResult(worst, checked, worst_at)
