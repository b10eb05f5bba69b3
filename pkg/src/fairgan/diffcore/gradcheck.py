"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad, no_grad

FD_STEP = 1e-3


def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``t``.

    ``t.data`` is perturbed in place and restored.
    """
    out = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            out.reshape(-1)[i] = (up - down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Largest entrywise relative error.

    Each entry is scaled by max(|a|, |n|, floor * max|a|); entries that are
    tiny next to the rest of the gradient are judged at the gradient's scale.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * max(np.abs(a).max(initial=0.0), 1e-12))
    return float((np.abs(a - n) / scale).max(initial=0.0))


def check_gradients(
    f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = FD_STEP
) -> list[float]:
    """Relative error of autodiff vs central differences, one value per input."""
    analytic = grad(f(), list(inputs))
    return [relative_error(g.data, numeric_grad(f, t, h)) for g, t in zip(analytic, inputs)]
