"""Named parameter collections and the Adam update."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..errors import ConfigError, UsageError
from .tensor import Tensor

ADAM_BETA1 = 0.0
ADAM_BETA2 = 0.99
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamSet:
    """Ordered named parameters, each with a trainable flag and Adam moments."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self.state: dict[str, AdamState] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float32)
        t = Tensor(arr, requires_grad=True, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        self.state[name] = AdamState(np.zeros_like(arr), np.zeros_like(arr))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        if name not in self._params:
            raise KeyError(name)
        self._trainable[name] = flag

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            v = values[k]
            if v.shape != t.shape:
                raise ConfigError(f"parameter {k}: shape {v.shape} != {t.shape}")
            t.data = np.ascontiguousarray(v, dtype=np.float32).copy()


def adam_step(
    params: ParamSet,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """Apply one bias-corrected Adam update to the trainable parameters.

    Frozen parameters are skipped entirely (values and moments untouched).
    All gradients are cleared afterwards.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    missing = [k for k, t in params.items() if params.is_trainable(k) and t.grad is None]
    if missing:
        raise UsageError(f"adam_step called without gradients for: {', '.join(missing)}")
    for name, t in params.items():
        if not params.is_trainable(name):
            continue
        st = params.state[name]
        g = t.grad.astype(np.float32, copy=False)
        st.step += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * (g * g)
        m_hat = st.m / (1.0 - beta1**st.step)
        v_hat = st.v / (1.0 - beta2**st.step)
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    params.zero_grad()
