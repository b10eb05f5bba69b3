"""Reverse-mode automatic differentiation on dense numpy arrays.

Every primitive stores a vector-Jacobian product written in terms of other
primitives. When ``create_graph=True`` the backward pass is therefore itself
recorded, which is what the R1 penalty needs (a gradient of a gradient).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError, NumericalError, UsageError

LEAKY_SLOPE = 0.2

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _mode.enabled = enabled
    try:
        yield
    finally:
        _mode.enabled = prev


def no_grad():
    """Context manager that stops graph recording (forward-only evaluation)."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """An array plus an optional gradient buffer and its place in the trace."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def is_leaf(self) -> bool:
        return self._vjp is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a Tensor is not a supported primitive")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, create_graph: bool = False):
        backward(self, create_graph=create_graph)


def _not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by primitive '{op}'")
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------- shape plumbing


def _reduced_axes(shape: tuple[int, ...], target: tuple[int, ...]) -> tuple[tuple[int, ...], int]:
    lead = len(shape) - len(target)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(target) if n == 1 and shape[lead + i] != 1
    )
    return axes, lead


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to a broadcast-compatible ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes, lead = _reduced_axes(x.shape, shape)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(shape)

    def vjp(g, out):
        return (broadcast_to(g, x.shape),)

    return _record(data, (x,), vjp, "sum_to")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))

    def vjp(g, out):
        return (sum_to(g, x.shape),)

    return _record(data, (x,), vjp, "broadcast_to")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ConfigError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def vjp(g, out):
        return (reshape(g, x.shape),)

    return _record(data, (x,), vjp, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def vjp(g, out):
        return (transpose(g, inverse),)

    return _record(data, (x,), vjp, "transpose")


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ConfigError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def vjp(g, out):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _record(data, (a, b), vjp, "add")


def neg(x: Tensor) -> Tensor:
    def vjp(g, out):
        return (neg(g),)

    return _record(-x.data, (x,), vjp, "neg")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ConfigError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def vjp(g, out):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(data, (a, b), vjp, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def vjp(g, out):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), vjp, "matmul")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kept = (1,) * x.ndim
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim for a in axes)
        kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def vjp(g, out):
        return (broadcast_to(reshape(g, kept), x.shape),)

    return _record(np.asarray(data, dtype=x.dtype), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def sq_norm(x: Tensor, axis=None) -> Tensor:
    """Squared Euclidean norm, over all entries or along ``axis``."""
    return sum_(mul(x, x), axis)


# ---------------------------------------------------------------- nonlinearities


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    mask = Tensor(np.where(x.data > 0, 1.0, slope).astype(x.dtype))

    def vjp(g, out):
        return (mul(g, mask),)

    return _record(x.data * mask.data, (x,), vjp, "leaky_relu" if slope else "relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def tanh(x: Tensor) -> Tensor:
    def vjp(g, out):
        return (mul(g, add(1.0, neg(mul(out, out)))),)

    return _record(np.tanh(x.data), (x,), vjp, "tanh")


def _np_sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so that exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    def vjp(g, out):
        return (mul(g, mul(out, add(1.0, neg(out)))),)

    return _record(_np_sigmoid(x.data), (x,), vjp, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    def vjp(g, out):
        return (mul(g, sigmoid(x)),)

    return _record(np.logaddexp(0.0, x.data).astype(x.dtype), (x,), vjp, "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out):
        inner = sum_(mul(g, out), axis=axis, keepdims=True)
        return (mul(out, add(g, neg(inner))),)

    return _record(data, (x,), vjp, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g, out):
        total = sum_(g, axis=axis, keepdims=True)
        return (add(g, neg(mul(softmax(x, axis), total))),)

    return _record(data, (x,), vjp, "log_softmax")


# ---------------------------------------------------------------- layers


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for x of shape (batch, in), weight (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigError(f"affine: input {x.shape} does not match weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def unfold(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """im2col: (N, C, H, W) -> (N, Ho*Wo, C*k*k)."""
    if x.ndim != 4:
        raise ConfigError(f"unfold expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ConfigError(f"unfold: kernel {k} does not fit input {h}x{w} with padding {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    data = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * k * k)

    def vjp(g, out):
        return (fold(g, (c, h, w), k, stride, pad),)

    return _record(data, (x,), vjp, "unfold")


def fold(cols: Tensor, chw: tuple[int, int, int], k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """col2im, the adjoint of :func:`unfold`: (N, Ho*Wo, C*k*k) -> (N, C, H, W)."""
    c, h, w = chw
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    n = cols.shape[0]
    if cols.shape[1:] != (ho * wo, c * k * k):
        raise ConfigError(f"fold: columns {cols.shape} do not match image {chw} with kernel {k}")
    blocks = cols.data.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    acc = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            acc[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += blocks[:, :, i, j]
    data = acc[:, :, pad : pad + h, pad : pad + w] if pad else acc

    def vjp(g, out):
        return (unfold(g, k, stride, pad),)

    return _record(np.ascontiguousarray(data), (cols,), vjp, "fold")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. weight has shape (C_out, C_in, k, k)."""
    if stride not in (1, 2):
        raise ConfigError(f"conv2d supports stride 1 or 2, got {stride}")
    cout, cin, k, _ = weight.shape
    if x.ndim != 4 or x.shape[1] != cin:
        raise ConfigError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    n, _, h, w = x.shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    cols = reshape(unfold(x, k, stride, pad), (n * ho * wo, cin * k * k))
    y = matmul(cols, transpose(reshape(weight, (cout, cin * k * k))))
    if bias is not None:
        y = add(y, bias)
    return transpose(reshape(y, (n, ho, wo, cout)), (0, 3, 1, 2))


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, pad: int = 1
) -> Tensor:
    """Transposed convolution. weight has shape (C_in, C_out, k, k)."""
    if stride not in (1, 2):
        raise ConfigError(f"conv_transpose2d supports stride 1 or 2, got {stride}")
    cin, cout, k, _ = weight.shape
    if x.ndim != 4 or x.shape[1] != cin:
        raise ConfigError(f"conv_transpose2d: input {x.shape} does not match weight {weight.shape}")
    n, _, h, w = x.shape
    ho, wo = (h - 1) * stride - 2 * pad + k, (w - 1) * stride - 2 * pad + k
    flat = reshape(transpose(x, (0, 2, 3, 1)), (n * h * w, cin))
    cols = reshape(matmul(flat, reshape(weight, (cin, cout * k * k))), (n, h * w, cout * k * k))
    y = fold(cols, (cout, ho, wo), k, stride, pad)
    if bias is not None:
        y = add(y, reshape(bias, (1, cout, 1, 1)))
    return y


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return neg(mean(sum_(mul(log_softmax(logits), Tensor(onehot)), axis=1)))


# ---------------------------------------------------------------- backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(output: Tensor, seed: Tensor, create_graph: bool) -> dict[int, tuple[Tensor, Tensor]]:
    grads: dict[int, Tensor] = {id(output): seed}
    leaves: dict[int, tuple[Tensor, Tensor]] = {}
    with _grad_mode(create_graph):
        for node in reversed(_topo_order(output)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            leaves[id(node)] = (node, g)
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g, node)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return leaves


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to ``inputs``.

    Unlike :func:`backward` nothing is written to ``.grad``. With
    ``create_graph=True`` the returned tensors are themselves differentiable.
    """
    if output.size != 1:
        raise UsageError(f"grad needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return [Tensor(np.zeros_like(t.data)) for t in inputs]
    seed = Tensor(np.ones_like(output.data))
    found = _propagate(output, seed, create_graph)
    result = []
    for t in inputs:
        hit = found.get(id(t))
        result.append(hit[1] if hit is not None else Tensor(np.zeros_like(t.data)))
    return result


def backward(output: Tensor, create_graph: bool = False) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if output.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    seed = Tensor(np.ones_like(output.data))
    for node, g in _propagate(output, seed, create_graph).values():
        if node._vjp is not None:
            continue
        node.grad = g.data.copy() if node.grad is None else node.grad + g.data
