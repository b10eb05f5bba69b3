"""Evaluation of declarative graph specs.

A graph spec is a list of steps applied in order to a running value. Each
step is a dict with an ``op`` key plus op-specific keys; parameterised steps
name their tensors in a :class:`ParamSet`. A step may carry ``"tag"`` to have
its output recorded in the ``trace`` mapping passed to :func:`forward`.

Example::

    [{"op": "affine", "weight": "l0.w", "bias": "l0.b"},
     {"op": "leaky_relu"},
     {"op": "affine", "weight": "l1.w", "bias": "l1.b", "tag": "logits"},
     {"op": "softmax"}]
"""
from __future__ import annotations

from typing import Mapping, Sequence

from ..errors import ConfigError, NumericalError
from . import tensor as T
from .tensor import Tensor


def _param(params, step, key):
    name = step.get(key)
    if name is None:
        return None
    if params is None or name not in params:
        raise ConfigError(f"step {step['op']!r} refers to unknown parameter {name!r}")
    return params[name]


def _operand(step, inputs, params):
    ref = step["operand"]
    kind, _, key = ref.partition(":")
    if kind == "input":
        idx = int(key)
        if idx >= len(inputs):
            raise ConfigError(f"operand {ref!r}: only {len(inputs)} inputs given")
        return inputs[idx]
    if kind == "param":
        return _param(params, {"op": step["op"], "p": key}, "p")
    raise ConfigError(f"bad operand reference {ref!r}")


def _apply(step, x: Tensor, inputs, params) -> Tensor:
    op = step["op"]
    if op == "affine":
        return T.affine(x, _param(params, step, "weight"), _param(params, step, "bias"))
    if op == "conv2d":
        return T.conv2d(
            x, _param(params, step, "weight"), _param(params, step, "bias"),
            stride=step.get("stride", 1), pad=step.get("pad", 0),
        )
    if op == "conv_transpose2d":
        return T.conv_transpose2d(
            x, _param(params, step, "weight"), _param(params, step, "bias"),
            stride=step.get("stride", 2), pad=step.get("pad", 1),
        )
    if op == "leaky_relu":
        return T.leaky_relu(x, step.get("slope", T.LEAKY_SLOPE))
    if op == "relu":
        return T.relu(x)
    if op == "tanh":
        return T.tanh(x)
    if op == "sigmoid":
        return T.sigmoid(x)
    if op == "softplus":
        return T.softplus(x)
    if op == "softmax":
        return T.softmax(x, step.get("axis", -1))
    if op == "log_softmax":
        return T.log_softmax(x, step.get("axis", -1))
    if op == "mean":
        return T.mean(x, step.get("axis"))
    if op == "sum":
        return T.sum_(x, step.get("axis"))
    if op == "sq_norm":
        return T.sq_norm(x, step.get("axis"))
    if op == "add":
        return T.add(x, _operand(step, inputs, params))
    if op == "mul":
        return T.mul(x, _operand(step, inputs, params))
    if op == "reshape":
        return T.reshape(x, (x.shape[0], *step["shape"]))
    if op == "flatten":
        return T.reshape(x, (x.shape[0], -1))
    raise ConfigError(f"unsupported primitive {op!r}")


PRIMITIVES = frozenset({
    "affine", "conv2d", "conv_transpose2d", "leaky_relu", "relu", "tanh", "sigmoid",
    "softplus", "softmax", "log_softmax", "mean", "sum", "sq_norm", "add", "mul",
    "reshape", "flatten",
})


def forward(
    graph_spec: Sequence[Mapping],
    *inputs: Tensor,
    params=None,
    trace: dict | None = None,
) -> Tensor:
    """Run ``graph_spec`` on ``inputs[0]``; later inputs are reachable as operands.

    The returned tensor carries the recorded trace needed by ``backward``
    whenever any input or parameter requires a gradient.
    """
    if not inputs:
        raise ConfigError("forward needs at least one input")
    x = inputs[0] if isinstance(inputs[0], Tensor) else Tensor(inputs[0])
    for i, step in enumerate(graph_spec):
        try:
            x = _apply(step, x, inputs, params)
        except NumericalError as exc:
            raise NumericalError(f"step {i} ({step['op']}): {exc}") from exc
        if trace is not None and "tag" in step:
            trace[step["tag"]] = x
    return x
