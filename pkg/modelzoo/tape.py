"""Recorded forward computations with exact reverse-mode gradients.

A `Tape` is an immutable, topologically ordered list of primitive nodes. Leaves
are either inputs (signals, latents) or parameters, bound by name at evaluation
time. Every primitive accepts optional leading batch axes, so the same tape
evaluates a single example or a mini-batch.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from collections.abc import Mapping, Sequence
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy import special

from modelzoo.tensor import NonFiniteError, Tensor

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Activation, Array, Padding


class ShapeError(ValueError):
    """Raised when the operands of a node have incompatible shapes."""

    def __init__(self, message: str, node: int | None = None, op: Op | None = None) -> None:
        where = f"node {node} ({op.value})" if node is not None and op else "tape"
        super().__init__(f"Shape mismatch at {where}: {message}")
        self.node = node
        self.op = op


class Op(str, enum.Enum):
    INPUT = "input"
    PARAM = "param"
    LINEAR = "linear"
    CONV2D = "conv2d"
    UPSAMPLE = "upsample"
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    ADD = "add"
    RESIDUAL = "residual"
    MUL = "mul"
    SCALE = "scale"
    SUM = "sum"
    SQNORM = "sqnorm"
    FLATTEN = "flatten"
    UNFLATTEN = "unflatten"
    SELECT = "select"
    STACK = "stack"


_LEAVES = frozenset((Op.INPUT, Op.PARAM))
_ACTIVATIONS: dict[str, Op] = {"relu": Op.RELU, "sigmoid": Op.SIGMOID, "tanh": Op.TANH}


@dataclasses.dataclass(frozen=True)
class Node:
    op: Op
    parents: tuple[int, ...] = ()
    name: str | None = None
    attrs: Mapping[str, Any] = dataclasses.field(default_factory=dict)


class Tape:
    """Immutable recorded computation. Build one with `TapeBuilder`."""

    __slots__ = ("_nodes", "_output", "_leaf_index")

    def __init__(self, nodes: Sequence[Node], output: int | None = None) -> None:
        nodes = tuple(nodes)
        if not nodes:
            raise ValueError("A tape needs at least one node")
        leaf_index: dict[str, int] = {}
        for index, node in enumerate(nodes):
            if node.op in _LEAVES:
                if node.parents or not node.name:
                    raise ValueError(f"Leaf node {index} must be named and parentless")
                if node.name in leaf_index:
                    raise ValueError(f"Leaf name {node.name!r} is bound twice")
                leaf_index[node.name] = index
            elif not node.parents:
                raise ValueError(f"Node {index} ({node.op.value}) has no parents")
            if any(parent < 0 or parent >= index for parent in node.parents):
                raise ValueError(f"Node {index} is not topologically ordered")
        output = len(nodes) - 1 if output is None else output
        if not 0 <= output < len(nodes):
            raise ValueError(f"Output node {output} is not on the tape")
        self._nodes = nodes
        self._output = output
        self._leaf_index = leaf_index

    @property
    def nodes(self) -> tuple[Node, ...]:
        return self._nodes

    @property
    def output(self) -> int:
        return self._output

    @property
    def inputs(self) -> tuple[str, ...]:
        return tuple(n.name for n in self._nodes if n.op is Op.INPUT and n.name)

    @property
    def params(self) -> tuple[str, ...]:
        return tuple(n.name for n in self._nodes if n.op is Op.PARAM and n.name)

    def leaf(self, name: str) -> int:
        return self._leaf_index[name]

    def with_output(self, output: int) -> Tape:
        return Tape(self._nodes, output)

    def __len__(self) -> int:
        return len(self._nodes)

    def __repr__(self) -> str:
        ops = ", ".join(node.op.value for node in self._nodes)
        return f"Tape([{ops}], output={self._output})"


class TapeBuilder:
    """Append-only recorder. Each method returns the index of the new node."""

    __slots__ = ("_nodes",)

    def __init__(self, nodes: Sequence[Node] = ()) -> None:
        self._nodes: list[Node] = list(nodes)

    def _add(self, op: Op, *parents: int, name: str | None = None, **attrs: Any) -> int:
        self._nodes.append(Node(op, tuple(parents), name, attrs))
        return len(self._nodes) - 1

    def input(self, name: str) -> int:
        return self._add(Op.INPUT, name=name)

    def param(self, name: str) -> int:
        return self._add(Op.PARAM, name=name)

    def linear(self, x: int, weight: int, bias: int | None = None) -> int:
        if bias is None:
            return self._add(Op.LINEAR, x, weight)
        return self._add(Op.LINEAR, x, weight, bias)

    def conv2d(
        self,
        x: int,
        kernels: int,
        bias: int | None = None,
        *,
        stride: int = 1,
        pad: Padding = "same",
    ) -> int:
        parents = (x, kernels) if bias is None else (x, kernels, bias)
        return self._add(Op.CONV2D, *parents, stride=stride, pad=pad)

    def upsample(self, x: int, factor: int = 2) -> int:
        return self._add(Op.UPSAMPLE, x, factor=factor)

    def relu(self, x: int) -> int:
        return self._add(Op.RELU, x)

    def sigmoid(self, x: int) -> int:
        return self._add(Op.SIGMOID, x)

    def tanh(self, x: int) -> int:
        return self._add(Op.TANH, x)

    def activation(self, x: int, kind: Activation) -> int:
        if kind == "identity":
            return x
        if kind not in _ACTIVATIONS:
            raise ValueError(f"Unsupported nonlinearity {kind!r}")
        return self._add(_ACTIVATIONS[kind], x)

    def add(self, a: int, b: int) -> int:
        return self._add(Op.ADD, a, b)

    def residual(self, h: int, update: int) -> int:
        return self._add(Op.RESIDUAL, h, update)

    def mul(self, a: int, b: int) -> int:
        return self._add(Op.MUL, a, b)

    def scale(self, x: int, factor: float) -> int:
        return self._add(Op.SCALE, x, factor=float(factor))

    def sum(self, x: int) -> int:
        return self._add(Op.SUM, x)

    def sqnorm(self, x: int) -> int:
        return self._add(Op.SQNORM, x)

    def flatten(self, x: int, axes: int) -> int:
        return self._add(Op.FLATTEN, x, axes=axes)

    def unflatten(self, x: int, shape: Sequence[int]) -> int:
        return self._add(Op.UNFLATTEN, x, shape=tuple(int(s) for s in shape))

    def select(self, x: int, index: int) -> int:
        return self._add(Op.SELECT, x, index=index)

    def stack(self, *heads: int) -> int:
        return self._add(Op.STACK, *heads)

    def build(self, output: int | None = None) -> Tape:
        return Tape(self._nodes, output)


def _padding(size: int, k: int, stride: int, pad: Padding) -> tuple[int, int, int]:
    if pad == "valid":
        if k > size:
            raise ValueError(f"Kernel extent {k} exceeds input extent {size}")
        return 0, 0, (size - k) // stride + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    if k > size + total:
        raise ValueError(f"Kernel extent {k} exceeds padded extent {size + total}")
    return total // 2, total - total // 2, out


def _conv_geometry(
    x_shape: tuple[int, ...], k_shape: tuple[int, ...], stride: int, pad: Padding
) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    if stride <= 0:
        raise ValueError(f"Stride must be positive, got {stride}")
    if pad not in ("same", "valid"):
        raise ValueError(f"Padding must be 'same' or 'valid', got {pad!r}")
    if len(x_shape) < 3 or len(k_shape) != 4:
        raise ValueError(
            f"Expected input (..., H, W, C) and kernels (k, k, C, M), "
            f"got {x_shape} and {k_shape}"
        )
    if x_shape[-1] != k_shape[2]:
        raise ValueError(
            f"Input has {x_shape[-1]} channels but kernels expect {k_shape[2]}"
        )
    return (
        _padding(x_shape[-3], k_shape[0], stride, pad),
        _padding(x_shape[-2], k_shape[1], stride, pad),
    )


def _conv_forward(x: Array, kernels: Array, stride: int, pad: Padding) -> Array:
    (top, bottom, ho), (left, right, wo) = _conv_geometry(
        x.shape, kernels.shape, stride, pad
    )
    batch = x.shape[:-3]
    x4 = x.reshape((-1, *x.shape[-3:]))
    xp = np.pad(x4, ((0, 0), (top, bottom), (left, right), (0, 0)))
    kh, kw, _, m = kernels.shape
    out = np.zeros((x4.shape[0], ho, wo, m))
    for a in range(kh):
        for b in range(kw):
            window = xp[
                :,
                a : a + stride * (ho - 1) + 1 : stride,
                b : b + stride * (wo - 1) + 1 : stride,
                :,
            ]
            out += window @ kernels[a, b]
    return out.reshape((*batch, ho, wo, m))


def _conv_backward(
    x: Array, kernels: Array, grad: Array, stride: int, pad: Padding
) -> tuple[Array, Array]:
    (top, bottom, ho), (left, right, wo) = _conv_geometry(
        x.shape, kernels.shape, stride, pad
    )
    x4 = x.reshape((-1, *x.shape[-3:]))
    g4 = grad.reshape((-1, ho, wo, kernels.shape[3]))
    xp = np.pad(x4, ((0, 0), (top, bottom), (left, right), (0, 0)))
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(kernels)
    kh, kw, c, m = kernels.shape
    g2 = g4.reshape(-1, m)
    for a in range(kh):
        for b in range(kw):
            rows = slice(a, a + stride * (ho - 1) + 1, stride)
            cols = slice(b, b + stride * (wo - 1) + 1, stride)
            gk[a, b] = xp[:, rows, cols, :].reshape(-1, c).T @ g2
            gxp[:, rows, cols, :] += g4 @ kernels[a, b].T
    h, w = x.shape[-3], x.shape[-2]
    gx = gxp[:, top : top + h, left : left + w, :]
    return gx.reshape(x.shape), gk


def conv2d(
    input: Tensor | ArrayLike,
    kernels: Tensor | ArrayLike,
    stride: int = 1,
    pad: Padding = "same",
) -> Tensor:
    """Zero-padded 2D convolution of an `H×W×C` image with a `k×k×C×M` filter bank.

    Each output pixel is the weighted sum of the `k×k×C` window centered on it.
    Leading batch axes on the input are carried through.
    """
    x = np.asarray(input, dtype=np.float64)
    k = np.asarray(kernels, dtype=np.float64)
    return Tensor._wrap(_conv_forward(x, k, stride, pad))


def _upsample(x: Array, factor: int) -> Array:
    return np.repeat(np.repeat(x, factor, axis=-3), factor, axis=-2)


def _downsample_sum(g: Array, factor: int) -> Array:
    *batch, h, w, c = g.shape
    return g.reshape((*batch, h // factor, factor, w // factor, factor, c)).sum(
        axis=(-4, -2)
    )


def _forward_node(index: int, node: Node, args: list[Array]) -> Array:
    op = node.op
    try:
        if op is Op.LINEAR:
            x, w = args[0], args[1]
            if w.ndim != 2 or x.shape[-1:] != w.shape[1:]:
                raise ShapeError(
                    f"input {x.shape} does not match weight {w.shape}", index, op
                )
            out = x @ w.T
            if len(args) == 3:
                if args[2].shape != (w.shape[0],):
                    raise ShapeError(
                        f"bias {args[2].shape} does not match weight {w.shape}",
                        index,
                        op,
                    )
                out = out + args[2]
            return out
        if op is Op.CONV2D:
            out = _conv_forward(args[0], args[1], node.attrs["stride"], node.attrs["pad"])
            if len(args) == 3:
                if args[2].shape != (args[1].shape[3],):
                    raise ShapeError(
                        f"bias {args[2].shape} does not match kernels {args[1].shape}",
                        index,
                        op,
                    )
                out = out + args[2]
            return out
        if op is Op.UPSAMPLE:
            if args[0].ndim < 3:
                raise ShapeError(f"expected (..., H, W, C), got {args[0].shape}", index, op)
            return _upsample(args[0], node.attrs["factor"])
        if op is Op.RELU:
            return np.maximum(args[0], 0.0)
        if op is Op.SIGMOID:
            return special.expit(args[0])
        if op is Op.TANH:
            return np.tanh(args[0])
        if op in (Op.ADD, Op.RESIDUAL, Op.MUL):
            if args[0].shape != args[1].shape:
                raise ShapeError(f"{args[0].shape} versus {args[1].shape}", index, op)
            return args[0] * args[1] if op is Op.MUL else args[0] + args[1]
        if op is Op.SCALE:
            return node.attrs["factor"] * args[0]
        if op is Op.SUM:
            return np.asarray(args[0].sum())
        if op is Op.SQNORM:
            return np.asarray(np.sum(args[0] * args[0]))
        if op is Op.FLATTEN:
            axes = node.attrs["axes"]
            if axes > args[0].ndim:
                raise ShapeError(f"cannot merge {axes} axes of {args[0].shape}", index, op)
            keep = args[0].shape[: args[0].ndim - axes]
            return args[0].reshape((*keep, -1))
        if op is Op.UNFLATTEN:
            shape = node.attrs["shape"]
            if args[0].ndim < 1 or args[0].shape[-1] != math.prod(shape):
                raise ShapeError(f"cannot split {args[0].shape} into {shape}", index, op)
            return args[0].reshape((*args[0].shape[:-1], *shape))
        if op is Op.SELECT:
            position = node.attrs["index"]
            if args[0].ndim < 1 or not 0 <= position < args[0].shape[-1]:
                raise ShapeError(f"index {position} outside {args[0].shape}", index, op)
            return args[0][..., position]
        if op is Op.STACK:
            if len({arg.shape for arg in args}) != 1:
                raise ShapeError(
                    f"heads have shapes {[arg.shape for arg in args]}", index, op
                )
            return np.stack(args, axis=-1)
    except ShapeError:
        raise
    except ValueError as e:
        raise ShapeError(str(e), index, op) from e
    raise ValueError(f"Node {index} has unknown op {op!r}")


def _backward_node(
    node: Node, args: list[Array], out: Array, grad: Array
) -> list[Array | None]:
    op = node.op
    if op is Op.LINEAR:
        x, w = args[0], args[1]
        g2 = grad.reshape(-1, w.shape[0])
        grads: list[Array | None] = [grad @ w, g2.T @ x.reshape(-1, w.shape[1])]
        if len(args) == 3:
            grads.append(g2.sum(axis=0))
        return grads
    if op is Op.CONV2D:
        gx, gk = _conv_backward(
            args[0], args[1], grad, node.attrs["stride"], node.attrs["pad"]
        )
        grads = [gx, gk]
        if len(args) == 3:
            grads.append(grad.reshape(-1, args[1].shape[3]).sum(axis=0))
        return grads
    if op is Op.UPSAMPLE:
        return [_downsample_sum(grad, node.attrs["factor"])]
    if op is Op.RELU:
        return [grad * (args[0] > 0.0)]
    if op is Op.SIGMOID:
        return [grad * out * (1.0 - out)]
    if op is Op.TANH:
        return [grad * (1.0 - out * out)]
    if op in (Op.ADD, Op.RESIDUAL):
        return [grad, grad]
    if op is Op.MUL:
        return [grad * args[1], grad * args[0]]
    if op is Op.SCALE:
        return [node.attrs["factor"] * grad]
    if op is Op.SUM:
        return [np.full(args[0].shape, float(grad))]
    if op is Op.SQNORM:
        return [2.0 * float(grad) * args[0]]
    if op in (Op.FLATTEN, Op.UNFLATTEN):
        return [grad.reshape(args[0].shape)]
    if op is Op.SELECT:
        full = np.zeros(args[0].shape)
        full[..., node.attrs["index"]] = grad
        return [full]
    if op is Op.STACK:
        return [grad[..., i] for i in range(len(args))]
    return []


def _bind(tape: Tape, leaves: Mapping[str, Tensor | ArrayLike]) -> list[Array | None]:
    values: list[Array | None] = [None] * len(tape)
    for index, node in enumerate(tape.nodes):
        if node.op in _LEAVES:
            assert node.name is not None
            if node.name not in leaves:
                raise KeyError(f"Leaf {node.name!r} (node {index}) is not bound")
            values[index] = np.asarray(leaves[node.name], dtype=np.float64)
    return values


def forward_arrays(
    tape: Tape, leaves: Mapping[str, Tensor | ArrayLike], *, upto: int | None = None
) -> list[Array]:
    """Evaluate every node up to `upto` (default: the tape output) as raw arrays."""
    values = _bind(tape, leaves)
    last = tape.output if upto is None else upto
    for index, node in enumerate(tape.nodes[: last + 1]):
        if node.op in _LEAVES:
            value = values[index]
            assert value is not None
        else:
            args = [values[parent] for parent in node.parents]
            value = _forward_node(index, node, args)  # type: ignore[arg-type]
            values[index] = value
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(
                f"Non-finite value at node {index} ({node.op.value})", node=index
            )
    return [v if v is not None else np.zeros(0) for v in values]


def _backward_arrays(
    tape: Tape, values: list[Array], output: int, cotangent: Array
) -> list[Array | None]:
    grads: list[Array | None] = [None] * len(tape)
    grads[output] = cotangent
    for index in range(output, -1, -1):
        grad = grads[index]
        node = tape.nodes[index]
        if grad is None or node.op in _LEAVES:
            continue
        args = [values[parent] for parent in node.parents]
        for parent, parent_grad in zip(
            node.parents, _backward_node(node, args, values[index], grad)
        ):
            if parent_grad is None:
                continue
            current = grads[parent]
            grads[parent] = parent_grad if current is None else current + parent_grad
    return grads


def _leaf_grads(
    tape: Tape, values: list[Array], grads: list[Array | None]
) -> dict[str, Array]:
    result: dict[str, Array] = {}
    for index, node in enumerate(tape.nodes):
        if node.op in _LEAVES:
            assert node.name is not None
            grad = grads[index]
            result[node.name] = np.zeros_like(values[index]) if grad is None else grad
    return result


def eval_forward(tape: Tape, leaves: Mapping[str, Tensor | ArrayLike]) -> dict[int, Tensor]:
    """Evaluate the tape, returning the value of every node up to the output."""
    values = forward_arrays(tape, leaves)
    return {index: Tensor._wrap(value) for index, value in enumerate(values[: tape.output + 1])}


def vector_jacobian_product(
    tape: Tape,
    leaves: Mapping[str, Tensor | ArrayLike],
    cotangent: ArrayLike,
    *,
    output: int | None = None,
    values: list[Array] | None = None,
) -> dict[str, Array]:
    """Pull a cotangent on a (possibly non-scalar) node back to every leaf."""
    output = tape.output if output is None else output
    if values is None:
        values = forward_arrays(tape, leaves, upto=output)
    seed = np.asarray(cotangent, dtype=np.float64)
    if seed.shape != values[output].shape:
        raise ShapeError(
            f"cotangent {seed.shape} does not match output {values[output].shape}",
            output,
            tape.nodes[output].op,
        )
    return _leaf_grads(tape, values, _backward_arrays(tape, values, output, seed))


def eval_backward(
    tape: Tape, leaves: Mapping[str, Tensor | ArrayLike], seed: int | None = None
) -> dict[str, Tensor]:
    """Exact gradient of the scalar node `seed` with respect to every leaf."""
    seed = tape.output if seed is None else seed
    values = forward_arrays(tape, leaves, upto=seed)
    if values[seed].size != 1:
        raise ShapeError(
            f"seed must be scalar, got shape {values[seed].shape}",
            seed,
            tape.nodes[seed].op,
        )
    ones = np.ones(values[seed].shape)
    grads = _leaf_grads(tape, values, _backward_arrays(tape, values, seed, ones))
    return {name: Tensor._wrap(grad) for name, grad in grads.items()}


def select_output(tape: Tape, index: int) -> Tape:
    """Return a tape whose output is component `index` of the original output."""
    builder = TapeBuilder(tape.nodes)
    return builder.build(builder.select(tape.output, index))


def stack_outputs(tapes: Sequence[Tape], *, prefixes: Sequence[str] | None = None) -> Tape:
    """Merge several tapes with shared inputs into one tape with stacked outputs.

    Parameters of tape `i` are renamed with the prefix `prefixes[i]` (default
    `"{i}/"`) so that identically named parameters stay distinct. Inputs are
    shared by name.
    """
    prefixes = [f"{i}/" for i in range(len(tapes))] if prefixes is None else prefixes
    if len(prefixes) != len(tapes) or not tapes:
        raise ValueError("Need one prefix per tape and at least one tape")
    builder = TapeBuilder()
    shared: dict[str, int] = {}
    heads: list[int] = []
    for tape, prefix in zip(tapes, prefixes):
        mapping: dict[int, int] = {}
        for index, node in enumerate(tape.nodes[: tape.output + 1]):
            if node.op is Op.INPUT:
                assert node.name is not None
                if node.name not in shared:
                    shared[node.name] = builder.input(node.name)
                mapping[index] = shared[node.name]
            elif node.op is Op.PARAM:
                mapping[index] = builder.param(f"{prefix}{node.name}")
            else:
                parents = tuple(mapping[parent] for parent in node.parents)
                mapping[index] = builder._add(node.op, *parents, **dict(node.attrs))
        heads.append(mapping[tape.output])
    return builder.build(builder.stack(*heads))
