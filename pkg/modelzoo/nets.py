from __future__ import annotations

from collections.abc import Mapping, Sequence
from typing import TYPE_CHECKING

import numpy as np

from modelzoo.tape import Op, Tape, TapeBuilder, forward_arrays, vector_jacobian_product

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Activation, Array, Params


def _dense_init(rng: np.random.Generator, fan_out: int, fan_in: int) -> Array:
    return rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)


def _conv_init(
    rng: np.random.Generator, kernel: int, channels_in: int, channels_out: int
) -> Array:
    fan_in = kernel * kernel * channels_in
    return rng.standard_normal((kernel, kernel, channels_in, channels_out)) / np.sqrt(
        fan_in
    )


def mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    *,
    activation: Activation = "relu",
    out_activation: Activation = "identity",
    squeeze: bool = False,
    residual: bool = False,
    input_name: str = "x",
) -> tuple[Tape, Params]:
    """Fully connected network `h(l) = f(W(l) h(l-1) + b(l))`.

    With `squeeze`, the last layer must have width 1 and its axis is dropped,
    giving one scalar score per example. With `residual`, hidden layers whose
    width matches their input add the layer output to the input instead.
    """
    if len(sizes) < 2 or any(size <= 0 for size in sizes):
        raise ValueError(f"Layer sizes must be positive and at least two, got {sizes}")
    if squeeze and sizes[-1] != 1:
        raise ValueError("A squeezed network must end in a single unit")
    builder = TapeBuilder()
    h = builder.input(input_name)
    params: Params = {}
    depth = len(sizes) - 1
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        weight, bias = f"W{layer}", f"b{layer}"
        params[weight] = _dense_init(rng, fan_out, fan_in)
        params[bias] = np.zeros(fan_out)
        a = builder.linear(h, builder.param(weight), builder.param(bias))
        if layer < depth:
            update = builder.activation(a, activation)
            h = builder.residual(h, update) if residual and fan_in == fan_out else update
        else:
            h = builder.activation(a, out_activation)
    if squeeze:
        h = builder.select(h, 0)
    return builder.build(h), params


def convnet(
    input_shape: tuple[int, int, int],
    layers: Sequence[tuple[int, int, int]],
    rng: np.random.Generator,
    *,
    outputs: int = 1,
    activation: Activation = "relu",
    squeeze: bool = True,
    input_name: str = "x",
) -> tuple[Tape, Params]:
    """Convolutional score network: `(channels, kernel, stride)` layers, then a dense head."""
    builder = TapeBuilder()
    h = builder.input(input_name)
    params: Params = {}
    height, width, channels = input_shape
    for layer, (channels_out, kernel, stride) in enumerate(layers, start=1):
        params[f"K{layer}"] = _conv_init(rng, kernel, channels, channels_out)
        params[f"c{layer}"] = np.zeros(channels_out)
        h = builder.conv2d(
            h, builder.param(f"K{layer}"), builder.param(f"c{layer}"), stride=stride
        )
        h = builder.activation(h, activation)
        height, width, channels = -(-height // stride), -(-width // stride), channels_out
    h = builder.flatten(h, 3)
    fan_in = height * width * channels
    params["W_out"] = _dense_init(rng, outputs, fan_in)
    params["b_out"] = np.zeros(outputs)
    h = builder.linear(h, builder.param("W_out"), builder.param("b_out"))
    if squeeze and outputs == 1:
        h = builder.select(h, 0)
    return builder.build(h), params


def upconvnet(
    latent_dim: int,
    start: tuple[int, int, int],
    channels: Sequence[int],
    rng: np.random.Generator,
    *,
    kernel: int = 5,
    factor: int = 2,
    activation: Activation = "relu",
    out_activation: Activation = "tanh",
    dense_input: bool = True,
    input_name: str = "h",
) -> tuple[Tape, Params]:
    """Decoder that upsamples a small feature map through convolution layers.

    The latent vector is mapped to a `start` grid (dense layer, or a plain reshape
    when `dense_input` is false and `latent_dim` equals the grid size). Every
    layer upsamples by `factor` and convolves; the last entry of `channels` is
    the number of output channels.
    """
    height, width, depth = start
    builder = TapeBuilder()
    h = builder.input(input_name)
    params: Params = {}
    if dense_input:
        params["W0"] = _dense_init(rng, height * width * depth, latent_dim)
        params["b0"] = np.zeros(height * width * depth)
        h = builder.linear(h, builder.param("W0"), builder.param("b0"))
        h = builder.activation(h, activation)
    elif latent_dim != height * width * depth:
        raise ValueError(f"Latent size {latent_dim} does not fill a {start} grid")
    h = builder.unflatten(h, start)
    for layer, channels_out in enumerate(channels, start=1):
        h = builder.upsample(h, factor)
        params[f"K{layer}"] = _conv_init(rng, kernel, depth, channels_out)
        params[f"c{layer}"] = np.zeros(channels_out)
        h = builder.conv2d(h, builder.param(f"K{layer}"), builder.param(f"c{layer}"))
        last = layer == len(channels)
        h = builder.activation(h, out_activation if last else activation)
        depth = channels_out
    return builder.build(h), params


def texture_generator_net(
    rng: np.random.Generator,
    *,
    latent_channels: int = 1,
    out_channels: int = 3,
    channel_divisor: int = 8,
) -> tuple[Tape, Params]:
    """Texture decoder: a 7×7 latent grid, five 5×5 convolutions, upsampling by 2.

    Channel counts halve from 512 at the coarsest layer, divided by
    `channel_divisor`, and the last layer has a tanh head, giving a
    224×224 output.
    """
    hidden = [max(512 // (2**i) // channel_divisor, 1) for i in range(4)]
    return upconvnet(
        7 * 7 * latent_channels,
        (7, 7, latent_channels),
        [*hidden, out_channels],
        rng,
        kernel=5,
        dense_input=False,
        out_activation="tanh",
    )


def linear_net(
    weight: ArrayLike, bias: ArrayLike | None = None, *, input_name: str = "x"
) -> tuple[Tape, Params]:
    """Single affine layer `x -> W x + b` with the given initial values."""
    w = np.array(weight, dtype=np.float64, ndmin=2)
    builder = TapeBuilder()
    x = builder.input(input_name)
    params: Params = {"W1": w}
    if bias is None:
        out = builder.linear(x, builder.param("W1"))
    else:
        params["b1"] = np.array(bias, dtype=np.float64)
        out = builder.linear(x, builder.param("W1"), builder.param("b1"))
    return builder.build(out), params


def is_affine(tape: Tape) -> bool:
    """True when the tape is one linear node on its input, with no nonlinearity."""
    node = tape.nodes[tape.output]
    return (
        node.op is Op.LINEAR
        and tape.nodes[node.parents[0]].op is Op.INPUT
        and all(tape.nodes[parent].op is Op.PARAM for parent in node.parents[1:])
    )


def evaluate(
    tape: Tape, params: Mapping[str, Array], x: ArrayLike, *, input_name: str = "x"
) -> Array:
    values = forward_arrays(tape, {**params, input_name: np.asarray(x, dtype=np.float64)})
    return values[tape.output]


def backprop(
    tape: Tape,
    params: Mapping[str, Array],
    x: ArrayLike,
    cotangent: ArrayLike | None = None,
    *,
    input_name: str = "x",
) -> tuple[Array, Array, Params]:
    """Forward then backward pass in one call.

    Returns the output, the gradient with respect to the input, and the
    gradients with respect to every parameter, all for the scalar
    `sum(cotangent * output)`. The default cotangent is all ones.
    """
    leaves = {**params, input_name: np.asarray(x, dtype=np.float64)}
    values = forward_arrays(tape, leaves)
    out = values[tape.output]
    seed = np.ones_like(out) if cotangent is None else cotangent
    grads = vector_jacobian_product(tape, leaves, seed, values=values)
    grad_x = grads.pop(input_name)
    return out, grad_x, grads
