"""Parameter containers and the small building blocks the network uses."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .ops import ConvParams
from .tensor import Tensor, concat, default_dtype, split


class Module:
    """Base class; parameters and sub-modules are discovered from attributes.

    Lists of modules are traversed too, indexed by position, which gives
    parameter names such as ``encoder.resblocks.3.conv1.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, ConvParams):
                yield f"{name}.weight", val.weight
                if val.bias is not None:
                    yield f"{name}.bias", val.bias
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_conv(rng: np.random.Generator, cin: int, cout: int, k: int = 3, stride: int = 1,
              padding: int | None = None, zero: bool = False, bias: bool = True) -> ConvParams:
    """Fan-in scaled uniform weights and zero bias, or all zeros."""
    if padding is None:
        padding = k // 2
    dt = default_dtype()
    if zero:
        w = np.zeros((cout, cin, k, k), dtype=dt)
    else:
        bound = 1.0 / np.sqrt(cin * k * k)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dt)
    b = Tensor(np.zeros(cout, dtype=dt), requires_grad=True) if bias else None
    return ConvParams(Tensor(w, requires_grad=True), b, stride=stride, padding=padding)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1, zero=False):
        self.conv = init_conv(rng, cin, cout, k, stride, zero=zero)

    def forward(self, x):
        return ops.conv2d(x, self.conv)


class ResBlock(Module):
    """conv -> ReLU -> conv, plus identity."""

    def __init__(self, rng, ch):
        self.conv1 = init_conv(rng, ch, ch)
        self.conv2 = init_conv(rng, ch, ch)

    def forward(self, x):
        return x + ops.conv2d(ops.relu(ops.conv2d(x, self.conv1)), self.conv2)


class DownBlock(Module):
    """Strided conv -> LeakyReLU -> conv -> LeakyReLU; halves the resolution."""

    def __init__(self, rng, ch, slope=0.1):
        self.conv1 = init_conv(rng, ch, ch, stride=2)
        self.conv2 = init_conv(rng, ch, ch)
        self.slope = slope

    def forward(self, x):
        x = ops.leaky_relu(ops.conv2d(x, self.conv1), self.slope)
        return ops.leaky_relu(ops.conv2d(x, self.conv2), self.slope)


class ConvLSTMCell(Module):
    """Convolutional LSTM; one conv over ``[input, hidden]`` yields the four gates.

    Gate order in the conv output channels is (input, forget, output, cell).
    """

    def __init__(self, rng, cin, hidden):
        self.hidden = hidden
        self.gates = init_conv(rng, cin + hidden, 4 * hidden)

    def forward(self, x: Tensor, state: tuple[Tensor, Tensor] | None = None):
        if state is None:
            n, _, h, w = x.shape
            zeros = Tensor(np.zeros((n, self.hidden, h, w), dtype=x.dtype))
            state = (zeros, zeros)
        h_prev, c_prev = state
        gates = ops.conv2d(concat([x, h_prev], axis=1), self.gates)
        i, f, o, g = split(gates, [self.hidden] * 4, axis=1)
        c = ops.sigmoid(f) * c_prev + ops.sigmoid(i) * ops.tanh(g)
        h = ops.sigmoid(o) * ops.tanh(c)
        return h, c

    def run(self, seq: list[Tensor]) -> Tensor:
        """Feed a sequence and return the final hidden state."""
        if not seq:
            raise ValueError("ConvLSTM needs at least one input step")
        state = None
        for x in seq:
            state = self.forward(x, state)
        return state[0]
