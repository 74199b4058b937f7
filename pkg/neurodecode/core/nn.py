"""Layer building blocks on top of the tensor primitives."""

from __future__ import annotations

import math
from collections.abc import Iterator, Mapping
from typing import Any

import numpy as np

from neurodecode.core import functional as F
from neurodecode.core.rng import Rng
from neurodecode.core.tensor import Tensor, as_tensor, default_dtype
from neurodecode.utils.errors import DimensionError


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data: Any, name: str | None = None) -> None:
        super().__init__(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


class Module:
    """Container with a parameter registry, buffers and a train/eval flag.

    Parameters, child modules and lists of child modules are discovered from
    instance attributes in assignment order, which fixes the checkpoint
    layout. Buffers are numpy arrays listed in ``buffer_names``.
    """

    buffer_names: tuple[str, ...] = ()

    def __init__(self) -> None:
        self.training = True

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        """Compute the module output."""
        raise NotImplementedError

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        """Yield (dotted path, module) pairs depth-first, self first."""
        yield prefix, self
        for attr, value in vars(self).items():
            path = f"{prefix}.{attr}" if prefix else attr
            if isinstance(value, Module):
                yield from value.named_modules(path)
            elif isinstance(value, list | tuple):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{path}.{index}")

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        """Yield (dotted name, parameter) pairs in registry order."""
        for path, module in self.named_modules():
            for attr, value in vars(module).items():
                if isinstance(value, Parameter):
                    yield (f"{path}.{attr}" if path else attr), value

    def parameters(self) -> list[Parameter]:
        """Return every trainable parameter."""
        return [param for _, param in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield (dotted name, array) for running statistics and similar state."""
        for path, module in self.named_modules():
            for attr in module.buffer_names:
                yield (f"{path}.{attr}" if path else attr), getattr(module, attr)

    def param_count(self) -> int:
        """Return the number of trainable scalars."""
        return sum(param.size for param in self.parameters())

    def train(self, mode: bool = True) -> Module:
        """Switch this module and its children to training mode."""
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self) -> Module:
        """Switch this module and its children to evaluation mode."""
        return self.train(False)

    def zero_grad(self) -> None:
        """Clear parameter gradients."""
        for param in self.parameters():
            param.grad = None

    def reseed(self, rng: Rng) -> None:
        """Give every stochastic layer a fresh stream derived from ``rng``."""
        for path, module in self.named_modules():
            if isinstance(module, Dropout):
                module.rng = rng.derive(path or "dropout")

    def state_dict(self) -> dict[str, np.ndarray]:
        """Return copies of parameters and buffers keyed by dotted name."""
        state = {name: param.data.copy() for name, param in self.named_parameters()}
        state.update({name: np.array(buf, copy=True) for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Copy values from ``state`` into parameters and buffers."""
        expected = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        missing = (set(expected) | buffers) - set(state)
        if missing:
            raise DimensionError(f"checkpoint is missing entries: {sorted(missing)[:5]}")
        for name, param in expected.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise DimensionError(
                    f"checkpoint entry {name} has shape {value.shape}, expected {param.shape}"
                )
            param.data = value.astype(param.data.dtype, copy=True)
        modules = dict(self.named_modules())
        for name in buffers:
            path, _, attr = name.rpartition(".")
            setattr(modules[path], attr, np.array(state[name], dtype=default_dtype(), copy=True))


def _uniform(rng: Rng, shape: tuple[int, ...], bound: float) -> np.ndarray:
    return rng.uniform(size=shape, low=-bound, high=bound)


class Linear(Module):
    """Affine map ``x @ weight + bias`` over the last axis."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: Rng,
        bias: bool = True,
        zero_init: bool = False,
        init_bound: float | None = None,
    ) -> None:
        super().__init__()
        bound = 1.0 / math.sqrt(in_features) if init_bound is None else init_bound
        shape = (in_features, out_features)
        self.weight = Parameter(np.zeros(shape) if zero_init else _uniform(rng, shape, bound))
        self.bias: Parameter | None = None
        if bias:
            init = np.zeros(out_features) if zero_init else _uniform(rng, (out_features,), bound)
            self.bias = Parameter(init)
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x: Tensor) -> Tensor:
        """Apply the affine map."""
        x = as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                f"Linear expects last dim {self.in_features}, got input shape {x.shape}"
            )
        out = F.matmul(x, self.weight)
        return F.add(out, self.bias) if self.bias is not None else out


class Conv2d(Module):
    """2-D convolution layer with square kernels."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: Rng,
        stride: int = 1,
        padding: int = 0,
        zero_init: bool = False,
    ) -> None:
        super().__init__()
        bound = 1.0 / math.sqrt(in_channels * kernel * kernel)
        shape = (out_channels, in_channels, kernel, kernel)
        self.weight = Parameter(np.zeros(shape) if zero_init else _uniform(rng, shape, bound))
        self.bias = Parameter(
            np.zeros(out_channels) if zero_init else _uniform(rng, (out_channels,), bound)
        )
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        """Convolve ``x[N, C, H, W]``."""
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """Transposed 2-D convolution layer (learned upsampling)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: Rng,
        stride: int = 1,
        padding: int = 0,
    ) -> None:
        super().__init__()
        bound = 1.0 / math.sqrt(in_channels * kernel * kernel)
        self.weight = Parameter(_uniform(rng, (in_channels, out_channels, kernel, kernel), bound))
        self.bias = Parameter(_uniform(rng, (out_channels,), bound))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        """Upsample ``x[N, Cin, H, W]``."""
        return F.conv_transpose2d(
            x, self.weight, self.bias, stride=self.stride, padding=self.padding
        )


class Conv1d(Module):
    """1-D convolution layer."""

    def __init__(
        self, in_channels: int, out_channels: int, kernel: int, rng: Rng, padding: int = 0
    ) -> None:
        super().__init__()
        bound = 1.0 / math.sqrt(in_channels * kernel)
        self.weight = Parameter(_uniform(rng, (out_channels, in_channels, kernel), bound))
        self.bias = Parameter(_uniform(rng, (out_channels,), bound))
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        """Convolve ``x[N, C, L]``."""
        return F.conv1d(x, self.weight, self.bias, padding=self.padding)


class LayerNorm(Module):
    """Layer normalization over the last axis with a learned affine."""

    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        """Normalize ``x``."""
        return F.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class BatchNorm1d(Module):
    """Batch normalization over ``x[N, F]`` with running statistics."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim, dtype=default_dtype())
        self.running_var = np.ones(dim, dtype=default_dtype())
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        """Normalize with batch statistics (train) or running statistics (eval)."""
        x = as_tensor(x)
        if not self.training:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            normed = F.mul(F.sub(x, self.running_mean), scale)
            return F.add(F.mul(normed, self.gamma), self.beta)
        batch = x.shape[0]
        mu = F.mean(x, axis=0, keepdims=True)
        centered = F.sub(x, mu)
        var = F.mean(F.mul(centered, centered), axis=0, keepdims=True)
        normed = F.div(centered, F.sqrt(F.add(var, self.eps)))
        unbiased = var.data[0] * (batch / (batch - 1)) if batch > 1 else var.data[0]
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu.data[0]
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        return F.add(F.mul(normed, self.gamma), self.beta)


class Dropout(Module):
    """Inverted dropout owning its own random stream."""

    def __init__(self, p: float, rng: Rng) -> None:
        super().__init__()
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        """Drop activations in training mode; identity otherwise."""
        return F.dropout(x, self.p, self.rng, self.training)


class Embedding(Module):
    """Lookup table mapping integer ids to rows."""

    def __init__(self, count: int, dim: int, rng: Rng, scale: float = 0.1) -> None:
        super().__init__()
        self.weight = Parameter(rng.normal(size=(count, dim), scale=scale))

    def forward(self, ids: np.ndarray) -> Tensor:
        """Gather rows for ``ids`` of any shape."""
        return F.getitem(self.weight, np.asarray(ids, dtype=np.int64))


class GRUCell(Module):
    """Gated recurrent unit step.

    Per direction the cell holds an input projection ``Linear(I, 3H)`` and a
    hidden projection ``Linear(H, 3H)``, each with its own bias, giving
    ``3H(I + H) + 6H`` parameters. Gate order inside the 3H axis is
    reset, update, candidate.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: Rng) -> None:
        super().__init__()
        bound = 1.0 / math.sqrt(hidden_size)
        self.x2h = Linear(input_size, 3 * hidden_size, rng, init_bound=bound)
        self.h2h = Linear(hidden_size, 3 * hidden_size, rng, init_bound=bound)
        self.hidden_size = hidden_size

    def step(self, gate_x: Tensor, hidden: Tensor) -> Tensor:
        """Advance one step given the precomputed input projection ``gate_x``."""
        size = self.hidden_size
        gate_h = self.h2h(hidden)
        reset = F.sigmoid(F.add(gate_x[..., :size], gate_h[..., :size]))
        update = F.sigmoid(F.add(gate_x[..., size : 2 * size], gate_h[..., size : 2 * size]))
        candidate = F.tanh(F.add(gate_x[..., 2 * size :], F.mul(reset, gate_h[..., 2 * size :])))
        return F.add(candidate, F.mul(update, F.sub(hidden, candidate)))

    def forward(self, x: Tensor, hidden: Tensor) -> Tensor:
        """Advance one step from raw input ``x[N, I]``."""
        return self.step(self.x2h(x), hidden)


class GRU(Module):
    """Single-layer GRU over ``x[N, T, I]``, optionally bidirectional.

    Returns the full output sequence ``[N, T, H]`` (``[N, T, 2H]`` when
    bidirectional, forward features first). The initial state is zero.
    """

    def __init__(
        self, input_size: int, hidden_size: int, rng: Rng, bidirectional: bool = True
    ) -> None:
        super().__init__()
        self.forward_cell = GRUCell(input_size, hidden_size, rng.derive("forward"))
        self.backward_cell = (
            GRUCell(input_size, hidden_size, rng.derive("backward")) if bidirectional else None
        )
        self.input_size = input_size
        self.hidden_size = hidden_size

    @property
    def output_size(self) -> int:
        """Return the feature width of each output step."""
        return self.hidden_size * (2 if self.backward_cell is not None else 1)

    def _run(self, cell: GRUCell, x: Tensor, reverse: bool) -> Tensor:
        batch, steps, _ = x.shape
        gates = cell.x2h(x)
        hidden = Tensor(np.zeros((batch, self.hidden_size), dtype=x.data.dtype))
        outputs: list[Tensor] = [hidden] * steps
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        for t in order:
            hidden = cell.step(gates[:, t, :], hidden)
            outputs[t] = hidden
        return F.stack(outputs, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        """Run the recurrence over the sequence axis."""
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.input_size:
            raise DimensionError(f"GRU expects [N, T, {self.input_size}], got {x.shape}")
        out = self._run(self.forward_cell, x, reverse=False)
        if self.backward_cell is None:
            return out
        return F.concat([out, self._run(self.backward_cell, x, reverse=True)], axis=-1)


class MultiheadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads.

    Keys and values may come from a separate context (cross-attention);
    ``last_attention`` keeps the most recent ``[N, heads, Lq, Lk]`` weights.
    """

    def __init__(
        self, dim: int, heads: int, rng: Rng, context_dim: int | None = None
    ) -> None:
        super().__init__()
        if dim % heads:
            raise DimensionError(f"attention width {dim} not divisible by {heads} heads")
        source = dim if context_dim is None else context_dim
        self.query = Linear(dim, dim, rng.derive("query"))
        self.key = Linear(source, dim, rng.derive("key"))
        self.value = Linear(source, dim, rng.derive("value"))
        self.out = Linear(dim, dim, rng.derive("out"))
        self.dim = dim
        self.heads = heads
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        head_dim = self.dim // self.heads
        return F.transpose(F.reshape(x, (batch, length, self.heads, head_dim)), (0, 2, 1, 3))

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        """Attend from ``x[N, Lq, dim]`` over ``context`` (defaults to ``x``)."""
        x = as_tensor(x)
        source = x if context is None else as_tensor(context)
        batch, length, _ = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(source))
        v = self._split(self.value(source))
        scores = F.mul(F.matmul(q, F.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.dim // self.heads))
        weights = F.softmax(scores, axis=-1)
        self.last_attention = weights.data
        mixed = F.transpose(F.matmul(weights, v), (0, 2, 1, 3))
        return self.out(F.reshape(mixed, (batch, length, self.dim)))
