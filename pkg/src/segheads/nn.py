"""Module/parameter registry and the layers shared by encoder and heads."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, attention, layernorm


class Module:
    """Container tracking parameters and submodules by attribute name.

    Assigning a Tensor registers it as a parameter; assigning a Module
    registers a submodule. ``named_parameters`` yields dotted paths, which
    double as checkpoint tensor names.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state dict mismatch: missing={missing}, unexpected={extra}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = state[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def _param(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    data = (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.weight = _param(rng, (d_in, d_out), 1.0 / np.sqrt(d_in), dtype)
        self.bias = _zeros((d_out,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = _zeros((dim,), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gamma, self.beta, self.eps)

    __call__ = forward


class MultiHeadAttention(Module):
    """Projected multi-head attention; query and key/value sources may
    differ, and ``internal_dim`` lets the attention run at a reduced width
    (the output projection maps back to ``dim``)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 internal_dim: int | None = None, dtype=np.float32):
        super().__init__()
        inner = internal_dim if internal_dim is not None else dim
        if inner % heads != 0:
            raise ValueError(f"width {inner} not divisible by heads {heads}")
        self.heads = heads
        std = 1.0 / np.sqrt(dim)
        self.wq = _param(rng, (dim, inner), std, dtype)
        self.wk = _param(rng, (dim, inner), std, dtype)
        self.wv = _param(rng, (dim, inner), std, dtype)
        self.wo = _param(rng, (inner, dim), 1.0 / np.sqrt(inner), dtype)
        self.bq = _zeros((inner,), dtype)
        self.bk = _zeros((inner,), dtype)
        self.bv = _zeros((inner,), dtype)
        self.bo = _zeros((dim,), dtype)

    def forward(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        q = query @ self.wq + self.bq
        k = key @ self.wk + self.bk
        v = value @ self.wv + self.bv
        return attention(q, k, v, self.wo, self.heads, b_out=self.bo)

    __call__ = forward


class Mlp(Module):
    """Two-layer feed-forward block with a configurable activation."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 out_dim: int | None = None, act: str = "gelu", dtype=np.float32):
        super().__init__()
        from .tensor import activation
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, out_dim if out_dim is not None else dim, rng, dtype)
        self._act = lambda t: activation(t, act)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self._act(self.fc1(x)))

    __call__ = forward


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, dtype=np.float32):
        super().__init__()
        std = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.weight = _param(rng, (c_out, c_in, kernel, kernel), std, dtype)
        self.bias = _zeros((c_out,), dtype)
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        from .tensor import conv2d
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    __call__ = forward


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, dtype=np.float32):
        super().__init__()
        std = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.weight = _param(rng, (c_in, c_out, kernel, kernel), std, dtype)
        self.bias = _zeros((c_out,), dtype)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        from .tensor import conv_transpose2d
        return conv_transpose2d(x, self.weight, self.bias, stride=self.stride)

    __call__ = forward
