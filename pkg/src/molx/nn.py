"""Layers and parameter bookkeeping built on :mod:`molx.tensor`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from molx import tensor as T
from molx.tensor import Tensor


class Parameter(Tensor):
    """A named, persistent tensor. ``requires_grad`` doubles as the trainable flag."""

    __slots__ = ()

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable, name=name)


@dataclass
class Initializer:
    """Seeded parameter factory; each parameter draws from its own named stream."""

    seed: int
    prefix: str = ""

    def child(self, name: str) -> "Initializer":
        return Initializer(self.seed, f"{self.prefix}.{name}" if self.prefix else name)

    def full_name(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def normal(self, name: str, shape: tuple[int, ...], std: float) -> Parameter:
        full = self.full_name(name)
        data = T.rng_for(self.seed, "init", full).standard_normal(shape) * std
        return Parameter(data.astype(T._dtype()), full)

    def constant(self, name: str, shape: tuple[int, ...], value: float) -> Parameter:
        return Parameter(np.full(shape, value, dtype=T._dtype()), self.full_name(name))


@dataclass
class ForwardContext:
    """Train/eval switch plus the random stream used by dropout."""

    train: bool = False
    rng: np.random.Generator | None = None

    @classmethod
    def training(cls, seed: int, step: int) -> "ForwardContext":
        return cls(True, T.rng_for(seed, "dropout", step))


EVAL = ForwardContext()


class Module:
    """Container that discovers parameters and submodules from its attributes."""

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value.name, value
            elif isinstance(value, Module):
                yield from value.named_parameters()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.named_parameters()

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())


class Linear(Module):
    def __init__(self, init: Initializer, n_in: int, n_out: int, bias: bool = True, std: float | None = None):
        self.n_in, self.n_out = n_in, n_out
        self.weight = init.normal("weight", (n_out, n_in), std if std is not None else 1.0 / math.sqrt(n_in))
        self.bias = init.constant("bias", (n_out,), 0.0) if bias else None

    def __call__(self, x: Tensor, ctx: ForwardContext = EVAL) -> Tensor:
        y = T.matmul(x, T.transpose_last(self.weight))
        return T.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, init: Initializer, dim: int):
        self.gain = init.constant("gain", (dim,), 1.0)
        self.shift = init.constant("shift", (dim,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, init: Initializer, n_in: int, n_hidden: int, n_out: int):
        self.up_proj = Linear(init.child("up_proj"), n_in, n_hidden)
        self.down_proj = Linear(init.child("down_proj"), n_hidden, n_out)

    def __call__(self, x: Tensor, ctx: ForwardContext = EVAL) -> Tensor:
        return self.down_proj(T.gelu(self.up_proj(x, ctx)), ctx)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return pe


class SelfAttention(Module):
    def __init__(self, init: Initializer, dim: int, heads: int, causal: bool):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.causal = causal
        self.q_proj = Linear(init.child("q_proj"), dim, dim)
        self.k_proj = Linear(init.child("k_proj"), dim, dim)
        self.v_proj = Linear(init.child("v_proj"), dim, dim)
        self.o_proj = Linear(init.child("o_proj"), dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        return T.permute(T.reshape(x, (b, s, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, ctx: ForwardContext = EVAL, key_mask: np.ndarray | None = None) -> Tensor:
        b, s, d = x.shape
        q = self._split(self.q_proj(x, ctx))
        k = self._split(self.k_proj(x, ctx))
        v = self._split(self.v_proj(x, ctx))
        attn = T.softmax(T.attention_scores(q, k, causal=self.causal, key_mask=key_mask))
        mixed = T.reshape(T.permute(T.matmul(attn, v), (0, 2, 1, 3)), (b, s, d))
        return self.o_proj(mixed, ctx)


class TransformerBlock(Module):
    """Pre-norm block: attention then MLP, each with a residual connection."""

    def __init__(self, init: Initializer, dim: int, heads: int, mlp_dim: int, causal: bool):
        self.ln_attn = LayerNorm(init.child("ln_attn"), dim)
        self.attn = SelfAttention(init.child("attn"), dim, heads, causal)
        self.ln_mlp = LayerNorm(init.child("ln_mlp"), dim)
        self.mlp = MLP(init.child("mlp"), dim, mlp_dim, dim)

    def __call__(self, x: Tensor, ctx: ForwardContext = EVAL, key_mask: np.ndarray | None = None) -> Tensor:
        x = T.add(x, self.attn(self.ln_attn(x), ctx, key_mask))
        return T.add(x, self.mlp(self.ln_mlp(x), ctx))


@dataclass
class ParameterStore:
    """Named parameters with trainable flags."""

    tensors: dict[str, Parameter] = field(default_factory=dict)

    @classmethod
    def of(cls, module: Module) -> "ParameterStore":
        return cls(module.parameters())

    def __getitem__(self, name: str) -> Parameter:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self) -> dict[str, Parameter]:
        return {k: p for k, p in self.tensors.items() if p.requires_grad}

    def set_trainable(self, predicate) -> None:
        for name, p in self.tensors.items():
            p.requires_grad = bool(predicate(name))

    def count(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.tensors.values() if p.requires_grad or not trainable_only)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.tensors.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            p = self.tensors[name]
            if p.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {p.shape} vs {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def astype(self, dtype) -> None:
        for p in self.tensors.values():
            p.data = p.data.astype(dtype)
