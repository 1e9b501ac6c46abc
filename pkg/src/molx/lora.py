"""Low-rank adapters for the decoder's linear layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from molx import tensor as T
from molx.nn import EVAL, ForwardContext, Initializer, Linear, Module, Parameter
from molx.tensor import Tensor

TARGET_MODULES = ("q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 32.0
    dropout: float = 0.1
    targets: tuple[str, ...] = TARGET_MODULES

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoraLinear(Module):
    """``y = base(x) + (alpha / r) * dropout(x) A^T B^T`` with B zero-initialised."""

    def __init__(self, base: Linear, init: Initializer, cfg: LoraConfig, seed: int):
        if not 0 < cfg.rank < min(base.n_in, base.n_out):
            raise ValueError(f"LoRA rank {cfg.rank} must be in (0, {min(base.n_in, base.n_out)})")
        self.base = base
        self.cfg = cfg
        self.seed = seed
        self.n_in, self.n_out = base.n_in, base.n_out
        self.lora_a = init.normal("lora_a", (cfg.rank, base.n_in), 1.0 / np.sqrt(base.n_in))
        self.lora_b = init.constant("lora_b", (base.n_out, cfg.rank), 0.0)

    def __call__(self, x: Tensor, ctx: ForwardContext = EVAL) -> Tensor:
        y = self.base(x, ctx)
        h = T.dropout(x, self.cfg.dropout, ctx.rng, ctx.train)
        h = T.matmul(T.matmul(h, T.transpose_last(self.lora_a)), T.transpose_last(self.lora_b))
        return T.add(y, T.scale(h, self.cfg.scale))

    def merged_weight(self) -> np.ndarray:
        delta = self.cfg.scale * (self.lora_b.data.astype(np.float64) @ self.lora_a.data.astype(np.float64))
        return (self.base.weight.data.astype(np.float64) + delta).astype(self.base.weight.data.dtype)


def _replace(module: Module, fn) -> int:
    count = 0
    for attr, value in list(vars(module).items()):
        if isinstance(value, Module):
            new = fn(attr, value)
            if new is not value:
                setattr(module, attr, new)
                count += 1
            else:
                count += _replace(value, fn)
        elif isinstance(value, list):
            for item in value:
                if isinstance(item, Module):
                    count += _replace(item, fn)
    return count


def attach_lora(module: Module, cfg: LoraConfig, seed: int = 0) -> int:
    """Wrap every targeted :class:`Linear` under ``module`` in place. Returns the number wrapped."""

    def fn(attr: str, child: Module) -> Module:
        if attr in cfg.targets and isinstance(child, Linear):
            prefix = child.weight.name.rsplit(".", 1)[0]
            return LoraLinear(child, Initializer(seed, prefix), cfg, seed)
        return child

    return _replace(module, fn)


def merge_lora(module: Module) -> int:
    """Fold adapters back into plain linear layers in place. Returns the number merged."""

    def fn(attr: str, child: Module) -> Module:
        if isinstance(child, LoraLinear):
            base = child.base
            base.weight = Parameter(child.merged_weight(), base.weight.name, base.weight.requires_grad)
            return base
        return child

    return _replace(module, fn)


def lora_parameter_count(shapes: list[tuple[int, int]], rank: int) -> int:
    """Closed form: ``r * (n_in + n_out)`` per adapted (n_out, n_in) weight."""
    return sum(rank * (n_in + n_out) for n_out, n_in in shapes)
