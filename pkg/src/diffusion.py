"""
Graph-attention diffusion convolution.

    out = act( sum_k sum_{h=1..H} (theta[k,h,0] (A_out)^h + theta[k,h,1] (A_in)^h) signal[:, k] )

Powers are applied as h successive hops on the signal, never materialized.
The hops of all K_sig columns are computed once and shared by every filter of
a bank, so a bank costs one matrix product after the hops.
"""
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from src.attention import AttentionMatrices
from src.errors import ConfigurationError, DimensionError
from src.numerics import (Parameter, SupportIndex, Tensor, as_tensor, concat, getitem, matmul, propagate,
                          reshape, stack, transpose)

Activation = Optional[Callable[[Tensor], Tensor]]


@dataclass
class DiffusionFilter:
    theta: Tensor  # K_sig x H x 2 (last axis: out, in)

    @property
    def k_sig(self) -> int:
        return self.theta.shape[0]

    @property
    def steps(self) -> int:
        return self.theta.shape[1]


@dataclass
class FilterBank:
    """Q filters stored as one K_sig x H x 2 x Q tensor."""
    theta: Tensor

    @property
    def k_sig(self) -> int:
        return self.theta.shape[0]

    @property
    def steps(self) -> int:
        return self.theta.shape[1]

    @property
    def q(self) -> int:
        return self.theta.shape[3]

    @property
    def filters(self) -> List[DiffusionFilter]:
        return [DiffusionFilter(getitem(self.theta, (Ellipsis, i))) for i in range(self.q)]

    def matrix(self) -> Tensor:
        """(H*2*K_sig) x Q, rows ordered (hop, direction, column) like diffuse()."""
        return reshape(transpose(self.theta, (1, 2, 0, 3)), (self.steps * 2 * self.k_sig, self.q))

    @classmethod
    def init(cls, rng: np.random.Generator, k_sig: int, steps: int, q: int, name: str) -> 'FilterBank':
        if k_sig < 1 or steps < 1 or q < 1:
            raise ConfigurationError(f"Filter bank needs K_sig, H, Q >= 1, got {k_sig}, {steps}, {q}.")
        limit = np.sqrt(3.0 / (k_sig * steps * 2))
        return cls(Parameter(rng.uniform(-limit, limit, size=(k_sig, steps, 2, q)), name=name))

    @classmethod
    def from_filters(cls, filters: List[DiffusionFilter]) -> 'FilterBank':
        if not filters:
            raise ConfigurationError("A filter bank needs at least one filter.")
        shapes = {f.theta.shape for f in filters}
        if len(shapes) != 1:
            raise DimensionError(f"Filters of one bank must share K_sig and H, got {sorted(shapes)}.")
        return cls(stack([f.theta for f in filters], axis=-1))


def _hop(a: Tensor, x: Tensor, support: Optional[SupportIndex]) -> Tensor:
    return matmul(a, x) if support is None else propagate(a, x, support)


def diffuse(signal, att: AttentionMatrices, steps: int) -> Tensor:
    """Stack [(A_out)^h X, (A_in)^h X] for h = 1..H along the last axis: (..., N, H*2*K_sig)."""
    x = as_tensor(signal)
    n = att.a_out.shape[-1]
    if x.ndim < 2 or x.shape[-2] != n or att.a_in.shape[-1] != n:
        raise DimensionError(f"Signal {x.shape} does not fit attention matrices {att.a_out.shape} / {att.a_in.shape}.")
    if steps < 1:
        raise ConfigurationError(f"Diffusion needs at least one step, got {steps}.")

    out_hops, in_hops = [], []
    cur_out, cur_in = x, x
    for _ in range(steps):
        cur_out = _hop(att.a_out, cur_out, att.out_support)
        cur_in = _hop(att.a_in, cur_in, att.in_support)
        out_hops.append(cur_out)
        in_hops.append(cur_in)

    blocks = []
    for h in range(steps):
        blocks.extend((out_hops[h], in_hops[h]))
    return concat(blocks, axis=-1)


def apply_filter_bank(features: Tensor, bank: FilterBank, activation: Activation = None) -> Tensor:
    """Combine precomputed diffuse() features with every filter of the bank: (..., N, Q)."""
    expected = bank.steps * 2 * bank.k_sig
    if features.shape[-1] != expected:
        raise DimensionError(f"Diffusion features of width {features.shape[-1]} do not fit a bank expecting {expected}.")
    out = features @ bank.matrix()
    return out if activation is None else activation(out)


def diffusion_conv_bank(signal, att: AttentionMatrices, bank: FilterBank, activation: Activation = None) -> Tensor:
    x = as_tensor(signal)
    if x.shape[-1] != bank.k_sig:
        raise DimensionError(f"Signal has {x.shape[-1]} columns, bank expects K_sig={bank.k_sig}.")
    return apply_filter_bank(diffuse(x, att, bank.steps), bank, activation)


def diffusion_conv(signal, att: AttentionMatrices, f: DiffusionFilter, activation: Activation = None) -> Tensor:
    """Single filter; returns an (..., N) vector."""
    bank = FilterBank(reshape(f.theta, f.theta.shape + (1,)))
    return getitem(diffusion_conv_bank(signal, att, bank, activation), (Ellipsis, 0))
