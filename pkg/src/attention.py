"""
Per-timestamp attention matrices over the sensor graph.

For vertex i and neighbor j in NB(i):
    e_ij = LeakyReLU(v^T [W x_i || W x_j]),  A[i, :] = softmax of e over NB(i).
C heads are averaged. The out-direction matrix uses the graph's neighbor
sets, the in-direction matrix those of the transposed graph, each with its
own heads. The static mode replaces both with the row-normalized support of
the graph and of its transpose. Nothing here depends on the graph operator
that consumes the matrices.
"""
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.errors import ConfigurationError, DimensionError
from src.graph import NeighborSets, SensorGraph
from src.numerics import (Parameter, SupportIndex, Tensor, as_tensor, detach, leaky_relu, masked_row_softmax,
                          reshape, scale, transpose)

LEAKY_SLOPE = 0.2


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AttentionHeadParams:
    W: Parameter  # F x K_in
    v: Parameter  # 2F
    slope: float = LEAKY_SLOPE

    @property
    def embed(self) -> int:
        return self.W.shape[0]

    @property
    def k_in(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, k_in: int, embed: int, prefix: str) -> 'AttentionHeadParams':
        return cls(
            W=Parameter(glorot_uniform(rng, (embed, k_in), k_in, embed), name=f"{prefix}.W"),
            v=Parameter(glorot_uniform(rng, (2 * embed,), 2 * embed, 1), name=f"{prefix}.v"),
        )


@dataclass
class MultiHeadParams:
    out_heads: List[AttentionHeadParams] = field(default_factory=list)
    in_heads: List[AttentionHeadParams] = field(default_factory=list)

    @classmethod
    def init(cls, rng: np.random.Generator, k_in: int, embed: int, heads: int, prefix: str) -> 'MultiHeadParams':
        if heads < 1:
            raise ConfigurationError(f"Attention needs at least one head, got {heads}.")
        return cls(
            out_heads=[AttentionHeadParams.init(rng, k_in, embed, f"{prefix}.out.{c}") for c in range(heads)],
            in_heads=[AttentionHeadParams.init(rng, k_in, embed, f"{prefix}.in.{c}") for c in range(heads)],
        )

    def parameters(self) -> Dict[str, Parameter]:
        params = {}
        for head in self.out_heads + self.in_heads:
            params[head.W.name] = head.W
            params[head.v.name] = head.v
        return params


@dataclass(frozen=True)
class AttentionMatrices:
    """A_t^out and A_t^in; the supports let diffusion walk neighbor lists instead of dense rows."""
    a_out: Tensor
    a_in: Tensor
    t: int = 0
    out_support: Optional[SupportIndex] = None
    in_support: Optional[SupportIndex] = None


def attention_head(x_t, nb: NeighborSets, p: AttentionHeadParams) -> Tensor:
    """Row-stochastic (..., N, N) attention of one head, zero off NB(i)."""
    x = as_tensor(x_t)
    if x.ndim < 2 or x.shape[-1] != p.k_in or x.shape[-2] != nb.n:
        raise DimensionError(f"Graph signal {x.shape} does not fit W {p.W.shape} on {nb.n} vertices.")
    f = p.embed
    z = x @ transpose(p.W)
    s_src = z @ reshape(p.v[:f], (f, 1))
    s_dst = z @ reshape(p.v[f:], (f, 1))
    scores = s_src + transpose(s_dst)
    return masked_row_softmax(leaky_relu(scores, p.slope), nb.support)


def multi_head_attention(x_t, nb: NeighborSets, heads: List[AttentionHeadParams]) -> Tensor:
    if not heads:
        raise ConfigurationError("multi_head_attention needs at least one head.")
    combined = attention_head(x_t, nb, heads[0])
    for head in heads[1:]:
        combined = combined + attention_head(x_t, nb, head)
    return combined if len(heads) == 1 else scale(combined, 1.0 / len(heads))


def directional_attention(x_t, g: SensorGraph, p: MultiHeadParams, t: int = 0,
                          stop_gradient: bool = False) -> AttentionMatrices:
    a_out = multi_head_attention(x_t, g.out_neighbors, p.out_heads)
    a_in = multi_head_attention(x_t, g.in_neighbors, p.in_heads)
    if stop_gradient:
        a_out, a_in = detach(a_out), detach(a_in)
    return AttentionMatrices(a_out=a_out, a_in=a_in, t=t,
                             out_support=g.out_neighbors.support, in_support=g.in_neighbors.support)


def _row_normalized(mask: np.ndarray) -> Tensor:
    weights = mask.astype(float)
    return Tensor(weights / weights.sum(axis=1, keepdims=True))


@lru_cache(maxsize=16)
def _transition_pair(g: SensorGraph) -> Tuple[Tensor, Tensor]:
    return _row_normalized(g.out_neighbors.support.mask), _row_normalized(g.in_neighbors.support.mask)


def static_attention(g: SensorGraph, t: int = 0) -> AttentionMatrices:
    """
    Fixed random-walk matrices of E + I and of its transpose, the same at every
    timestamp. Equal to attention with a zero embedding, and carries no
    parameters.
    """
    a_out, a_in = _transition_pair(g)
    return AttentionMatrices(a_out=a_out, a_in=a_in, t=t,
                             out_support=g.out_neighbors.support, in_support=g.in_neighbors.support)


def step_attention(x_t, g: SensorGraph, p: Optional[MultiHeadParams], t: int = 0,
                   stop_gradient: bool = False) -> AttentionMatrices:
    """Attention for one timestamp; without head parameters the graph's static matrices are used."""
    if p is None:
        return static_attention(g, t)
    return directional_attention(x_t, g, p, t, stop_gradient)
