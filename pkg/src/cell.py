from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from src.attention import AttentionMatrices
from src.diffusion import FilterBank, apply_filter_bank, diffuse
from src.errors import ConfigurationError, DimensionError
from src.numerics import Parameter, Tensor, as_tensor, concat, sigmoid, tanh


@dataclass
class GaGruLayerParams:
    """
    One GA-GRU layer. Each bank maps [input || hidden] (K_sig = K_layer_in + U
    columns) to U outputs; biases are per unit and shared by all vertices.
    """
    bank_r: FilterBank
    bank_u: FilterBank
    bank_h: FilterBank
    b_r: Parameter
    b_u: Parameter
    b_h: Parameter

    @property
    def units(self) -> int:
        return self.bank_r.q

    @property
    def input_width(self) -> int:
        return self.bank_r.k_sig - self.units

    @property
    def steps(self) -> int:
        return self.bank_r.steps

    def __post_init__(self):
        banks = (self.bank_r, self.bank_u, self.bank_h)
        if len({b.theta.shape for b in banks}) != 1:
            raise ConfigurationError(f"GA-GRU banks disagree: {[b.theta.shape for b in banks]}.")
        for b in (self.b_r, self.b_u, self.b_h):
            if b.shape != (self.units,):
                raise ConfigurationError(f"Bias {b.name} has shape {b.shape}, expected ({self.units},).")

    @classmethod
    def init(cls, rng: np.random.Generator, input_width: int, units: int, steps: int, prefix: str) -> 'GaGruLayerParams':
        k_sig = input_width + units
        return cls(
            bank_r=FilterBank.init(rng, k_sig, steps, units, f"{prefix}.theta_r"),
            bank_u=FilterBank.init(rng, k_sig, steps, units, f"{prefix}.theta_u"),
            bank_h=FilterBank.init(rng, k_sig, steps, units, f"{prefix}.theta_h"),
            b_r=Parameter(np.zeros(units), name=f"{prefix}.b_r"),
            b_u=Parameter(np.zeros(units), name=f"{prefix}.b_u"),
            b_h=Parameter(np.zeros(units), name=f"{prefix}.b_h"),
        )

    def parameters(self) -> Dict[str, Parameter]:
        tensors = (self.bank_r.theta, self.bank_u.theta, self.bank_h.theta, self.b_r, self.b_u, self.b_h)
        return {t.name: t for t in tensors}


def ga_gru_step(x_t, h_prev, att: AttentionMatrices, p: GaGruLayerParams) -> Tensor:
    x, h = as_tensor(x_t), as_tensor(h_prev)
    if x.shape[-1] != p.input_width or h.shape[-1] != p.units or x.shape[-2] != h.shape[-2]:
        raise DimensionError(
            f"GA-GRU step: input {x.shape} / state {h.shape} vs layer (in={p.input_width}, units={p.units}).")

    # r and u read the same diffused [x || h]
    gate_features = diffuse(concat([x, h]), att, p.steps)
    r = sigmoid(apply_filter_bank(gate_features, p.bank_r) + p.b_r)
    u = sigmoid(apply_filter_bank(gate_features, p.bank_u) + p.b_u)

    candidate_features = diffuse(concat([x, r * h]), att, p.steps)
    h_tilde = tanh(apply_filter_bank(candidate_features, p.bank_h) + p.b_h)
    return u * h + (1.0 - u) * h_tilde


def stacked_step(x_t, states: List[Tensor], att: AttentionMatrices, layers: List[GaGruLayerParams]) -> List[Tensor]:
    """Advance every layer one timestamp; layer l reads layer l-1's new output, all share `att`."""
    if len(states) != len(layers):
        raise ConfigurationError(f"{len(states)} hidden states for {len(layers)} layers.")
    inp = as_tensor(x_t)
    new_states = []
    for depth, (h, layer) in enumerate(zip(states, layers)):
        if inp.shape[-1] != layer.input_width:
            raise ConfigurationError(
                f"Layer {depth} expects input width {layer.input_width}, receives {inp.shape[-1]}.")
        inp = ga_gru_step(inp, h, att, layer)
        new_states.append(inp)
    return new_states


def zero_states(layers: List[GaGruLayerParams], n: int, batch_shape=()) -> List[Tensor]:
    return [Tensor(np.zeros(tuple(batch_shape) + (n, layer.units))) for layer in layers]
