import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from src.attention import MultiHeadParams, glorot_uniform, step_attention
from src.cell import GaGruLayerParams, stacked_step, zero_states
from src.config import Config, TrainConfig
from src.errors import ConfigurationError, ContractError, DimensionError
from src.graph import SensorGraph
from src.numerics import Parameter, Tensor, as_tensor, concat

RandomSource = Union[np.random.Generator, Sequence[np.random.Generator], None]


@dataclass
class SamplingSchedule:
    tau: float = Config.TAU

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"Sampling decay tau must be positive, got {self.tau}.")


def sampling_probability(iteration: int, s: SamplingSchedule) -> float:
    """Inverse-sigmoid decay tau / (tau + exp(iteration / tau)) of the teacher-forcing probability."""
    if iteration < 0:
        raise ContractError(f"Iteration must be >= 0, got {iteration}.")
    x = iteration / s.tau
    if x > 700:  # exp overflows; the probability is already below 1e-300
        return 0.0
    return s.tau / (s.tau + math.exp(x))


@dataclass
class Seq2SeqParams:
    encoder_layers: List[GaGruLayerParams]
    decoder_layers: List[GaGruLayerParams]
    encoder_attention: Optional[MultiHeadParams]  # None: static transition matrices
    decoder_attention: Optional[MultiHeadParams]
    w_out: Parameter  # U x K_out
    b_out: Parameter  # K_out

    def __post_init__(self):
        if not self.encoder_layers or len(self.encoder_layers) != len(self.decoder_layers):
            raise ConfigurationError(
                f"Encoder has {len(self.encoder_layers)} layers, decoder {len(self.decoder_layers)}.")
        if self.w_out.shape[0] != self.decoder_layers[-1].units or self.b_out.shape != (self.w_out.shape[1],):
            raise ConfigurationError(f"Output projection {self.w_out.shape} / {self.b_out.shape} does not fit the decoder.")

    @property
    def k_in(self) -> int:
        return self.encoder_layers[0].input_width

    @property
    def k_out(self) -> int:
        return self.w_out.shape[1]

    @property
    def shared_attention(self) -> bool:
        return self.decoder_attention is self.encoder_attention

    @property
    def static_adjacency(self) -> bool:
        return self.encoder_attention is None

    def named_parameters(self) -> Dict[str, Parameter]:
        params = {}
        if self.encoder_attention is not None:
            params.update(self.encoder_attention.parameters())
        for layer in self.encoder_layers:
            params.update(layer.parameters())
        if self.decoder_attention is not None and not self.shared_attention:
            params.update(self.decoder_attention.parameters())
        for layer in self.decoder_layers:
            params.update(layer.parameters())
        params[self.w_out.name] = self.w_out
        params[self.b_out.name] = self.b_out
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    @classmethod
    def init(cls, config: TrainConfig, k_in: int, k_out: int, rng: np.random.Generator) -> 'Seq2SeqParams':
        if k_out < 1 or k_in < k_out:
            raise ConfigurationError(f"Need 1 <= K_out <= K_in, got K_in={k_in}, K_out={k_out}.")

        def layers(prefix):
            return [GaGruLayerParams.init(rng, k_in if depth == 0 else config.units, config.units,
                                          config.diffusion_steps, f"{prefix}.layer{depth}")
                    for depth in range(config.layers)]

        if config.adjacency == 'static':
            encoder_attention = None
        else:
            encoder_attention = MultiHeadParams.init(rng, k_in, config.embed, config.heads, "encoder.attention")
        encoder_layers = layers("encoder")
        if encoder_attention is None or config.share_attention:
            decoder_attention = encoder_attention
        else:
            decoder_attention = MultiHeadParams.init(rng, k_in, config.embed, config.heads, "decoder.attention")
        decoder_layers = layers("decoder")
        return cls(
            encoder_layers=encoder_layers,
            decoder_layers=decoder_layers,
            encoder_attention=encoder_attention,
            decoder_attention=decoder_attention,
            w_out=Parameter(glorot_uniform(rng, (config.units, k_out), config.units, k_out), name="output.w"),
            b_out=Parameter(np.zeros(k_out), name="output.b"),
        )


def encode(inputs: Sequence, g: SensorGraph, p: Seq2SeqParams, stop_attention_gradient: bool = False) -> List[Tensor]:
    """Run the L input graph signals through the encoder; returns the final per-layer states."""
    if len(inputs) < 1:
        raise ContractError("encode() needs at least one input graph signal.")
    first = as_tensor(inputs[0])
    if first.ndim < 2 or first.shape[-2] != g.n:
        raise DimensionError(f"Graph signal {first.shape} does not cover {g.n} vertices.")
    states = zero_states(p.encoder_layers, g.n, first.shape[:-2])
    for t, x in enumerate(inputs):
        att = step_attention(x, g, p.encoder_attention, t=t, stop_gradient=stop_attention_gradient)
        states = stacked_step(x, states, att, p.encoder_layers)
    return states


def _draw(rng: RandomSource, prob: float, batch_shape) -> np.ndarray:
    if rng is None:
        return np.full(batch_shape, prob >= 1.0, dtype=bool)
    if isinstance(rng, np.random.Generator):
        return rng.random(batch_shape) < prob
    draws = np.array([r.random() for r in rng])
    if draws.shape != tuple(batch_shape):
        raise ContractError(f"{len(draws)} generators for a batch of shape {tuple(batch_shape)}.")
    return draws < prob


def decode(init: List[Tensor], horizon: int, g: SensorGraph, p: Seq2SeqParams, targets: Sequence = None,
           known_future: Sequence = None, use_truth_prob: float = 0.0, rng: RandomSource = None,
           trace: list = None, stop_attention_gradient: bool = False) -> List[Tensor]:
    """
    Produce `horizon` predictions of shape (..., N, K_out).

    Step 1 reads the GO signal: zero speed plus the known auxiliary features of
    the first predicted timestamp. Before each later step one draw per
    sequence decides whether the speed fed back is the ground truth (with
    probability `use_truth_prob`) or the model's own prediction; auxiliary
    features always come from `known_future`. `rng` is one generator for the
    whole batch or one per sequence; the decisions are appended to `trace`.
    """
    if not 0.0 <= use_truth_prob <= 1.0:
        raise ContractError(f"use_truth_prob must lie in [0, 1], got {use_truth_prob}.")
    if use_truth_prob > 0 and targets is None:
        raise ContractError("Teacher forcing requested without targets.")
    if 0.0 < use_truth_prob < 1.0 and rng is None:
        raise ContractError("Scheduled sampling needs a seeded generator.")
    if horizon < 1:
        raise ContractError(f"Horizon must be >= 1, got {horizon}.")

    k_aux = p.k_in - p.k_out
    if k_aux > 0 and (known_future is None or len(known_future) < horizon):
        raise ContractError(f"The decoder needs {k_aux} known auxiliary features for each of {horizon} steps.")
    if targets is not None and len(targets) < horizon - 1:
        raise ContractError(f"{len(targets)} targets for a horizon of {horizon}.")

    batch_shape = init[-1].shape[:-2]
    speed = Tensor(np.zeros(tuple(batch_shape) + (g.n, p.k_out)))
    states = list(init)
    predictions = []
    for step in range(horizon):
        x = concat([speed, known_future[step]]) if k_aux > 0 else speed
        att = step_attention(x, g, p.decoder_attention, t=step, stop_gradient=stop_attention_gradient)
        states = stacked_step(x, states, att, p.decoder_layers)
        y = states[-1] @ p.w_out + p.b_out
        predictions.append(y)

        if step + 1 == horizon:
            break
        use_truth = _draw(rng, use_truth_prob, batch_shape)
        if trace is not None:
            trace.append(use_truth.copy())
        if use_truth.all():
            speed = as_tensor(targets[step])
        elif not use_truth.any():
            speed = y
        else:
            m = Tensor(use_truth.astype(float)[..., None, None])
            speed = y * (1.0 - m) + as_tensor(targets[step]) * m
    return predictions


def forecast(inputs: Sequence, g: SensorGraph, p: Seq2SeqParams, horizon: int, targets: Sequence = None,
             known_future: Sequence = None, use_truth_prob: float = 0.0, rng: RandomSource = None,
             stop_attention_gradient: bool = False) -> List[Tensor]:
    states = encode(inputs, g, p, stop_attention_gradient)
    return decode(states, horizon, g, p, targets=targets, known_future=known_future,
                  use_truth_prob=use_truth_prob, rng=rng, stop_attention_gradient=stop_attention_gradient)
