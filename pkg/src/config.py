import os
from dataclasses import dataclass, asdict, fields
from typing import Any, Mapping

from dotenv import load_dotenv

from src.errors import ConfigurationError

load_dotenv()

class Config:
    # System
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()
    FLOAT_DTYPE = os.getenv('GARNN_FLOAT_DTYPE', 'float64').lower()
    DEBUG_NUMERICS = os.getenv('GARNN_DEBUG_NUMERICS', 'false').lower() == 'true'

    # Paths
    SERIES_PATH = os.getenv('GARNN_SERIES', 'data/series.csv')
    DISTANCES_PATH = os.getenv('GARNN_DISTANCES', 'data/distances.csv')
    OUTPUT_DIR = os.getenv('GARNN_OUTPUT_DIR', 'runs')

    # Data
    GRAPH_THRESHOLD = float(os.getenv('GARNN_THRESHOLD', '3000'))
    MISSING_VALUE = float(os.getenv('GARNN_MISSING_VALUE', '0.0'))
    SEASON_PERIOD = int(os.getenv('GARNN_SEASON_PERIOD', str(7 * 24 * 12)))  # one week of 5-minute steps

    # Optimisation
    LEARNING_RATE = float(os.getenv('GARNN_LEARNING_RATE', '0.01'))
    BATCH_SIZE = int(os.getenv('GARNN_BATCH_SIZE', '64'))
    EPOCHS = int(os.getenv('GARNN_EPOCHS', '100'))
    LR_DECAY_START_EPOCH = int(os.getenv('GARNN_LR_DECAY_START_EPOCH', '40'))
    LR_DECAY_EVERY = int(os.getenv('GARNN_LR_DECAY_EVERY', '10'))
    LR_DECAY_FACTOR = float(os.getenv('GARNN_LR_DECAY_FACTOR', '0.1'))
    CLIP_NORM = float(os.getenv('GARNN_CLIP_NORM', '5.0'))
    PATIENCE = int(os.getenv('GARNN_PATIENCE', '50'))
    TAU = float(os.getenv('GARNN_TAU', '2000'))
    SEED = int(os.getenv('GARNN_SEED', '7'))
    THREADS = int(os.getenv('GARNN_THREADS', '1'))

    # Model
    HEADS = int(os.getenv('GARNN_HEADS', '2'))
    EMBED = int(os.getenv('GARNN_EMBED', '16'))
    LAYERS = int(os.getenv('GARNN_LAYERS', '2'))
    UNITS = int(os.getenv('GARNN_UNITS', '64'))
    DIFFUSION_STEPS = int(os.getenv('GARNN_DIFFUSION_STEPS', '2'))
    LOOKBACK = int(os.getenv('GARNN_LOOKBACK', '12'))
    HORIZON = int(os.getenv('GARNN_HORIZON', '12'))
    SHARE_ATTENTION = os.getenv('GARNN_SHARE_ATTENTION', 'false').lower() == 'true'
    STOP_ATTENTION_GRADIENT = os.getenv('GARNN_STOP_ATTENTION_GRADIENT', 'false').lower() == 'true'
    ADJACENCY = os.getenv('GARNN_ADJACENCY', 'attention').lower()  # attention | static

    @staticmethod
    def validate():
        if Config.FLOAT_DTYPE not in ('float64', 'float32'):
            raise ValueError(f"GARNN_FLOAT_DTYPE must be float64 or float32, got {Config.FLOAT_DTYPE!r}.")

        if Config.LOG_LEVEL not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ValueError(f"LOG_LEVEL {Config.LOG_LEVEL!r} is not a logging level.")

        if Config.ADJACENCY not in ('attention', 'static'):
            raise ValueError(f"GARNN_ADJACENCY must be attention or static, got {Config.ADJACENCY!r}.")

Config.validate()


ADJACENCY_MODES = ('attention', 'static')  # learned per-timestamp matrices | fixed transition matrices


def _parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off'):
        return False
    raise ConfigurationError(f"Cannot read {value!r} as a boolean.")


@dataclass
class TrainConfig:
    """Every knob of a training run."""
    learning_rate: float = Config.LEARNING_RATE
    batch_size: int = Config.BATCH_SIZE
    epochs: int = Config.EPOCHS
    lr_decay_start_epoch: int = Config.LR_DECAY_START_EPOCH
    lr_decay_every: int = Config.LR_DECAY_EVERY
    lr_decay_factor: float = Config.LR_DECAY_FACTOR
    heads: int = Config.HEADS
    embed: int = Config.EMBED
    layers: int = Config.LAYERS
    units: int = Config.UNITS
    diffusion_steps: int = Config.DIFFUSION_STEPS
    lookback: int = Config.LOOKBACK
    horizon: int = Config.HORIZON
    tau: float = Config.TAU
    seed: int = Config.SEED
    patience: int = Config.PATIENCE
    clip_norm: float = Config.CLIP_NORM
    threads: int = Config.THREADS
    share_attention: bool = Config.SHARE_ATTENTION
    stop_attention_gradient: bool = Config.STOP_ATTENTION_GRADIENT
    adjacency: str = Config.ADJACENCY
    graph_threshold: float = Config.GRAPH_THRESHOLD

    def validate(self) -> 'TrainConfig':
        positive = ('learning_rate', 'batch_size', 'lr_decay_every', 'lr_decay_factor', 'heads', 'embed',
                    'layers', 'units', 'diffusion_steps', 'lookback', 'horizon', 'tau', 'patience', 'threads')
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}.")

        if self.epochs < 0 or self.lr_decay_start_epoch < 0:
            raise ConfigurationError("epochs and lr_decay_start_epoch cannot be negative.")

        if self.lr_decay_factor > 1:
            raise ConfigurationError(f"lr_decay_factor {self.lr_decay_factor} would grow the learning rate.")

        if self.adjacency not in ADJACENCY_MODES:
            raise ConfigurationError(f"adjacency must be one of {', '.join(ADJACENCY_MODES)}, got {self.adjacency!r}.")

        if self.clip_norm < 0 or self.graph_threshold < 0:
            raise ConfigurationError("clip_norm and graph_threshold cannot be negative (clip_norm 0 disables clipping).")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: 'TrainConfig' = None) -> 'TrainConfig':
        """Overlay `values` (strings allowed) on `base` or on the defaults. Unknown keys are rejected."""
        merged = (base or cls()).to_dict()
        known = {f.name: type(merged[f.name]) for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise ConfigurationError(f"Unknown training setting {key!r}.")
            if raw is None:
                continue
            kind = known[key]
            try:
                merged[key] = _parse_bool(raw) if kind is bool else kind(raw)
            except (TypeError, ValueError) as e:
                raise ConfigurationError(f"Setting {key}={raw!r} is not a valid {kind.__name__}.") from e
        return cls(**merged).validate()
