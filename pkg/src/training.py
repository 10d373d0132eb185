import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.checkpoint import Checkpoint
from src.config import Config, TrainConfig
from src.data import NormStats, WindowBatch, WindowDataset
from src.errors import CheckpointError, ConfigurationError, ContractError, DegenerateBatchError, \
    DimensionError, NonFiniteError, TrainingAborted
from src.evaluation import MetricsReport, compute_metrics
from src.graph import SensorGraph
from src.numerics import ComputationTape, Parameter, Tensor, absolute, as_tensor, backward, check_finite, \
    no_grad, stack, total
from src.seq2seq import SamplingSchedule, Seq2SeqParams, forecast, sampling_probability


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def masked_abs_error(preds, truth, mask) -> Tuple[Tensor, int]:
    """Sum of |preds - truth| over the valid entries, and how many there are."""
    preds = as_tensor(preds)
    truth = np.asarray(truth, dtype=float)
    if truth.shape != preds.shape:
        raise DimensionError(f"Predictions {preds.shape} and truth {truth.shape} differ.")
    valid = np.broadcast_to(np.asarray(mask, dtype=bool), preds.shape)
    weights = Tensor(valid.astype(float))
    return total(absolute(preds - np.where(valid, truth, 0.0)) * weights), int(valid.sum())


def mae_loss(preds, truth, mask) -> Tensor:
    err, count = masked_abs_error(preds, truth, mask)
    if count == 0:
        raise DegenerateBatchError("No valid target entries in this batch.")
    return err * (1.0 / count)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Mapping[str, Parameter]) -> 'OptimizerState':
        return cls(m={name: np.zeros(p.shape) for name, p in params.items()},
                   v={name: np.zeros(p.shape) for name, p in params.items()})

    def to_dict(self) -> dict:
        return {'step': self.step, 'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps,
                'm': {k: a.copy() for k, a in self.m.items()}, 'v': {k: a.copy() for k, a in self.v.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> 'OptimizerState':
        return cls(m=dict(d['m']), v=dict(d['v']), step=int(d['step']),
                   beta1=d['beta1'], beta2=d['beta2'], eps=d['eps'])


def adam_step(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray], state: OptimizerState,
              lr: float) -> Tuple[Mapping[str, Parameter], OptimizerState]:
    """Bias-corrected Adam. Parameters are reassigned in place; the state is advanced one step."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.shape:
            raise DimensionError(f"Gradient for {name} is {None if g is None else np.shape(g)}, expected {p.shape}.")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"Non-finite gradient for parameter {name}.")
        state.m.setdefault(name, np.zeros(p.shape))
        state.v.setdefault(name, np.zeros(p.shape))

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=float)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        p.assign(p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return params, state


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale so the joint L2 norm is at most `max_norm`; 0 disables clipping."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = {name: g * factor for name, g in grads.items()}
    return grads, norm


def lr_at_epoch(epoch: int, c: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError(f"Epoch must be >= 0, got {epoch}.")
    decays = 0 if epoch < c.lr_decay_start_epoch else (epoch - c.lr_decay_start_epoch) // c.lr_decay_every + 1
    return c.learning_rate * c.lr_decay_factor ** decays


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _window_forward(params: Seq2SeqParams, g: SensorGraph, batch: WindowBatch, use_truth_prob: float = 0.0,
                    rng=None, stop_attention_gradient: bool = False) -> Tensor:
    L, P = batch.inputs.shape[1], batch.targets.shape[1]
    preds = forecast(
        [batch.inputs[:, t] for t in range(L)], g, params, P,
        targets=[batch.targets_norm[:, s] for s in range(P)],
        known_future=[batch.known_future[:, s] for s in range(P)],
        use_truth_prob=use_truth_prob, rng=rng, stop_attention_gradient=stop_attention_gradient)
    return stack(preds, axis=1)


def predict_dataset(params: Seq2SeqParams, g: SensorGraph, dataset: WindowDataset,
                    batch_size: int = Config.BATCH_SIZE) -> np.ndarray:
    """Autoregressive forecasts for every window, denormalized, shaped (Y, P, N, K_out)."""
    chunks = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset.batch(range(start, min(start + batch_size, len(dataset))))
            chunks.append(_window_forward(params, g, batch).numpy())
    if not chunks:
        return np.empty((0, dataset.horizon, dataset.n, params.k_out))
    return dataset.norm.denormalize(np.concatenate(chunks))


def evaluate_dataset(params: Seq2SeqParams, g: SensorGraph, dataset: WindowDataset,
                     batch_size: int = Config.BATCH_SIZE) -> MetricsReport:
    truth, mask = dataset.all_targets()
    return compute_metrics(predict_dataset(params, g, dataset, batch_size), truth, mask)


def restore_params(ckpt: Checkpoint) -> Seq2SeqParams:
    """Rebuild the model a checkpoint was taken from."""
    config = TrainConfig.from_mapping(ckpt.config)
    params = Seq2SeqParams.init(config, ckpt.data['k_in'], ckpt.data['k_out'], np.random.default_rng(config.seed))
    named = params.named_parameters()
    if set(named) != set(ckpt.params):
        missing, extra = sorted(set(named) - set(ckpt.params)), sorted(set(ckpt.params) - set(named))
        raise CheckpointError(f"Checkpoint tensors do not match the configured model (missing {missing}, unexpected {extra}).")
    for name, p in named.items():
        if ckpt.params[name].shape != p.shape:
            raise CheckpointError(f"Tensor {name} has shape {ckpt.params[name].shape}, the model needs {p.shape}.")
        p.assign(ckpt.params[name])
    return params


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def format_history_line(record: dict) -> str:
    def fmt(value):
        return 'na' if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.10g}"
    return (f"epoch={record['epoch']} iteration={record['iteration']} lr={fmt(record['lr'])} "
            f"teacher_forcing={fmt(record['teacher_forcing'])} train_loss={fmt(record['train_loss'])} "
            f"val_mae={fmt(record['val_mae'])} val_rmse={fmt(record['val_rmse'])} val_mape={fmt(record['val_mape'])}")


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    history: List[dict]


class Trainer:
    """
    Owns the model, the optimizer state and the epoch loop. The optimizer is
    the only writer of parameter values and runs after every batch's
    gradient chunks have joined.
    """

    def __init__(self, config: TrainConfig, graph: SensorGraph, norm: NormStats, k_in: int, k_out: int = 1,
                 period_seconds: Optional[float] = None):
        self.config = config.validate()
        self.graph = graph
        self.norm = norm
        self.period_seconds = period_seconds
        self.params = Seq2SeqParams.init(config, k_in, k_out, np.random.default_rng(config.seed))
        self.named = self.params.named_parameters()
        self.optimizer = OptimizerState.zeros(self.named)
        self.schedule = SamplingSchedule(config.tau)
        self.epoch = 0
        self.history: List[dict] = []

        logging.info(f"[TRAIN] Model ready: {self.params.parameter_count()} parameters in {len(self.named)} tensors | "
                     f"N={graph.n} K_in={k_in} K_out={k_out} layers={config.layers} units={config.units} "
                     f"heads={config.heads} H={config.diffusion_steps} adjacency={config.adjacency}")

    @property
    def iteration(self) -> int:
        return self.optimizer.step

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, graph: SensorGraph) -> 'Trainer':
        config = TrainConfig.from_mapping(ckpt.config)
        trainer = cls(config, graph, NormStats(**ckpt.norm), ckpt.data['k_in'], ckpt.data['k_out'],
                      ckpt.data.get('period_seconds'))
        trainer.params = restore_params(ckpt)
        trainer.named = trainer.params.named_parameters()
        trainer.optimizer = OptimizerState.from_dict(ckpt.optimizer)
        trainer.epoch = ckpt.epoch
        trainer.history = [dict(r) for r in ckpt.history]
        return trainer

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params={name: p.numpy() for name, p in self.named.items()},
            config=self.config.to_dict(),
            optimizer=self.optimizer.to_dict(),
            epoch=self.epoch,
            norm=self.norm.to_dict(),
            graph={'vertex_ids': list(self.graph.vertex_ids), 'threshold': self.config.graph_threshold,
                   'edges': self.graph.edge_list()},
            data={'k_in': self.params.k_in, 'k_out': self.params.k_out, 'period_seconds': self.period_seconds},
            dtype=Config.FLOAT_DTYPE,
            history=[dict(r) for r in self.history]
        )

    def _chunk_gradients(self, batch: WindowBatch, use_truth_prob: float):
        # one generator per sequence, so the draws do not depend on how the batch is chunked
        rngs = [np.random.default_rng([self.config.seed, self.iteration, int(s)]) for s in batch.starts]
        with ComputationTape() as tape:
            preds = _window_forward(self.params, self.graph, batch, use_truth_prob, rngs,
                                    self.config.stop_attention_gradient)
            err, count = masked_abs_error(preds, batch.targets_norm, batch.mask)
        grads = backward(tape, err, self.named) if count else None
        return err.item(), count, grads

    def batch_gradients(self, batch: WindowBatch, use_truth_prob: float,
                        pool: ThreadPoolExecutor = None) -> Tuple[float, int, Optional[Dict[str, np.ndarray]]]:
        """Summed absolute error, valid count and summed gradients over the batch."""
        if pool is None or batch.size < 2:
            parts = [self._chunk_gradients(batch, use_truth_prob)]
        else:
            chunks = [rows for rows in np.array_split(np.arange(batch.size), self.config.threads) if len(rows)]
            parts = list(pool.map(lambda rows: self._chunk_gradients(batch.take(rows), use_truth_prob), chunks))

        err = sum(p[0] for p in parts)
        count = sum(p[1] for p in parts)
        grads = None
        for _, _, chunk in parts:
            if chunk is None:
                continue
            grads = chunk if grads is None else {name: grads[name] + g for name, g in chunk.items()}
        return err, count, grads

    def train_step(self, batch: WindowBatch, lr: float, pool: ThreadPoolExecutor = None) -> Optional[Tuple[float, int]]:
        use_truth_prob = sampling_probability(self.iteration, self.schedule)
        err, count, grads = self.batch_gradients(batch, use_truth_prob, pool)
        if count == 0:
            logging.warning(f"[TRAIN] Batch at iteration {self.iteration} has no valid targets, skipped")
            return None

        loss = err / count
        if not math.isfinite(loss):
            raise NonFiniteError(f"Training loss is {loss} at iteration {self.iteration}.")

        grads, norm = clip_by_global_norm({name: g / count for name, g in grads.items()}, self.config.clip_norm)
        adam_step(self.named, grads, self.optimizer, lr)

        if Config.DEBUG_NUMERICS:
            for name, p in self.named.items():
                check_finite(p, f"parameter {name} after step {self.iteration}")
            logging.debug(f"[TRAIN] iteration={self.iteration} loss={loss:.6f} grad_norm={norm:.4f}")
        return err, count

    def run_epoch(self, train_ds: WindowDataset, pool: ThreadPoolExecutor = None) -> float:
        c = self.config
        lr = lr_at_epoch(self.epoch, c)
        order = np.random.default_rng([c.seed, self.epoch]).permutation(len(train_ds))
        err_total, count_total = 0.0, 0
        for start in range(0, len(order), c.batch_size):
            step = self.train_step(train_ds.batch(order[start:start + c.batch_size]), lr, pool)
            if step is not None:
                err_total += step[0]
                count_total += step[1]
        return err_total / count_total if count_total else float('nan')

    def fit(self, train_ds: WindowDataset, val_ds: Optional[WindowDataset] = None,
            history_path=None) -> TrainResult:
        """
        Epoch loop with best-checkpoint tracking and patience-based early stop.

        The best checkpoint is chosen on denormalized validation MAE, or on the
        training loss when there are no validation windows. A non-finite loss or
        gradient raises TrainingAborted carrying the best checkpoint so far.
        """
        c = self.config
        if len(train_ds) == 0:
            raise ConfigurationError("The training split yields no windows.")
        if train_ds.n != self.graph.n:
            raise DimensionError(f"Series has {train_ds.n} sensors, the graph {self.graph.n}.")
        if val_ds is None or len(val_ds) == 0:
            logging.warning("[TRAIN] No validation windows; selecting the checkpoint on training loss")

        history_file = Path(history_path) if history_path else None
        if history_file:
            history_file.parent.mkdir(parents=True, exist_ok=True)

        best = self.checkpoint()
        best_score = math.inf
        stale = 0
        pool_context = ThreadPoolExecutor(max_workers=c.threads) if c.threads > 1 else nullcontext()
        with pool_context as pool:
            while self.epoch < c.epochs:
                lr = lr_at_epoch(self.epoch, c)
                try:
                    train_loss = self.run_epoch(train_ds, pool)
                except NonFiniteError as e:
                    logging.error(f"[TRAIN] Aborting in epoch {self.epoch + 1}: {e}")
                    raise TrainingAborted(f"Training aborted in epoch {self.epoch + 1}: {e}",
                                          checkpoint=best, history=list(self.history)) from e
                self.epoch += 1

                report = evaluate_dataset(self.params, self.graph, val_ds, c.batch_size) \
                    if val_ds is not None and len(val_ds) else None
                avg = report.average if report else None
                record = {
                    'epoch': self.epoch,
                    'iteration': self.iteration,
                    'lr': lr,
                    'teacher_forcing': sampling_probability(self.iteration, self.schedule),
                    'train_loss': train_loss,
                    'val_mae': avg.mae if avg else None,
                    'val_rmse': avg.rmse if avg else None,
                    'val_mape': avg.mape if avg else None
                }
                self.history.append(record)
                line = format_history_line(record)
                logging.info(f"[TRAIN] {line}")
                if history_file:
                    with history_file.open('a', encoding='utf-8') as fh:
                        fh.write(line + "\n")

                score = avg.mae if avg else train_loss
                if score < best_score:
                    best_score, stale = score, 0
                    best = self.checkpoint()
                else:
                    stale += 1
                    if stale >= c.patience:
                        logging.info(f"[TRAIN] No improvement for {stale} epochs, stopping at epoch {self.epoch}")
                        break

        logging.info(f"[TRAIN] Done after {self.epoch} epochs, {self.iteration} iterations | best score {best_score:.6f}")
        return TrainResult(best=best, final=self.checkpoint(), history=list(self.history))


def train(config: TrainConfig, train_ds: WindowDataset, val_ds: Optional[WindowDataset], g: SensorGraph,
          history_path=None, period_seconds: Optional[float] = None) -> TrainResult:
    trainer = Trainer(config, g, train_ds.norm, k_in=train_ds.k, k_out=1, period_seconds=period_seconds)
    return trainer.fit(train_ds, val_ds, history_path)
