import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import FrozenSet, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from src.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.config import ADJACENCY_MODES, Config, TrainConfig
from src.data import NormStats, SeriesTable, WindowDataset, build_features, load_series, split_70_10_20, \
    synth_generate, write_series
from src.errors import CheckpointError, ConfigurationError, ContractError, GarnnError, TrainingAborted
from src.evaluation import MetricsReport, compute_metrics, ha_window_predictions, write_report
from src.graph import SensorGraph, build_graph, load_distances, ring_distance_records, write_distances
from src.logger_handler import setup_logging
from src.numerics import no_grad, stack
from src.seq2seq import forecast
from src.training import predict_dataset, restore_params, train

# flag dest -> TrainConfig field
FLAG_FIELDS = {
    'seed': 'seed',
    'epochs': 'epochs',
    'batch': 'batch_size',
    'lr': 'learning_rate',
    'patience': 'patience',
    'heads': 'heads',
    'embed': 'embed',
    'units': 'units',
    'layers': 'layers',
    'diffusion_steps': 'diffusion_steps',
    'horizon': 'horizon',
    'lookback': 'lookback',
    'threads': 'threads',
    'adjacency': 'adjacency',
    'threshold': 'graph_threshold',
}
PATH_KEYS = ('series', 'distances', 'checkpoint', 'compare', 'out')
PATH_DEFAULTS = {'series': 'SERIES_PATH', 'distances': 'DISTANCES_PATH'}  # path key -> Config attribute

# eval-only settings: name -> (default, allowed values)
EVAL_OPTIONS = {
    'split': ('test', ('train', 'val', 'test')),
    'baseline': ('none', ('none', 'ha')),
    'season_period': (Config.SEASON_PERIOD, None),
}


@dataclass
class RunConfig:
    """Fully resolved settings of one command: flags > config file > environment > defaults."""
    train: TrainConfig
    series: Optional[str] = None
    distances: Optional[str] = None
    checkpoint: Optional[str] = None
    compare: Optional[str] = None
    out: Optional[str] = None
    options: dict = field(default_factory=dict)
    explicit: FrozenSet[str] = frozenset()  # TrainConfig fields set by a flag or the config file

    def to_env(self) -> str:
        lines = [f"{key}={value}" for key, value in sorted(self.train.to_dict().items())]
        for key in PATH_KEYS:
            value = getattr(self, key)
            if value is not None:
                lines.append(f"{key}={value}")
        lines.extend(f"{key}={value}" for key, value in sorted(self.options.items()))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, name: str = 'resolved_config.env') -> Path:
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_env(), encoding='utf-8')
        return path


def _resolve_options(args: argparse.Namespace, file_values: dict) -> dict:
    options = {}
    for key, (default, allowed) in EVAL_OPTIONS.items():
        if not hasattr(args, key):
            continue
        raw = file_values.pop(key, None)
        if getattr(args, key) is not None:
            raw = getattr(args, key)
        value = default if raw is None else raw
        if allowed is None:
            try:
                value = int(value)
            except (TypeError, ValueError) as e:
                raise ConfigurationError(f"Setting {key}={value!r} is not a valid int.") from e
            if value < 1:
                raise ConfigurationError(f"{key} must be positive, got {value}.")
        elif value not in allowed:
            raise ConfigurationError(f"{key} must be one of {', '.join(allowed)}, got {value!r}.")
        options[key] = value
    return options


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = {}
    if getattr(args, 'config', None):
        if not Path(args.config).is_file():
            raise FileNotFoundError(f"Config file not found: {args.config}")
        file_values = {k.strip().lower(): v for k, v in dotenv_values(args.config).items()}

    paths = {key: file_values.pop(key, None) for key in PATH_KEYS}
    options = _resolve_options(args, file_values)
    train_config = TrainConfig.from_mapping(file_values)

    overrides = {field_name: getattr(args, dest) for dest, field_name in FLAG_FIELDS.items()
                 if getattr(args, dest, None) is not None}
    train_config = TrainConfig.from_mapping(overrides, base=train_config)
    explicit = frozenset(k for k, v in file_values.items() if v is not None) | frozenset(overrides)

    for key in PATH_KEYS:
        if getattr(args, key, None) is not None:
            paths[key] = str(getattr(args, key))
    for key, attr in PATH_DEFAULTS.items():
        if paths[key] is None and getattr(Config, attr):
            paths[key] = getattr(Config, attr)
    return RunConfig(train=train_config, options=options, explicit=explicit, **paths)


def _require(run: RunConfig, key: str) -> str:
    value = getattr(run, key)
    if not value:
        raise ConfigurationError(f"--{key} is required (flag, config file or GARNN_{key.upper()}).")
    return value


def _load_inputs(run: RunConfig):
    table = load_series(_require(run, 'series'), Config.MISSING_VALUE)
    records = load_distances(_require(run, 'distances'))
    return table, records


def _period_seconds(table: SeriesTable) -> Optional[float]:
    return table.period.total_seconds() if table.period is not None else None


def _checkpoint_config(ckpt: Checkpoint, run: RunConfig) -> TrainConfig:
    """The checkpoint fixes the model; settings given explicitly must agree with it."""
    c = TrainConfig.from_mapping(ckpt.config)
    for name in sorted(run.explicit):
        given, trained = getattr(run.train, name), getattr(c, name)
        if given != trained:
            raise ConfigurationError(
                f"{name}={given} disagrees with the checkpoint, which was trained with {name}={trained}.")
    return c


def _check_compatible(ckpt: Checkpoint, table: SeriesTable, graph: SensorGraph) -> None:
    expected = tuple(ckpt.graph['vertex_ids'])
    if table.sensor_ids != expected:
        raise CheckpointError(
            f"Series sensors {list(table.sensor_ids)[:5]}... do not match the checkpoint's graph "
            f"({len(expected)} sensors, format v{ckpt.format_version}).")
    edges = ckpt.graph.get('edges')
    if edges is None:
        raise CheckpointError(f"Checkpoint graph has no edge list (format v{ckpt.format_version}).")
    trained, given = {tuple(e) for e in edges}, {tuple(e) for e in graph.edge_list()}
    if trained != given:
        raise CheckpointError(
            f"Distance file gives a different graph than the checkpoint's: {len(given - trained)} new and "
            f"{len(trained - given)} missing edges (format v{ckpt.format_version}).")
    period = ckpt.data.get('period_seconds')
    if period is not None and table.period is not None and _period_seconds(table) != period:
        raise CheckpointError(
            f"Series step is {_period_seconds(table)}s, the checkpoint was trained on {period}s (format v{ckpt.format_version}).")
    if ckpt.dtype != Config.FLOAT_DTYPE:
        logging.warning(f"[CKPT] Checkpoint was trained in {ckpt.dtype}, running in {Config.FLOAT_DTYPE}")


def _model_label(c: TrainConfig) -> str:
    return "GA-RNN" if c.adjacency == 'attention' else "static-adjacency DCRNN"


def _evaluate_checkpoint(ckpt: Checkpoint, c: TrainConfig, graph: SensorGraph, table: SeriesTable):
    dataset = WindowDataset(table, c.lookback, c.horizon, NormStats(**ckpt.norm))
    truth, mask = dataset.all_targets()
    report = compute_metrics(predict_dataset(restore_params(ckpt), graph, dataset, c.batch_size), truth, mask)
    return report, dataset


def _avg_mae(report: MetricsReport) -> str:
    return f"{report.average.mae:.4f}" if report.average is not None else "na"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    if args.nodes < 1:
        raise ConfigurationError(f"--nodes must be >= 1, got {args.nodes}.")
    if args.steps < 1:
        raise ConfigurationError(f"--steps must be >= 1, got {args.steps}.")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ids = [f"s{i}" for i in range(args.nodes)]
    records = ring_distance_records(ids)
    graph = build_graph(records, args.threshold if args.threshold is not None else Config.GRAPH_THRESHOLD,
                        vertex_ids=ids)
    table = synth_generate(graph, args.steps, seed=args.seed if args.seed is not None else Config.SEED,
                           noise=args.noise, regime_period=args.regime_period or None, rho=args.rho,
                           steps_per_day=args.steps_per_day)

    write_series(table, out / 'series.csv')
    write_distances(records, out / 'distances.csv')
    logging.info(f"[SYNTH] Wrote {out / 'series.csv'} and {out / 'distances.csv'}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run = resolve_config(args)
    c = run.train
    out = Path(run.out or Config.OUTPUT_DIR)
    run.write(out)

    table, records = _load_inputs(run)
    graph = build_graph(records, c.graph_threshold, vertex_ids=table.sensor_ids)
    train_table, val_table, _ = split_70_10_20(table, c.lookback, c.horizon)
    norm = NormStats.fit(train_table)
    train_ds = WindowDataset(train_table, c.lookback, c.horizon, norm)
    val_ds = WindowDataset(val_table, c.lookback, c.horizon, norm)
    logging.info(f"[TRAIN] {len(train_ds)} training / {len(val_ds)} validation windows | "
                 f"norm mean={norm.mean:.4f} std={norm.std:.4f}")

    history_path = out / 'history.log'
    history_path.unlink(missing_ok=True)
    try:
        result = train(c, train_ds, val_ds, graph, history_path=history_path,
                       period_seconds=_period_seconds(table))
    except TrainingAborted as e:
        if e.checkpoint is not None:
            save_checkpoint(e.checkpoint, out / 'best.ckpt')
        raise

    save_checkpoint(result.best, out / 'best.ckpt')
    save_checkpoint(result.final, out / 'final.ckpt')
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run = resolve_config(args)
    ckpt = load_checkpoint(_require(run, 'checkpoint'))
    c = _checkpoint_config(ckpt, run)
    split, baseline, season_period = (run.options[k] for k in ('split', 'baseline', 'season_period'))
    out = Path(run.out or Config.OUTPUT_DIR)
    replace(run, train=c).write(out, 'resolved_eval.env')

    table, records = _load_inputs(run)
    graph = build_graph(records, c.graph_threshold, vertex_ids=table.sensor_ids)
    _check_compatible(ckpt, table, graph)
    splits = dict(zip(('train', 'val', 'test'), split_70_10_20(table, c.lookback, c.horizon)))

    minutes = _period_seconds(table) / 60.0 if table.period is not None else None
    report, dataset = _evaluate_checkpoint(ckpt, c, graph, splits[split])
    write_report(report, out, f"eval_{split}", f"{_model_label(c)} on {split} ({len(dataset)} windows)", minutes)
    summary = [f"{_model_label(c)} avg MAE {_avg_mae(report)}"]

    if run.compare:
        other = load_checkpoint(run.compare)
        oc = TrainConfig.from_mapping(other.config)
        if (oc.lookback, oc.horizon) != (c.lookback, c.horizon):
            raise ConfigurationError(
                f"--compare checkpoint uses L={oc.lookback}, P={oc.horizon}; the evaluated one L={c.lookback}, "
                f"P={c.horizon}. Both must forecast the same windows.")
        other_graph = build_graph(records, oc.graph_threshold, vertex_ids=table.sensor_ids)
        _check_compatible(other, table, other_graph)
        compared, _ = _evaluate_checkpoint(other, oc, other_graph, splits[split])
        write_report(compared, out, f"compare_{split}",
                     f"{_model_label(oc)} on {split} ({len(dataset)} windows, {run.compare})", minutes)
        summary.append(f"{_model_label(oc)} avg MAE {_avg_mae(compared)}")

    if baseline == 'ha':
        truth, mask = dataset.all_targets()
        ha = compute_metrics(ha_window_predictions(splits['train'], dataset, season_period), truth, mask)
        write_report(ha, out, f"ha_{split}",
                     f"Historical average on {split} (season {season_period} steps, unweighted slot mean)",
                     minutes)
        summary.append(f"HA avg MAE {_avg_mae(ha)}")

    logging.info(f"[EVAL] {split}: " + " | ".join(summary))
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    run = resolve_config(args)
    ckpt = load_checkpoint(_require(run, 'checkpoint'))
    c = _checkpoint_config(ckpt, run)
    out = Path(run.out or Config.OUTPUT_DIR)
    replace(run, train=c).write(out, 'resolved_predict.env')

    table, records = _load_inputs(run)
    graph = build_graph(records, c.graph_threshold, vertex_ids=table.sensor_ids)
    _check_compatible(ckpt, table, graph)
    if table.T < c.lookback:
        raise ContractError(f"Prediction needs a window of {c.lookback} rows, the series has {table.T}.")
    if table.period is None:
        raise ContractError("Prediction needs at least two rows to infer the time step.")

    norm = NormStats(**ckpt.norm)
    window = table.slice(table.T - c.lookback, table.T)
    future_times = pd.date_range(start=table.timestamps[-1] + table.period, periods=c.horizon, freq=table.period)
    future = SeriesTable(future_times, np.zeros((c.horizon, table.n)), table.sensor_ids,
                         np.zeros((c.horizon, table.n), dtype=bool))
    inputs = build_features(window, norm)
    known_future = build_features(future, norm)[..., 1:]

    params = restore_params(ckpt)
    with no_grad():
        preds = forecast(list(inputs), graph, params, c.horizon, known_future=list(known_future))
    speeds = norm.denormalize(stack(preds).numpy()[..., 0])

    forecast_table = SeriesTable(future_times, speeds, table.sensor_ids, np.ones(speeds.shape, dtype=bool))
    out.mkdir(parents=True, exist_ok=True)
    write_series(forecast_table, out / 'forecast.csv')
    logging.info(f"[PREDICT] {c.horizon} steps from {future_times[0]} to {future_times[-1]} -> {out / 'forecast.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='garnn', description="Graph attention recurrent forecaster for sensor networks.")
    sub = parser.add_subparsers(dest='command', required=True)

    io = argparse.ArgumentParser(add_help=False)
    io.add_argument('--config', help="Flat key=value run configuration (flags take precedence)")
    io.add_argument('--series', help="Series CSV: timestamp column, then one column per sensor")
    io.add_argument('--distances', help="Distance CSV with header from,to,dist")
    io.add_argument('--threshold', type=float, help="Edge iff distance < threshold")
    io.add_argument('--out', help="Output directory")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument('--seed', type=int)
    model.add_argument('--epochs', type=int)
    model.add_argument('--batch', type=int)
    model.add_argument('--lr', type=float)
    model.add_argument('--patience', type=int)
    model.add_argument('--heads', type=int)
    model.add_argument('--embed', type=int)
    model.add_argument('--units', type=int)
    model.add_argument('--layers', type=int)
    model.add_argument('--diffusion-steps', dest='diffusion_steps', type=int)
    model.add_argument('--horizon', type=int)
    model.add_argument('--lookback', type=int)
    model.add_argument('--threads', type=int)
    model.add_argument('--adjacency', choices=ADJACENCY_MODES,
                       help="attention: per-timestamp learned matrices; static: fixed transition matrices (DCRNN)")

    synth = sub.add_parser('synth', help="Generate a synthetic series and ring graph")
    synth.add_argument('--nodes', type=int, default=6)
    synth.add_argument('--steps', type=int, default=2000)
    synth.add_argument('--seed', type=int)
    synth.add_argument('--noise', type=float, default=0.01)
    synth.add_argument('--regime-period', dest='regime_period', type=int, default=288,
                       help="Steps between interaction regime switches (0 keeps one regime)")
    synth.add_argument('--rho', type=float, default=0.8, help="Weight of the graph interaction term")
    synth.add_argument('--steps-per-day', dest='steps_per_day', type=int, default=288)
    synth.add_argument('--threshold', type=float)
    synth.add_argument('--out', default='data')
    synth.set_defaults(handler=cmd_synth)

    trainer = sub.add_parser('train', parents=[io, model], help="Train and write best/final checkpoints")
    trainer.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser('eval', parents=[io], help="Per-horizon MAE/RMSE/MAPE of a checkpoint")
    evaluate.add_argument('--checkpoint')
    evaluate.add_argument('--compare', help="Second checkpoint reported next to the first (e.g. the static-adjacency model)")
    evaluate.add_argument('--split', choices=EVAL_OPTIONS['split'][1], help="Default: test")
    evaluate.add_argument('--baseline', choices=EVAL_OPTIONS['baseline'][1], help="Default: none")
    evaluate.add_argument('--season-period', dest='season_period', type=int,
                          help=f"HA season in steps (default {Config.SEASON_PERIOD})")
    evaluate.set_defaults(handler=cmd_eval)

    predict = sub.add_parser('predict', parents=[io], help="Forecast the next P steps after the series")
    predict.add_argument('--checkpoint')
    predict.set_defaults(handler=cmd_predict)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(run_dir=getattr(args, 'out', None))
    try:
        return args.handler(args)
    except (GarnnError, OSError) as e:
        logging.error(f"{args.command} failed: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
