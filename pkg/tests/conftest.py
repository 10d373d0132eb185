import numpy as np
import pytest

from src.config import TrainConfig
from src.data import NormStats, WindowDataset, split_70_10_20, synth_generate, write_series
from src.graph import SensorGraph, build_graph, ring_distance_records, write_distances

RING_IDS = ['a', 'b', 'c', 'd']


@pytest.fixture
def micro_graph():
    """Directed ring on four sensors with skip-two edges."""
    return build_graph(ring_distance_records(RING_IDS), 3000.0)


@pytest.fixture
def micro_config():
    return TrainConfig(heads=2, embed=2, layers=2, units=3, diffusion_steps=2, lookback=3, horizon=2,
                       batch_size=16, epochs=2, patience=10, tau=50.0, seed=11, threads=1)


@pytest.fixture
def synth_table(micro_graph):
    return synth_generate(micro_graph, 120, seed=3, noise=0.01, regime_period=24, steps_per_day=24)


@pytest.fixture
def micro_datasets(synth_table, micro_config):
    train, val, test = split_70_10_20(synth_table, micro_config.lookback, micro_config.horizon)
    norm = NormStats.fit(train)
    c = micro_config
    return (WindowDataset(train, c.lookback, c.horizon, norm),
            WindowDataset(val, c.lookback, c.horizon, norm),
            WindowDataset(test, c.lookback, c.horizon, norm))


@pytest.fixture
def synth_files(tmp_path, micro_graph):
    """Series and distance files of a small synthetic run."""
    table = synth_generate(micro_graph, 200, seed=5, noise=0.01, regime_period=24, steps_per_day=24)
    series, distances = tmp_path / 'series.csv', tmp_path / 'distances.csv'
    write_series(table, series)
    write_distances(ring_distance_records(RING_IDS), distances)
    return series, distances


def random_graph(rng, n, density=0.3):
    adjacency = (rng.random((n, n)) < density).astype(np.int8)
    np.fill_diagonal(adjacency, 0)
    return SensorGraph(adjacency=adjacency, vertex_ids=tuple(f"v{i}" for i in range(n)))
