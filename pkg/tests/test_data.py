import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.data import (NormStats, WindowDataset, build_features, load_series, make_windows, split_70_10_20,
                      synth_generate, write_series)
from src.errors import ConfigurationError, IngestionError

HEADER = "timestamp,s0,s1\n"


def write(tmp_path, body, name='series.csv'):
    path = tmp_path / name
    path.write_text(HEADER + body)
    return path


class TestLoadSeries:
    def test_valid_file(self, tmp_path):
        path = write(tmp_path, "2012-03-01T00:00:00,60.5,0\n2012-03-01T00:05:00,61.0,59.0\n")
        table = load_series(path)
        assert table.sensor_ids == ('s0', 's1')
        assert table.T == 2 and table.period == pd.Timedelta(minutes=5)
        assert_array_equal(table.mask, [[True, False], [True, True]])

    def test_ragged_row_reports_line(self, tmp_path):
        path = write(tmp_path, "2012-03-01T00:00:00,1,2\n2012-03-01T00:05:00,1,2,3\n")
        with pytest.raises(IngestionError) as err:
            load_series(path)
        assert err.value.line == 3

    def test_short_row_reports_line(self, tmp_path):
        path = write(tmp_path, "2012-03-01T00:00:00,1,2\n2012-03-01T00:05:00,1\n")
        with pytest.raises(IngestionError) as err:
            load_series(path)
        assert err.value.line == 3

    def test_non_numeric_reading(self, tmp_path):
        path = write(tmp_path, "2012-03-01T00:00:00,1,2\n2012-03-01T00:05:00,1,fast\n")
        with pytest.raises(IngestionError, match="Non-numeric") as err:
            load_series(path)
        assert err.value.line == 3

    def test_timestamps_must_increase(self, tmp_path):
        path = write(tmp_path, "2012-03-01T00:05:00,1,2\n2012-03-01T00:00:00,1,2\n")
        with pytest.raises(IngestionError, match="increase") as err:
            load_series(path)
        assert err.value.line == 3

    def test_uneven_spacing(self, tmp_path):
        path = write(tmp_path, "2012-03-01T00:00:00,1,2\n2012-03-01T00:05:00,1,2\n2012-03-01T00:15:00,1,2\n")
        with pytest.raises(IngestionError, match="uniformly") as err:
            load_series(path)
        assert err.value.line == 4

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nowhere.csv"):
            load_series(tmp_path / 'nowhere.csv')

    def test_write_then_load_keeps_shape(self, tmp_path, synth_table):
        path = tmp_path / 'out.csv'
        write_series(synth_table, path)
        loaded = load_series(path)
        assert loaded.sensor_ids == synth_table.sensor_ids
        assert_array_equal(loaded.timestamps, synth_table.timestamps)
        assert_allclose(loaded.values, synth_table.values, atol=5e-5)


class TestSplitsAndWindows:
    def test_split_boundaries(self, synth_table):
        table = synth_table.slice(0, 100)
        train, val, test = split_70_10_20(table)
        assert (train.T, val.T, test.T) == (70, 10, 20)
        assert train.timestamps[-1] < val.timestamps[0] < test.timestamps[0]

    def test_split_floors(self, synth_table):
        train, val, test = split_70_10_20(synth_table.slice(0, 33))
        assert (train.T, val.T, test.T) == (23, 3, 7)

    def test_too_short_split(self, synth_table):
        with pytest.raises(ConfigurationError, match="validation"):
            split_70_10_20(synth_table.slice(0, 50), lookback=3, horizon=3)

    def test_window_count_and_contents(self, synth_table):
        norm = NormStats.fit(synth_table)
        ds = WindowDataset(synth_table, 3, 2, norm)
        assert len(ds) == synth_table.T - 3 - 2 + 1
        item = ds[5]
        assert item.inputs.shape == (3, 4, 2) and item.targets.shape == (2, 4, 1)
        assert_allclose(item.inputs[:, :, 0], norm.normalize(synth_table.values[5:8]))
        assert_allclose(item.targets[:, :, 0], synth_table.values[8:10])
        with pytest.raises(IndexError):
            ds[len(ds)]

    def test_windows_stay_inside_their_split(self, synth_table):
        train, val, _ = split_70_10_20(synth_table, 3, 2)
        ds = make_windows(val, 3, 2)
        last = ds[len(ds) - 1]
        assert_allclose(last.targets[-1, :, 0], val.values[-1])

    def test_short_table_has_no_windows(self, synth_table):
        assert len(make_windows(synth_table.slice(0, 4), 3, 2)) == 0

    def test_batch_and_all_targets_agree(self, micro_datasets):
        train_ds, _, _ = micro_datasets
        batch = train_ds.batch([0, 3, 7])
        truth, mask = train_ds.all_targets()
        assert_array_equal(batch.targets, truth[[0, 3, 7]])
        assert_array_equal(batch.mask, mask[[0, 3, 7]])
        assert batch.known_future.shape == (3, 2, 4, 1)
        assert_array_equal(batch.take([1]).starts, [3])


class TestFeatures:
    def test_missing_readings_become_zero(self, synth_table):
        table = synth_table.slice(0, 10)
        table.mask[2, 1] = False
        norm = NormStats(mean=50.0, std=5.0)
        feats = build_features(table, norm)
        assert feats[2, 1, 0] == 0.0
        assert feats[3, 1, 0] == pytest.approx((table.values[3, 1] - 50.0) / 5.0)

    def test_time_of_day_channel(self, synth_table):
        feats = build_features(synth_table, NormStats(0.0, 1.0))
        assert np.all((feats[..., 1] >= 0.0) & (feats[..., 1] < 1.0))
        assert feats[1, 0, 1] == pytest.approx(5.0 / 1440.0)

    def test_norm_stats_use_valid_readings_only(self, synth_table):
        table = synth_table.slice(0, 10)
        table.values[0, 0] = 0.0
        table.mask[0, 0] = False
        stats = NormStats.fit(table)
        assert stats.mean == pytest.approx(table.values[table.mask].mean())
        assert_allclose(stats.denormalize(stats.normalize(table.values)), table.values)


class TestSynth:
    def test_is_deterministic(self, micro_graph):
        a = synth_generate(micro_graph, 50, seed=9, noise=0.1, regime_period=10)
        b = synth_generate(micro_graph, 50, seed=9, noise=0.1, regime_period=10)
        assert_array_equal(a.values, b.values)
        assert a.sensor_ids == micro_graph.vertex_ids

    def test_periodic_without_interaction_or_noise(self, micro_graph):
        table = synth_generate(micro_graph, 100, seed=1, noise=0.0, regime_period=None, rho=0.0, steps_per_day=24)
        assert_allclose(table.values[24:], table.values[:-24], atol=1e-9)

    def test_regimes_change_the_dynamics(self, micro_graph):
        one = synth_generate(micro_graph, 60, seed=2, noise=0.0, regime_period=None)
        two = synth_generate(micro_graph, 60, seed=2, noise=0.0, regime_period=10)
        assert_allclose(one.values[:11], two.values[:11])
        assert not np.allclose(one.values[11:], two.values[11:])

    def test_rejects_bad_settings(self, micro_graph):
        with pytest.raises(ConfigurationError):
            synth_generate(micro_graph, 0, seed=1, noise=0.0, regime_period=None)
        with pytest.raises(ConfigurationError):
            synth_generate(micro_graph, 10, seed=1, noise=0.0, regime_period=None, rho=1.0)
