import logging

import numpy as np

from src.config import Config, TrainConfig
from src.graph import build_graph, ring_distance_records
from src.numerics import finite_difference_check, stack
from src.seq2seq import Seq2SeqParams, forecast
from src.training import mae_loss

# Setup Logging
logging.basicConfig(level=logging.INFO)

TOLERANCE = 1e-4


def main():
    print("🔍 Checking end-to-end gradients on the micro model...")
    if Config.FLOAT_DTYPE != 'float64':
        print(f"   ⚠️ Running in {Config.FLOAT_DTYPE}; finite differences need float64 to be meaningful.")

    # N=4, K=2, L=3, P=2, two layers of 3 units, 2 heads of width 2, 2 diffusion steps
    config = TrainConfig(heads=2, embed=2, layers=2, units=3, diffusion_steps=2, lookback=3, horizon=2)
    graph = build_graph(ring_distance_records(['a', 'b', 'c', 'd']), 3000.0)
    rng = np.random.default_rng(0)
    params = Seq2SeqParams.init(config, k_in=2, k_out=1, rng=rng)

    inputs = [rng.normal(size=(graph.n, 2)) for _ in range(config.lookback)]
    targets = [rng.normal(size=(graph.n, 1)) for _ in range(config.horizon)]
    known = [rng.uniform(size=(graph.n, 1)) for _ in range(config.horizon)]
    truth = np.stack(targets)
    mask = np.ones(truth.shape, dtype=bool)

    def loss():
        preds = forecast(inputs, graph, params, config.horizon, targets=targets, known_future=known,
                         use_truth_prob=1.0)
        return mae_loss(stack(preds), truth, mask)

    named = params.named_parameters()
    print(f"   {len(named)} tensors, {params.parameter_count()} scalars")
    worst = finite_difference_check(loss, named)

    status = "✅ PASS" if worst < TOLERANCE else "❌ FAIL"
    print(f"{status}: max relative error {worst:.3e} (tolerance {TOLERANCE:.0e})")
    return 0 if worst < TOLERANCE else 1


if __name__ == "__main__":
    raise SystemExit(main())
