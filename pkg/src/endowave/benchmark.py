"""Desk-scale synthetic benchmark shared by the acceptance tests and scripts."""

from dataclasses import replace

from .datasets import SyntheticSpec, make_synthetic
from .optim import LossConfig, TrainConfig, fit

BENCHMARK_SEED = 7
BENCHMARK_SPEC = SyntheticSpec(width=64, height=64, n_frames=16, n_blobs=6, amplitude=8.0)

# Each ablation drops exactly one supervision term from the full objective.
VARIANTS = {
    "full": {},
    "no_flow": {"lambda_flow": 0.0},
    "no_wavelet": {"lambda_wavelet": 0.0},
    "no_depth": {"lambda_depth": 0.0},
}


def benchmark_dataset(seed=BENCHMARK_SEED, spec=BENCHMARK_SPEC):
    return make_synthetic(seed, spec)


def benchmark_config(variant="full", iterations=2000, seed=BENCHMARK_SEED):
    base = TrainConfig(seed=seed, iterations=iterations, eval_every=200)
    weights = replace(base.loss.weights, **VARIANTS[variant])
    return replace(base, loss=replace(base.loss, weights=weights))


def run_variant(variant="full", iterations=2000, out_dir=None, dataset=None):
    if dataset is None:
        dataset, _ = benchmark_dataset()
    return fit(dataset, benchmark_config(variant, iterations), out_dir=out_dir)
