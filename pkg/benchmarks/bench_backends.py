#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy reference.

Times the three hot paths at a few sizes: the recurrent encoder
forward+backward (one training window), the fused training-gradient pass,
and the reverse-diffusion chain for one frame.

    python benchmarks/bench_backends.py [--repeats 5]
"""

import argparse
import time

import numpy as np

import phasediff._kernels as K
import phasediff.meta_opt as mo
from phasediff import data as pdata
from phasediff import rng as prng
from phasediff._kernels import pyref
from phasediff.networks import EncoderSpec, PredictorSpec, WeightNetSpec, predictor_params
from phasediff.schedule import build_linear_schedule

try:
    from phasediff._kernels import _core
except ImportError:
    _core = None


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_gru(backend, L, D, H, repeats):
    g = np.random.default_rng(0)
    x = g.standard_normal((1, L, D))
    shapes = [(H, D), (H, H), (H,), (H, D), (H, H), (H,), (H, D), (H, H), (H,)]
    params = tuple(g.standard_normal(s) * 0.3 for s in shapes)
    dh = g.standard_normal((1, L, H))

    def run():
        hs, cache = backend.gru_forward(x, params)
        backend.gru_backward(cache, params, dh)

    return _time(run, repeats)


def bench_train_step(core, L, D, H, W, C, repeats):
    sched = build_linear_schedule(100, 1e-4, 0.02)
    ms = mo.init_model_state(EncoderSpec(D, C, H), PredictorSpec(C, W),
                             WeightNetSpec(100), seed=0)
    g = prng.stream(0, "bench")
    video = pdata.PhaseSequence("v", g.standard_normal((L, D)), g.integers(0, C, size=L))
    batch = mo.window_batch(video, 0, L)
    eps = g.standard_normal((batch.n, C))
    saved = K._core

    def run():
        fp = mo.forward_losses(ms, sched, ms.theta, batch, 50, eps, True)
        grad = mo.weighted_loss_grad(fp, ms.theta, np.ones(batch.n))
        mo.loss_tangents(fp, ms.theta, grad)

    try:
        K._core = core
        return _time(run, repeats)
    finally:
        K._core = saved


def bench_chain(backend, m, steps, C, W, repeats):
    g = np.random.default_rng(1)
    shapes = [(W, 1), (W,), (W, 2 * C), (W,), (W, W), (W,), (W, W), (W,), (C, W), (C,)]
    params = tuple(g.standard_normal(s) * 0.3 for s in shapes)
    z = g.standard_normal(C)
    tfracs = np.linspace(1.0, 0.01, steps)
    marg = np.abs(g.standard_normal((steps, 3))) * 0.2 + 0.6
    pair = np.abs(g.standard_normal((steps - 1, 4))) * 0.2 + 0.3
    noise_init = g.standard_normal((m, C))
    noise_steps = g.standard_normal((steps - 1, m, C))

    def run():
        backend.reverse_chain(z, params, tfracs, marg, pair, noise_init, noise_steps)

    return _time(run, repeats)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if _core is None:
        print("compiled core not built; run `python setup.py build_ext --inplace` first")
        return

    rows = []
    for L, D, H in [(128, 16, 32), (256, 16, 64), (256, 32, 128)]:
        py = bench_gru(pyref, L, D, H, args.repeats)
        cy = bench_gru(_core, L, D, H, args.repeats)
        rows.append((f"gru fwd+bwd L={L} D={D} H={H}", py, cy))
    for L, H, W in [(128, 32, 64), (256, 64, 128)]:
        py = bench_train_step(None, L, 16, H, W, 7, args.repeats)
        cy = bench_train_step(_core, L, 16, H, W, 7, args.repeats)
        rows.append((f"train pass L={L} H={H} W={W}", py, cy))
    for m, steps in [(16, 100), (100, 100), (100, 500)]:
        py = bench_chain(pyref, m, steps, 7, 64, args.repeats)
        cy = bench_chain(_core, m, steps, 7, 64, args.repeats)
        rows.append((f"reverse chain m={m} steps={steps}", py, cy))

    print(f"{'case':<36} {'python (ms)':>12} {'cython (ms)':>12} {'speedup':>8}")
    for name, py, cy in rows:
        print(f"{name:<36} {1e3 * py:>12.2f} {1e3 * cy:>12.2f} {py / cy:>8.1f}x")


if __name__ == "__main__":
    main()
