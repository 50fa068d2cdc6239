#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py [--repeat N]

Shapes mirror the hot paths: per-position softmax/CE/KL rows at desk vocab,
causal attention at training batch size, single-position attention at rollout
batch size, and the fused optimizer update.
"""

import argparse
import time

import numpy as np

from molrl import kernels


def timeit(fn, repeat):
    fn()  # warmup (includes jit compilation on the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = parser.parse_args()

    if kernels.numba_impl is None:
        print("numba unavailable; nothing to compare")
        return

    dt = np.float32 if args.dtype == "float32" else np.float64
    rng = np.random.default_rng(0)

    n_rows, vocab = 4096, 105
    logits = rng.standard_normal((n_rows, vocab)).astype(dt)
    ref_logp = kernels.numpy_impl.log_softmax(logits + 0.1 * rng.standard_normal(logits.shape).astype(dt))
    targets = rng.integers(0, vocab, n_rows)
    weights = rng.random(n_rows)

    b, h, t, d = 32, 4, 256, 16
    q, k, v = (rng.standard_normal((b, h, t, d)).astype(dt) for _ in range(3))
    dout = rng.standard_normal((b, h, t, d)).astype(dt)
    qd = rng.standard_normal((64, h, d)).astype(dt)
    kc, vc = (rng.standard_normal((64, h, 160, d)).astype(dt) for _ in range(2))

    n_par = 150_000
    p = rng.standard_normal(n_par)
    g = rng.standard_normal(n_par)
    m = np.zeros(n_par)
    vv = np.zeros(n_par)

    cases = {
        "log_softmax (4096x105)": lambda impl: impl.log_softmax(logits),
        "ce_rows (4096x105)": lambda impl: impl.ce_rows(logits, targets, weights),
        "kl_rows (4096x105)": lambda impl: impl.kl_rows(ref_logp, logits, weights),
        "attn_forward (32x4x256x16)": lambda impl: impl.attn_forward(q, k, v, 0.25),
        "attn_decode (64 rows, T=160)": lambda impl: impl.attn_decode(qd, kc, vc, 0.25),
        "adamw_step (150k params)": lambda impl: impl.adamw_step(
            p, g, m, vv, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.1, 0.001
        ),
    }
    probs = kernels.numpy_impl.attn_forward(q, k, v, 0.25)[1]
    cases["attn_backward (32x4x256x16)"] = lambda impl: impl.attn_backward(probs, q, k, v, dout, 0.25)

    print(f"dtype={args.dtype}  repeat={args.repeat}  active backend={kernels.BACKEND}")
    print(f"{'kernel':34s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        t_np = timeit(lambda: fn(kernels.numpy_impl), args.repeat)
        t_nb = timeit(lambda: fn(kernels.numba_impl), args.repeat)
        print(f"{name:34s} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
