"""Compare the numba kernels with their pure-numpy twins.

Part one times each kernel pair in-process at the shapes a desk-scale
training batch produces. Part two times whole training steps in two
subprocesses, one of them with ``LANA_DISABLE_JIT=1``.

    python benchmarks/bench_kernels.py [--batch 32] [--steps 10]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from lana import kernels as K

STEP_PROBE = r"""
import json, sys, time
from lana import _jit, dataio, simgen, training
from lana.model import LanaHyper, init_params
batch, steps = int(sys.argv[1]), int(sys.argv[2])
recs = simgen.generate(simgen.SimConfig(n_students=batch * steps, seed=0))
windows = dataio.windows_from_records(recs, 100)[: batch * steps]
params = init_params(LanaHyper(d_model=32, d_ff=32, n_heads=4), seed=0)
cfg = training.TrainConfig(epochs=1, batch_size=batch, lr=1e-3)
training.train(params, windows[:batch], cfg)  # warm-up, includes compilation
start = time.perf_counter()
training.train(params, windows, cfg)
print(json.dumps({"jit": _jit.USE_JIT, "seconds_per_step": (time.perf_counter() - start) / steps}))
"""


def _cases(batch, heads, n, d, d_piv, vocab, rng):
    rows = batch * heads * n
    x = rng.normal(size=(rows, n))
    mask = np.tril(np.ones((n, n), dtype=bool))
    mask = np.tile(mask, (batch * heads, 1))
    y = K.softmax_fwd_np(x, mask)
    g = rng.normal(size=(rows, n))
    tokens = batch * n
    h = rng.normal(size=(tokens, d))
    gamma, beta = rng.normal(size=d), rng.normal(size=d)
    _, xhat, rstd = K.layer_norm_fwd_np(h, gamma, beta, 1e-5)
    gh = rng.normal(size=(tokens, d))
    idx = rng.integers(0, vocab, size=tokens)
    flat = 200_000
    adam = [rng.normal(size=flat) for _ in range(2)] + [np.zeros(flat), np.zeros(flat)]
    z = rng.normal(size=(tokens, d * d_piv))
    p = rng.normal(size=(tokens, d_piv))
    gy = rng.normal(size=(tokens, d))
    rate = rng.uniform(0.01, 0.5, size=(batch, heads, n))
    dis = np.tril(rng.uniform(0, 500, size=(batch, n, n)))
    gb = rng.normal(size=(batch, heads, n, n))

    def adamw(fn):
        return lambda: fn(adam[0].copy(), adam[1], adam[2].copy(), adam[3].copy(),
                          1e-3, 0.9, 0.999, 1e-8, 0.01, 3)

    return {
        "softmax_fwd": (lambda f: lambda: f(x, mask), "softmax_fwd"),
        "softmax_bwd": (lambda f: lambda: f(y, g), "softmax_bwd"),
        "layer_norm_fwd": (lambda f: lambda: f(h, gamma, beta, 1e-5), "layer_norm_fwd"),
        "layer_norm_bwd": (lambda f: lambda: f(gh, xhat, rstd, gamma), "layer_norm_bwd"),
        "embedding_bwd": (lambda f: lambda: f(idx, gh, vocab), "embedding_bwd"),
        "adamw": (adamw, "adamw"),
        "pivot_mix": (lambda f: lambda: f(z, p, d), "pivot_mix"),
        "pivot_mix_bwd": (lambda f: lambda: f(gy, z, p, d), "pivot_mix_bwd"),
        "decay_bias": (lambda f: lambda: f(rate, dis, 30.0), "decay_bias"),
        "decay_bias_bwd": (lambda f: lambda: f(gb, rate, dis, 30.0), "decay_bias_bwd"),
    }


def _best(fn, repeat):
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(args):
    rng = np.random.default_rng(0)
    print(f"{'kernel':16s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, (make, stem) in _cases(args.batch, 4, 100, 32, 8, 801, rng).items():
        t_np = _best(make(getattr(K, stem + "_np")), args.repeat)
        t_jit = _best(make(getattr(K, stem + "_jit")), args.repeat)
        print(f"{label:16s} {1e3 * t_np:10.3f} {1e3 * t_jit:10.3f} {t_np / t_jit:8.2f}")


def bench_steps(args):
    print(f"\ntraining step, batch {args.batch}, d_model 32, seq_len 100")
    for disable in ("0", "1"):
        env = dict(os.environ, LANA_DISABLE_JIT=disable)
        out = subprocess.run([sys.executable, "-c", STEP_PROBE, str(args.batch), str(args.steps)],
                             env=env, capture_output=True, text=True, check=True)
        row = json.loads(out.stdout.strip().splitlines()[-1])
        print(f"  jit={str(row['jit']):5s} {row['seconds_per_step'] * 1e3:9.1f} ms/step")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--steps", type=int, default=10)
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--skip-steps", action="store_true", help="kernel table only")
    args = parser.parse_args()
    bench_kernels(args)
    if not args.skip_steps:
        bench_steps(args)


if __name__ == "__main__":
    main()
