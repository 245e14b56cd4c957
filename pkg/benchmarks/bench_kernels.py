"""Compiled vs numpy kernel timings at the shapes one training step uses.

    python3 benchmarks/bench_kernels.py [--repeat N]

Also times one full training epoch of task 1 on the default synthetic
benchmark under each backend.
"""

import argparse
import timeit

import numpy as np

from ddpcil import kernels
from ddpcil.datagen import SyntheticSpec, generate
from ddpcil.protocol import TrainConfig, build_schedule, init_run, train_task


def cases(rng):
    # first prompted layer of a 16-image batch under 8 visual prompts
    B, U, L, Lp, d, H = 16, 8, 17, 16, 64, 4
    q = rng.normal(size=(B, L, d))
    kv = rng.normal(size=(B, L, 2 * d))
    prm = rng.normal(size=(U, Lp, d))
    scale = 1.0 / np.sqrt(d // H)
    x = rng.normal(size=(B * U * L, d))
    g, b = np.ones(d), np.zeros(d)

    def attn(K):
        return lambda: K.prompted_attention_fwd(q, kv, prm, B * U, H, scale)

    def attn_bwd(K):
        _, P = K.prompted_attention_fwd(q, kv, prm, B * U, H, scale)
        dctx = rng.normal(size=(B * U, L, d))
        return lambda: K.prompted_attention_bwd(q, kv, prm, P, dctx, H, scale, True)

    return {
        "attention fwd": attn,
        "attention bwd": attn_bwd,
        "layer_norm fwd": lambda K: (lambda: K.layer_norm_fwd(x, g, b, 1e-5)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = ["python"] + (["compiled"] if kernels._compiled is not None else [])
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, make in cases(rng).items():
        ts = []
        for b in backends:
            fn = make(kernels.get_backend(b))
            ts.append(min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3)
        line = f"{name:<16}" + "".join(f"{t:>10.2f}ms" for t in ts)
        if len(ts) == 2:
            line += f"{ts[0] / ts[1]:>11.2f}x"
        print(line)

    train, _ = generate(SyntheticSpec())
    schedule = build_schedule(20, 4, 2)
    ts = []
    for b in backends:
        with kernels.backend(b):
            state = init_run(TrainConfig(epochs=1), schedule, train.grid)
            ts.append(timeit.timeit(lambda: train_task(state, 1, train), number=1))
    line = f"{'task-1 epoch':<16}" + "".join(f"{t:>11.2f}s" for t in ts)
    if len(ts) == 2:
        line += f"{ts[0] / ts[1]:>11.2f}x"
    print(line)


if __name__ == "__main__":
    main()
