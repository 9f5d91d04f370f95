"""Time the numba kernels against their numpy counterparts.

    python benchmarks/bench_kernels.py [--repeat 200]

Shapes match a training batch: 16 graphs padded to 8 vertices, width 32.
Each kernel is called once before timing so numba compilation is excluded.
"""

import argparse
import timeit

import numpy as np

from frnas import kernels as K


def _inputs(rng, m=16, n=8, d=32):
    adj = np.triu(rng.random((m, n, n)) < 0.4, k=1).astype(np.float64)
    mask = np.ones((m, n))
    mask[::3, -2:] = 0.0
    adj *= mask[:, :, None] * mask[:, None, :]
    h = rng.normal(size=(m, n, d)) * mask[:, :, None]
    w1, w2 = rng.normal(size=(d, d)) / 6, rng.normal(size=(d, d)) / 6
    b1, b2 = np.zeros(d), np.zeros(d)
    return h, adj, mask, w1, b1, w2, b2, np.ones(d), np.zeros(d)


def cases(rng):
    h, adj, mask, w1, b1, w2, b2, gamma, beta = _inputs(rng)
    fwd_args = (h, adj, mask, w1, b1, w2, b2, gamma, beta, 0.0, 1e-5)
    y, agg, z1, z2, xhat, _, _, inv_std = K.gin_layer_forward_np(*fwd_args)
    bwd_args = (rng.normal(size=y.shape), h, adj, mask, w1, w2, gamma, 0.0, agg, z1, z2, xhat,
                inv_std)

    n_params = 12_482
    values, grads = rng.normal(size=n_params), rng.normal(size=n_params)
    m, v = np.zeros(n_params), np.zeros(n_params)

    def adam(fn):
        return lambda: fn(values, grads, m, v, 1e-3, 0.9, 0.999, 1e-8, 1e-4, 10)

    x, t = rng.normal(size=1000), rng.integers(0, 50, 1000).astype(np.float64)
    emb = rng.normal(size=(64, 32))
    return {
        "gin_layer_forward": (lambda: K.gin_layer_forward_nb(*fwd_args),
                              lambda: K.gin_layer_forward_np(*fwd_args)),
        "gin_layer_backward": (lambda: K.gin_layer_backward_nb(*bwd_args),
                               lambda: K.gin_layer_backward_np(*bwd_args)),
        "adam_update": (adam(K.adam_update_nb), adam(K.adam_update_np)),
        "kendall_counts (n=1000)": (lambda: K.kendall_counts_nb(x, t),
                                    lambda: K.kendall_counts_np(x, t)),
        "pairwise_sqdist (64x32)": (lambda: K.pairwise_sqdist_nb(emb),
                                    lambda: K.pairwise_sqdist_np(emb)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    if K.gin_layer_forward_nb is None:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'kernel':<26s}{'numba us':>12s}{'numpy us':>12s}{'speedup':>10s}")
    for name, (nb, np_) in cases(np.random.default_rng(0)).items():
        nb(), np_()  # warm up and compile
        t_nb = min(timeit.repeat(nb, number=args.repeat, repeat=3)) / args.repeat * 1e6
        t_np = min(timeit.repeat(np_, number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:<26s}{t_nb:>12.1f}{t_np:>12.1f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
