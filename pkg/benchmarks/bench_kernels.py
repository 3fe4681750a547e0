"""Time the numba and numpy kernel paths on the MTS-XOR training shapes.

    python3 benchmarks/bench_kernels.py [--batch 512] [--T 100] [--neurons 10] [--repeat 5]

Reports the best of ``repeat`` wall-clock times per kernel and path (numba
compile time excluded by a warm-up call), then one full forward+backward
pass through a 2-hidden-layer network.
"""

import argparse
import time

import numpy as np

from tempo_snn import _kernels
from tempo_snn.autograd import backward_pass
from tempo_snn.core import HiddenLayer, NetworkSpec, SimGrid, forward_pass, init_params


def best_time(fn, repeat):
    fn()  # warm-up, triggers jit compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=512)
    ap.add_argument("--T", type=int, default=100)
    ap.add_argument("--neurons", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    B, T, N = args.batch, args.T, args.neurons

    rng = np.random.default_rng(0)
    current = rng.normal(0.8, 1.0, size=(B, T, N))
    alpha = np.exp(-0.01 / rng.uniform(0.05, 0.6, N))
    u, _ = _kernels.lif_forward(current, alpha, 1.0, 0.5, use_numba=False)
    grad_s = rng.normal(size=(B, T, N))

    spec = NetworkSpec(SimGrid(0.01, T), 20, (HiddenLayer(N), HiddenLayer(N)), 2)
    params = init_params(spec, [np.full(N, 0.3), np.full(N, 0.3)], rng, 5.0)
    x = (rng.random((B, T, 20)) < 0.05).astype(np.float64)

    def network(use):
        out, tape = forward_pass(spec, params, x, record=True, use_numba=use)
        backward_pass(tape, np.ones_like(out), train_tau=True, use_numba=use)

    cases = {
        "lif_forward": lambda use: _kernels.lif_forward(current, alpha, 1.0, 0.5,
                                                        use_numba=use),
        "lif_backward": lambda use: _kernels.lif_backward(grad_s, current, u, alpha, 1.0, 0.5,
                                                          True, use_numba=use),
        "leaky_forward": lambda use: _kernels.leaky_forward(current, alpha, use_numba=use),
        "network fwd+bwd": network,
    }
    paths = [False] + ([True] if _kernels.HAVE_NUMBA else [])
    print(f"batch={B} T={T} neurons={N} best of {args.repeat}")
    print(f"{'kernel':18s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        t = {use: best_time(lambda: fn(use), args.repeat) for use in paths}
        if True in t:
            print(f"{name:18s} {1e3 * t[False]:10.2f} {1e3 * t[True]:10.2f} "
                  f"{t[False] / t[True]:8.1f}x")
        else:
            print(f"{name:18s} {1e3 * t[False]:10.2f} {'n/a':>10s}")


if __name__ == "__main__":
    main()
