"""Timing comparison of the GRU kernel flavours (numba vs pure numpy).

Runs the fused sequence forward+backward at a few sizes with both
flavours in one process, then times a full training step through the
tape for context. The numba path is what MTSN_NUMBA selects by default;
the numpy path is the fallback. Run with:

    python3 benchmarks/bench_gru.py [--repeats 50]
"""

import argparse
import time

import numpy as np

from mtsn import kernels
from mtsn.data import generate_corpus, preset
from mtsn.experiments import TrainConfig, train


def _inputs(T, H, in_dim, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((T, 3 * H))
    mats = [np.ascontiguousarray(rng.standard_normal((H, H)) / np.sqrt(H))
            for _ in range(3)]
    cn = np.zeros(H)
    h0 = np.zeros(H)
    gout = rng.standard_normal((T, H))
    return A, mats, cn, h0, gout


def time_flavour(fwd, bwd, T, H, repeats):
    A, (Ur, Uz, Un), cn, h0, gout = _inputs(T, H, H)
    UrT, UzT, UnT = (np.ascontiguousarray(m.T) for m in (Ur, Uz, Un))
    fwd(A, Ur, Uz, Un, cn, h0)  # warm cache / JIT before timing
    start = time.perf_counter()
    for _ in range(repeats):
        hs, R, Z, N, U = fwd(A, Ur, Uz, Un, cn, h0)
        bwd(gout, hs, R, Z, N, U, h0, UrT, UzT, UnT)
    return (time.perf_counter() - start) / repeats


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    numpy_fwd, numpy_bwd = kernels.numpy_cores()
    active = kernels.backend()
    print(f"active backend: {active}")
    if active != "numba":
        print("numba flavour unavailable in this process "
              "(set MTSN_NUMBA=1 to require it); timing numpy only")

    print(f"\nfused kernel, forward+backward, mean of {args.repeats} calls:")
    header = f"{'T':>4} {'H':>5} {'numpy':>12}"
    if active == "numba":
        header += f" {'numba':>12} {'speedup':>8}"
    print(header)
    for T, H in ((8, 32), (8, 128), (32, 128), (64, 256)):
        t_np = time_flavour(numpy_fwd, numpy_bwd, T, H, args.repeats)
        line = f"{T:>4} {H:>5} {t_np * 1e6:>10.1f}us"
        if active == "numba":
            t_nb = time_flavour(kernels.forward_core, kernels.backward_core,
                                T, H, args.repeats)
            line += f" {t_nb * 1e6:>10.1f}us {t_np / t_nb:>7.1f}x"
        print(line)

    print("\nend-to-end: one training epoch on the default corpus "
          "(current backend only):")
    train_ds, _ = generate_corpus(preset("default"))
    cfg = TrainConfig(epochs=1, hidden_size=128)
    for kind in ("mtsn", "baseline2"):
        start = time.perf_counter()
        train(kind, train_ds, cfg)
        print(f"  {kind:10s} {time.perf_counter() - start:6.2f}s "
              f"({len(train_ds)} examples)")


if __name__ == "__main__":
    main()
