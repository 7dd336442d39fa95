"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes mirror one training batch (384 rows, 5 negatives, d=128, history 20)
and one evaluation context against a 10k-item collection. Each kernel is
warmed up once so compile time is excluded.
"""
import argparse
import timeit

import numpy as np

from tem_search import _accel


def cases(rng):
    table = np.zeros((10_000, 128), dtype=np.float32)
    ids = rng.integers(0, 10_000, size=384 * 6)
    rows = rng.normal(size=(ids.size, 128)).astype(np.float32)
    logits = rng.normal(size=(384 * 2, 21)).astype(np.float32)
    mask = rng.random(logits.shape) < 0.8
    mask[:, 0] = True
    scores = rng.normal(size=10_000)
    relevant = rng.integers(0, 10_000, size=3)
    return {
        "scatter_add_rows": (
            lambda: _accel._scatter_add_rows_np(table.copy(), ids, rows),
            lambda: _accel._scatter_add_rows_nb(table.copy(), ids, rows),
        ),
        "masked_softmax": (
            lambda: _accel._masked_softmax_np(logits, mask),
            lambda: _accel._masked_softmax_nb(logits, mask),
        ),
        "relevant_ranks": (
            lambda: _accel._relevant_ranks_np(scores, relevant),
            lambda: _accel._relevant_ranks_nb(scores, relevant),
        ),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is unavailable or disabled (TEM_SEARCH_DISABLE_NUMBA); nothing to compare")

    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  agree")
    for name, (slow, fast) in cases(np.random.default_rng(0)).items():
        a, b = slow(), fast()  # warm-up, also compiles
        agree = np.allclose(a, b, rtol=1e-5, atol=1e-6)
        t_np = min(timeit.repeat(slow, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x  {'yes' if agree else 'NO'}")


if __name__ == "__main__":
    main()
