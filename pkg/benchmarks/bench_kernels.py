"""Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each row reports the best-of-N wall time per call for both backends on the
same inputs, plus the speedup. Compilation happens in a warm-up call that is
not timed.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from clenergy._kernels import load_numba, numpy_backend


def cases(rng: np.random.Generator) -> dict[str, tuple[str, tuple]]:
    x = rng.standard_normal((64, 16))
    w1, b1 = rng.standard_normal((16, 32)) / 4, np.zeros(32)
    w2, b2 = rng.standard_normal((32, 8)) / 6, np.zeros(8)
    z = rng.standard_normal((64, 8))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    labels = rng.integers(0, 10, 32).astype(np.int64)
    groups = np.concatenate([labels, labels])
    segments = np.zeros(64, dtype=np.int64)
    semi_labels = np.where(rng.random(32) < 0.5, labels, -1).astype(np.int64)
    train = rng.standard_normal((1000, 8))
    train /= np.linalg.norm(train, axis=1, keepdims=True)
    train_y = rng.integers(0, 10, 1000).astype(np.int64)
    test = train[:500].copy()
    head_w, head_b = rng.standard_normal((8, 10)), np.zeros(10)
    return {
        "contrastive loss + grad (64x8)": ("contrastive_loss_grad", (z, groups, segments, 0.1)),
        "contrastive train step (batch 32)": ("contrastive_step", (x, w1, b1, w2, b2, groups, segments, 0.1)),
        "semi-supervised train step (batch 32)": ("semi_step", (x, w1, b1, w2, b2, semi_labels, 0.1, 0.9)),
        "cross-entropy train step (batch 32)": (
            "ce_step",
            (x[:32], labels, w1, b1, w2, b2, head_w, head_b),
        ),
        "kNN predict (500 x 1000, k=15)": ("knn_predict", (train, train_y, test, 15, 0.1, 10)),
    }


def best_time(fn, args: tuple, repeat: int) -> float:
    fn(*args)
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    nb = load_numba()
    if nb is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rows = []
    for name, (kernel, kargs) in cases(np.random.default_rng(0)).items():
        t_np = best_time(getattr(numpy_backend, kernel), kargs, args.repeat)
        t_nb = best_time(getattr(nb, kernel), kargs, args.repeat)
        rows.append((name, t_np, t_nb))
    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy us':>10}  {'numba us':>10}  {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}}  {t_np * 1e6:>10.1f}  {t_nb * 1e6:>10.1f}  {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
