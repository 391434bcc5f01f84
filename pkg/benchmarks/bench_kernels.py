"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is warmed up once (numba compiles on first call) and the outputs of
both paths are checked for equality before timing.
"""
import argparse
import time

import numpy as np

from texmorph import _accel, kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    for n in (64, 256, 512):
        cost = rng.normal(size=(n, n))
        yield f"hungarian n={n}", lambda use, c=cost: kernels.min_cost_assignment(c, use_numba=use)
    for voxels, size in ((1000, 64), (4000, 64), (4000, 256)):
        px, py = rng.integers(0, size, voxels), rng.integers(0, size, voxels)
        depth = rng.normal(size=voxels)
        colors = rng.uniform(size=(voxels, 3)).astype(np.float32)
        k = max(1, size // 28)
        yield (f"splat voxels={voxels} image={size}",
               lambda use, a=(px, py, depth, colors, k, size, size): kernels.splat(*a, use_numba=use))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':<32}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, run in cases(np.random.default_rng(args.seed)):
        fast, slow = run(True), run(False)
        if not np.array_equal(fast, slow):
            raise SystemExit(f"{name}: backends disagree")
        t_nb = best_of(lambda: run(True), args.repeat)
        t_np = best_of(lambda: run(False), args.repeat)
        print(f"{name:<32}{t_nb * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
