"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Also times the two end-to-end callers (phantom SA-plane rasterisation and
mask Hausdorff) with the dispatch flag flipped either way.
"""
import argparse
import time

import numpy as np

from mvseg import kernels, metrics, phantom


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def row(name, t_numba, t_numpy):
    print(f"{name:<34} numba {t_numba * 1e3:9.2f} ms   numpy {t_numpy * 1e3:9.2f} ms   "
          f"speed-up {t_numpy / t_numba:6.1f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.numba is None:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(0)

    anatomy = phantom.sample_anatomy(0)
    shell = np.asarray(anatomy.shell(), dtype=np.float64)
    points = rng.uniform(-80, 80, size=(160 * 160 * 12, 3))
    kernels.label_points_numba(points[:10], shell)  # compile outside the timing
    assert np.array_equal(kernels.label_points_numba(points, shell),
                          kernels.label_points_numpy(points, shell))
    row("label_points (307k points)",
        best_of(lambda: kernels.label_points_numba(points, shell), args.repeat),
        best_of(lambda: kernels.label_points_numpy(points, shell), args.repeat))

    for n in (200, 2000):
        a = rng.uniform(0, 230, size=(n, 2))
        b = rng.uniform(0, 230, size=(n, 2))
        kernels.directed_hausdorff_numba(a[:2], b[:2])
        assert kernels.directed_hausdorff_numba(a, b) == kernels.directed_hausdorff_numpy(a, b)
        row(f"directed_hausdorff ({n}x{n})",
            best_of(lambda: kernels.directed_hausdorff_numba(a, b), args.repeat),
            best_of(lambda: kernels.directed_hausdorff_numpy(a, b), args.repeat))

    subject = phantom.generate_subject(anatomy, None, 0, "bench")
    mask = subject.sa_masks[len(subject.sa_masks) // 2]
    shifted = np.roll(mask, 3, axis=1)
    timings = {}
    for flag in (True, False):
        kernels.NUMBA_ENABLED = flag
        timings[flag] = (
            best_of(lambda: phantom.generate_subject(anatomy, None, 0, "bench"), args.repeat),
            best_of(lambda: metrics.hausdorff(mask, shifted), args.repeat),
        )
    kernels.NUMBA_ENABLED = kernels._env_enabled()
    row("generate_subject", timings[True][0], timings[False][0])
    row("hausdorff (128x128 masks)", timings[True][1], timings[False][1])


if __name__ == "__main__":
    main()
