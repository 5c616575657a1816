"""Hot numeric kernels with numba and pure-numpy implementations.

Each kernel exists twice: a loop form compiled with ``numba.njit`` and a
vectorised numpy form. The public names dispatch at call time on
``NUMBA_ENABLED``, which is read from the ``MVSEG_NUMBA`` environment variable
(``0``/``false``/``off`` disables numba). Both paths return identical results;
``benchmarks/bench_kernels.py`` times them against each other.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _env_enabled():
    flag = os.environ.get("MVSEG_NUMBA", "1").strip().lower()
    return numba is not None and flag not in ("0", "false", "off", "no")


NUMBA_ENABLED = _env_enabled()

BACKGROUND, MYOCARDIUM, BLOOD = 0, 1, 2


def _njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# shell labelling
# ---------------------------------------------------------------------------
# shell = (rx, ry, rz, epi_long, base_z, t_apex, t_base, length); points are in
# the anatomy frame with +z running apex -> base and the endo centre at 0.


def _label_points_loop(points, shell):
    rx, ry, rz, epi_long, base_z, t_apex, t_base, length = shell
    n = points.shape[0]
    out = np.zeros(n, dtype=np.uint8)
    for k in range(n):
        x = points[k, 0]
        y = points[k, 1]
        z = points[k, 2]
        if z > base_z or z < -epi_long:
            continue
        t = t_apex + (t_base - t_apex) * (z + epi_long) / length
        ex = rx + t
        ey = ry + t
        if (x / ex) ** 2 + (y / ey) ** 2 + (z / epi_long) ** 2 > 1.0:
            continue
        if (x / rx) ** 2 + (y / ry) ** 2 + (z / rz) ** 2 < 1.0:
            out[k] = BLOOD
        else:
            out[k] = MYOCARDIUM
    return out


label_points_numba = _njit(_label_points_loop)


def label_points_numpy(points, shell):
    rx, ry, rz, epi_long, base_z, t_apex, t_base, length = shell
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    t = t_apex + (t_base - t_apex) * (z + epi_long) / length
    in_epi = (x / (rx + t)) ** 2 + (y / (ry + t)) ** 2 + (z / epi_long) ** 2 <= 1.0
    in_epi &= (z <= base_z) & (z >= -epi_long)
    in_endo = (x / rx) ** 2 + (y / ry) ** 2 + (z / rz) ** 2 < 1.0
    out = np.zeros(points.shape[0], dtype=np.uint8)
    out[in_epi] = MYOCARDIUM
    out[in_epi & in_endo] = BLOOD
    return out


def label_points(points, shell):
    """Tissue label (0 background, 1 myocardium, 2 blood pool) per point."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    shell = np.asarray(shell, dtype=np.float64)
    if NUMBA_ENABLED:
        return label_points_numba(points, shell)
    return label_points_numpy(points, shell)


# ---------------------------------------------------------------------------
# directed Hausdorff distance between point sets (already in mm)
# ---------------------------------------------------------------------------


def _directed_hausdorff_loop(a, b):
    # early-break max-min; squared distances until the end
    cmax = 0.0
    for i in range(a.shape[0]):
        cmin = np.inf
        for j in range(b.shape[0]):
            dr = a[i, 0] - b[j, 0]
            dc = a[i, 1] - b[j, 1]
            d = dr * dr + dc * dc
            if d < cmin:
                cmin = d
                if cmin <= cmax:
                    break
        if cmin > cmax and cmin < np.inf:
            cmax = cmin
    return np.sqrt(cmax)


directed_hausdorff_numba = _njit(_directed_hausdorff_loop)


def directed_hausdorff_numpy(a, b, chunk=2048):
    if a.shape[0] == 0 or b.shape[0] == 0:
        return 0.0
    best = 0.0
    for start in range(0, a.shape[0], chunk):
        block = a[start:start + chunk]
        d = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        best = max(best, float(d.min(axis=1).max()))
    return float(np.sqrt(best))


def directed_hausdorff(a, b):
    """max over a of the distance to the nearest point of b; 0 if either is empty."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 2)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return 0.0
    if NUMBA_ENABLED:
        return float(directed_hausdorff_numba(a, b))
    return directed_hausdorff_numpy(a, b)
