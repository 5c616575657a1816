import os
import subprocess
import sys

import numpy as np
import pytest

from mvseg import kernels


def test_label_points_paths_agree(anatomy, rng):
    pts = rng.uniform(-70, 70, size=(20000, 3))
    shell = anatomy.shell()
    a = kernels.label_points_numba(pts, shell)
    b = kernels.label_points_numpy(pts, shell)
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0, 1, 2}
    assert (a == kernels.MYOCARDIUM).any() and (a == kernels.BLOOD).any()


def test_label_points_known_points(anatomy):
    rx, ry, rz = anatomy.endo_radii
    t_mid = anatomy.thickness_at(0.0)
    pts = np.array([
        [0.0, 0.0, 0.0],                 # cavity centre
        [rx + 0.5 * t_mid, 0.0, 0.0],    # mid-wall
        [rx + t_mid + 1.0, 0.0, 0.0],    # just outside the epicardium
        [0.0, 0.0, anatomy.base_z + 1],  # above the base plane
    ])
    assert kernels.label_points(pts, anatomy.shell()).tolist() == [2, 1, 0, 0]


def test_directed_hausdorff_paths_agree(rng):
    for _ in range(20):
        a = rng.uniform(0, 50, size=(rng.integers(1, 60), 2))
        b = rng.uniform(0, 50, size=(rng.integers(1, 60), 2))
        brute = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1)).min(1).max()
        assert kernels.directed_hausdorff_numba(a, b) == pytest.approx(brute, abs=1e-12)
        assert kernels.directed_hausdorff_numpy(a, b) == pytest.approx(brute, abs=1e-12)


def test_directed_hausdorff_empty():
    assert kernels.directed_hausdorff(np.zeros((0, 2)), np.ones((3, 2))) == 0.0
    assert kernels.directed_hausdorff(np.ones((3, 2)), np.zeros((0, 2))) == 0.0


def test_dispatch_follows_flag(monkeypatch, anatomy, rng):
    pts = rng.uniform(-60, 60, size=(500, 3))
    monkeypatch.setattr(kernels, "NUMBA_ENABLED", False)
    off = kernels.label_points(pts, anatomy.shell())
    monkeypatch.setattr(kernels, "NUMBA_ENABLED", True)
    on = kernels.label_points(pts, anatomy.shell())
    assert np.array_equal(on, off)


@pytest.mark.parametrize("value, expected", [("0", "False"), ("off", "False"), ("1", "True")])
def test_env_flag(value, expected):
    env = dict(os.environ, MVSEG_NUMBA=value)
    out = subprocess.run([sys.executable, "-c", "from mvseg import kernels; print(kernels.NUMBA_ENABLED)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
