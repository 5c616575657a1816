"""Plane algebra: view planes, plane intersections, ROI centering and cropping,
cross-view label consistency, and apex/mid/base slice stratification.

Pixel convention: pixel ``(r, c)`` of a plane of size ``(H, W)`` sits at
``origin + (r - H//2) * sr * row_axis + (c - W//2) * sc * col_axis`` so the
origin is the centre pixel ``(H//2, W//2)``.
"""
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import DegenerateGeometryError, InputError, StratificationError

REGIONS = ("apex", "mid", "base")
EMPTY = "empty"

_PARALLEL_TOL = 1e-9


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise InputError(f"cannot normalise vector {v!r}")
    return v / n


@dataclass(frozen=True, eq=False)
class ViewPlane:
    origin: np.ndarray
    row_axis: np.ndarray
    col_axis: np.ndarray
    pixel_spacing: tuple = (1.8, 1.8)
    size: tuple = (128, 128)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "row_axis", _unit(self.row_axis))
        object.__setattr__(self, "col_axis", _unit(self.col_axis))
        object.__setattr__(self, "pixel_spacing", tuple(float(s) for s in self.pixel_spacing))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if abs(self.row_axis @ self.col_axis) > 1e-9:
            raise InputError("in-plane axes must be orthogonal")

    @property
    def normal(self):
        return np.cross(self.row_axis, self.col_axis)

    @property
    def center_index(self):
        return self.size[0] // 2, self.size[1] // 2

    def pixel_centers(self):
        """World coordinates (mm) of every pixel centre, shape (H, W, 3)."""
        h, w = self.size
        r = (np.arange(h) - h // 2) * self.pixel_spacing[0]
        c = (np.arange(w) - w // 2) * self.pixel_spacing[1]
        return (self.origin
                + r[:, None, None] * self.row_axis
                + c[None, :, None] * self.col_axis)

    def pixel_to_world(self, row, col):
        r0, c0 = self.center_index
        return (self.origin
                + (row - r0) * self.pixel_spacing[0] * self.row_axis
                + (col - c0) * self.pixel_spacing[1] * self.col_axis)

    def world_to_pixel(self, point):
        """Fractional (row, col) of the orthogonal projection of ``point``."""
        d = np.asarray(point, dtype=np.float64) - self.origin
        r0, c0 = self.center_index
        return (r0 + d @ self.row_axis / self.pixel_spacing[0],
                c0 + d @ self.col_axis / self.pixel_spacing[1])

    def to_dict(self):
        return {
            "origin": [float(v) for v in self.origin],
            "row_axis": [float(v) for v in self.row_axis],
            "col_axis": [float(v) for v in self.col_axis],
            "pixel_spacing": list(self.pixel_spacing),
            "size": list(self.size),
        }

    @classmethod
    def from_dict(cls, d):
        # bypass normalisation so round-trips stay bit-exact
        plane = cls.__new__(cls)
        object.__setattr__(plane, "origin", np.asarray(d["origin"], dtype=np.float64))
        object.__setattr__(plane, "row_axis", np.asarray(d["row_axis"], dtype=np.float64))
        object.__setattr__(plane, "col_axis", np.asarray(d["col_axis"], dtype=np.float64))
        object.__setattr__(plane, "pixel_spacing", tuple(float(s) for s in d["pixel_spacing"]))
        object.__setattr__(plane, "size", tuple(int(s) for s in d["size"]))
        return plane

    def __eq__(self, other):
        if not isinstance(other, ViewPlane):
            return NotImplemented
        return (np.array_equal(self.origin, other.origin)
                and np.array_equal(self.row_axis, other.row_axis)
                and np.array_equal(self.col_axis, other.col_axis)
                and self.pixel_spacing == other.pixel_spacing
                and self.size == other.size)

    def transformed(self, rotation, translation):
        """Apply the rigid map ``x -> R x + t`` to the plane."""
        rotation = np.asarray(rotation, dtype=np.float64)
        return ViewPlane(rotation @ self.origin + translation,
                         rotation @ self.row_axis, rotation @ self.col_axis,
                         self.pixel_spacing, self.size)


@dataclass(frozen=True)
class IntersectionLine:
    point: np.ndarray
    direction: np.ndarray


def plane_intersection(a: ViewPlane, b: ViewPlane) -> IntersectionLine:
    """Line shared by two planes; the returned point is the one closest to the world origin."""
    na, nb = a.normal, b.normal
    d = np.cross(na, nb)
    norm = np.linalg.norm(d)
    if norm < _PARALLEL_TOL:
        raise DegenerateGeometryError("planes are parallel; no unique intersection line")
    d = d / norm
    lhs = np.stack([na, nb, d])
    rhs = np.array([na @ a.origin, nb @ b.origin, 0.0])
    point = np.linalg.solve(lhs, rhs)
    return IntersectionLine(point, d)


def la_intersection_center(la_planes, sa_plane: ViewPlane):
    """Point on ``sa_plane`` minimising the summed squared distance to the
    (LA ∩ SA) lines. Equals the common point when the lines are concurrent."""
    if len(la_planes) < 2:
        raise InputError("need at least two long-axis planes")
    u, v = sa_plane.row_axis, sa_plane.col_axis
    normal_eq = np.zeros((2, 2))
    rhs = np.zeros(2)
    for k, la in enumerate(la_planes):
        try:
            line = plane_intersection(la, sa_plane)
        except DegenerateGeometryError as exc:
            raise DegenerateGeometryError(f"LA plane {k} is parallel to the SA plane") from exc
        rel = line.point - sa_plane.origin
        q = np.array([rel @ u, rel @ v])
        d = np.array([line.direction @ u, line.direction @ v])
        d /= np.linalg.norm(d)
        proj = np.eye(2) - np.outer(d, d)
        normal_eq += proj
        rhs += proj @ q
    if abs(np.linalg.det(normal_eq)) < 1e-12:
        raise DegenerateGeometryError("LA/SA intersection lines are all parallel")
    p = np.linalg.solve(normal_eq, rhs)
    return sa_plane.origin + p[0] * u + p[1] * v


class Crop(NamedTuple):
    image: np.ndarray
    mask: Optional[np.ndarray]
    plane: Optional[ViewPlane]


def crop_to_roi(image, center, mask=None, out_size=128, plane=None) -> Crop:
    """Crop ``image`` (and ``mask``) so that output pixel (out//2, out//2) is the
    source pixel nearest to ``center``; out-of-bounds pixels are zero.

    ``center`` is a (row, col) index, or a 3D mm point when ``plane`` is given.
    """
    image = np.asarray(image)
    if plane is not None:
        row, col = plane.world_to_pixel(center)
    else:
        row, col = center
    h, w = image.shape[-2:]
    r0 = int(np.floor(row + 0.5))
    c0 = int(np.floor(col + 0.5))
    if not (0 <= r0 < h and 0 <= c0 < w):
        raise InputError(f"ROI centre ({row:.2f}, {col:.2f}) lies outside the {h}x{w} grid")
    half = out_size // 2
    top, left = r0 - half, c0 - half

    def cut(arr):
        out = np.zeros(arr.shape[:-2] + (out_size, out_size), dtype=arr.dtype)
        sr0, sr1 = max(top, 0), min(top + out_size, h)
        sc0, sc1 = max(left, 0), min(left + out_size, w)
        out[..., sr0 - top:sr1 - top, sc0 - left:sc1 - left] = arr[..., sr0:sr1, sc0:sc1]
        return out

    new_plane = None
    if plane is not None:
        new_plane = ViewPlane(plane.pixel_to_world(r0, c0), plane.row_axis, plane.col_axis,
                              plane.pixel_spacing, (out_size, out_size))
    return Crop(cut(image), None if mask is None else cut(np.asarray(mask)), new_plane)


class Agreement(NamedTuple):
    fraction: float
    n_samples: int
    empty_overlap: bool


def _fov_interval(plane, point, direction):
    """Range of s for which point + s*direction lies inside the plane's pixel grid."""
    lo, hi = -np.inf, np.inf
    r0, c0 = plane.center_index
    for axis, sp, centre, n in ((plane.row_axis, plane.pixel_spacing[0], r0, plane.size[0]),
                                (plane.col_axis, plane.pixel_spacing[1], c0, plane.size[1])):
        base = centre + (point - plane.origin) @ axis / sp
        rate = direction @ axis / sp
        a, b = -0.5 - base, n - 0.5 - base
        if abs(rate) < 1e-12:
            if a > 0 or b < 0:
                return 1.0, 0.0
            continue
        s0, s1 = sorted((a / rate, b / rate))
        lo, hi = max(lo, s0), min(hi, s1)
    return lo, hi


def _nearest_labels(mask, plane, points):
    rows, cols = plane.world_to_pixel(points)
    rows = np.clip(np.floor(np.asarray(rows) + 0.5).astype(int), 0, plane.size[0] - 1)
    cols = np.clip(np.floor(np.asarray(cols) + 0.5).astype(int), 0, plane.size[1] - 1)
    return np.asarray(mask)[rows, cols]


def consistency_check(mask_a, plane_a: ViewPlane, mask_b, plane_b: ViewPlane,
                      n_samples=64) -> Agreement:
    """Fraction of points on the planes' common line where nearest-pixel labels agree."""
    try:
        line = plane_intersection(plane_a, plane_b)
    except DegenerateGeometryError:
        offset = abs((plane_b.origin - plane_a.origin) @ plane_a.normal)
        if offset > 1e-6:
            raise
        # coincident planes: any in-plane line is shared; use plane_a's row line
        line = IntersectionLine(plane_a.origin, plane_a.row_axis)
    lo_a, hi_a = _fov_interval(plane_a, line.point, line.direction)
    lo_b, hi_b = _fov_interval(plane_b, line.point, line.direction)
    lo, hi = max(lo_a, lo_b), min(hi_a, hi_b)
    if not hi > lo:
        warnings.warn("planes' fields of view do not overlap along their intersection",
                      RuntimeWarning, stacklevel=2)
        return Agreement(1.0, 0, True)
    s = lo + (np.arange(n_samples) + 0.5) / n_samples * (hi - lo)
    points = line.point + s[:, None] * line.direction
    la = _nearest_labels(mask_a, plane_a, points)
    lb = _nearest_labels(mask_b, plane_b, points)
    return Agreement(float(np.mean(la == lb)), n_samples, False)


def stratify_slices(mask_stack):
    """Label each slice of an apex->base stack as apex/mid/base/empty.

    Non-empty slices are split into index thirds; the remainder goes to mid.
    """
    mask_stack = np.asarray(mask_stack)
    nonempty = [k for k in range(mask_stack.shape[0]) if mask_stack[k].any()]
    if not nonempty:
        raise StratificationError("stack has no myocardium-bearing slices")
    third = len(nonempty) // 3
    labels = [EMPTY] * mask_stack.shape[0]
    for pos, k in enumerate(nonempty):
        if pos < third:
            labels[k] = "apex"
        elif pos >= len(nonempty) - third:
            labels[k] = "base"
        else:
            labels[k] = "mid"
    return labels
