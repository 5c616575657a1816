"""Synthetic left-ventricle phantoms rendered into mutually consistent
short-axis stacks and three long-axis views.

The myocardium is the shell between two coaxial ellipsoids, truncated by a
base plane. In the anatomy frame +z runs apex -> base and the endocardial
ellipsoid is centred at the origin. The epicardial surface has long semi-axis
``epi_long`` and radial semi-axes ``endo + t(z)`` where the wall thickness
``t(z)`` varies linearly from apex to base.
"""
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from . import kernels
from .errors import ConfigError, GenerationError, InputError
from .geometry import ViewPlane, consistency_check, crop_to_roi, la_intersection_center

SPACING = (1.8, 1.8, 10.0)
SOURCE_VIEWS = ("LA1", "LA2", "LA3", "MidV")
TARGET_VIEWS = ("LA1", "LA2", "LA3", "MidV", "apical", "basal")
MIN_SA_SLICES = 6


@dataclass(frozen=True)
class Intensity:
    myocardium: float = 0.35
    blood: float = 0.8
    background: float = 0.15
    noise: float = 0.05

    def levels(self):
        # indexed by tissue label
        return np.array([self.background, self.myocardium, self.blood], dtype=np.float64)


@dataclass(frozen=True)
class AnatomyParams:
    endo_radii: tuple          # (rx, ry, rz) mm; rz is the long-axis semi-axis
    wall_thickness: tuple      # (apex, base) mm
    lv_length: float           # epicardial apex to base plane, mm
    base_truncation: float     # fraction of the epicardial long axis cut off at the base
    rotation: tuple            # xyz Euler angles, radians
    translation: tuple         # mm
    intensity: Intensity = field(default_factory=Intensity)

    @property
    def epi_long(self):
        return self.lv_length / (2.0 - 2.0 * self.base_truncation)

    @property
    def base_z(self):
        return self.epi_long * (1.0 - 2.0 * self.base_truncation)

    @property
    def apex_z(self):
        return -self.epi_long

    @property
    def rotation_matrix(self):
        return Rotation.from_euler("xyz", self.rotation).as_matrix()

    @property
    def long_axis(self):
        """Unit apex->base direction in world coordinates."""
        return self.rotation_matrix[:, 2]

    def shell(self):
        rx, ry, rz = self.endo_radii
        ta, tb = self.wall_thickness
        return np.array([rx, ry, rz, self.epi_long, self.base_z, ta, tb, self.lv_length])

    def thickness_at(self, z):
        ta, tb = self.wall_thickness
        return ta + (tb - ta) * (z + self.epi_long) / self.lv_length

    def to_world(self, local):
        return np.asarray(local) @ self.rotation_matrix.T + np.asarray(self.translation)

    def to_local(self, world):
        return (np.asarray(world) - np.asarray(self.translation)) @ self.rotation_matrix

    def annulus_area(self, z):
        """Exact myocardium cross-section area (mm^2) of the plane perpendicular
        to the long axis at local height ``z``."""
        rx, ry, rz = self.endo_radii
        if z < -self.epi_long or z > self.base_z:
            return 0.0
        t = self.thickness_at(z)
        epi = math.pi * (rx + t) * (ry + t) * (1.0 - (z / self.epi_long) ** 2)
        endo = math.pi * rx * ry * (1.0 - (z / rz) ** 2) if abs(z) < rz else 0.0
        return epi - endo

    def validate(self):
        values = [*self.endo_radii, *self.wall_thickness, self.lv_length, self.base_truncation,
                  *self.rotation, *self.translation, *dataclasses.astuple(self.intensity)]
        if not all(math.isfinite(v) for v in values):
            raise InputError("anatomy contains NaN or infinite values")
        rx, ry, rz = self.endo_radii
        if min(rx, ry, rz) <= 0:
            raise ConfigError("invariant violated: endo_radii > 0")
        if min(self.wall_thickness) <= 1.0:
            raise ConfigError("invariant violated: wall_thickness > 1 mm everywhere")
        if not 0.05 <= self.base_truncation <= 0.2:
            raise ConfigError("invariant violated: base_truncation in [0.05, 0.2]")
        if not math.isclose(rz + self.wall_thickness[0], self.epi_long, rel_tol=1e-9):
            raise ConfigError("invariant violated: endo long semi-axis inconsistent with lv_length")
        if not self.base_z < rz:
            raise ConfigError("invariant violated: outer shell must leave the cavity open at the base")
        if not max(rx, ry) < rz:
            raise ConfigError("invariant violated: cavity must be prolate (radial semi-axes < long semi-axis)")
        if self.lv_length < (MIN_SA_SLICES + 1) * SPACING[2]:
            raise ConfigError(f"invariant violated: base_truncation keeps >= {MIN_SA_SLICES} SA slices "
                              f"(lv_length {self.lv_length:.1f} mm too short)")
        inten = self.intensity
        if not all(0.0 <= v <= 1.0 for v in (inten.myocardium, inten.blood, inten.background)):
            raise ConfigError("invariant violated: intensity levels in [0, 1]")
        if inten.noise < 0:
            raise ConfigError("invariant violated: noise sigma >= 0")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["intensity"] = Intensity(**d["intensity"])
        for key in ("endo_radii", "wall_thickness", "rotation", "translation"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class AnatomyRanges:
    endo_rx: tuple = (20.0, 27.0)
    endo_ry: tuple = (20.0, 27.0)
    wall_apex: tuple = (5.0, 7.0)
    wall_base: tuple = (8.0, 11.0)
    lv_length: tuple = (80.0, 100.0)
    base_truncation: tuple = (0.1, 0.2)
    rotation: tuple = (-0.3, 0.3)
    translation: tuple = (-15.0, 15.0)
    myocardium: tuple = (0.30, 0.40)
    blood: tuple = (0.75, 0.90)
    background: tuple = (0.10, 0.20)
    noise: tuple = (0.03, 0.08)

    def check(self):
        """Raise ConfigError when some draw from these ranges could break an invariant."""
        for f in dataclasses.fields(self):
            lo, hi = getattr(self, f.name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"range {f.name} = ({lo}, {hi}) is not a valid interval")
        if min(self.endo_rx[0], self.endo_ry[0]) <= 0:
            raise ConfigError("infeasible ranges: endo_radii > 0 requires positive lower bounds")
        if self.wall_apex[0] <= 1.0 or self.wall_base[0] <= 1.0:
            raise ConfigError("infeasible ranges: wall_thickness > 1 mm everywhere "
                              "(lower bounds must exceed 1 mm)")
        if self.base_truncation[0] < 0.05 or self.base_truncation[1] > 0.2:
            raise ConfigError("infeasible ranges: base_truncation must lie within [0.05, 0.2]")
        if self.lv_length[0] < (MIN_SA_SLICES + 1) * SPACING[2]:
            raise ConfigError(f"infeasible ranges: base_truncation keeps >= {MIN_SA_SLICES} SA slices "
                              f"needs lv_length >= {(MIN_SA_SLICES + 1) * SPACING[2]:.0f} mm")
        f_lo = self.base_truncation[0]
        epi_min = self.lv_length[0] / (2.0 - 2.0 * f_lo)
        if self.wall_apex[1] >= 2.0 * f_lo * epi_min:
            raise ConfigError("infeasible ranges: outer shell must leave the cavity open at the base "
                              "(apical wall too thick for the base truncation)")
        if max(self.endo_rx[1], self.endo_ry[1]) >= epi_min - self.wall_apex[1]:
            raise ConfigError("infeasible ranges: cavity must be prolate (radial semi-axes < long semi-axis)")
        for name in ("myocardium", "blood", "background"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi > 1:
                raise ConfigError(f"infeasible ranges: {name} intensity must lie in [0, 1]")
        if self.noise[0] < 0:
            raise ConfigError("infeasible ranges: noise sigma must be >= 0")
        return self


def sample_anatomy(seed: int, ranges: Optional[AnatomyRanges] = None) -> AnatomyParams:
    ranges = (ranges or AnatomyRanges()).check()
    rng = np.random.default_rng([int(seed), 0])

    def u(bounds, size=None):
        return rng.uniform(bounds[0], bounds[1], size)

    rx, ry = float(u(ranges.endo_rx)), float(u(ranges.endo_ry))
    ta, tb = float(u(ranges.wall_apex)), float(u(ranges.wall_base))
    length = float(u(ranges.lv_length))
    trunc = float(u(ranges.base_truncation))
    rz = length / (2.0 - 2.0 * trunc) - ta
    anatomy = AnatomyParams(
        endo_radii=(rx, ry, rz),
        wall_thickness=(ta, tb),
        lv_length=length,
        base_truncation=trunc,
        rotation=tuple(float(v) for v in u(ranges.rotation, 3)),
        translation=tuple(float(v) for v in u(ranges.translation, 3)),
        intensity=Intensity(float(u(ranges.myocardium)), float(u(ranges.blood)),
                            float(u(ranges.background)), float(u(ranges.noise))),
    )
    return anatomy.validate()


def label_view(anatomy: AnatomyParams, plane: ViewPlane):
    """Tissue labels (0 background, 1 myocardium, 2 blood) at every pixel centre."""
    pts = plane.pixel_centers().reshape(-1, 3)
    local = anatomy.to_local(pts)
    return kernels.label_points(local, anatomy.shell()).reshape(plane.size)


def rasterize_view(anatomy: AnatomyParams, plane: ViewPlane, noise_seed: int):
    """Render one plane: float32 image in [0, 1] and uint8 myocardium mask."""
    anatomy.validate()
    labels = label_view(anatomy, plane)
    mask = (labels == kernels.MYOCARDIUM).astype(np.uint8)
    image = anatomy.intensity.levels()[labels]
    sigma = anatomy.intensity.noise
    if sigma > 0:
        image = image + np.random.default_rng(noise_seed).normal(0.0, sigma, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


@dataclass(frozen=True)
class ViewConfig:
    size: int = 128
    pixel_spacing: float = 1.8
    slice_spacing: float = 10.0
    acquisition_size: int = 160
    la_angles_deg: tuple = (0.0, 60.0, 120.0)
    stack_margin: int = 1
    planning_jitter_mm: float = 0.0

    def check(self):
        if self.size % 16:
            raise ConfigError("view size must be divisible by 16")
        if self.acquisition_size < self.size:
            raise ConfigError("acquisition_size must be >= size")
        if self.pixel_spacing <= 0 or self.slice_spacing <= 0:
            raise ConfigError("spacings must be positive")
        if self.slice_spacing <= 3 * (self.pixel_spacing + 0.2):
            raise ConfigError("slice_spacing must exceed 3 * (pixel_spacing + 0.2) mm so SA slices "
                              "can clear the apex, cavity tip and base planes")
        if len(self.la_angles_deg) != 3:
            raise ConfigError("exactly three long-axis plane angles are required")
        angles = np.mod(np.asarray(self.la_angles_deg, dtype=float), 180.0)
        for i in range(3):
            for j in range(i + 1, 3):
                gap = abs(angles[i] - angles[j])
                if min(gap, 180.0 - gap) < 1.0:
                    raise ConfigError("long-axis planes must be pairwise non-parallel")
        if self.stack_margin < 0 or self.planning_jitter_mm < 0:
            raise ConfigError("stack_margin and planning_jitter_mm must be >= 0")
        return self


@dataclass
class Subject:
    id: str
    sa_images: np.ndarray      # (N, H, W) float32, apex -> base
    sa_masks: np.ndarray       # (N, H, W) uint8
    la_images: np.ndarray      # (3, H, W) float32, LA1..LA3
    la_masks: np.ndarray       # (3, H, W) uint8
    sa_planes: list
    la_planes: list
    target_slice_indices: tuple    # (apical, mid, basal) into the SA stack
    spacing: tuple = SPACING
    seed: Optional[int] = None
    anatomy: Optional[AnatomyParams] = None

    @property
    def source_views(self):
        """(4, H, W) images in order LA1, LA2, LA3, Mid-V."""
        mid = self.target_slice_indices[1]
        return np.concatenate([self.la_images, self.sa_images[mid:mid + 1]])

    @property
    def target_masks(self):
        """(6, H, W) masks in order LA1, LA2, LA3, Mid-V, apical SA, basal SA."""
        apical, mid, basal = self.target_slice_indices
        sa = self.sa_masks[[mid, apical, basal]]
        return np.concatenate([self.la_masks, sa])

    @property
    def planes(self):
        return {"sa": self.sa_planes, "la": self.la_planes}


def target_slices(nonempty):
    """(apical, mid, basal) stack indices at the 25/50/75th percentile
    positions of the myocardium-bearing slices; ties round down."""
    nonempty = list(nonempty)
    if len(nonempty) < 3:
        raise GenerationError(f"only {len(nonempty)} myocardium-bearing SA slices; "
                              "at least 3 are needed for apex/mid/base targets")
    m = len(nonempty) - 1
    return tuple(nonempty[(q * m) // 4] for q in (1, 2, 3))


def _in_plane_frame(axis):
    ref = np.array([1.0, 0.0, 0.0])
    if abs(ref @ axis) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = ref - (ref @ axis) * axis
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def plan_views(anatomy: AnatomyParams, view_config: ViewConfig, rng):
    """Long-axis planes and raw (uncropped) short-axis acquisition planes."""
    axis = anatomy.long_axis
    u0, v0 = _in_plane_frame(axis)
    sp = (view_config.pixel_spacing, view_config.pixel_spacing)
    size = (view_config.size, view_config.size)

    centre = anatomy.to_world([0.0, 0.0, 0.5 * (anatomy.apex_z + anatomy.base_z)])
    la_planes = []
    for angle in view_config.la_angles_deg:
        theta = math.radians(angle)
        normal = math.cos(theta) * u0 + math.sin(theta) * v0
        origin = centre + view_config.planning_jitter_mm * rng.standard_normal() * normal
        # rows run base -> apex; row x col = normal
        la_planes.append(ViewPlane(origin, -axis, np.cross(axis, normal), sp, size))

    # LA rows run along the long axis, so their nearest pixel centre can sit
    # half a pixel above or below an SA slice. Keep every slice clear of the
    # three surfaces parallel to the SA planes (apex tip, cavity tip, base cut)
    # so nearest-pixel LA/SA labels never straddle them.
    step = view_config.slice_spacing
    gap = 0.5 * view_config.pixel_spacing + 0.1
    cuts = np.array([anatomy.apex_z, -anatomy.endo_radii[2], anatomy.base_z])
    for _ in range(1000):
        phase = rng.uniform(0.0, 1.0) * step
        offset = (cuts - anatomy.apex_z - phase) % step
        if np.all((offset >= gap) & (offset <= step - gap)):
            break
    else:
        raise GenerationError("could not place SA slices clear of the apex, cavity tip and base planes")
    heights = []
    z = anatomy.apex_z + phase
    while z <= anatomy.base_z:
        heights.append(z)
        z += step
    below = [heights[0] - k * view_config.slice_spacing for k in range(view_config.stack_margin, 0, -1)]
    above = [heights[-1] + k * view_config.slice_spacing for k in range(1, view_config.stack_margin + 1)]
    heights = below + heights + above

    acq = (view_config.acquisition_size, view_config.acquisition_size)
    raw_sa = []
    for z in heights:
        through = anatomy.to_world([0.0, 0.0, z])
        # scanner isocentre (world origin) projected onto the slice
        origin = (through @ axis) * axis
        raw_sa.append(ViewPlane(origin, u0, v0, sp, acq))
    return la_planes, raw_sa, heights


def generate_subject(anatomy: AnatomyParams, view_config: Optional[ViewConfig] = None,
                     seed: int = 0, subject_id: Optional[str] = None) -> Subject:
    view_config = (view_config or ViewConfig()).check()
    anatomy.validate()
    rng = np.random.default_rng([int(seed), 1])
    la_planes, raw_sa, _ = plan_views(anatomy, view_config, rng)
    noise_seeds = rng.integers(0, 2**31, size=len(la_planes) + len(raw_sa))

    la_images, la_masks = zip(*(rasterize_view(anatomy, p, int(s))
                                for p, s in zip(la_planes, noise_seeds)))
    sa_images, sa_masks, sa_planes = [], [], []
    for plane, s in zip(raw_sa, noise_seeds[len(la_planes):]):
        image, mask = rasterize_view(anatomy, plane, int(s))
        centre = la_intersection_center(la_planes, plane)
        crop = crop_to_roi(image, centre, mask=mask, out_size=view_config.size, plane=plane)
        sa_images.append(crop.image)
        sa_masks.append(crop.mask)
        sa_planes.append(crop.plane)

    sa_masks = np.stack(sa_masks)
    nonempty = [k for k in range(len(sa_masks)) if sa_masks[k].any()]
    targets = target_slices(nonempty)
    return Subject(
        id=subject_id or f"subj_{seed}",
        sa_images=np.stack(sa_images),
        sa_masks=sa_masks,
        la_images=np.stack(la_images),
        la_masks=np.stack(la_masks),
        sa_planes=sa_planes,
        la_planes=list(la_planes),
        target_slice_indices=targets,
        spacing=(view_config.pixel_spacing, view_config.pixel_spacing, view_config.slice_spacing),
        seed=int(seed),
        anatomy=anatomy,
    )


_EIGHT = np.ones((3, 3), dtype=bool)


def count_components(mask):
    """(foreground components with 8-connectivity, enclosed holes with 4-connectivity)."""
    mask = np.asarray(mask, dtype=bool)
    _, n_fg = ndimage.label(mask, structure=_EIGHT)
    bg, n_bg = ndimage.label(~np.pad(mask, 1))
    # the padded border belongs to one outer background component
    return n_fg, n_bg - 1


def subject_violations(subject: Subject, min_agreement=0.95, n_samples=64):
    """List of invariant violations (empty when the subject is sane)."""
    problems = []
    for name, arr in (("sa_masks", subject.sa_masks), ("la_masks", subject.la_masks)):
        if not np.isin(arr, (0, 1)).all():
            problems.append(f"{name} not binary")
    for j, mask in enumerate(subject.target_masks):
        n_fg, _ = count_components(mask)
        if not 1 <= n_fg <= 2:
            problems.append(f"target {TARGET_VIEWS[j]} has {n_fg} components")
    n_fg, n_holes = count_components(subject.sa_masks[subject.target_slice_indices[1]])
    if (n_fg, n_holes) != (1, 1):
        problems.append(f"Mid-V mask has {n_fg} components / {n_holes} holes, expected a closed ring")
    for a, (la_mask, la_plane) in enumerate(zip(subject.la_masks, subject.la_planes)):
        for k, (sa_mask, sa_plane) in enumerate(zip(subject.sa_masks, subject.sa_planes)):
            agree = consistency_check(la_mask, la_plane, sa_mask, sa_plane, n_samples)
            if agree.fraction < min_agreement:
                problems.append(f"LA{a + 1} vs SA slice {k}: agreement {agree.fraction:.3f}")
    return problems


def generate_dataset(n_subjects, seed, out_dir, ranges=None, view_config=None,
                     split_fraction=0.8, overwrite=False):
    """Generate ``n_subjects`` phantoms into ``out_dir`` and write the manifest last."""
    from . import datastore

    if n_subjects < 5:
        raise ConfigError(f"n_subjects must be >= 5 (got {n_subjects})")
    if not 0.0 < split_fraction < 1.0:
        raise ConfigError("split_fraction must lie in (0, 1)")
    ranges = (ranges or AnatomyRanges()).check()
    view_config = (view_config or ViewConfig()).check()
    root = datastore.prepare_output_dir(out_dir, overwrite)

    rng = np.random.default_rng(int(seed))
    subject_seeds = [int(s) for s in rng.integers(0, 2**31, size=n_subjects)]
    order = rng.permutation(n_subjects)
    n_train = int(round(split_fraction * n_subjects))
    split = ["test"] * n_subjects
    for k in order[:n_train]:
        split[k] = "train"

    entries = []
    for k, s in enumerate(subject_seeds):
        sid = f"subj_{k:04d}"
        subject = generate_subject(sample_anatomy(s, ranges), view_config, s, sid)
        datastore.write_subject(subject, root / sid)
        entries.append(datastore.ManifestEntry(sid, sid, s, split[k]))

    manifest = datastore.DatasetManifest(
        root=root,
        entries=entries,
        spacing=(view_config.pixel_spacing, view_config.pixel_spacing, view_config.slice_spacing),
        seed=int(seed),
        config=generator_config(ranges, view_config),
    )
    datastore.write_manifest(manifest)
    return manifest


def generator_config(ranges, view_config):
    def plain(dc):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(dc).items()}
    return {"ranges": plain(ranges), "view_config": plain(view_config)}
