import dataclasses
import hashlib
import math

import numpy as np
import pytest

from mvseg import datastore, phantom
from mvseg.errors import ConfigError, GenerationError, InputError
from mvseg.geometry import ViewPlane, consistency_check
from mvseg.phantom import AnatomyRanges, Intensity


def sa_plane(anatomy, z, size=128):
    R = anatomy.rotation_matrix
    return ViewPlane(anatomy.to_world([0.0, 0.0, z]), R[:, 0], R[:, 1], (1.8, 1.8), (size, size))


def ellipse_annulus_area(anatomy, z):
    # independent closed form: outer ellipse section minus inner ellipse section
    rx, ry, rz = anatomy.endo_radii
    ta, tb = anatomy.wall_thickness
    L = anatomy.lv_length
    e = L / (2 - 2 * anatomy.base_truncation)
    t = ta + (tb - ta) * (z + e) / L
    if not -e <= z <= e * (1 - 2 * anatomy.base_truncation):
        return 0.0
    outer = math.pi * (rx + t) * (ry + t) * max(0.0, 1 - (z / e) ** 2)
    inner = math.pi * rx * ry * max(0.0, 1 - (z / rz) ** 2)
    return outer - inner


def test_sample_anatomy_valid_and_deterministic():
    a = phantom.sample_anatomy(0)
    assert a.validate() is a
    assert phantom.sample_anatomy(0) == a
    assert phantom.sample_anatomy(1) != a


def test_sample_anatomy_100_seeds_have_six_slices():
    for seed in range(100):
        sub = phantom.generate_subject(phantom.sample_anatomy(seed), None, seed)
        assert sum(bool(m.any()) for m in sub.sa_masks) >= phantom.MIN_SA_SLICES


@pytest.mark.parametrize("field, value, needle", [
    ("wall_apex", (0.5, 1.0), "wall_thickness > 1 mm"),
    ("endo_rx", (-2.0, 5.0), "endo_radii > 0"),
    ("base_truncation", (0.0, 0.3), "base_truncation"),
    ("lv_length", (30.0, 40.0), "6 SA slices"),
])
def test_infeasible_ranges_name_invariant(field, value, needle):
    ranges = dataclasses.replace(AnatomyRanges(), **{field: value})
    with pytest.raises(ConfigError, match=needle):
        phantom.sample_anatomy(0, ranges)


def test_nan_anatomy_rejected(anatomy):
    bad = dataclasses.replace(anatomy, lv_length=float("nan"))
    with pytest.raises(InputError):
        phantom.rasterize_view(bad, sa_plane(anatomy, 0.0), 0)


def test_noiseless_mid_plane_is_annulus(anatomy):
    quiet = dataclasses.replace(anatomy, intensity=Intensity(0.35, 0.8, 0.15, 0.0))
    z = 0.5 * (quiet.apex_z + quiet.base_z)
    image, mask = phantom.rasterize_view(quiet, sa_plane(quiet, z), 0)
    assert phantom.count_components(mask) == (1, 1)
    # pixel under the cavity centre is blood, exactly
    assert image[64, 64] == np.float32(0.8)
    assert set(np.unique(image[mask == 1])) == {np.float32(0.35)}


def test_plane_far_above_base_is_empty(anatomy):
    quiet = dataclasses.replace(anatomy, intensity=Intensity(0.35, 0.8, 0.15, 0.0))
    image, mask = phantom.rasterize_view(quiet, sa_plane(quiet, quiet.base_z + 2 * quiet.lv_length), 0)
    assert not mask.any()
    assert np.all(image == np.float32(0.15))


def test_sa_area_matches_closed_form():
    # every generated SA slice whose analytic section spans >= 60 pixels; the
    # apical caps below that are dominated by single-pixel quantisation
    checked = skipped = 0
    for seed in range(40):
        a = phantom.sample_anatomy(seed)
        sub = phantom.generate_subject(a, None, seed)
        for mask, plane in zip(sub.sa_masks, sub.sa_planes):
            z = a.to_local(plane.origin)[2]
            area = ellipse_annulus_area(a, z)
            assert a.annulus_area(z) == pytest.approx(area, rel=1e-12, abs=1e-9)
            if area < 60 * 1.8 * 1.8:
                skipped += area > 0
                continue
            assert mask.sum() * 1.8 * 1.8 == pytest.approx(area, rel=0.05), (seed, z)
            checked += 1
    assert checked > 300 and skipped < checked / 10


def test_target_slices_percentile_rule():
    assert phantom.target_slices(range(9)) == (2, 4, 6)
    assert phantom.target_slices(range(3, 11)) == (4, 6, 8)   # m=7: 1, 3, 5 -> ties round down
    with pytest.raises(GenerationError):
        phantom.target_slices([4, 5])


def test_generate_subject_targets(subject):
    targets = subject.target_masks
    assert targets.shape == (6, 128, 128)
    assert all(t.any() for t in targets)
    assert subject.source_views.shape == (4, 128, 128)
    assert subject.source_views.min() >= 0 and subject.source_views.max() <= 1
    assert len(subject.sa_images) >= 8
    assert subject.spacing == (1.8, 1.8, 10.0)


def test_subject_invariants(subject):
    assert phantom.subject_violations(subject) == []
    mid = subject.sa_masks[subject.target_slice_indices[1]]
    assert phantom.count_components(mid) == (1, 1)
    assert subject.sa_masks[subject.target_slice_indices[0]].any()


def test_la_views_agree_with_mid_slice(subject):
    k = subject.target_slice_indices[1]
    for la_mask, la_plane in zip(subject.la_masks, subject.la_planes):
        agree = consistency_check(la_mask, la_plane, subject.sa_masks[k], subject.sa_planes[k])
        assert agree.fraction >= 0.95


def test_area_profile_unimodal():
    for seed in range(10):
        a = phantom.sample_anatomy(seed)
        quiet = dataclasses.replace(a, intensity=Intensity(0.35, 0.8, 0.15, 0.0))
        sub = phantom.generate_subject(quiet, None, seed)
        areas = [int(m.sum()) for m in sub.sa_masks if m.any()]
        peak = int(np.argmax(areas))
        assert all(x <= y for x, y in zip(areas[:peak], areas[1:peak + 1]))
        assert all(x >= y for x, y in zip(areas[peak:], areas[peak + 1:]))


def test_generate_subject_deterministic(anatomy):
    a = phantom.generate_subject(anatomy, None, 5, "x")
    b = phantom.generate_subject(anatomy, None, 5, "x")
    for name in ("sa_images", "sa_masks", "la_images", "la_masks"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.target_slice_indices == b.target_slice_indices


def test_view_config_rejects_parallel_la_planes():
    with pytest.raises(ConfigError, match="non-parallel"):
        phantom.ViewConfig(la_angles_deg=(0.0, 180.0, 60.0)).check()


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def test_generate_dataset_byte_identical(tmp_path):
    phantom.generate_dataset(10, 7, tmp_path / "a")
    phantom.generate_dataset(10, 7, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_generate_dataset_split_and_files(tmp_path):
    manifest = phantom.generate_dataset(100, 1, tmp_path / "d", split_fraction=0.8)
    train, test = set(manifest.split_ids("train")), set(manifest.split_ids("test"))
    assert len(train) == 80 and len(test) == 20 and not train & test
    reread = datastore.read_manifest(tmp_path / "d")
    assert len(reread.ids) == 100
    for sid in reread.ids:
        meta = datastore.read_meta(reread.subject_dir(sid))
        for name in meta["arrays"]:
            assert (reread.subject_dir(sid) / name).is_file()


def test_generate_dataset_guards(tmp_path):
    with pytest.raises(ConfigError, match=">= 5"):
        phantom.generate_dataset(2, 0, tmp_path / "small")
    phantom.generate_dataset(5, 0, tmp_path / "d")
    with pytest.raises(InputError, match="not empty"):
        phantom.generate_dataset(5, 0, tmp_path / "d")
    phantom.generate_dataset(5, 1, tmp_path / "d", overwrite=True)
    assert datastore.read_manifest(tmp_path / "d").seed == 1
