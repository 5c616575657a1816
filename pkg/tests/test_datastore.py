import hashlib
import json
import shutil

import numpy as np
import pytest

from mvseg import datastore, phantom
from mvseg.datastore import Checkpoint
from mvseg.errors import (CheckpointError, ConfigError, CorruptionError, NotFoundError,
                          VersionError)


def test_subject_round_trip(subject, tmp_path):
    datastore.write_subject(subject, tmp_path / "s")
    back = datastore.read_subject(tmp_path / "s")
    for name in ("sa_images", "sa_masks", "la_images", "la_masks"):
        a, b = getattr(subject, name), getattr(back, name)
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    assert back.target_slice_indices == subject.target_slice_indices
    assert back.sa_planes == subject.sa_planes and back.la_planes == subject.la_planes
    assert back.anatomy == subject.anatomy
    assert back.spacing == subject.spacing
    datastore.write_subject(back, tmp_path / "t")
    for f in sorted((tmp_path / "s").iterdir()):
        assert f.read_bytes() == (tmp_path / "t" / f.name).read_bytes()


def test_on_disk_layout(subject, tmp_path):
    datastore.write_subject(subject, tmp_path / "s")
    names = {p.name for p in (tmp_path / "s").iterdir()}
    assert names == {"meta", "sa_img.f32le", "sa_msk.u8", "targets.u8",
                     "la1_img.f32le", "la2_img.f32le", "la3_img.f32le",
                     "la1_msk.u8", "la2_msk.u8", "la3_msk.u8"}
    raw = (tmp_path / "s" / "la1_img.f32le").read_bytes()
    assert len(raw) == 128 * 128 * 4
    assert np.array_equal(np.frombuffer(raw, "<f4").reshape(128, 128), subject.la_images[0])
    assert (tmp_path / "s" / "targets.u8").stat().st_size == 6 * 128 * 128
    json.loads((tmp_path / "s" / "meta").read_text(encoding="utf-8"))


def test_truncated_file_names_it(subject, tmp_path):
    datastore.write_subject(subject, tmp_path / "s")
    path = tmp_path / "s" / "la2_msk.u8"
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CorruptionError, match="la2_msk.u8"):
        datastore.read_subject(tmp_path / "s")


def test_missing_file(subject, tmp_path):
    datastore.write_subject(subject, tmp_path / "s")
    (tmp_path / "s" / "sa_img.f32le").unlink()
    with pytest.raises(NotFoundError, match="sa_img.f32le"):
        datastore.read_subject(tmp_path / "s")


def test_raw_size_arithmetic(tmp_path):
    path = tmp_path / "x.f32le"
    path.write_bytes(bytes(128 * 128 * 4))
    assert datastore.read_raw(path, (128, 128)).shape == (128, 128)
    path.write_bytes(bytes(128 * 127 * 4))
    with pytest.raises(CorruptionError):
        datastore.read_raw(path, (128, 128))


def test_manifest_round_trip_and_hash(dataset, tmp_path):
    back = datastore.read_manifest(dataset.root)
    assert back.ids == dataset.ids and back.config_hash == dataset.config_hash
    assert datastore.dumps(back.to_dict()) == datastore.dumps(dataset.to_dict())
    ids = back.ids
    assert len(set(ids)) == len(ids)
    assert set(back.split_ids("train")) | set(back.split_ids("test")) == set(ids)
    assert not set(back.split_ids("train")) & set(back.split_ids("test"))


def test_config_hash_tracks_config(dataset):
    same = datastore.DatasetManifest(dataset.root, dataset.entries, config=dict(dataset.config))
    assert same.config_hash == dataset.config_hash
    changed = json.loads(json.dumps(dataset.config))
    changed["ranges"]["noise"] = [0.0, 0.01]
    other = datastore.DatasetManifest(dataset.root, dataset.entries, config=changed)
    assert other.config_hash != dataset.config_hash


def test_manifest_tamper_detected(dataset, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(dataset.root, root)
    d = json.loads((root / "manifest").read_text())
    d["config"]["view_config"]["size"] = 64
    (root / "manifest").write_text(json.dumps(d))
    with pytest.raises(CorruptionError, match="config_hash"):
        datastore.read_manifest(root)


def fake_manifest(n_train, n_test=10):
    entries = [datastore.ManifestEntry(f"s{k:04d}", f"s{k:04d}", k, "train") for k in range(n_train)]
    entries += [datastore.ManifestEntry(f"t{k:04d}", f"t{k:04d}", k, "test") for k in range(n_test)]
    return datastore.DatasetManifest("/nonexistent", entries)


def test_subsample_split():
    m = fake_manifest(570, 164)
    sub = datastore.subsample_split(m, 0.1, 0)
    assert len(sub.split_ids("train")) == 57
    assert sub.split_ids("test") == m.split_ids("test")
    assert set(sub.split_ids("train")) <= set(m.split_ids("train"))
    assert datastore.subsample_split(m, 0.1, 0).split_ids("train") == sub.split_ids("train")
    assert datastore.subsample_split(m, 0.1, 1).split_ids("train") != sub.split_ids("train")
    assert datastore.subsample_split(m, 1.0, 3).ids == m.ids
    assert len(datastore.subsample_split(fake_manifest(100), 0.1, 0).split_ids("train")) == 10
    assert len(datastore.subsample_split(fake_manifest(15), 0.1, 0).split_ids("train")) == 2


def test_subsample_split_errors():
    with pytest.raises(ConfigError):
        datastore.subsample_split(fake_manifest(10), 0.0, 0)
    with pytest.raises(ConfigError):
        datastore.subsample_split(fake_manifest(0), 0.5, 0)


def test_priors_round_trip(tmp_path, rng):
    codes = rng.random((4, 512)).astype(np.float32)
    path = datastore.priors_path(tmp_path, "subj_0001")
    datastore.write_priors(path, codes)
    assert path.name == "subj_0001.f32le" and path.stat().st_size == 8192
    assert datastore.read_priors(path).tobytes() == codes.tobytes()


def make_ckpt(rng):
    return Checkpoint(
        kind="unet2d",
        weights={"a.weight": rng.normal(size=(3, 2)).astype(np.float32),
                 "a.n": np.array(7, dtype=np.int64)},
        epoch=4,
        config={"model": {"base_filters": 4}},
        optimizer={"0/exp_avg": rng.normal(size=(3, 2)).astype(np.float32)},
        optimizer_meta={"param_groups": [{"lr": 0.001}]},
        rng={"seed": 1},
        rng_arrays={"torch": np.arange(10, dtype=np.uint8)},
    )


def test_checkpoint_bytes_stable(tmp_path, rng):
    ckpt = make_ckpt(rng)
    p1 = datastore.save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = datastore.load_checkpoint(p1)
    p2 = datastore.save_checkpoint(back, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert back.weights["a.n"].shape == ()
    for k, v in ckpt.weights.items():
        assert back.weights[k].dtype == v.dtype and back.weights[k].tobytes() == v.tobytes()


def test_checkpoint_renamed_weight(tmp_path, rng):
    ckpt = make_ckpt(rng)
    ckpt.weights["a.renamed"] = ckpt.weights.pop("a.weight")
    expected = {"a.weight": (3, 2), "a.n": ()}
    with pytest.raises(CheckpointError, match="a.renamed") as info:
        datastore.check_names(expected, ckpt.weights)
    assert "a.weight" in str(info.value)


def test_checkpoint_version_and_corruption(tmp_path, rng):
    data = bytearray(datastore.encode_checkpoint(make_ckpt(rng)))
    n = len(datastore.CHECKPOINT_MAGIC)
    data[n] = 99
    with pytest.raises(VersionError, match="99"):
        datastore.decode_checkpoint(bytes(data))
    with pytest.raises(CorruptionError):
        datastore.decode_checkpoint(b"NOTACKPT" + bytes(20))
    good = datastore.encode_checkpoint(make_ckpt(rng))
    with pytest.raises(CorruptionError, match="truncated"):
        datastore.decode_checkpoint(good[:-3])
    with pytest.raises(NotFoundError):
        datastore.load_checkpoint(tmp_path / "missing.ckpt")


def test_dataset_digest_stable(dataset):
    h1 = hashlib.sha256((dataset.root / "manifest").read_bytes()).hexdigest()
    again = datastore.read_manifest(dataset.root)
    datastore.write_manifest(again, dataset.root / "manifest.copy")
    assert hashlib.sha256((dataset.root / "manifest.copy").read_bytes()).hexdigest() == h1
    (dataset.root / "manifest.copy").unlink()


def test_generated_dataset_loads(dataset):
    sub = dataset.load(dataset.ids[0])
    assert isinstance(sub, phantom.Subject)
    assert phantom.subject_violations(sub) == []
