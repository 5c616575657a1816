"""On-disk formats: subject directories, dataset manifests, shape-code caches
and checkpoints. Everything is little-endian raw data plus UTF-8 JSON so that
round-trips are bit-exact and platform independent.

Layout::

    dataset/manifest
    dataset/<id>/meta
    dataset/<id>/sa_img.f32le  sa_msk.u8
    dataset/<id>/la{1,2,3}_img.f32le  la{1,2,3}_msk.u8
    dataset/<id>/targets.u8            (6, H, W)
    priors/<id>.f32le                  (4, code_dim), LA1, LA2, LA3, Mid-V
"""
import hashlib
import json
import math
import os
import shutil
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, CorruptionError, InputError, NotFoundError, VersionError
from .geometry import ViewPlane

FORMAT_VERSION = 1
CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"MVSEGCKP"

_DTYPES = {".f32le": np.dtype("<f4"), ".u8": np.dtype("u1")}


def dumps(obj):
    """Canonical JSON (sorted keys, fixed separators) used for every sidecar."""
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def _atomic_write(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def prepare_output_dir(out_dir, overwrite=False):
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise InputError(f"output directory {root} exists and is not empty (use overwrite/--force)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    return root


# ---------------------------------------------------------------------------
# raw arrays
# ---------------------------------------------------------------------------

def write_raw(path, array):
    path = Path(path)
    dtype = _DTYPES[path.suffix]
    _atomic_write(path, np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_raw(path, shape):
    path = Path(path)
    dtype = _DTYPES[path.suffix]
    if not path.exists():
        raise NotFoundError(f"missing data file: {path}")
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise CorruptionError(f"{path}: {actual} bytes on disk, sidecar shape {tuple(shape)} "
                              f"needs {expected}")
    return np.fromfile(path, dtype=dtype).reshape(shape)


# ---------------------------------------------------------------------------
# subjects
# ---------------------------------------------------------------------------

def write_subject(subject, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {"sa_img.f32le": subject.sa_images, "sa_msk.u8": subject.sa_masks,
              "targets.u8": subject.target_masks}
    for k in range(3):
        arrays[f"la{k + 1}_img.f32le"] = subject.la_images[k]
        arrays[f"la{k + 1}_msk.u8"] = subject.la_masks[k]
    for name, arr in arrays.items():
        write_raw(directory / name, arr)
    meta = {
        "format_version": FORMAT_VERSION,
        "id": subject.id,
        "seed": subject.seed,
        "spacing": list(subject.spacing),
        "arrays": {name: list(arr.shape) for name, arr in arrays.items()},
        "target_slice_indices": list(subject.target_slice_indices),
        "sa_planes": [p.to_dict() for p in subject.sa_planes],
        "la_planes": [p.to_dict() for p in subject.la_planes],
        "anatomy": subject.anatomy.to_dict() if subject.anatomy is not None else None,
    }
    _atomic_write(directory / "meta", dumps(meta).encode("utf-8"))


def read_meta(directory):
    path = Path(directory) / "meta"
    if not path.exists():
        raise NotFoundError(f"missing subject sidecar: {path}")
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: unreadable sidecar ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: format_version {meta.get('format_version')} "
                           f"(this build reads {FORMAT_VERSION})")
    return meta


def read_subject(directory):
    from .phantom import AnatomyParams, Subject

    directory = Path(directory)
    meta = read_meta(directory)
    shapes = meta["arrays"]
    arr = {name: read_raw(directory / name, shape) for name, shape in shapes.items()}
    subject = Subject(
        id=meta["id"],
        sa_images=arr["sa_img.f32le"],
        sa_masks=arr["sa_msk.u8"],
        la_images=np.stack([arr[f"la{k}_img.f32le"] for k in (1, 2, 3)]),
        la_masks=np.stack([arr[f"la{k}_msk.u8"] for k in (1, 2, 3)]),
        sa_planes=[ViewPlane.from_dict(p) for p in meta["sa_planes"]],
        la_planes=[ViewPlane.from_dict(p) for p in meta["la_planes"]],
        target_slice_indices=tuple(meta["target_slice_indices"]),
        spacing=tuple(meta["spacing"]),
        seed=meta["seed"],
        anatomy=AnatomyParams.from_dict(meta["anatomy"]) if meta["anatomy"] else None,
    )
    if not np.array_equal(subject.target_masks, arr["targets.u8"]):
        raise CorruptionError(f"{directory / 'targets.u8'}: disagrees with the SA/LA masks")
    for name in ("sa_msk.u8", "targets.u8"):
        if arr[name].max(initial=0) > 1:
            raise CorruptionError(f"{directory / name}: mask values outside {{0, 1}}")
    return subject


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    seed: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    spacing: tuple = (1.8, 1.8, 10.0)
    seed: int = 0
    config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def config_hash(self):
        return hashlib.sha256(dumps(self.config).encode("utf-8")).hexdigest()

    @property
    def ids(self):
        return [e.id for e in self.entries]

    def split_ids(self, split):
        return [e.id for e in self.entries if e.split == split]

    def subject_dir(self, sid):
        for e in self.entries:
            if e.id == sid:
                return Path(self.root) / e.path
        raise KeyError(sid)

    def load(self, sid):
        return read_subject(self.subject_dir(sid))

    def validate(self):
        ids = self.ids
        if len(set(ids)) != len(ids):
            raise CorruptionError("manifest lists duplicate subject ids")
        bad = {e.split for e in self.entries} - {"train", "test"}
        if bad:
            raise CorruptionError(f"unknown split labels {sorted(bad)}")
        for e in self.entries:
            if not (Path(self.root) / e.path / "meta").exists():
                raise NotFoundError(f"manifest references missing subject: {Path(self.root) / e.path}")
        return self

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "spacing": list(self.spacing),
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "subjects": [{"id": e.id, "path": e.path, "seed": e.seed, "split": e.split}
                         for e in self.entries],
        }


def write_manifest(manifest: DatasetManifest, path=None):
    path = Path(path) if path is not None else Path(manifest.root) / "manifest"
    _atomic_write(path, dumps(manifest.to_dict()).encode("utf-8"))
    return path


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest"
    if not path.exists():
        raise NotFoundError(f"missing manifest: {path}")
    d = json.loads(path.read_text(encoding="utf-8"))
    if d.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: manifest format_version {d.get('format_version')} "
                           f"(this build reads {FORMAT_VERSION})")
    manifest = DatasetManifest(
        root=path.parent,
        entries=[ManifestEntry(s["id"], s["path"], s["seed"], s["split"]) for s in d["subjects"]],
        spacing=tuple(d["spacing"]),
        seed=d["seed"],
        config=d["config"],
    )
    if d.get("config_hash") != manifest.config_hash:
        raise CorruptionError(f"{path}: config_hash does not match the stored config")
    return manifest.validate()


def subsample_split(manifest: DatasetManifest, fraction, seed, split="train"):
    """Keep a seeded uniform sample of ceil(fraction * n) ``split`` subjects;
    other splits are untouched."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    pool = manifest.split_ids(split)
    # round first so 0.1 * 570 gives 57, not 58
    k = math.ceil(round(fraction * len(pool), 9))
    if k == 0:
        raise ConfigError(f"fraction {fraction} of {len(pool)} {split} subjects selects nobody")
    rng = np.random.default_rng(int(seed))
    keep = {pool[i] for i in rng.choice(len(pool), size=k, replace=False)}
    entries = [e for e in manifest.entries if e.split != split or e.id in keep]
    return replace(manifest, entries=entries)


# ---------------------------------------------------------------------------
# shape-code cache
# ---------------------------------------------------------------------------

def write_priors(path, codes):
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[0] != 4:
        raise InputError(f"prior cache holds 4 codes, got array of shape {codes.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_raw(path, codes)


def read_priors(path, code_dim=512):
    return read_raw(path, (4, code_dim))


def priors_path(priors_dir, sid):
    return Path(priors_dir) / f"{sid}.f32le"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# file = magic | u32 version | u64 header length | JSON header | tensor bytes.
# The header lists every tensor as {name, dtype, shape, offset, nbytes}.

MODEL_KINDS = ("shape_mae", "mv_unet", "unet2d")


@dataclass
class Checkpoint:
    kind: str
    weights: dict                      # name -> np.ndarray (model state, incl. buffers)
    epoch: int = 0
    config: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)   # name -> np.ndarray
    optimizer_meta: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)         # JSON-able RNG states
    rng_arrays: dict = field(default_factory=dict)  # name -> np.ndarray
    extra: dict = field(default_factory=dict)


def _le(arr):
    arr = np.asarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {ckpt.kind!r}; expected one of {MODEL_KINDS}")
    index, blobs, offset = [], [], 0
    for group, tensors in (("weights", ckpt.weights), ("optimizer", ckpt.optimizer),
                           ("rng", ckpt.rng_arrays)):
        for name in sorted(tensors):
            arr = np.array(_le(tensors[name]), order="C", copy=True)
            data = arr.tobytes()
            index.append({"group": group, "name": name, "dtype": arr.dtype.str,
                          "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    header = {
        "kind": ckpt.kind,
        "epoch": int(ckpt.epoch),
        "config": ckpt.config,
        "optimizer_meta": ckpt.optimizer_meta,
        "rng": ckpt.rng,
        "extra": ckpt.extra,
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return (CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head))
            + head + b"".join(blobs))


def decode_checkpoint(data: bytes, source="<bytes>") -> Checkpoint:
    n_magic = len(CHECKPOINT_MAGIC)
    if data[:n_magic] != CHECKPOINT_MAGIC:
        raise CorruptionError(f"{source}: not a checkpoint file")
    version, head_len = struct.unpack_from("<IQ", data, n_magic)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{source}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    start = n_magic + struct.calcsize("<IQ")
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{source}: unreadable checkpoint header") from exc
    body = memoryview(data)[start + head_len:]
    groups = {"weights": {}, "optimizer": {}, "rng": {}}
    for t in header["tensors"]:
        dtype = np.dtype(t["dtype"])
        if t["offset"] + t["nbytes"] > len(body) or t["nbytes"] != int(np.prod(t["shape"])) * dtype.itemsize:
            raise CorruptionError(f"{source}: tensor {t['name']!r} is truncated or mis-sized")
        raw = body[t["offset"]:t["offset"] + t["nbytes"]]
        groups[t["group"]][t["name"]] = np.frombuffer(raw, dtype=dtype).reshape(t["shape"]).copy()
    return Checkpoint(kind=header["kind"], weights=groups["weights"], epoch=header["epoch"],
                      config=header["config"], optimizer=groups["optimizer"],
                      optimizer_meta=header["optimizer_meta"], rng=header["rng"],
                      rng_arrays=groups["rng"], extra=header.get("extra", {}))


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, encode_checkpoint(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))


def check_names(expected_shapes: dict, weights: dict):
    """Fail fast listing missing/unexpected names and shape mismatches."""
    missing = sorted(set(expected_shapes) - set(weights))
    unexpected = sorted(set(weights) - set(expected_shapes))
    wrong = sorted(n for n in set(expected_shapes) & set(weights)
                   if tuple(expected_shapes[n]) != tuple(weights[n].shape))
    if missing or unexpected or wrong:
        parts = []
        if missing:
            parts.append(f"missing: {missing}")
        if unexpected:
            parts.append(f"unexpected: {unexpected}")
        if wrong:
            parts.append(f"shape mismatch: {wrong}")
        raise CheckpointError("checkpoint does not match architecture; " + "; ".join(parts))
