"""Dice and physical-spacing Hausdorff distance, stratified evaluation, and
apex/mid/base report tables."""
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .datastore import dumps, priors_path, read_priors
from .errors import ShapeError
from .geometry import REGIONS, stratify_slices

METRICS = ("dice", "hd")

_CROSS = ndimage.generate_binary_structure(2, 1)


def _check_pair(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b):
    """2|a∩b| / (|a|+|b|); 1.0 when both are empty."""
    a, b = _check_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def image_diagonal(shape, spacing):
    return math.hypot(shape[0] * spacing[0], shape[1] * spacing[1])


def _inner_boundary(mask):
    # pixels of mask with a 4-neighbour outside it; the nearest mask pixel to
    # any outside point is always one of these
    eroded = ndimage.binary_erosion(mask, structure=_CROSS, border_value=1)
    return mask & ~eroded


def _coords(mask, spacing):
    return np.argwhere(mask).astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def hausdorff(a, b, spacing=(1.8, 1.8)):
    """Symmetric Hausdorff distance (mm) between the foreground pixel-centre sets.

    Both empty -> 0.0; exactly one empty -> the image diagonal in mm.
    """
    a, b = _check_pair(a, b)
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return 0.0
    if has_a != has_b:
        return image_diagonal(a.shape, spacing)
    # points inside the other set contribute 0; the other set reduces to its boundary
    h_ab = kernels.directed_hausdorff(_coords(a & ~b, spacing), _coords(_inner_boundary(b), spacing))
    h_ba = kernels.directed_hausdorff(_coords(b & ~a, spacing), _coords(_inner_boundary(a), spacing))
    return max(h_ab, h_ba)


@dataclass
class Stat:
    mean: float
    std: float
    n: int

    @classmethod
    def of(cls, values):
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            return cls(float("nan"), float("nan"), 0)
        return cls(float(values.mean()), float(values.std()), int(values.size))


@dataclass
class EvalReport:
    regions: dict                       # region -> metric -> Stat
    model_id: str = ""
    split: str = "test"
    seeds: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    per_slice: list = field(default_factory=list)   # (subject, slice, region, dice, hd)

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "split": self.split,
            "seeds": list(self.seeds),
            "failures": self.failures,
            "regions": {r: {m: vars(s) for m, s in ms.items()} for r, ms in self.regions.items()},
            "per_slice": [list(row) for row in self.per_slice],
        }

    def to_text(self):
        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        regions = {r: {m: Stat(**s) for m, s in ms.items()} for r, ms in d["regions"].items()}
        return cls(regions, d["model_id"], d["split"], d["seeds"], d["failures"],
                   [tuple(row) for row in d.get("per_slice", [])])

    @classmethod
    def from_text(cls, text):
        return cls.from_dict(json.loads(text))

    @property
    def n_slices(self):
        return sum(self.regions[r]["dice"].n for r in REGIONS)

    def mean_over(self, regions, metric):
        """Slice-weighted mean of ``metric`` over the given regions."""
        vals = [row[3 if metric == "dice" else 4] for row in self.per_slice if row[2] in regions]
        return float(np.mean(vals)) if vals else float("nan")


def aggregate(per_slice, **kw):
    regions = {}
    for r in REGIONS:
        rows = [row for row in per_slice if row[2] == r]
        regions[r] = {"dice": Stat.of([row[3] for row in rows]),
                      "hd": Stat.of([row[4] for row in rows])}
    return EvalReport(regions, per_slice=list(per_slice), **kw)


def evaluate(predictor, manifest, split="test", priors_dir=None, needs_priors=False,
             model_id="", seeds=()):
    """Per-slice Dice/HD over every SA slice of ``split``, stratified into apex/mid/base.

    ``predictor(subject, codes)`` returns an (N, H, W) binary stack for the
    subject's SA slices; ``codes`` is the (4, D) prior array or None.
    Subjects whose priors are missing (when ``needs_priors``) are excluded and
    listed in ``failures``.
    """
    per_slice, failures = [], {}
    for sid in manifest.split_ids(split):
        subject = manifest.load(sid)
        codes = None
        if needs_priors:
            path = priors_path(priors_dir, sid) if priors_dir is not None else None
            if path is None or not path.exists():
                failures[sid] = f"missing priors: {path}"
                continue
            codes = read_priors(path, code_dim=path.stat().st_size // 16)
        pred = np.asarray(predictor(subject, codes))
        spacing = subject.spacing[:2]
        for k, region in enumerate(stratify_slices(subject.sa_masks)):
            if region not in REGIONS:
                continue
            gt = subject.sa_masks[k]
            per_slice.append((sid, k, region, dice(pred[k], gt), hausdorff(pred[k], gt, spacing)))
    return aggregate(per_slice, model_id=model_id, split=split, seeds=list(seeds), failures=failures)


def render_table(rows):
    """Text table in the apex/middle/base layout.

    ``rows`` is a list of (method, n_train, EvalReport) triples.
    """
    head = ("Method", "# Training subjects", "Dice Apex", "Dice Middle", "Dice Base",
            "HD Apex", "HD Middle", "HD Base")
    lines = [head]
    for method, n_train, report in rows:
        cells = [method, str(n_train)]
        for metric in METRICS:
            for r in REGIONS:
                s = report.regions[r][metric]
                cells.append(f"{s.mean:.3f} ({s.std:.3f})")
        lines.append(tuple(cells))
    widths = [max(len(line[k]) for line in lines) for k in range(len(head))]
    fmt = lambda line: " | ".join(c.ljust(w) for c, w in zip(line, widths))  # noqa: E731
    out = [fmt(lines[0]), "-+-".join("-" * w for w in widths)]
    out += [fmt(line) for line in lines[1:]]
    return "\n".join(out) + "\n"
