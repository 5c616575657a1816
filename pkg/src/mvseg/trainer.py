"""Training loops for Shape MAE, MV U-Net and the 2D U-Net baseline, plus the
model-kind x data-fraction x seed experiment matrix.

Each run directory holds ``last.ckpt`` (rewritten every epoch), ``best.ckpt``
(lowest epoch-mean total loss), ``loss_curve.csv`` (append-only) and
``resolved_config.ini``.
"""
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import blocks, datastore, metrics
from .config import write_config
from .errors import ConfigError, InputError, NotFoundError, TrainingError
from .mv_unet import MVUNet, MVUNetConfig
from .shape_mae import LossWeights, ShapeMAE, build_from_config, encode_priors, shape_mae_loss

log = logging.getLogger(__name__)

DEFAULT_LR = {"shape_mae": 1e-4, "mv_unet": 1e-3, "unet2d": 1e-3}
SHAPE_COLUMNS = ("epoch", "total", "intra", "inter", "reg")
SEG_COLUMNS = ("epoch", "total", "ce")


@dataclass
class TrainConfig:
    model: str
    data: str = ""
    out: str = ""
    epochs: int = 200
    batch: int = 10
    lr: Optional[float] = None
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    fraction: float = 1.0
    # shape_mae
    alpha: float = 0.5
    beta: float = 0.001
    widths: tuple = (16, 32, 64, 64)
    # segmenters
    base_filters: int = 16
    priors: Optional[str] = None
    max_steps: Optional[int] = None
    resume: bool = False

    def __post_init__(self):
        if self.model not in datastore.MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}; valid: {', '.join(datastore.MODEL_KINDS)}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.model]
        self.betas = tuple(self.betas)
        self.widths = tuple(self.widths)
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if not 0 < self.fraction <= 1:
            raise ConfigError("fraction must lie in (0, 1]")

    @property
    def fuse_enabled(self):
        return self.model == "mv_unet"

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_sections(cls, cfg, model, **overrides):
        """Merge [trainer] then the model's own section, then explicit overrides."""
        values = dict(cfg.get("trainer", {}))
        values.update(cfg.get("shape_mae" if model == "shape_mae" else "segmenter", {}))
        if "priors_path" in values:
            values["priors"] = values.pop("priors_path")
        values.pop("fuse_enabled", None)
        values.update({k: v for k, v in overrides.items() if v is not None})
        values["model"] = model
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown training options {sorted(unknown)}")
        return cls(**values)


@dataclass
class TrainResult:
    out_dir: Path
    curve: list = field(default_factory=list)
    steps: int = 0

    @property
    def last(self):
        return self.out_dir / "last.ckpt"

    @property
    def best(self):
        return self.out_dir / "best.ckpt"


# ---------------------------------------------------------------------------
# model <-> checkpoint
# ---------------------------------------------------------------------------

def build_model(kind, model_cfg):
    if kind == "shape_mae":
        return build_from_config(model_cfg)
    return MVUNet(MVUNetConfig(**model_cfg))


def model_config(kind, model):
    return model.config() if kind == "shape_mae" else model.config.to_dict()


def _optimizer_arrays(optimizer):
    if optimizer is None:
        return {}, {}
    sd = optimizer.state_dict()
    arrays = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            arrays[f"{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    groups = []
    for g in sd["param_groups"]:
        g = {k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
        groups.append(g)
    return arrays, {"param_groups": groups}


def _restore_optimizer(optimizer, ckpt):
    state = {}
    for name, arr in ckpt.optimizer.items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    groups = []
    for g in ckpt.optimizer_meta["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def make_checkpoint(kind, model, optimizer=None, epoch=0, train_config=None, extra=None):
    opt_arrays, opt_meta = _optimizer_arrays(optimizer)
    return datastore.Checkpoint(
        kind=kind,
        weights={k: v.detach().cpu().numpy() for k, v in model.state_dict().items()},
        epoch=epoch,
        config={"model": model_config(kind, model), "blocks": blocks.block_constants(),
                "train": train_config.to_dict() if train_config is not None else {}},
        optimizer=opt_arrays,
        optimizer_meta=opt_meta,
        rng={"torch_initial_seed": int(torch.initial_seed())},
        rng_arrays={"torch": torch.get_rng_state().numpy()},
        extra=extra or {},
    )


def load_weights(model, ckpt):
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    datastore.check_names(expected, ckpt.weights)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.weights.items()})
    return model


def model_from_checkpoint(ckpt):
    if not isinstance(ckpt, datastore.Checkpoint):
        ckpt = datastore.load_checkpoint(ckpt)
    model = build_model(ckpt.kind, ckpt.config["model"])
    return load_weights(model, ckpt)


# ---------------------------------------------------------------------------
# loss curves
# ---------------------------------------------------------------------------

def append_curve(path, columns, row):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(columns)
        writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_curve(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [[int(r[0])] + [float(v) for v in r[1:]] for r in reader]


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def training_manifest(config: TrainConfig):
    manifest = datastore.read_manifest(config.data)
    if config.fraction < 1.0:
        manifest = datastore.subsample_split(manifest, config.fraction, config.seed)
    ids = manifest.split_ids("train")
    if not ids:
        raise InputError(f"{config.data}: no training subjects")
    if config.out:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        run = {"data": str(config.data), "fraction": config.fraction, "seed": config.seed,
               "n_train": len(ids), "train_ids": ids}
        (out / "run_manifest.json").write_text(datastore.dumps(run), encoding="utf-8")
    return manifest, ids


def shape_mae_arrays(manifest, ids):
    subjects = [manifest.load(sid) for sid in ids]
    x = np.stack([s.source_views for s in subjects]).astype(np.float32)
    y = np.stack([s.target_masks for s in subjects]).astype(np.int64)
    return torch.from_numpy(x), torch.from_numpy(y)


def segmenter_arrays(manifest, ids, priors_dir=None):
    images, masks, codes = [], [], []
    missing = []
    for sid in ids:
        subject = manifest.load(sid)
        images.append(subject.sa_images)
        masks.append(subject.sa_masks)
        if priors_dir is not None:
            path = datastore.priors_path(priors_dir, sid)
            if not path.exists():
                missing.append(sid)
                continue
            z = datastore.read_priors(path, code_dim=path.stat().st_size // 16)
            codes.append(np.repeat(z[None], len(subject.sa_images), axis=0))
    if missing:
        raise NotFoundError(f"priors missing under {priors_dir} for subjects: {', '.join(missing)}")
    x = torch.from_numpy(np.concatenate(images)[:, None].astype(np.float32))
    y = torch.from_numpy(np.concatenate(masks).astype(np.int64))
    z = torch.from_numpy(np.concatenate(codes).astype(np.float32)) if codes else None
    return x, y, z


def epoch_order(seed, epoch, n):
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def _prepare_run(config, model, kind):
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    start, best = 0, math.inf
    curve_path = out / "loss_curve.csv"
    if config.resume and (out / "last.ckpt").exists():
        ckpt = datastore.load_checkpoint(out / "last.ckpt")
        if ckpt.kind != kind:
            raise ConfigError(f"cannot resume {kind} from a {ckpt.kind} checkpoint")
        load_weights(model, ckpt)
        _restore_optimizer(optimizer, ckpt)
        torch.set_rng_state(torch.from_numpy(ckpt.rng_arrays["torch"].copy()))
        start = ckpt.epoch
        best = ckpt.extra.get("best_total", math.inf)
        if curve_path.exists():
            _truncate_curve(curve_path, start)
    else:
        if curve_path.exists():
            curve_path.unlink()
        for name in ("last.ckpt", "best.ckpt"):
            if (out / name).exists():
                (out / name).unlink()
    return out, optimizer, start, best, curve_path


def _truncate_curve(path, epochs_done):
    # drop rows of epochs that were logged but not checkpointed
    header, rows = read_curve(path)
    keep = [r for r in rows if r[0] <= epochs_done]
    if len(keep) != len(rows):
        path.unlink()
        for r in keep:
            append_curve(path, header, r)


def _check_finite(value, config, epoch, batch_id):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {batch_id} "
                            f"(lr={config.lr}); last good checkpoint kept in {config.out}")


def _finish_epoch(kind, model, optimizer, config, out, epoch, total, best):
    extra = {"best_total": min(best, total)}
    ckpt = make_checkpoint(kind, model, optimizer, epoch + 1, config, extra)
    datastore.save_checkpoint(ckpt, out / "last.ckpt")
    if total < best:
        datastore.save_checkpoint(ckpt, out / "best.ckpt")
        best = total
    return best


def train_shape_mae(config: TrainConfig, subjects=None) -> TrainResult:
    """Minimise intra + alpha*inter + beta*reg over the training split."""
    if config.model != "shape_mae":
        raise ConfigError("train_shape_mae needs model='shape_mae'")
    if subjects is None:
        manifest, ids = training_manifest(config)
        x, y = shape_mae_arrays(manifest, ids)
    else:
        x, y = subjects
    torch.manual_seed(config.seed)
    model = ShapeMAE(widths=config.widths, image_size=x.shape[-1])
    blocks.init_weights(model, blocks.LayerInit(seed=config.seed))
    weights = LossWeights(config.alpha, config.beta)
    out, optimizer, start, best, curve_path = _prepare_run(config, model, "shape_mae")
    write_config({"trainer": config.to_dict()}, out / "resolved_config.ini")

    result = TrainResult(out)
    n = x.shape[0]
    steps = 0
    for epoch in range(start, config.epochs):
        model.train()
        sums = np.zeros(4)
        order = epoch_order(config.seed, epoch, n)
        seen = 0
        for b, lo in enumerate(range(0, n, config.batch)):
            idx = torch.from_numpy(order[lo:lo + config.batch])
            preds, codes = model.forward_all(x[idx])
            try:
                terms = shape_mae_loss(preds, y[idx], codes, weights)
            except InputError:
                _check_finite(float("nan"), config, epoch, b)
            _check_finite(terms.total.item(), config, epoch, b)
            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step()
            bs = len(idx)
            sums += bs * np.array([t.item() for t in terms[:4]], dtype=np.float64)
            seen += bs
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        row = [epoch + 1, *(float(v) for v in sums / seen)]
        append_curve(curve_path, SHAPE_COLUMNS, row)
        result.curve.append(row)
        best = _finish_epoch("shape_mae", model, optimizer, config, out, epoch, row[1], best)
        log.info("shape_mae epoch %d total %.5f intra %.5f inter %.5f reg %.5f", *row)
        if config.max_steps is not None and steps >= config.max_steps:
            break
    result.steps = steps
    return result


def train_segmenter(config: TrainConfig, data=None) -> TrainResult:
    """Cross-entropy training on every SA slice of the training subjects."""
    if config.model not in ("mv_unet", "unet2d"):
        raise ConfigError("train_segmenter needs model 'mv_unet' or 'unet2d'")
    if config.fuse_enabled and data is None:
        if not config.priors:
            raise ConfigError("mv_unet needs a prior cache (priors / priors_path)")
        if not Path(config.priors).is_dir():
            raise NotFoundError(f"prior cache not found: {config.priors}")
    if data is None:
        manifest, ids = training_manifest(config)
        x, y, z = segmenter_arrays(manifest, ids, config.priors if config.fuse_enabled else None)
    else:
        x, y, z = data
    torch.manual_seed(config.seed)
    code_channels = 8
    model = MVUNet(MVUNetConfig(base_filters=config.base_filters, fuse_enabled=config.fuse_enabled,
                                code_channels=code_channels))
    blocks.init_weights(model, blocks.LayerInit(seed=config.seed))
    out, optimizer, start, best, curve_path = _prepare_run(config, model, config.model)
    write_config({"trainer": config.to_dict()}, out / "resolved_config.ini")

    result = TrainResult(out)
    n = x.shape[0]
    steps = 0
    for epoch in range(start, config.epochs):
        model.train()
        total, seen = 0.0, 0
        order = epoch_order(config.seed, epoch, n)
        for b, lo in enumerate(range(0, n, config.batch)):
            idx = torch.from_numpy(order[lo:lo + config.batch])
            logits = model(x[idx], z[idx] if z is not None else None)
            try:
                loss = blocks.cross_entropy(logits, y[idx])
            except InputError:
                _check_finite(float("nan"), config, epoch, b)
            _check_finite(loss.item(), config, epoch, b)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += len(idx) * loss.item()
            seen += len(idx)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        row = [epoch + 1, total / seen, total / seen]
        append_curve(curve_path, SEG_COLUMNS, row)
        result.curve.append(row)
        best = _finish_epoch(config.model, model, optimizer, config, out, epoch, row[1], best)
        log.info("%s epoch %d ce %.5f", config.model, epoch + 1, row[1])
        if config.max_steps is not None and steps >= config.max_steps:
            break
    result.steps = steps
    return result


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

class SegmenterPredictor:
    """Adapter for metrics.evaluate: argmax masks for a subject's SA stack."""

    def __init__(self, model: MVUNet, batch=32):
        self.model = model.eval()
        self.batch = batch

    @property
    def needs_priors(self):
        return self.model.fuse is not None

    def __call__(self, subject, codes=None):
        x = torch.from_numpy(np.ascontiguousarray(subject.sa_images)[:, None].astype(np.float32))
        out = []
        with torch.no_grad():
            for lo in range(0, len(x), self.batch):
                xb = x[lo:lo + self.batch]
                zb = None
                if self.needs_priors:
                    zb = torch.from_numpy(np.asarray(codes, dtype=np.float32))[None].expand(len(xb), -1, -1)
                out.append(self.model(xb, zb).argmax(dim=1).numpy().astype(np.uint8))
        return np.concatenate(out)


def evaluate_checkpoint(ckpt_path, manifest, split="test", priors_dir=None, model_id=None):
    ckpt = datastore.load_checkpoint(ckpt_path)
    if ckpt.kind == "shape_mae":
        raise ConfigError("evaluation needs a segmenter checkpoint (mv_unet or unet2d)")
    predictor = SegmenterPredictor(model_from_checkpoint(ckpt))
    seed = ckpt.config.get("train", {}).get("seed")
    return metrics.evaluate(predictor, manifest, split, priors_dir, predictor.needs_priors,
                            model_id=model_id or ckpt.kind, seeds=[] if seed is None else [seed])


# ---------------------------------------------------------------------------
# experiment matrix
# ---------------------------------------------------------------------------

def _cell_done(cell_dir, epochs):
    last = Path(cell_dir) / "last.ckpt"
    if not last.exists():
        return False
    return datastore.load_checkpoint(last).epoch >= epochs


def run_experiment(data, out, models=("unet2d", "mv_unet"), fractions=(0.1,), seeds=(0, 1, 2),
                   cfg=None, split="test", overrides=None):
    """Train and evaluate every (model, fraction, seed) cell.

    Cells whose final checkpoint and report already exist are skipped. Per-cell
    failures are recorded and the matrix continues. Returns
    (reports {cell: EvalReport}, failures {cell: message}, table text).
    """
    cfg = cfg or {}
    overrides = overrides or {}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = datastore.read_manifest(data)
    reports, failures = {}, {}
    for model in models:
        for fraction in fractions:
            for seed in seeds:
                name = f"{model}_f{fraction:g}_s{seed}"
                cell = out / "cells" / name
                try:
                    reports[name] = _run_cell(model, fraction, seed, data, manifest, out, cell,
                                              cfg, split, overrides)
                except Exception as exc:  # noqa: BLE001 - isolate cells
                    log.exception("cell %s failed", name)
                    failures[name] = f"{type(exc).__name__}: {exc}"
    rows = []
    for model in models:
        for fraction in fractions:
            cell_reports = [reports[f"{model}_f{fraction:g}_s{s}"] for s in seeds
                            if f"{model}_f{fraction:g}_s{s}" in reports]
            if not cell_reports:
                continue
            merged = metrics.aggregate([row for r in cell_reports for row in r.per_slice],
                                       model_id=model, split=split, seeds=list(seeds))
            n_train = len(datastore.subsample_split(manifest, fraction, seeds[0]).split_ids("train"))
            rows.append((model, f"{n_train} ({fraction:.0%})", merged))
    table = metrics.render_table(rows)
    (out / "consolidated_table.txt").write_text(table, encoding="utf-8")
    (out / "failures.json").write_text(datastore.dumps(failures), encoding="utf-8")
    return reports, failures, table


def _run_cell(model, fraction, seed, data, manifest, out, cell, cfg, split, overrides):
    report_path = cell / "report.json"
    seg = TrainConfig.from_sections(cfg, model, data=str(data), out=str(cell), seed=seed,
                                    fraction=fraction, resume=True, **overrides.get(model, {}))
    priors_dir = None
    if model == "mv_unet":
        mae_dir = out / "shape_mae" / f"f{fraction:g}_s{seed}"
        mae = TrainConfig.from_sections(cfg, "shape_mae", data=str(data), out=str(mae_dir), seed=seed,
                                        fraction=fraction, resume=True,
                                        **overrides.get("shape_mae", {}))
        priors_dir = mae_dir / "priors"
        if not _cell_done(mae_dir, mae.epochs):
            train_shape_mae(mae)
        if not priors_dir.is_dir() or len(list(priors_dir.glob("*.f32le"))) < len(manifest.ids):
            _, fails = encode_priors(manifest, mae_dir / "last.ckpt", priors_dir)
            if fails:
                raise TrainingError(f"prior encoding failed for {sorted(fails)}")
        seg = dataclasses.replace(seg, priors=str(priors_dir))
    if not _cell_done(cell, seg.epochs):
        train_segmenter(seg)
    elif report_path.exists():
        return metrics.EvalReport.from_text(report_path.read_text(encoding="utf-8"))
    report = evaluate_checkpoint(cell / "last.ckpt", manifest, split, priors_dir, model_id=model)
    report.seeds = [seed]
    report_path.write_text(report.to_text(), encoding="utf-8")
    return report
