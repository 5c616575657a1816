"""Shape-aware multi-view autoencoder.

Four view encoders map a source image to a sigmoid-bounded shape code; six
target decoders map any code to myocardium logits for their view. Encoders
share an architecture but not weights; likewise decoders.

View indices are 0-based: sources 0..3 = LA1, LA2, LA3, Mid-V; targets
0..5 = LA1, LA2, LA3, Mid-V, apical SA, basal SA.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from . import blocks, datastore
from .errors import InputError, ShapeError
from .phantom import SOURCE_VIEWS, TARGET_VIEWS

N_SOURCES = 4
N_TARGETS = 6
INTRA_PAIRS = tuple((i, i) for i in range(N_SOURCES))
INTER_PAIRS = tuple((i, j) for i in range(N_SOURCES) for j in range(N_TARGETS) if i != j)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.001

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InputError("loss weights must be non-negative")


class ShapeEncoder(nn.Module):
    """Stride-2 3x3 conv stages (each + IN + leaky ReLU + Res_block), then a
    1x1 conv to ``code_channels`` and a sigmoid; output flattened."""

    def __init__(self, widths=(16, 32, 64, 64), code_channels=8, image_size=128):
        super().__init__()
        self.image_size = image_size
        layers, c = [], 1
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1),
                       blocks.make_norm("instance", w), blocks.make_act("leaky_relu"),
                       blocks.ResBlock(blocks.ResBlockSpec(w, "instance", "leaky_relu"))]
            c = w
        layers.append(nn.Conv2d(c, code_channels, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeError(f"encoder expects (N, 1, {self.image_size}, {self.image_size}), "
                             f"got {tuple(x.shape)}")
        return torch.sigmoid(self.body(x)).flatten(1)


class ShapeDecoder(nn.Module):
    """Stride-2 transposed-conv stages (each + IN + leaky ReLU), a Res_block
    after the first (lowest-resolution) stage, and a 1x1 conv to 2 logits."""

    def __init__(self, widths=(64, 64, 32, 16), code_channels=8, code_grid=8):
        super().__init__()
        self.code_channels = code_channels
        self.code_grid = code_grid
        layers, c = [], code_channels
        for k, w in enumerate(widths):
            layers += [nn.ConvTranspose2d(c, w, 4, stride=2, padding=1),
                       blocks.make_norm("instance", w), blocks.make_act("leaky_relu")]
            if k == 0:
                layers.append(blocks.ResBlock(blocks.ResBlockSpec(w, "instance", "leaky_relu")))
            c = w
        layers.append(nn.Conv2d(c, 2, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        g = self.code_grid
        return self.body(z.reshape(z.shape[0], self.code_channels, g, g))


class ShapeMAE(nn.Module):
    def __init__(self, widths=(16, 32, 64, 64), code_channels=8, image_size=128):
        super().__init__()
        widths = tuple(widths)
        if image_size % (2 ** len(widths)):
            raise ShapeError(f"image_size {image_size} not divisible by 2^{len(widths)}")
        self.widths = widths
        self.code_channels = code_channels
        self.image_size = image_size
        self.code_grid = image_size // 2 ** len(widths)
        self.code_dim = code_channels * self.code_grid ** 2
        self.encoders = nn.ModuleList(ShapeEncoder(widths, code_channels, image_size)
                                      for _ in range(N_SOURCES))
        self.decoders = nn.ModuleList(ShapeDecoder(widths[::-1], code_channels, self.code_grid)
                                      for _ in range(N_TARGETS))

    def config(self):
        return {"widths": list(self.widths), "code_channels": self.code_channels,
                "image_size": self.image_size}

    def encode(self, image, i):
        """Code of source view ``i`` for a (H, W), (N, H, W) or (N, 1, H, W) image."""
        if not 0 <= i < N_SOURCES:
            raise IndexError(f"source view index {i} outside 0..{N_SOURCES - 1}")
        x = torch.as_tensor(image)
        squeeze = x.dim() == 2
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[:, None]
        x = x.to(next(self.parameters()).dtype)
        z = self.encoders[i](x)
        return z[0] if squeeze else z

    def decode(self, code, j):
        if not 0 <= j < N_TARGETS:
            raise IndexError(f"target view index {j} outside 0..{N_TARGETS - 1}")
        z = torch.as_tensor(code)
        squeeze = z.dim() == 1
        if squeeze:
            z = z[None]
        if z.shape[-1] != self.code_dim:
            raise ShapeError(f"code has {z.shape[-1]} values, expected {self.code_dim}")
        out = self.decoders[j](z)
        return out[0] if squeeze else out

    def forward_all(self, views):
        """All 4x6 cross-view predictions.

        ``views``: (N, 4, H, W) tensor, or a sequence of 4 (N, H, W) tensors
        (``None`` marks a missing view). Returns predictions (N, 4, 6, 2, H, W)
        and codes (N, 4, code_dim).
        """
        if isinstance(views, (list, tuple)):
            for k, v in enumerate(views):
                if v is None:
                    raise InputError(f"missing source view {SOURCE_VIEWS[k]}")
            if len(views) != N_SOURCES:
                raise InputError(f"expected {N_SOURCES} source views, got {len(views)}")
            views = torch.stack([torch.as_tensor(v) for v in views], dim=1)
        if views.dim() != 4 or views.shape[1] != N_SOURCES:
            raise ShapeError(f"expected (N, {N_SOURCES}, H, W) source views, got {tuple(views.shape)}")
        codes, preds = [], []
        for i in range(N_SOURCES):
            z = self.encode(views[:, i], i)
            codes.append(z)
            preds.append(torch.stack([self.decoders[j](z) for j in range(N_TARGETS)], dim=1))
        return torch.stack(preds, dim=1), torch.stack(codes, dim=1)


class LossTerms(NamedTuple):
    total: torch.Tensor
    intra: torch.Tensor
    inter: torch.Tensor
    reg: torch.Tensor
    n_intra: int
    n_inter: int


def code_regularizer(codes):
    """(1/|Z|) sum_i ||z_i - mean(z)||^2 per subject, averaged over the batch."""
    if codes.dim() == 2:
        codes = codes[None]
    centre = codes.mean(dim=1, keepdim=True)
    return ((codes - centre) ** 2).sum(dim=-1).mean(dim=1).mean()


def shape_mae_loss(predictions, targets, codes, weights: LossWeights = LossWeights()):
    """Composite loss: intra + alpha * inter + beta * reg.

    predictions (N, 4, 6, 2, H, W); targets (N, 6, H, W); codes (N, 4, D).
    Both reconstruction terms are sums over view pairs of the pixel-mean
    cross-entropy (batch-averaged).
    """
    if predictions.dim() == 5:
        predictions, targets, codes = predictions[None], targets[None], codes[None]
    if predictions.shape[1:3] != (N_SOURCES, N_TARGETS):
        raise InputError(f"expected 4x6 predictions, got {tuple(predictions.shape[1:3])}")
    if targets.shape[1] != N_TARGETS:
        raise InputError(f"expected {N_TARGETS} target masks, got {targets.shape[1]}")
    if codes.shape[1] != N_SOURCES:
        raise InputError(f"expected {N_SOURCES} codes, got {codes.shape[1]}")
    targets = targets.long()
    intra = sum(blocks.cross_entropy(predictions[:, i, j], targets[:, j]) for i, j in INTRA_PAIRS)
    inter = sum(blocks.cross_entropy(predictions[:, i, j], targets[:, j]) for i, j in INTER_PAIRS)
    reg = code_regularizer(codes)
    total = intra + weights.alpha * inter + weights.beta * reg
    return LossTerms(total, intra, inter, reg, len(INTRA_PAIRS), len(INTER_PAIRS))


def mean_pairwise_code_distance(codes):
    """Mean Euclidean distance between the codes of different views, over subjects."""
    codes = torch.as_tensor(codes)
    if codes.dim() == 2:
        codes = codes[None]
    d = torch.cdist(codes, codes)
    iu = torch.triu_indices(codes.shape[1], codes.shape[1], offset=1)
    return float(d[:, iu[0], iu[1]].mean())


def build_from_config(cfg):
    return ShapeMAE(widths=tuple(cfg.get("widths", (16, 32, 64, 64))),
                    code_channels=cfg.get("code_channels", 8),
                    image_size=cfg.get("image_size", 128))


def encode_priors(manifest, checkpoint, out_dir):
    """Write ``<out_dir>/<id>.f32le`` (4 x code_dim) for every manifest subject.

    Per-subject failures are collected, not raised. Returns (written, failures).
    """
    from .trainer import model_from_checkpoint

    if not isinstance(checkpoint, datastore.Checkpoint):
        checkpoint = datastore.load_checkpoint(checkpoint)
    model = model_from_checkpoint(checkpoint)
    model.eval()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, failures = [], {}
    for sid in manifest.ids:
        try:
            subject = manifest.load(sid)
            views = torch.from_numpy(np.ascontiguousarray(subject.source_views))[None]
            with torch.no_grad():
                codes = encode_views(model, views)
            datastore.write_priors(datastore.priors_path(out_dir, sid), codes[0].numpy())
            written.append(sid)
        except (OSError, ValueError) as exc:
            failures[sid] = str(exc)
    return written, failures


def encode_views(model: ShapeMAE, views):
    """Codes only, no decoding: (N, 4, H, W) views -> (N, 4, code_dim)."""
    return torch.stack([model.encode(views[:, i], i) for i in range(N_SOURCES)], dim=1)


__all__ = ["ShapeMAE", "ShapeEncoder", "ShapeDecoder", "LossWeights", "LossTerms",
           "shape_mae_loss", "code_regularizer", "encode_priors", "INTRA_PAIRS",
           "INTER_PAIRS", "TARGET_VIEWS", "SOURCE_VIEWS"]
