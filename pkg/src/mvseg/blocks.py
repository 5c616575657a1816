"""Shared network pieces: residual block, normalisation/activation factories,
seeded initialisation, the pixel-wise cross-entropy and a finite-difference
gradient checker."""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, ShapeError

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


def block_constants():
    """Constants recorded into every checkpoint config."""
    return {"leaky_slope": LEAKY_SLOPE, "norm_eps": NORM_EPS, "bn_momentum": BN_MOMENTUM}


def make_norm(kind, channels):
    if kind == "instance":
        return nn.InstanceNorm2d(channels, eps=NORM_EPS, affine=True)
    if kind == "batch":
        return nn.BatchNorm2d(channels, eps=NORM_EPS, momentum=BN_MOMENTUM)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown normalisation {kind!r}")


def make_act(kind):
    if kind == "leaky_relu":
        return nn.LeakyReLU(LEAKY_SLOPE)
    if kind == "relu":
        return nn.ReLU()
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class ResBlockSpec:
    channels: int
    norm: str = "instance"
    act: str = "leaky_relu"


class ResBlock(nn.Module):
    """x + conv2(act(norm(conv1(x)))) with 3x3 convolutions, padding 1."""

    def __init__(self, spec: ResBlockSpec):
        super().__init__()
        c = spec.channels
        self.channels = c
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.norm = make_norm(spec.norm, c)
        self.act = make_act(spec.act)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"ResBlock expects (N, {self.channels}, H, W), got {tuple(x.shape)}")
        return x + self.conv2(self.act(self.norm(self.conv1(x))))


def res_block_forward(x, block: ResBlock):
    """Functional entry for a single C x H x W activation (or a batch)."""
    if x.dim() == 3:
        return block(x.unsqueeze(0)).squeeze(0)
    return block(x)


@dataclass(frozen=True)
class LayerInit:
    scheme: str = "fan_in_uniform"
    seed: int = 0


def init_weights(model: nn.Module, init: LayerInit = LayerInit()):
    """Seeded fan-in scaled uniform init for conv kernels; zero biases;
    unit/zero affine norm parameters. Deterministic given the seed."""
    if init.scheme != "fan_in_uniform":
        raise ValueError(f"unknown init scheme {init.scheme!r}")
    gen = torch.Generator().manual_seed(int(init.seed))
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            w = module.weight
            if isinstance(module, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w.shape[2] * w.shape[3]
            else:
                fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            bound = float(np.sqrt(6.0 / fan_in))
            with torch.no_grad():
                w.copy_(torch.rand(w.shape, generator=gen, dtype=w.dtype) * 2 * bound - bound)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, (nn.BatchNorm2d, nn.InstanceNorm2d)) and module.affine:
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def zero_init(module: nn.Module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def cross_entropy(logits, target):
    """Mean over pixels of -log softmax(logits)[target].

    ``logits`` is (2, H, W) or (N, 2, H, W); ``target`` the matching binary map.
    """
    if torch.isnan(logits).any():
        raise InputError("cross_entropy received NaN logits")
    if logits.dim() == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ShapeError(f"logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")
    return F.cross_entropy(logits, target.long())


def softmax(logits):
    return torch.softmax(logits, dim=-3)


def grad_check(fn, params, n_probes=20, eps=1e-6, seed=0, floor=1e-8):
    """Max relative error between autograd and central differences.

    ``fn()`` returns a scalar tensor built from ``params``. ``n_probes`` scalar
    entries are drawn uniformly over all parameter elements. Relative error is
    |a - n| / max(|a|, |n|, floor).
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [p.grad.detach().clone() for p in params]

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_probes, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            idx = int(f - offsets[k])
            view = params[k].view(-1)
            orig = view[idx].item()
            view[idx] = orig + eps
            up = fn().item()
            view[idx] = orig - eps
            down = fn().item()
            view[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[k].view(-1)[idx].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
