"""Filter-reduced U-Net with an optional Fuse Block that injects the four
Shape MAE codes at the bottleneck. ``fuse_enabled=False`` is the plain 2D
U-Net baseline; every other weight is shared between the two configurations.
"""
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import blocks
from .errors import InputError, ShapeError
from .phantom import SOURCE_VIEWS

CONV_TYPES = (nn.Conv2d, nn.ConvTranspose2d)


@dataclass(frozen=True)
class MVUNetConfig:
    base_filters: int = 16
    depth: int = 4
    fuse_enabled: bool = True
    num_classes: int = 2
    code_channels: int = 8      # channels per view after reshaping a code

    @property
    def level_filters(self):
        return tuple(self.base_filters * 2 ** k for k in range(self.depth))

    @property
    def bottleneck_channels(self):
        return self.base_filters * 2 ** self.depth

    def to_dict(self):
        return {"base_filters": self.base_filters, "depth": self.depth,
                "fuse_enabled": self.fuse_enabled, "num_classes": self.num_classes,
                "code_channels": self.code_channels}


def _conv_bn_relu(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            blocks.make_norm("batch", cout), blocks.make_act("relu")]


class FuseBlock(nn.Module):
    """p1 = relu(bn(conv3x3(priors))); p2 = conv3x3(p1);
    out = bottleneck + p1 + p2."""

    def __init__(self, prior_channels=32, channels=256):
        super().__init__()
        self.conv1 = nn.Conv2d(prior_channels, channels, 3, padding=1, bias=False)
        self.norm = blocks.make_norm("batch", channels)
        self.act = blocks.make_act("relu")
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)

    def forward(self, priors, bottleneck):
        if priors.shape[-2:] != bottleneck.shape[-2:]:
            raise ShapeError(f"prior grid {tuple(priors.shape[-2:])} does not match bottleneck "
                             f"{tuple(bottleneck.shape[-2:])} (input image must be 16x the code grid)")
        p1 = self.act(self.norm(self.conv1(priors)))
        p2 = self.conv2(p1)
        return bottleneck + p1 + p2


def fuse_block(priors, bottleneck, block: FuseBlock):
    return block(priors, bottleneck)


def fuse_priors(codes, code_channels=8):
    """(N, 4, D) codes -> (N, 4*code_channels, g, g), channel order LA1, LA2, LA3, Mid-V."""
    n, v, d = codes.shape
    g = int(round((d / code_channels) ** 0.5))
    if g * g * code_channels != d:
        raise ShapeError(f"code length {d} cannot be reshaped to {code_channels}x g x g")
    return codes.reshape(n, v * code_channels, g, g)


class MVUNet(nn.Module):
    def __init__(self, config: MVUNetConfig = MVUNetConfig()):
        super().__init__()
        self.config = config
        filters = config.level_filters
        self.down = nn.ModuleList()
        c = 1
        for f in filters:
            self.down.append(nn.Sequential(*_conv_bn_relu(c, f), *_conv_bn_relu(f, f)))
            c = f
        # single conv at the bottleneck level; the fuse block supplies the rest
        self.bottleneck = nn.Sequential(*_conv_bn_relu(c, config.bottleneck_channels))
        c = config.bottleneck_channels
        self.fuse = (FuseBlock(4 * config.code_channels, c) if config.fuse_enabled else None)
        self.up = nn.ModuleList()
        self.decode = nn.ModuleList()
        for f in reversed(filters):
            self.up.append(nn.ConvTranspose2d(c, f, 2, stride=2, bias=False))
            self.decode.append(nn.Sequential(*_conv_bn_relu(2 * f, f), *_conv_bn_relu(f, f)))
            c = f
        self.head = nn.Conv2d(c, config.num_classes, 1)

    def _codes_tensor(self, codes, like):
        if isinstance(codes, (list, tuple)):
            for k, z in enumerate(codes):
                if z is None:
                    raise InputError(f"missing shape code for view {SOURCE_VIEWS[k]}")
            if len(codes) != 4:
                raise InputError(f"expected 4 shape codes, got {len(codes)}")
            codes = torch.stack([torch.as_tensor(z) for z in codes], dim=1)
        codes = torch.as_tensor(codes).to(like.dtype)
        if codes.dim() == 2:
            codes = codes[None]
        if codes.shape[1] != 4:
            raise InputError(f"expected 4 shape codes per image, got {codes.shape[1]}")
        return codes.expand(like.shape[0], -1, -1) if codes.shape[0] == 1 else codes

    def forward(self, image, codes=None):
        x = image
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[:, None]
        size = 2 ** self.config.depth
        if x.shape[-1] % size or x.shape[-2] % size:
            raise ShapeError(f"image size {tuple(x.shape[-2:])} not divisible by {size}")
        if self.fuse is not None:
            if codes is None:
                raise InputError("MV U-Net needs the four shape codes (LA1, LA2, LA3, Mid-V)")
            codes = self._codes_tensor(codes, x)
        elif codes is not None:
            warnings.warn("fuse block disabled; shape codes ignored", RuntimeWarning, stacklevel=2)

        skips = []
        for stage in self.down:
            x = stage(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        if self.fuse is not None:
            x = self.fuse(fuse_priors(codes, self.config.code_channels), x)
        for up, dec, skip in zip(self.up, self.decode, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def mv_unet_forward(model: MVUNet, image, codes):
    return model(image, codes)


def unet2d(base_filters=16, **kw):
    return MVUNet(MVUNetConfig(base_filters=base_filters, fuse_enabled=False, **kw))


def unet2d_forward(model: MVUNet, image):
    return model(image)


def count_conv_weights(model: nn.Module) -> int:
    """Total kernel elements of all convolution layers (biases and norms excluded)."""
    return sum(m.weight.numel() for m in model.modules() if isinstance(m, CONV_TYPES))


def shared_state(src: MVUNet, dst: MVUNet):
    """Copy every weight that exists in both models (fuse block excluded)."""
    own = dst.state_dict()
    dst.load_state_dict({k: v for k, v in src.state_dict().items() if k in own}, strict=False)
    return dst
