"""Backbone, projection head, momentum twin, and feature-map extraction.

The backbone is a 4-block conv net (Conv-BN-ReLU, max-pool in the first
blocks until the map reaches the configured side). Embeddings are the
projection head applied to the pooled map, L2-normalized; classifier
features are the pooled map without the head.
"""

from __future__ import annotations

import copy
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig


class EncoderShapeError(ValueError):
    pass


class _ConvBlock(nn.Module):
    def __init__(self, cin, cout, pool):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size=3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.pool = nn.MaxPool2d(2) if pool else nn.Identity()

    def forward(self, x):
        return self.pool(F.relu(self.bn(self.conv(x))))


class Conv4Backbone(nn.Module):
    """Four conv blocks; pooling placed in the leading blocks so the output
    map is map_side x map_side for any power-of-two input side."""

    def __init__(self, input_side: int, channels: int = 64, map_side: int = 4):
        super().__init__()
        if input_side % map_side != 0:
            raise EncoderShapeError(f"input side {input_side} not divisible by map side {map_side}")
        n_pools = int(math.log2(input_side // map_side))
        if 2 ** n_pools * map_side != input_side or n_pools > 4:
            raise EncoderShapeError(
                f"cannot reduce {input_side} to {map_side} with at most 4 pooling stages"
            )
        dims = [3, channels, channels, channels, channels]
        self.blocks = nn.Sequential(
            *[_ConvBlock(dims[i], dims[i + 1], pool=i < n_pools) for i in range(4)]
        )
        self.out_channels = channels
        self.map_side = map_side

    def forward(self, x):
        return self.blocks(x)


class ProjectionHead(nn.Module):
    def __init__(self, dim, embed_dim):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, embed_dim)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class Encoder(nn.Module):
    """Backbone + projection head with shape metadata attached."""

    def __init__(self, cfg: EncoderConfig, input_side: int):
        super().__init__()
        if cfg.arch != "conv4":
            raise EncoderShapeError(f"unknown arch {cfg.arch!r}")
        self.backbone = Conv4Backbone(input_side, cfg.channels, cfg.map_side)
        self.head = ProjectionHead(cfg.channels, cfg.embed_dim)
        self.arch = cfg.arch
        self.input_side = input_side
        self.embed_dim = cfg.embed_dim
        self.channels = cfg.channels
        self.map_side = cfg.map_side

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.input_side or x.shape[3] != self.input_side:
            raise EncoderShapeError(
                f"expected (B, 3, {self.input_side}, {self.input_side}) input, got {tuple(x.shape)}"
            )

    def feature_map(self, x):
        """Pre-pooling backbone output (B, D, H, W); no projection head."""
        self._check_input(x)
        return self.backbone(x)

    def embed(self, x):
        """Unit-norm projection-head embeddings (B, embed_dim)."""
        maps = self.feature_map(x)
        return F.normalize(self.head(maps.mean(dim=(2, 3))), dim=1)

    def metadata(self) -> dict:
        return {
            "arch": self.arch,
            "input_side": self.input_side,
            "channels": self.channels,
            "embed_dim": self.embed_dim,
            "map_side": self.map_side,
        }


def build_encoder(cfg: EncoderConfig, input_side: int, seed: int = 0) -> Encoder:
    """Construct with parameter init drawn from a forked, seeded RNG."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Encoder(cfg, input_side)


def encoder_from_metadata(meta: dict) -> Encoder:
    cfg = EncoderConfig(
        arch=meta["arch"],
        channels=meta["channels"],
        embed_dim=meta["embed_dim"],
        map_side=meta["map_side"],
    )
    return Encoder(cfg, meta["input_side"])


def clone_as_momentum(encoder: Encoder) -> Encoder:
    """Frozen twin: identical parameters, no gradients, eval mode."""
    twin = copy.deepcopy(encoder)
    for p in twin.parameters():
        p.requires_grad_(False)
    twin.eval()
    return twin


@torch.no_grad()
def momentum_update(online: Encoder, target: Encoder, m: float) -> Encoder:
    """Exponential moving average: target <- m * target + (1 - m) * online.

    Applies to parameters and floating-point buffers (BN running stats);
    integer buffers are copied.
    """
    if not (0.0 <= m <= 1.0):
        raise ValueError(f"momentum coefficient must be in [0, 1], got {m}")
    for p_o, p_t in zip(online.parameters(), target.parameters()):
        if p_o.shape != p_t.shape:
            raise EncoderShapeError("online/momentum parameter shapes differ")
        p_t.mul_(m).add_(p_o.detach(), alpha=1.0 - m)
    for b_o, b_t in zip(online.buffers(), target.buffers()):
        if b_t.is_floating_point():
            b_t.mul_(m).add_(b_o.detach(), alpha=1.0 - m)
        else:
            b_t.copy_(b_o)
    return target


def encode(encoder: Encoder, views: torch.Tensor) -> torch.Tensor:
    """Deterministic eval-mode embeddings for a batch of views."""
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            return encoder.embed(views)
    finally:
        encoder.train(was_training)


def extract_feature_map(encoder: Encoder, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Eval-mode feature maps (B, D, H, W) for full images."""
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            chunks = [
                encoder.feature_map(images[i : i + batch_size])
                for i in range(0, len(images), batch_size)
            ]
        return torch.cat(chunks, dim=0)
    finally:
        encoder.train(was_training)


def global_average_pool(maps: torch.Tensor) -> torch.Tensor:
    """Spatial mean of (..., D, H, W) maps."""
    return maps.mean(dim=(-2, -1))
