"""Multi-scale decoder producing two-class per-pixel logits."""

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import Conv2d, ConvTranspose2d, Module


class ResidualBlock(Module):
    """``x + conv2(gelu(conv1(x)))`` with 3x3 convolutions."""

    def __init__(self, channels, rng=None):
        self.conv1 = Conv2d(channels, channels, 3, padding=1, rng=rng)
        self.conv2 = Conv2d(channels, channels, 3, padding=1, rng=rng)

    def forward(self, x):
        return x + self.conv2(T.gelu(self.conv1(x)))


class Decoder(Module):
    """Upsample stages 2-4 to stage-1 resolution (nearest), concatenate,
    project to ``width`` channels, then (transpose conv x2 + residual block)
    twice and a 3x3 head to ``num_classes`` logits."""

    def __init__(self, stage_channels=(64, 96, 128, 256), width=256, num_classes=2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stage_channels = tuple(stage_channels)
        self.fuse_proj = Conv2d(sum(stage_channels), width, 1, rng=rng)
        self.up1 = ConvTranspose2d(width, width, 2, 2, 0, rng=rng)
        self.res1 = ResidualBlock(width, rng=rng)
        self.up2 = ConvTranspose2d(width, width, 2, 2, 0, rng=rng)
        self.res2 = ResidualBlock(width, rng=rng)
        self.head = Conv2d(width, num_classes, 3, padding=1, rng=rng)

    def merge(self, fused):
        """Bring every stage to the first stage's resolution and concatenate."""
        if len(fused) != 4:
            raise DimensionError(f"decoder expects 4 feature maps, got {len(fused)}")
        h, w = fused[0].shape[-2:]
        parts = []
        for i, f in enumerate(fused):
            factor = 2 ** i
            if f.shape[-2:] != (h // factor, w // factor) or h % factor or w % factor:
                raise DimensionError(
                    f"stage {i + 1} map is {f.shape[-2:]}, expected {(h // factor, w // factor)}")
            if f.shape[1] != self.stage_channels[i]:
                raise DimensionError(f"stage {i + 1} has {f.shape[1]} channels, expected {self.stage_channels[i]}")
            parts.append(T.repeat_nearest(f, factor))
        return T.concat(parts, axis=1)

    def forward(self, fused):
        x = self.fuse_proj(self.merge(fused))
        x = self.res1(self.up1(x))
        x = self.res2(self.up2(x))
        return self.head(x)


def predict(logits):
    """Per-pixel argmax over two channels; ties resolve to class 0."""
    data = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    if data.ndim != 4 or data.shape[1] != 2:
        raise DimensionError(f"predict expects [B,2,H,W] logits, got {data.shape}")
    return (data[:, 1] > data[:, 0]).astype(np.uint8)
