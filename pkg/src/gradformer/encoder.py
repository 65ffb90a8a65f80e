"""AFRAR module, encoder blocks, and the four-stage shared (Siamese) encoder."""

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .glfr import GLFR
from .layers import ConvMlp, InstanceNorm2d, Module, stage_embed
from .sea import SEA


class AFRAR(Module):
    """Channel split: the first half goes through GLFR, the second through SEA."""

    def __init__(self, channels, heads=4, lambda_init=0.8, eps=1e-5, attention="differential", rng=None):
        if channels % 16:
            raise ConfigError(f"AFRAR channels {channels} must be divisible by 16")
        self.glfr = GLFR(channels, heads, lambda_init, attention, rng=rng)
        self.sea = SEA(channels // 2, eps)

    def forward(self, x):
        f_glfr, f_sea = T.split(x, 2, axis=1)
        return T.concat([self.glfr(f_glfr), self.sea(f_sea)], axis=1)


class EncoderBlock(Module):
    """Pre-norm residual block: ``y = x + AFRAR(norm1(x)); y + MLP(norm2(y))``."""

    def __init__(self, channels, heads=4, lambda_init=0.8, eps=1e-5, mlp_ratio=4,
                 attention="differential", rng=None):
        self.channels = channels
        self.norm1 = InstanceNorm2d(channels, eps)
        self.afrar = AFRAR(channels, heads, lambda_init, eps, attention, rng=rng)
        self.norm2 = InstanceNorm2d(channels, eps)
        self.mlp = ConvMlp(channels, mlp_ratio, rng=rng)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"encoder block expects [B,{self.channels},H,W], got {x.shape}")
        y = x + self.afrar(self.norm1(x))
        return y + self.mlp(self.norm2(y))


class EncoderStage(Module):
    def __init__(self, index, in_ch, out_ch, depth, heads=4, lambda_init=0.8, eps=1e-5,
                 mlp_ratio=4, attention="differential", rng=None):
        self.embed = stage_embed(index, in_ch, out_ch, eps, rng=rng)
        for i in range(depth):
            setattr(self, f"block{i}", EncoderBlock(out_ch, heads, lambda_init, eps, mlp_ratio,
                                                    attention, rng=rng))
        self.depth = depth

    @property
    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(self.depth)]

    def forward(self, x):
        x = self.embed(x)
        for block in self.blocks:
            x = block(x)
        return x


class SiameseEncoder(Module):
    """Four stages; one parameter set serves both temporal streams."""

    def __init__(self, channels=(64, 96, 128, 256), depths=(3, 3, 4, 3), heads=4, lambda_init=0.8,
                 eps=1e-5, mlp_ratio=4, attention="differential", in_channels=3, rng=None):
        if len(channels) != 4 or len(depths) != 4:
            raise ConfigError("encoder needs exactly four stages")
        rng = rng if rng is not None else np.random.default_rng(0)
        prev = in_channels
        for i, (c, d) in enumerate(zip(channels, depths), start=1):
            setattr(self, f"stage{i}", EncoderStage(i, prev, c, d, heads, lambda_init, eps,
                                                    mlp_ratio, attention, rng=rng))
            prev = c

    @property
    def stages(self):
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    def forward(self, image):
        """Multi-scale features at 1/4, 1/8, 1/16, 1/32 resolution."""
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise DimensionError(f"image size {h}x{w} must be divisible by 32")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def encode_pair(self, pre, post):
        """Run both streams as one batch; returns (pre_features, post_features).

        Instance normalization is per sample, so batching the streams is
        equivalent to two separate passes.
        """
        if pre.shape != post.shape:
            raise DimensionError(f"pre {pre.shape} and post {post.shape} differ")
        b = pre.shape[0]
        feats = self(T.concat([pre, post], axis=0))
        pre_feats = [T.slice_axis(f, 0, 0, b) for f in feats]
        post_feats = [T.slice_axis(f, 0, b, 2 * b) for f in feats]
        return pre_feats, post_feats
