"""Differential amalgamation: fuse a bitemporal feature pair with its difference."""

from . import tensor as T
from .errors import DimensionError
from .layers import Conv2d, Module


class DifferentialAmalgamation(Module):
    """``GELU(conv1x1(concat(pre, post, post - pre)))`` with ``3C -> C`` channels."""

    def __init__(self, channels, rng=None):
        self.channels = channels
        self.proj = Conv2d(3 * channels, channels, 1, rng=rng)

    def pre_activation(self, pre, post):
        if pre.shape != post.shape:
            raise DimensionError(f"pre {pre.shape} and post {post.shape} differ")
        if pre.shape[1] != self.channels:
            raise DimensionError(f"expected {self.channels} channels, got {pre.shape[1]}")
        return self.proj(T.concat([pre, post, post - pre], axis=1))

    def forward(self, pre, post):
        return T.gelu(self.pre_activation(pre, post))
