"""Selective Embedding Amplification: gated per-channel amplification.

The gate is built from the spatial L2 energy of each channel, normalized by
the root-mean-square energy across channels, and applied as ``1 + tanh``.
With the default initialization (alpha=1, gamma=0, beta=0) the gate is
exactly one and the module is an identity map.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import Module, Parameter

MAX_EPS = 1e-5


def sea_embedding(x, alpha, eps):
    """Per-channel embedding ``alpha * sqrt(sum_hw x**2 + eps)`` -> [B, C]."""
    energy = T.sum(T.square(x), axis=(2, 3))
    return T.reshape(alpha, (1, -1)) * T.sqrt(energy + eps)


def sea_norm_factor(embedding, gamma, eps):
    """``gamma / sqrt(mean_c(E**2) + eps)``, the mean taken over channels."""
    ms = T.mean(T.square(embedding), axis=1, keepdims=True)
    return T.reshape(gamma, (1, -1)) / T.sqrt(ms + eps)


def sea_gate(embedding, norm_factor, beta):
    """``1 + tanh(E * N + beta)``; lies strictly inside (0, 2)."""
    return 1.0 + T.tanh(embedding * norm_factor + T.reshape(beta, (1, -1)))


class SEA(Module):
    def __init__(self, channels, eps=MAX_EPS):
        if not 0.0 <= eps <= MAX_EPS:
            raise ConfigError(f"SEA eps must lie in [0, {MAX_EPS}], got {eps}")
        self.eps = eps
        self.alpha = Parameter(np.ones(channels))
        self.gamma = Parameter(np.zeros(channels))
        self.beta = Parameter(np.zeros(channels))

    @property
    def channels(self):
        return self.alpha.shape[0]

    def gate(self, x):
        e = sea_embedding(x, self.alpha, self.eps)
        n = sea_norm_factor(e, self.gamma, self.eps)
        return sea_gate(e, n, self.beta)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"SEA expects [B,{self.channels},H,W], got {x.shape}")
        g = self.gate(x)
        return x * T.reshape(g, g.shape + (1, 1))
