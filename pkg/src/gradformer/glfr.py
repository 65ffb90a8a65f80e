"""Global-Local Feature Refinement: differential multi-head attention with a
local-feature branch.

Two softmax attention maps are computed from channel halves of the query and
key projections; their weighted difference ``A1 - lam * A2`` attends to the
values. The scalar ``lam`` is reparameterized through four learnable vectors.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import Conv2d, Module, Parameter

DEFAULT_HEADS = 4
DEFAULT_LAMBDA_INIT = 0.8

# score tensors above this many elements are evaluated one sample at a time
# when no graph is being recorded
_CHUNK_ELEMENTS = 1 << 24


def head_dim(input_dim, heads):
    """Channels per attention head: ``floor(input_dim / (4 * heads))``."""
    if input_dim <= 0 or heads <= 0:
        raise ConfigError("input_dim and heads must be positive")
    hd = input_dim // (4 * heads)
    if hd == 0:
        raise ConfigError(f"input_dim {input_dim} too small for {heads} heads (needs >= {4 * heads})")
    return hd


def compute_lambda(lq1, lk1, lq2, lk2, lambda_init=DEFAULT_LAMBDA_INIT):
    """``exp(lq1 . lk1) - exp(lq2 . lk2) + lambda_init`` as a 0-d tensor."""
    first = T.exp(T.sum(lq1 * lk1))
    second = T.exp(T.sum(lq2 * lk2))
    return first - second + lambda_init


@dataclass
class AttentionMaps:
    a1: np.ndarray
    a2: np.ndarray
    a: np.ndarray


def _to_heads(x, heads):
    """[B, C, H, W] -> [B, heads, C/heads, H*W]."""
    b, c, h, w = x.shape
    if c % heads:
        raise ConfigError(f"{c} channels do not split into {heads} heads")
    return T.reshape(x, (b, heads, c // heads, h * w))


def _attention_map(q, k, scale):
    """softmax over keys of q^T k * scale; q, k are [B, h, d, N] -> [B, h, N, N]."""
    scores = T.matmul(T.transpose(q, -1, -2), k) * scale
    return T.softmax(scores, axis=-1)


def differential_attention(q, k, v, lam, heads, return_maps=False):
    """Differential attention output reshaped back to [B, C_v, H, W].

    ``q`` and ``k`` carry both halves along channels; ``v`` has ``C_v``
    channels. No renormalization is applied to the difference map, so its
    rows sum to ``1 - lam``.
    """
    if q.shape != k.shape:
        raise DimensionError(f"query {q.shape} and key {k.shape} differ")
    b, cq, h, w = q.shape
    if v.shape[0] != b or v.shape[2:] != (h, w):
        raise DimensionError(f"value {v.shape} does not match query {q.shape}")
    if cq % (2 * heads) or v.shape[1] % heads:
        raise ConfigError(f"channels q={cq}, v={v.shape[1]} do not divide across {heads} heads")
    lam = lam if isinstance(lam, T.Tensor) else T.Tensor(np.asarray(lam, dtype=q.dtype))
    if (not T.is_grad_enabled() and not return_maps and b > 1
            and b * heads * (h * w) ** 2 > _CHUNK_ELEMENTS):
        parts = [differential_attention(q[i:i + 1], k[i:i + 1], v[i:i + 1], lam, heads) for i in range(b)]
        return T.concat(parts, axis=0)

    q1, q2 = T.split(q, 2, axis=1)
    k1, k2 = T.split(k, 2, axis=1)
    d = cq // 2 // heads
    scale = 1.0 / np.sqrt(d)
    a1 = _attention_map(_to_heads(q1, heads), _to_heads(k1, heads), scale)
    a2 = _attention_map(_to_heads(q2, heads), _to_heads(k2, heads), scale)
    a = a1 - lam * a2
    vh = _to_heads(v, heads)  # [B, h, dv, N]
    out = T.matmul(a, T.transpose(vh, -1, -2))  # [B, h, N, dv]
    out = T.reshape(T.permute(out, (0, 1, 3, 2)), (b, v.shape[1], h, w))
    if return_maps:
        return out, AttentionMaps(a1.data, a2.data, a.data)
    return out


def simple_attention(q, k, v, heads):
    """Single-softmax multi-head attention, same layout as the differential form."""
    b, cq, h, w = q.shape
    d = cq // heads
    a = _attention_map(_to_heads(q, heads), _to_heads(k, heads), 1.0 / np.sqrt(d))
    vh = _to_heads(v, heads)
    out = T.matmul(a, T.transpose(vh, -1, -2))
    return T.reshape(T.permute(out, (0, 1, 3, 2)), (b, v.shape[1], h, w))


class GLFR(Module):
    """Operates on the ``C/2``-channel half of a stage with ``C`` channels.

    ``attention="differential"`` projects Q and K to ``C/2`` channels and
    splits them; ``attention="simple"`` projects them to ``C/4`` and uses one
    softmax map without lambda.
    """

    def __init__(self, stage_channels, heads=DEFAULT_HEADS, lambda_init=DEFAULT_LAMBDA_INIT,
                 attention="differential", rng=None):
        if stage_channels % 16:
            raise ConfigError(f"stage channels {stage_channels} must be divisible by 16")
        if attention not in ("differential", "simple"):
            raise ConfigError(f"unknown attention variant {attention!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        c_half, c_quarter = stage_channels // 2, stage_channels // 4
        self.heads = heads
        self.lambda_init = lambda_init
        self.attention = attention
        self.h_dim = head_dim(stage_channels, heads)
        qk_out = c_half if attention == "differential" else c_quarter
        self.wq = Conv2d(c_half, qk_out, 1, rng=rng)
        self.wk = Conv2d(c_half, qk_out, 1, rng=rng)
        self.wv = Conv2d(c_half, c_quarter, 1, rng=rng)
        self.local_proj = Conv2d(c_half, c_quarter, 1, rng=rng)
        if attention == "differential":
            self.lambda_q1 = Parameter(rng.normal(0.0, 0.1, self.h_dim))
            self.lambda_k1 = Parameter(rng.normal(0.0, 0.1, self.h_dim))
            self.lambda_q2 = Parameter(rng.normal(0.0, 0.1, self.h_dim))
            self.lambda_k2 = Parameter(rng.normal(0.0, 0.1, self.h_dim))

    @property
    def in_channels(self):
        return self.wq.in_channels

    def lam(self):
        return compute_lambda(self.lambda_q1, self.lambda_k1, self.lambda_q2, self.lambda_k2,
                              self.lambda_init)

    def qkv(self, x):
        return self.wq(x), self.wk(x), self.wv(x)

    def attend(self, x, return_maps=False):
        q, k, v = self.qkv(x)
        if self.attention == "simple":
            return simple_attention(q, k, v, self.heads)
        return differential_attention(q, k, v, self.lam(), self.heads, return_maps=return_maps)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"GLFR expects [B,{self.in_channels},H,W], got {x.shape}")
        local = self.local_proj(x)
        return T.concat([local, self.attend(x)], axis=1)
