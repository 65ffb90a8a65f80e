"""Full change-detection network: configuration, construction, and introspection."""

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .decoder import Decoder, predict
from .encoder import SiameseEncoder
from .errors import ConfigError, DimensionError
from .fusion import DifferentialAmalgamation
from .layers import Module

ATTENTION_VARIANTS = ("differential", "simple")

# parameter count reported for the published model
REFERENCE_PARAMS = 10.90e6


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple = (64, 96, 128, 256)
    stage_depths: tuple = (3, 3, 4, 3)
    heads: int = 4
    lambda_init: float = 0.8
    eps: float = 1e-5
    mlp_ratio: int = 4
    decoder_width: int = 384
    num_classes: int = 2
    attention: str = "differential"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))

    def violations(self):
        problems = []
        if len(self.stage_channels) != 4:
            problems.append(f"stage_channels needs 4 entries, got {len(self.stage_channels)}")
        if len(self.stage_depths) != 4:
            problems.append(f"stage_depths needs 4 entries, got {len(self.stage_depths)}")
        for c in self.stage_channels:
            if c <= 0 or c % 16:
                problems.append(f"stage channel {c} is not a positive multiple of 16")
        for d in self.stage_depths:
            if d < 0:
                problems.append(f"stage depth {d} is negative")
        if self.heads <= 0:
            problems.append(f"heads must be positive, got {self.heads}")
        elif any(c // (4 * self.heads) == 0 for c in self.stage_channels if c > 0):
            problems.append(f"some stage has fewer than {4 * self.heads} channels for {self.heads} heads")
        else:
            for c in self.stage_channels:
                if c > 0 and (c // 4) % self.heads:
                    problems.append(f"stage channel {c}: C/4 not divisible by {self.heads} heads")
        if not 0.0 <= self.eps <= 1e-5:
            problems.append(f"eps {self.eps} outside [0, 1e-5]")
        if self.mlp_ratio <= 0:
            problems.append("mlp_ratio must be positive")
        if self.decoder_width <= 0:
            problems.append("decoder_width must be positive")
        if self.num_classes != 2:
            problems.append(f"num_classes must be 2, got {self.num_classes}")
        if self.attention not in ATTENTION_VARIANTS:
            problems.append(f"attention must be one of {ATTENTION_VARIANTS}, got {self.attention!r}")
        return problems

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    def replace(self, **changes):
        return replace(self, **changes)


def default_config(**overrides):
    return ModelConfig(**overrides)


def tiny_config(**overrides):
    """Small configuration used for gradient checks and desk-scale training."""
    base = dict(stage_channels=(16, 32, 48, 64), stage_depths=(1, 1, 1, 1), decoder_width=32)
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {"default": default_config, "tiny": tiny_config}


class GradFormer(Module):
    """Shared encoder -> per-stage differential amalgamation -> decoder."""

    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.enc = SiameseEncoder(cfg.stage_channels, cfg.stage_depths, cfg.heads, cfg.lambda_init,
                                  cfg.eps, cfg.mlp_ratio, cfg.attention, rng=rng)
        for i, c in enumerate(cfg.stage_channels, start=1):
            setattr(self, f"da{i}", DifferentialAmalgamation(c, rng=rng))
        self.dec = Decoder(cfg.stage_channels, cfg.decoder_width, cfg.num_classes, rng=rng)

    @property
    def fusers(self):
        return [self.da1, self.da2, self.da3, self.da4]

    def _check_inputs(self, pre, post):
        if pre.shape != post.shape:
            raise DimensionError(f"pre {pre.shape} and post {post.shape} differ")
        if pre.ndim != 4 or pre.shape[1] != 3:
            raise DimensionError(f"images must be [B,3,H,W], got {pre.shape}")

    def features(self, pre, post):
        """Intermediate tensors keyed by role; used for shape audits."""
        self._check_inputs(pre, post)
        pre_f, post_f = self.enc.encode_pair(T.as_tensor(pre), T.as_tensor(post))
        fused = [da(a, b) for da, a, b in zip(self.fusers, pre_f, post_f)]
        merged = self.dec.merge(fused)
        logits = self.dec(fused)
        return {"pre": pre_f, "post": post_f, "fused": fused, "merged": merged, "logits": logits}

    def forward(self, pre, post):
        self._check_inputs(pre, post)
        pre_f, post_f = self.enc.encode_pair(T.as_tensor(pre), T.as_tensor(post))
        fused = [da(a, b) for da, a, b in zip(self.fusers, pre_f, post_f)]
        return self.dec(fused)

    def predict(self, pre, post):
        with T.no_grad():
            return predict(self(pre, post))


def build(cfg):
    """Construct a model whose parameters are a pure function of ``cfg``."""
    return GradFormer(cfg)


def count_parameters(model):
    return int(sum(p.size for p in model.parameters()))


def parameter_groups(model):
    """Scalar counts per encoder stage, fusion, and decoder."""
    groups = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        if parts[0] == "enc":
            key = f"enc.{parts[1]}"
        elif parts[0].startswith("da"):
            key = "fusion"
        else:
            key = "decoder"
        groups[key] = groups.get(key, 0) + p.size
    return groups
