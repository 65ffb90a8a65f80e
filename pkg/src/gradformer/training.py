"""Losses, AdamW, the step learning-rate schedule, and the training loop."""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .metrics import ConfusionCounts, confusion

logger = logging.getLogger(__name__)

LOSSES = ("cross_entropy", "focal", "miou")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _check_target(logits, target):
    target = np.asarray(target)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise DimensionError(f"logits must be [B,2,H,W], got {logits.shape}")
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"target {target.shape} does not match logits {logits.shape}")
    if not np.isin(target, (0, 1)).all():
        raise ValueError("target values must be 0 or 1")
    return target


def _one_hot(target, dtype):
    y = target.astype(dtype)
    return np.stack([1.0 - y, y], axis=1).astype(dtype)


def cross_entropy_loss(logits, target):
    """Mean over pixels of ``-log p(target)`` with a two-way softmax."""
    target = _check_target(logits, target)
    logp = T.log_softmax(logits, axis=1)
    picked = T.sum(logp * _one_hot(target, logits.dtype), axis=1)
    return -T.mean(picked)


def focal_loss(logits, target, gamma=2.0, alpha=0.25):
    """``-alpha_t (1 - p_t)**gamma log p_t`` averaged over pixels; alpha weights the change class."""
    target = _check_target(logits, target)
    onehot = _one_hot(target, logits.dtype)
    logp_t = T.sum(T.log_softmax(logits, axis=1) * onehot, axis=1)
    p_t = T.exp(logp_t)
    alpha_t = np.where(target == 1, alpha, 1.0 - alpha).astype(logits.dtype)
    one_minus = 1.0 - p_t
    if gamma == 2.0:
        modulator = T.square(one_minus)
    else:
        # (1-p)**gamma through exp/log would hit log(0) at a perfect prediction
        modulator = T.exp(T.log(one_minus + 1e-12) * gamma)
    return -T.mean(modulator * logp_t * alpha_t)


def miou_loss(logits, target):
    """Soft IoU loss on the change-class probability: ``1 - sum(py) / sum(p + y - py)``."""
    target = _check_target(logits, target)
    p = T.slice_axis(T.softmax(logits, axis=1), 1, 1, 2)
    p = T.reshape(p, target.shape)
    y = target.astype(logits.dtype)
    inter = T.sum(p * y)
    union = T.sum(p + y - p * y)
    return 1.0 - inter / union


LOSS_FUNCTIONS = {"cross_entropy": cross_entropy_loss, "focal": focal_loss, "miou": miou_loss}


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                raise ContractError("parameter has no gradient; run backward before stepping")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"step": self.step_count, "m": self.m, "v": self.v}


def adamw_step(params, state, lr):
    """Functional form: advance ``state`` (an :class:`AdamW`) by one update."""
    if state.params != list(params):
        state.params = list(params)
    state.step(lr)


def lr_at(epoch, cfg):
    """Step decay: ``lr0 * factor ** (number of decay epochs <= epoch)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    passed = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.lr0 * cfg.decay_factor ** passed


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    decay_epochs: tuple = (100, 200)
    decay_factor: float = 0.1
    epochs: int = 30
    batch: int = 2
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "cross_entropy"
    augment_flips: bool = True

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def violations(self):
        problems = []
        if not self.lr0 >= 0:
            problems.append(f"lr0 must be non-negative, got {self.lr0}")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            problems.append("decay_epochs must be strictly increasing")
        if self.batch < 1:
            problems.append("batch must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if len(self.betas) != 2:
            problems.append("betas needs two values")
        if self.loss not in LOSSES:
            problems.append(f"loss must be one of {LOSSES}, got {self.loss!r}")
        return problems

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError("invalid training config: " + "; ".join(problems))
        return self

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val_f1: float
    val_iou: float
    val_oa: float

    def line(self):
        return (f"epoch={self.epoch} lr={self.lr:g} loss={self.loss:g} "
                f"val_f1={self.val_f1:g} val_iou={self.val_iou:g} val_oa={self.val_oa:g}")


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_f1: float
    history: list = field(default_factory=list)

    def log_lines(self):
        return [r.line() for r in self.history]


def flip_pair(pre, post, mask, horizontal, vertical):
    if horizontal:
        pre, post, mask = pre[..., ::-1], post[..., ::-1], mask[..., ::-1]
    if vertical:
        pre, post, mask = pre[..., ::-1, :], post[..., ::-1, :], mask[..., ::-1, :]
    return np.ascontiguousarray(pre), np.ascontiguousarray(post), np.ascontiguousarray(mask)


def evaluate(model, dataset, batch=4):
    """Micro-averaged confusion counts of ``model`` on ``dataset``."""
    counts = ConfusionCounts()
    dtype = model.parameters()[0].dtype
    with T.no_grad():
        for lo in range(0, len(dataset), batch):
            pre, post, mask = dataset.batch(range(lo, min(lo + batch, len(dataset))))
            pred = model.predict(pre.astype(dtype), post.astype(dtype))
            counts = counts + confusion(pred, mask)
    return counts


def train(model, train_set, val_set, cfg, log=None):
    """Seeded epoch loop; keeps the parameters with the best validation F1.

    ``log`` is an optional callable receiving each epoch's log line.
    """
    cfg.validate()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if val_set is not None and len(val_set) and val_set.image_shape[1:] != train_set.image_shape[1:]:
        raise DimensionError("train and validation images differ in channel count")
    rng = np.random.default_rng(cfg.seed)
    loss_fn = LOSS_FUNCTIONS[cfg.loss]
    params = model.parameters()
    dtype = params[0].dtype
    opt = AdamW(params, cfg.lr0, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    eval_set = val_set if val_set is not None and len(val_set) else train_set

    result = TrainResult(best_state=model.state_dict(), best_epoch=-1, best_f1=-1.0)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(train_set))
        total, batches = 0.0, 0
        for lo in range(0, len(order), cfg.batch):
            idx = order[lo:lo + cfg.batch]
            pre, post, mask = train_set.batch(idx)
            if cfg.augment_flips:
                flips = rng.integers(0, 2, size=(len(idx), 2))
                items = [flip_pair(pre[i], post[i], mask[i], *flips[i]) for i in range(len(idx))]
                pre = np.stack([it[0] for it in items])
                post = np.stack([it[1] for it in items])
                mask = np.stack([it[2] for it in items])
            opt.zero_grad()
            logits = model(T.Tensor(pre.astype(dtype)), T.Tensor(post.astype(dtype)))
            loss = loss_fn(logits, mask)
            loss.backward()
            opt.step(lr)
            total += float(loss.item())
            batches += 1
        counts = evaluate(model, eval_set)
        record = EpochRecord(epoch, lr, total / batches, counts.f1, counts.iou, counts.oa)
        result.history.append(record)
        if record.val_f1 > result.best_f1:
            result.best_f1 = record.val_f1
            result.best_epoch = epoch
            result.best_state = model.state_dict()
        logger.info(record.line())
        if log is not None:
            log(record.line())
    return result
