"""scikit-learn style wrapper around model construction and training.

``X`` holds image pairs as ``[n, 2, 3, H, W]`` floats in ``[0, 1]`` (index 0
is the pre-change image) and ``y`` holds ``[n, H, W]`` binary masks.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .data_io import BitemporalDataset
from .errors import DimensionError
from .metrics import confusion
from .model import PRESETS, build
from .training import TrainConfig, evaluate, train


def check_image_pairs(X, multiple=32):
    """Validate and convert ``X`` to a float32 ``[n, 2, 3, H, W]`` array."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5 or X.shape[1:3] != (2, 3):
        raise DimensionError(f"X must be [n, 2, 3, H, W], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X contains no samples")
    if X.shape[3] % multiple or X.shape[4] % multiple:
        raise DimensionError(f"image size {X.shape[3]}x{X.shape[4]} must be divisible by {multiple}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains NaN or infinity")
    return X


def check_masks(y, X):
    """Validate ``y`` against ``X`` and convert to uint8 ``{0, 1}``."""
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[3:]:
        raise DimensionError(f"y must be {(X.shape[0],) + X.shape[3:]}, got {y.shape}")
    labels = np.unique(y)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError(f"y must be binary 0/1, found labels {labels[:10]}")
    return y.astype(np.uint8)


class ChangeDetector(ClassifierMixin, BaseEstimator):
    """Per-pixel binary change classifier.

    Parameters mirror the training configuration fields. ``lr=None`` uses
    the initial learning rate of ``preset``.
    """

    def __init__(self, preset="tiny", epochs=30, lr=None, batch_size=2, loss="cross_entropy",
                 attention="differential", weight_decay=0.01, augment_flips=True,
                 random_state=0, verbose=False):
        self.preset = preset
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.loss = loss
        self.attention = attention
        self.weight_decay = weight_decay
        self.augment_flips = augment_flips
        self.random_state = random_state
        self.verbose = verbose

    def _configs(self):
        from .config import TRAIN_PRESETS

        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        seed = int(self.random_state or 0)
        model_cfg = PRESETS[self.preset](attention=self.attention, seed=seed).validate()
        base = TRAIN_PRESETS[self.preset]()
        train_cfg = TrainConfig(
            lr0=base.lr0 if self.lr is None else float(self.lr), epochs=int(self.epochs),
            batch=int(self.batch_size), weight_decay=float(self.weight_decay), seed=seed,
            loss=self.loss, augment_flips=bool(self.augment_flips), decay_epochs=base.decay_epochs,
        ).validate()
        return model_cfg, train_cfg

    def fit(self, X, y, eval_set=None):
        """Train from scratch; ``eval_set=(X_val, y_val)`` picks the best epoch."""
        X = check_image_pairs(X)
        y = check_masks(y, X)
        model_cfg, train_cfg = self._configs()
        train_set = BitemporalDataset(X[:, 0], X[:, 1], y)
        val_set = None
        if eval_set is not None:
            Xv = check_image_pairs(eval_set[0])
            val_set = BitemporalDataset(Xv[:, 0], Xv[:, 1], check_masks(eval_set[1], Xv))
        self.model_ = build(model_cfg)
        log = print if self.verbose else None
        result = train(self.model_, train_set, val_set, train_cfg, log=log)
        self.model_.load_state_dict(result.best_state)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array([0, 1])
        return self

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        # fully convolutional, so any multiple-of-32 size is accepted
        return check_image_pairs(X)

    def decision_function(self, X, batch=4):
        """Logit margin ``z1 - z0`` per pixel, shape ``[n, H, W]``."""
        X = self._check_X(X)
        out = []
        with T.no_grad():
            for lo in range(0, len(X), batch):
                chunk = X[lo:lo + batch]
                logits = self.model_(T.Tensor(chunk[:, 0]), T.Tensor(chunk[:, 1])).data
                out.append(logits[:, 1] - logits[:, 0])
        return np.concatenate(out)

    def predict_proba(self, X):
        """Per-pixel class probabilities, shape ``[n, 2, H, W]``."""
        margin = self.decision_function(X).astype(np.float64)
        p1 = 0.5 * (1.0 + np.tanh(0.5 * margin))
        return np.stack([1.0 - p1, p1], axis=1)

    def predict(self, X):
        """Binary masks; ties go to no-change."""
        return (self.decision_function(X) > 0).astype(np.uint8)

    def score(self, X, y, sample_weight=None):
        """Micro-averaged change-class F1 (not accuracy)."""
        X = self._check_X(X)
        y = check_masks(y, X)
        return confusion(self.predict(X), y).f1

    def evaluate(self, X, y):
        """Confusion counts on ``(X, y)``."""
        X = self._check_X(X)
        dataset = BitemporalDataset(X[:, 0], X[:, 1], check_masks(y, X))
        return evaluate(self.model_, dataset)
