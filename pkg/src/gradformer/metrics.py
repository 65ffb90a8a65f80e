"""Change-class F1, IoU and overall accuracy from confusion counts."""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel counts with change as the positive class. Counts add, so
    dataset-level metrics come from summed counts (micro-averaging)."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @property
    def f1(self):
        return f1(self)

    @property
    def iou(self):
        return iou(self)

    @property
    def oa(self):
        return oa(self)


def _as_binary(mask, name):
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} mask must contain only 0 and 1")
    return arr.astype(bool)


def confusion(pred, gt):
    pred = _as_binary(pred, "prediction")
    gt = _as_binary(gt, "ground-truth")
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, gt.size - tp - fp - fn)


def f1(c):
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 0.0


def iou(c):
    denom = c.tp + c.fp + c.fn
    return c.tp / denom if denom else 0.0


def oa(c):
    """Overall accuracy in percent."""
    return 100.0 * (c.tp + c.tn) / c.total if c.total else 0.0


@dataclass(frozen=True)
class MetricsReport:
    f1: float
    iou: float
    oa: float
    counts: ConfusionCounts

    @classmethod
    def from_counts(cls, counts):
        return cls(f1(counts), iou(counts), oa(counts), counts)

    def to_text(self):
        c = self.counts
        lines = [f"f1={self.f1!r}", f"iou={self.iou!r}", f"oa={self.oa!r}",
                 f"tp={c.tp}", f"fp={c.fp}", f"fn={c.fn}", f"tn={c.tn}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"expected key=value, got {line!r}", lineno)
            values[key.strip()] = value.strip()
        try:
            counts = ConfusionCounts(*(int(values[k]) for k in ("tp", "fp", "fn", "tn")))
            return cls(float(values["f1"]), float(values["iou"]), float(values["oa"]), counts)
        except KeyError as exc:
            raise FormatError(f"report is missing key {exc.args[0]!r}") from None
