"""On/off classification and power regression metrics."""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateError, ShapeError

REPORT_FIELDS = ("tp", "tn", "fp", "fn", "acc", "f1", "mre", "mae", "n_samples", "degenerate_f1")


@dataclass(frozen=True)
class Counts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def n(self):
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other):
        return Counts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int
    acc: float
    f1: float
    mre: float
    mae: float
    n_samples: int
    degenerate_f1: bool

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def confusion(pred_on, true_on):
    p = np.asarray(pred_on, dtype=bool).reshape(-1)
    t = np.asarray(true_on, dtype=bool).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"label length mismatch: {p.size} vs {t.size}")
    return Counts(tp=int(np.sum(p & t)), tn=int(np.sum(~p & ~t)),
                  fp=int(np.sum(p & ~t)), fn=int(np.sum(~p & t)))


def accuracy(c):
    if c.n == 0:
        raise DegenerateError("accuracy of zero samples")
    return (c.tp + c.tn) / c.n


def f1(c):
    """Returns ``(f1, degenerate)``; degenerate when TP+FP+FN == 0."""
    if c.n == 0:
        raise DegenerateError("f1 of zero samples")
    if c.tp + c.fp + c.fn == 0:
        return 0.0, True
    return c.tp / (c.tp + 0.5 * (c.fp + c.fn)), False


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise DegenerateError("no samples")
    return p, t


def mae(pred, truth):
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def mre(pred, truth, literal=False, scale=None):
    """Mean of ``|pred - truth| / max(truth)``.

    ``literal=True`` sums instead of averaging (the un-normalised variant,
    kept for audit). ``scale`` overrides ``max(truth)`` as the denominator.
    """
    p, t = _pair(pred, truth)
    denom = float(np.max(t)) if scale is None else float(scale)
    if denom <= 0:
        raise DegenerateError("relative error undefined: truth is all zero")
    err = np.abs(p - t) / denom
    return float(err.sum() if literal else err.mean())


def report(pred_power, true_power, pred_on, true_on, fallback_scale=None):
    """Build a :class:`MetricsReport` from power traces and on/off labels.

    When the truth trace is identically zero, ``fallback_scale`` (typically the
    appliance cutoff) normalises MRE instead of ``max(truth)``.
    """
    c = confusion(pred_on, true_on)
    p, t = _pair(pred_power, true_power)
    if p.size != c.n:
        raise ShapeError("power and label arrays differ in length")
    scale = None
    if np.max(t) <= 0:
        if fallback_scale is None:
            raise DegenerateError("relative error undefined: truth is all zero")
        scale = fallback_scale
    score, degenerate = f1(c)
    return MetricsReport(tp=c.tp, tn=c.tn, fp=c.fp, fn=c.fn, acc=accuracy(c), f1=score,
                         mre=mre(p, t, scale=scale), mae=mae(p, t), n_samples=c.n,
                         degenerate_f1=degenerate)
