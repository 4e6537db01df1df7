"""Mean prediction accuracy and mean balanced accuracy over attributes."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass
class MetricCounters:
    """Per-attribute confusion counts. Merging is associative and commutative."""

    T: int
    P: np.ndarray  # positives
    P_correct: np.ndarray
    I: np.ndarray  # negatives  # noqa: E741
    I_correct: np.ndarray

    @classmethod
    def zeros(cls, n_attrs: int) -> "MetricCounters":
        z = lambda: np.zeros(n_attrs, dtype=np.int64)  # noqa: E731
        return cls(0, z(), z(), z(), z())

    @property
    def N(self) -> int:
        return self.P.shape[0]

    @property
    def correct(self) -> np.ndarray:
        return self.P_correct + self.I_correct

    def merge(self, other: "MetricCounters") -> "MetricCounters":
        if other.N != self.N:
            raise ValueError("cannot merge counters over different attribute counts")
        return MetricCounters(
            self.T + other.T,
            self.P + other.P,
            self.P_correct + other.P_correct,
            self.I + other.I,
            self.I_correct + other.I_correct,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MetricCounters):
            return NotImplemented
        return self.T == other.T and all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.P, self.P_correct, self.I, self.I_correct),
                (other.P, other.P_correct, other.I, other.I_correct),
            )
        )


def accumulate(counters: MetricCounters, probs, labels, threshold: float = 0.5) -> MetricCounters:
    """Add a batch. ``probs``/``labels`` are [batch, N] (or [N] for one sample).

    A prediction is positive iff prob >= threshold.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels)).astype(bool)
    if probs.shape != labels.shape or probs.shape[1] != counters.N:
        raise ValueError(f"probs {probs.shape} / labels {labels.shape} vs {counters.N} attributes")
    pred = probs >= threshold
    pos = labels
    neg = ~labels
    return MetricCounters(
        counters.T + probs.shape[0],
        counters.P + pos.sum(axis=0),
        counters.P_correct + (pred & pos).sum(axis=0),
        counters.I + neg.sum(axis=0),
        counters.I_correct + (~pred & neg).sum(axis=0),
    )


@dataclass
class EvalReport:
    pred_acc: np.ndarray
    bal_acc: np.ndarray  # NaN where an attribute has a single class
    mean_prediction: float
    mean_balanced: float
    threshold: float
    names: Optional[Sequence[str]] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "name", "pred_acc", "bal_acc"])
        names = self.names or [f"attr{a:02d}" for a in range(1, len(self.pred_acc) + 1)]
        for a, (name, p, b) in enumerate(zip(names, self.pred_acc, self.bal_acc), start=1):
            w.writerow([a, name, repr(float(p)), "" if np.isnan(b) else repr(float(b))])
        w.writerow(["MEAN", "", repr(self.mean_prediction), repr(self.mean_balanced)])
        return buf.getvalue()


def finalize(counters: MetricCounters, threshold: float = 0.5, names: Optional[Sequence[str]] = None) -> EvalReport:
    if counters.T < 1:
        raise ValueError("no samples were accumulated")
    pred_acc = counters.correct / counters.T
    defined = (counters.P > 0) & (counters.I > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        bal = (counters.P_correct / counters.P + counters.I_correct / counters.I) / 2.0
    bal = np.where(defined, bal, np.nan)
    if not defined.all():
        missing = [int(a) + 1 for a in np.flatnonzero(~defined)]
        warnings.warn(f"balanced accuracy undefined for single-class attributes {missing}", stacklevel=2)
    mean_bal = float(np.mean(bal[defined])) if defined.any() else float("nan")
    return EvalReport(pred_acc, bal, float(np.mean(pred_acc)), mean_bal, threshold, names)


def evaluate(probs, labels, threshold: float = 0.5, names: Optional[Sequence[str]] = None) -> EvalReport:
    probs = np.asarray(probs)
    c = accumulate(MetricCounters.zeros(probs.shape[-1]), probs, labels, threshold)
    return finalize(c, threshold, names)
