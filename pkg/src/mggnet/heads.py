"""Per-attribute sigmoid heads, prediction fusion and the summed multi-source loss."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import functional as F
from .gal import GroupFeature
from .groups import GroupAssignment
from .params import ParamStore
from .tensor import DimensionError, Tensor, as_tensor

EPS = 1e-12


def init_heads(
    store: ParamStore,
    assignment: GroupAssignment,
    tap_channels: Sequence[tuple[int, int]],
    variant: str = "full",
) -> None:
    """One (weight row, bias) per attribute per source.

    Rows for the attributes of a group are stored together, so
    ``heads.gcl.block3.group1.weight`` has one row per attribute of group 1.
    """
    base_c = tap_channels[-1][1]
    store.fan_in_uniform("heads.base.weight", (assignment.N, base_c), base_c)
    store.zeros("heads.base.bias", (assignment.N,))
    if variant == "base":
        return
    for stage in ("gal", "gcl"):
        for b, c in tap_channels:
            for i, (_, attrs) in enumerate(assignment.groups):
                p = f"heads.{stage}.block{b}.group{i}"
                store.fan_in_uniform(f"{p}.weight", (len(attrs), c), c)
                store.zeros(f"{p}.bias", (len(attrs),))


def predict_head(feature: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """sigmoid(weight . feature + bias) for a single attribute head."""
    feature, weight, bias = as_tensor(feature), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 1 or feature.shape[-1] != weight.shape[0]:
        raise DimensionError(f"predict_head: feature {feature.shape} vs weight {weight.shape}")
    w2 = F.reshape(weight, (1, -1))
    out = F.linear(feature, w2, F.reshape(bias, (1,)))
    return F.sigmoid(F.reshape(out, feature.shape[:-1]))


def attribute_order(assignment: GroupAssignment) -> np.ndarray:
    """Column permutation taking group-concatenated outputs to attribute order."""
    flat = [a for _, attrs in assignment.groups for a in attrs]
    pos = np.empty(len(flat), dtype=np.intp)
    for k, a in enumerate(flat):
        pos[a - 1] = k
    return pos


def group_predictions(
    feats: Mapping[tuple[int, int], GroupFeature],
    store: ParamStore,
    assignment: GroupAssignment,
    stage: str,
    block: int,
    order: Optional[np.ndarray] = None,
) -> Tensor:
    """[batch, N] probabilities for one stage and block, attribute columns 1..N."""
    cols = []
    for i in range(assignment.K):
        p = f"heads.{stage}.block{block}.group{i}"
        cols.append(F.linear(feats[(block, i)].tensor, store[f"{p}.weight"], store[f"{p}.bias"]))
    logits = F.concat(cols, axis=1)
    order = attribute_order(assignment) if order is None else order
    return F.sigmoid(logits[:, order])


def base_predictions(pooled: Tensor, store: ParamStore) -> Tensor:
    return F.sigmoid(F.linear(pooled, store["heads.base.weight"], store["heads.base.bias"]))


def fuse_predictions(base: Tensor, gcl: Sequence[Tensor]) -> Tensor:
    """Average of the base prediction and every per-block graph prediction."""
    if len(gcl) < 1:
        raise ValueError("fusion needs at least one block")
    acc = as_tensor(base)
    for y in gcl:
        acc = acc + y
    return acc * (1.0 / (1 + len(gcl)))


@dataclass
class PredictionSet:
    """All probability tensors for a batch, each [batch, N]."""

    base: Tensor
    fused: Optional[Tensor] = None
    gal: dict[int, Tensor] = field(default_factory=dict)
    gcl: dict[int, Tensor] = field(default_factory=dict)

    def sources(self, blocks: Sequence[int]) -> list[tuple[str, Tensor]]:
        """Sources in loss-summation order: fused, base, GAL per block, GCL per block."""
        if self.fused is None:
            return [("base", self.base)]
        out = [("fused", self.fused), ("base", self.base)]
        for stage, table in (("gal", self.gal), ("gcl", self.gcl)):
            for b in blocks:
                if b not in table:
                    raise KeyError(f"missing {stage} predictions for block {b}")
                out.append((f"{stage}_b{b}", table[b]))
        return out

    def final(self) -> Tensor:
        return self.base if self.fused is None else self.fused


# --------------------------------------------------------------------------
# losses


def bce(y: Tensor, target) -> Tensor:
    """Elementwise -log(y) t - log(1-y)(1-t), y clamped to [eps, 1-eps]."""
    y = F.clip(as_tensor(y), EPS, 1.0 - EPS)
    t = np.asarray(target, dtype=np.float64)
    return -(F.log(y) * t + F.log(1.0 - y) * (1.0 - t))


def weighted_bce(y: Tensor, target, S, S_a) -> Tensor:
    """bce with the positive term scaled by (S - S_a)/S and the negative by S_a/S."""
    S = np.asarray(S, dtype=np.float64)
    S_a = np.asarray(S_a, dtype=np.float64)
    if np.any(S < 1) or np.any(S_a < 0) or np.any(S_a > S):
        raise ValueError("weighted_bce needs 0 <= S_a <= S and S >= 1")
    y = F.clip(as_tensor(y), EPS, 1.0 - EPS)
    t = np.asarray(target, dtype=np.float64)
    return -(F.log(y) * (t * (S - S_a) / S) + F.log(1.0 - y) * ((1.0 - t) * S_a / S))


@dataclass
class LossReport:
    terms: list[tuple[str, float]]
    total: float

    def __len__(self) -> int:
        return len(self.terms)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["term_label", "value"])
        for label, v in self.terms:
            w.writerow([label, repr(v)])
        return buf.getvalue()


def expected_term_count(N: int, B: int) -> int:
    return 2 * N * (B + 1)


def total_loss(
    preds: PredictionSet, labels: np.ndarray, blocks: Sequence[int], mode: str = "plain"
) -> tuple[Tensor, LossReport]:
    """Sum of one batch-averaged loss term per (attribute, source).

    Terms are labelled ``{loss}:{source}:a{index}`` and listed attribute by
    attribute in the source order of :meth:`PredictionSet.sources`.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2:
        raise DimensionError(f"labels must be [batch, N], got {labels.shape}")
    S, N = labels.shape
    sources = preds.sources(blocks)
    if mode == "plain":
        name = "bce"
        per_source = [F.mean(bce(y, labels), axis=0) for _, y in sources]
    elif mode == "balanced":
        name = "weighted_bce"
        S_a = labels.sum(axis=0)
        per_source = [F.mean(weighted_bce(y, labels, S, S_a), axis=0) for _, y in sources]
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    for (src, y) in sources:
        if y.shape != (S, N):
            raise DimensionError(f"{src} predictions have shape {y.shape}, labels {labels.shape}")
    stacked = F.stack(per_source, axis=1)  # [N, n_sources]
    total = F.sum(stacked)
    values = stacked.data
    terms = []
    running = 0.0
    for a in range(N):
        for s, (src, _) in enumerate(sources):
            v = float(values[a, s])
            terms.append((f"{name}:{src}:a{a + 1:02d}", v))
            running += v
    return total, LossReport(terms, running)
