"""Directed graph attention across the K group features of one block.

For receiving node i and sending node j != i::

    e'_ij = w_ei . relu(W_gi f_j)
    e_i.  = softmax over j != i of e'_ij
    f'_i  = relu((1 - alpha) f_i + alpha * sum_j e_ij W_gi f_j)

Row i of the affinity matrix is what node i receives; nothing ties e_ij to e_ji.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import functional as F
from .gal import GroupFeature
from .params import ParamStore
from .tensor import DimensionError, EngineError, Tensor, as_tensor


class DegenerateGraphError(EngineError):
    pass


def init_gcl(store: ParamStore, tap_channels: Sequence[tuple[int, int]], K: int) -> None:
    for b, d in tap_channels:
        for i in range(K):
            p = f"gcl.block{b}.node{i}"
            store.fan_in_uniform(f"{p}.w_g", (d, d), d)
            store.fan_in_uniform(f"{p}.w_e", (d,), d)


def affinity_logits(f_j: Tensor, w_gi: Tensor, w_ei: Tensor) -> Tensor:
    """Scalar ``w_ei . relu(w_gi @ f_j)``."""
    f_j, w_gi, w_ei = as_tensor(f_j), as_tensor(w_gi), as_tensor(w_ei)
    if w_gi.ndim != 2 or f_j.shape != (w_gi.shape[1],) or w_ei.shape != (w_gi.shape[0],):
        raise DimensionError(f"affinity_logits: f {f_j.shape}, w_g {w_gi.shape}, w_e {w_ei.shape}")
    return F.einsum("d,d->", w_ei, F.relu(F.linear(f_j, w_gi)))


def affinity_normalize(logits: Tensor) -> Tensor:
    """Softmax over the K-1 incoming logits of one node."""
    logits = as_tensor(logits)
    if logits.ndim != 1 or logits.shape[0] < 1:
        raise DegenerateGraphError("a node needs at least one neighbour (K >= 2)")
    return F.softmax_vec(logits)


def gcl_update(features: Tensor, w_g: Tensor, w_e: Tensor, alpha: float) -> tuple[Tensor, Tensor]:
    """One graph update.

    features: [batch, K, D]; w_g: [K, D, D]; w_e: [K, D].
    Returns (refined features [batch, K, D], affinities [batch, K, K] with a zero diagonal).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if features.ndim != 3:
        raise DimensionError(f"gcl_update expects [batch, K, D] features, got {features.shape}")
    _, K, D = features.shape
    if K < 2:
        raise DegenerateGraphError("graph update needs K >= 2 groups")
    if w_g.shape != (K, D, D) or w_e.shape != (K, D):
        raise DimensionError(f"gcl_update: features {features.shape}, w_g {w_g.shape}, w_e {w_e.shape}")
    # transfer[n, i, j, :] = W_gi f_j
    transfer = F.einsum("ide,nje->nijd", w_g, features)
    logits = F.einsum("nijd,id->nij", F.relu(transfer), w_e)
    off_diag = ~np.eye(K, dtype=bool)
    affinity = F.softmax(logits, axis=2, mask=off_diag[None])
    message = F.einsum("nij,nijd->nid", affinity, transfer)
    out = F.relu(features * (1.0 - alpha) + message * alpha)
    return out, affinity


def stacked_params(store: ParamStore, block: int, K: int) -> tuple[Tensor, Tensor]:
    w_g = F.stack([store[f"gcl.block{block}.node{i}.w_g"] for i in range(K)], axis=0)
    w_e = F.stack([store[f"gcl.block{block}.node{i}.w_e"] for i in range(K)], axis=0)
    return w_g, w_e


def gcl_forward_all(
    part: Mapping[tuple[int, int], GroupFeature], store: ParamStore, blocks: Sequence[int], K: int, alpha: float
) -> tuple[dict[tuple[int, int], GroupFeature], dict[int, Tensor]]:
    graph: dict[tuple[int, int], GroupFeature] = {}
    affinities: dict[int, Tensor] = {}
    for b in blocks:
        feats = F.stack([part[(b, i)].tensor for i in range(K)], axis=1)
        w_g, w_e = stacked_params(store, b, K)
        out, aff = gcl_update(feats, w_g, w_e, alpha)
        affinities[b] = aff
        for i in range(K):
            graph[(b, i)] = GroupFeature(out[:, i, :], b, i, "graph")
    return graph, affinities


# --------------------------------------------------------------------------
# export


def minmax_scale(matrix: np.ndarray) -> np.ndarray:
    """Rescale off-diagonal entries to [0, 1]; the diagonal is set to 0.

    A constant off-diagonal maps to all ones.
    """
    m = np.array(matrix, dtype=np.float64)
    K = m.shape[0]
    off = ~np.eye(K, dtype=bool)
    vals = m[off]
    lo, hi = vals.min(), vals.max()
    out = np.zeros_like(m)
    out[off] = (vals - lo) / (hi - lo) if hi > lo else 1.0
    return out


def mean_affinity(batches: Sequence[np.ndarray]) -> np.ndarray:
    """Sample-weighted mean of [batch, K, K] affinity arrays."""
    if not batches or sum(b.shape[0] for b in batches) == 0:
        raise ValueError("cannot average affinities over an empty evaluation set")
    total = sum(b.sum(axis=0) for b in batches)
    m = total / sum(b.shape[0] for b in batches)
    np.fill_diagonal(m, 0.0)
    return m


def write_affinity_csv(path: os.PathLike, matrix: np.ndarray, names: Sequence[str]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["receiver\\sender", *names])
        for name, row in zip(names, matrix):
            w.writerow([name, *(repr(float(v)) for v in row)])
    os.replace(tmp, path)


def read_affinity_csv(path: os.PathLike) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return names, mat


def export_affinity(batches: Sequence[np.ndarray], names: Sequence[str], path: os.PathLike) -> np.ndarray:
    """Write the scaled mean affinity to ``path`` and the unscaled one to ``*.raw.csv``."""
    raw = mean_affinity(batches)
    scaled = minmax_scale(raw)
    path = Path(path)
    write_affinity_csv(path, scaled, names)
    stem = path.name[: -len(".csv")] if path.name.endswith(".csv") else path.name
    write_affinity_csv(path.with_name(stem + ".raw.csv"), raw, names)
    return scaled
