"""Group attention: one spatial mask per (block, group) and masked pooling."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import functional as F
from .backbone import FeatureMap
from .functional import RunningStats
from .params import ParamStore
from .tensor import DimensionError, Tensor


@dataclass
class GroupFeature:
    tensor: Tensor  # [batch, C_b]
    block: int
    group: int
    stage: str  # "part" or "graph"


def hidden_channels(c: int) -> int:
    return max(1, c // 2)


def init_gal(store: ParamStore, tap_channels: Sequence[tuple[int, int]], K: int) -> None:
    """``tap_channels`` is a list of (block number, channels)."""
    for b, c in tap_channels:
        h = hidden_channels(c)
        # one buffer per block; group i owns channels [i*h, (i+1)*h)
        store.stats(f"gal.block{b}.bn", K * h)
        for i in range(K):
            p = f"gal.block{b}.group{i}"
            store.fan_in_uniform(f"{p}.conv1.weight", (h, c, 3, 3), c * 9, gain=np.sqrt(2.0))
            store.ones(f"{p}.bn.gamma", (h,))
            store.zeros(f"{p}.bn.beta", (h,))
            store.fan_in_uniform(f"{p}.conv2.weight", (1, h, 1, 1), h)
            store.zeros(f"{p}.conv2.bias", (1,))


def group_attention_forward(
    feature: Tensor, store: ParamStore, block: int, group: int, mode: str = "train"
) -> Tensor:
    """conv3x3 -> BN -> relu -> conv1x1 -> sigmoid; returns a [batch, 1, H, W] mask in [0, 1]."""
    p = f"gal.block{block}.group{group}"
    w1 = store[f"{p}.conv1.weight"]
    if feature.shape[1] != w1.shape[1]:
        raise DimensionError(f"{p}: feature has {feature.shape[1]} channels, module expects {w1.shape[1]}")
    h = F.conv2d(feature, w1, None, padding="same")
    hc = w1.shape[0]
    shared = store.stats(f"gal.block{block}.bn")
    stats = RunningStats(shared.mean[group * hc : (group + 1) * hc], shared.var[group * hc : (group + 1) * hc], shared.momentum)
    h = F.batchnorm2d(h, store[f"{p}.bn.gamma"], store[f"{p}.bn.beta"], mode, stats)
    h = F.relu(h)
    h = F.conv2d(h, store[f"{p}.conv2.weight"], store[f"{p}.conv2.bias"], padding="same")
    return F.sigmoid(h)


def masked_pool(feature: Tensor, mask: Tensor) -> Tensor:
    """Mean over (h, w) of feature * mask, the mask broadcast across channels."""
    if feature.ndim != 4 or mask.ndim != 4 or mask.shape[1] != 1:
        raise DimensionError(f"masked_pool: feature {feature.shape}, mask {mask.shape}")
    if feature.shape[0] != mask.shape[0] or feature.shape[2:] != mask.shape[2:]:
        raise DimensionError(f"masked_pool: feature {feature.shape} and mask {mask.shape} disagree")
    return F.global_avg_pool(feature * mask)


def block_attention_forward(feature: Tensor, store: ParamStore, block: int, K: int, mode: str = "train") -> Tensor:
    """All K masks of one block at once: [batch, K, H, W].

    Same arithmetic as K calls of :func:`group_attention_forward`: the 3x3
    convs are stacked along output channels, batchnorm is per channel, and the
    1x1 convs act on disjoint channel slices.
    """
    names = [f"gal.block{block}.group{i}" for i in range(K)]
    for p in names:
        if f"{p}.conv1.weight" not in store:
            raise KeyError(f"missing attention parameters {p}")
    w1 = F.concat([store[f"{p}.conv1.weight"] for p in names], axis=0)
    if feature.shape[1] != w1.shape[1]:
        raise DimensionError(f"gal block {block}: feature has {feature.shape[1]} channels, modules expect {w1.shape[1]}")
    hc = w1.shape[0] // K
    gamma = F.concat([store[f"{p}.bn.gamma"] for p in names], axis=0)
    beta = F.concat([store[f"{p}.bn.beta"] for p in names], axis=0)
    h = F.conv2d(feature, w1, None, padding="same")
    h = F.relu(F.batchnorm2d(h, gamma, beta, mode, store.stats(f"gal.block{block}.bn")))
    n, _, H, W = h.shape
    h = F.reshape(h, (n, K, hc, H, W))
    w2 = F.stack([F.reshape(store[f"{p}.conv2.weight"], (hc,)) for p in names], axis=0)
    b2 = F.concat([store[f"{p}.conv2.bias"] for p in names], axis=0)
    logits = F.einsum("nkchw,kc->nkhw", h, w2) + F.reshape(b2, (1, K, 1, 1))
    return F.sigmoid(logits)


def gal_forward_all(
    taps: Sequence[FeatureMap], store: ParamStore, K: int, mode: str = "train"
) -> tuple[dict[tuple[int, int], GroupFeature], dict[tuple[int, int], Tensor]]:
    """Part-based features and masks for every (block, group), keyed in block-then-group order.

    Masks are [batch, 1, H, W]; features are [batch, C_b].
    """
    feats: dict[tuple[int, int], GroupFeature] = {}
    masks: dict[tuple[int, int], Tensor] = {}
    for fm in taps:
        m = block_attention_forward(fm.tensor, store, fm.block, K, mode)
        _, C, H, W = fm.tensor.shape
        pooled = F.einsum("nchw,nkhw->nkc", fm.tensor, m) * (1.0 / (H * W))
        for i in range(K):
            masks[(fm.block, i)] = m[:, i : i + 1]
            feats[(fm.block, i)] = GroupFeature(pooled[:, i, :], fm.block, i, "part")
    return feats, masks


def write_pgm(path: os.PathLike, image: np.ndarray) -> None:
    """8-bit binary PGM; ``image`` values in [0, 1] map linearly to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM image must be 2-d")
    px = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path: os.PathLike) -> np.ndarray:
    """Return the raw 0..255 pixels of a binary PGM as a uint8 array."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = raw[pos : pos + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def mask_filename(block: int, group: int, sample: str | int) -> str:
    return f"mask_b{block}_g{group}_s{sample}.pgm"
