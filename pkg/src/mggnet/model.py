"""Full network: backbone taps -> group attention -> graph update -> heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .backbone import BackboneConfig, FeatureMap, backbone_forward, init_backbone, tap_shapes
from .gal import GroupFeature, gal_forward_all, init_gal
from .gcl import gcl_forward_all, init_gcl
from .groups import GroupAssignment
from .heads import PredictionSet, attribute_order, base_predictions, fuse_predictions, group_predictions, init_heads
from .params import ParamStore
from .tensor import Tensor, no_grad

VARIANTS = ("full", "base")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig
    assignment: GroupAssignment
    alpha: float = 0.5
    variant: str = "full"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def N(self) -> int:
        return self.assignment.N

    @property
    def K(self) -> int:
        return self.assignment.K

    @property
    def B(self) -> int:
        return self.backbone.B

    @property
    def blocks(self) -> tuple[int, ...]:
        return self.backbone.tap_blocks

    def tap_channels(self) -> list[tuple[int, int]]:
        return [(b, s[0]) for b, s in zip(self.backbone.tap_blocks, tap_shapes(self.backbone))]


@dataclass
class ForwardResult:
    preds: PredictionSet
    taps: list[FeatureMap]
    masks: dict[tuple[int, int], Tensor] = field(default_factory=dict)
    part: dict[tuple[int, int], GroupFeature] = field(default_factory=dict)
    graph: dict[tuple[int, int], GroupFeature] = field(default_factory=dict)
    affinities: dict[int, Tensor] = field(default_factory=dict)


class MGGNet:
    """Parameters are created in the order backbone, gal, gcl, heads from one seeded generator."""

    def __init__(self, config: ModelConfig, seed: int = 0, store: Optional[ParamStore] = None) -> None:
        self.config = config
        self.store = store if store is not None else ParamStore(seed)
        if store is None:
            tc = config.tap_channels()
            init_backbone(self.store, config.backbone)
            if config.variant == "full":
                init_gal(self.store, tc, config.K)
                init_gcl(self.store, tc, config.K)
            init_heads(self.store, config.assignment, tc, config.variant)
        self._order = attribute_order(config.assignment)

    def forward(self, images, mode: str = "train") -> ForwardResult:
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(images)
        taps = backbone_forward(x, cfg.backbone, self.store, mode)
        base = base_predictions(F.global_avg_pool(taps[-1].tensor), self.store)
        if cfg.variant == "base":
            return ForwardResult(PredictionSet(base), taps)
        part, masks = gal_forward_all(taps, self.store, cfg.K, mode)
        graph, aff = gcl_forward_all(part, self.store, cfg.blocks, cfg.K, cfg.alpha)
        gal_y = {b: group_predictions(part, self.store, cfg.assignment, "gal", b, self._order) for b in cfg.blocks}
        gcl_y = {b: group_predictions(graph, self.store, cfg.assignment, "gcl", b, self._order) for b in cfg.blocks}
        fused = fuse_predictions(base, [gcl_y[b] for b in cfg.blocks])
        preds = PredictionSet(base, fused, gal_y, gcl_y)
        return ForwardResult(preds, taps, masks, part, graph, aff)

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Final probabilities [n, N] in eval mode."""
        out = []
        with no_grad():
            for s in range(0, images.shape[0], batch_size):
                out.append(self.forward(images[s : s + batch_size], mode="eval").preds.final().data)
        return np.concatenate(out, axis=0)
