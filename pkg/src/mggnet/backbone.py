"""Plain multi-block CNN exposing intermediate feature maps at tap blocks.

Each block is ``conv_count`` x (conv3x3 -> batchnorm -> relu); the first conv
of a downsampling block has stride 2. Blocks are numbered from 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .params import ParamStore
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    conv_count: int = 1
    downsample: int = 1

    def __post_init__(self) -> None:
        if self.downsample not in (1, 2):
            raise ValueError("downsample must be 1 or 2")
        if self.out_channels < 1 or self.conv_count < 1:
            raise ValueError("out_channels and conv_count must be positive")


@dataclass(frozen=True)
class BackboneConfig:
    input_shape: tuple[int, int, int]
    blocks: tuple[BlockSpec, ...]
    tap_blocks: tuple[int, ...]

    def __post_init__(self) -> None:
        taps = tuple(self.tap_blocks)
        if not taps:
            raise ValueError("tap_blocks must be nonempty")
        if list(taps) != sorted(set(taps)):
            raise ValueError("tap_blocks must be sorted and unique")
        if taps[0] < 1 or taps[-1] > len(self.blocks):
            raise ValueError(f"tap_blocks {taps} out of range 1..{len(self.blocks)}")

    @property
    def B(self) -> int:
        return len(self.tap_blocks)

    @property
    def last_tap(self) -> int:
        return self.tap_blocks[-1]

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        blocks = tuple(
            BlockSpec(*b) if isinstance(b, (list, tuple)) else BlockSpec(**b) for b in d["blocks"]
        )
        return cls(tuple(d["input_shape"]), blocks, tuple(d["tap_blocks"]))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "blocks": [[b.out_channels, b.conv_count, b.downsample] for b in self.blocks],
            "tap_blocks": list(self.tap_blocks),
        }

    @classmethod
    def desk(cls) -> "BackboneConfig":
        """3x64x64 input, four halving blocks of 16/32/64/128 channels, taps 3 and 4."""
        return cls((3, 64, 64), tuple(BlockSpec(c, 1, 2) for c in (16, 32, 64, 128)), (3, 4))

    @classmethod
    def synthetic(cls) -> "BackboneConfig":
        """Default for 32x32 synthetic images: taps at 8x8 (block 3) and 4x4 (block 4)."""
        blocks = (BlockSpec(8, 1, 2), BlockSpec(16, 1, 2), BlockSpec(16, 1, 1), BlockSpec(32, 1, 2))
        return cls((3, 32, 32), blocks, (3, 4))

    @classmethod
    def tiny(cls) -> "BackboneConfig":
        return cls((3, 16, 16), (BlockSpec(4, 1, 2), BlockSpec(6, 1, 1), BlockSpec(8, 1, 2)), (2, 3))

    @classmethod
    def reference(cls) -> "BackboneConfig":
        """Shape-only stand-in for the full-scale 224x224 network."""
        blocks = (BlockSpec(64, 2, 2), BlockSpec(64, 2, 2), BlockSpec(128, 2, 2), BlockSpec(512, 2, 2))
        return cls((3, 224, 224), blocks, (3, 4))


def block_output_shapes(config: BackboneConfig) -> list[tuple[int, int, int]]:
    """(C, H, W) after every block; raises if a downsample would not divide evenly."""
    _, h, w = config.input_shape
    out = []
    for b, spec in enumerate(config.blocks, start=1):
        if spec.downsample == 2:
            if h % 2 or w % 2:
                raise DimensionError(f"block {b}: spatial size {h}x{w} is not divisible by 2")
            h, w = h // 2, w // 2
        out.append((spec.out_channels, h, w))
    return out


def tap_shapes(config: BackboneConfig) -> list[tuple[int, int, int]]:
    shapes = block_output_shapes(config)
    return [shapes[b - 1] for b in config.tap_blocks]


@dataclass
class FeatureMap:
    tensor: Tensor
    block: int

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]


def init_backbone(store: ParamStore, config: BackboneConfig) -> None:
    c_in = config.input_shape[0]
    for b, spec in enumerate(config.blocks[: config.last_tap], start=1):
        for k in range(spec.conv_count):
            prefix = f"backbone.block{b}.conv{k}"
            store.fan_in_uniform(f"{prefix}.weight", (spec.out_channels, c_in, 3, 3), c_in * 9, gain=np.sqrt(2.0))
            store.ones(f"{prefix}.bn.gamma", (spec.out_channels,))
            store.zeros(f"{prefix}.bn.beta", (spec.out_channels,))
            store.stats(f"{prefix}.bn", spec.out_channels)
            c_in = spec.out_channels


def backbone_forward(
    images: Tensor, config: BackboneConfig, store: ParamStore, mode: str = "train"
) -> list[FeatureMap]:
    """Run blocks 1..last tap; return the tapped feature maps in block order."""
    if images.ndim != 4 or tuple(images.shape[1:]) != tuple(config.input_shape):
        raise DimensionError(f"backbone expects [B, {config.input_shape}], got {images.shape}")
    block_output_shapes(config)
    x = images
    taps: list[FeatureMap] = []
    for b, spec in enumerate(config.blocks[: config.last_tap], start=1):
        for k in range(spec.conv_count):
            prefix = f"backbone.block{b}.conv{k}"
            stride = 2 if (k == 0 and spec.downsample == 2) else 1
            x = F.conv2d(x, store[f"{prefix}.weight"], None, padding="same", stride=stride)
            x = F.batchnorm2d(x, store[f"{prefix}.bn.gamma"], store[f"{prefix}.bn.beta"], mode, store.stats(f"{prefix}.bn"))
            x = F.relu(x)
        if b in config.tap_blocks:
            taps.append(FeatureMap(x, b))
    return taps
