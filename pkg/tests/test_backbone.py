import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mggnet.backbone import BackboneConfig, BlockSpec, backbone_forward, block_output_shapes, init_backbone, tap_shapes
from mggnet.params import ParamStore
from mggnet.tensor import DimensionError, Tensor, no_grad


def test_desk_tap_shapes():
    assert tap_shapes(BackboneConfig.desk()) == [(64, 8, 8), (128, 4, 4)]


def test_reference_mask_scales():
    shapes = tap_shapes(BackboneConfig.reference())
    assert [s[1:] for s in shapes] == [(28, 28), (14, 14)]


def test_forward_shapes_and_order():
    cfg = BackboneConfig.synthetic()
    store = ParamStore(0)
    init_backbone(store, cfg)
    x = np.random.default_rng(0).uniform(size=(2, *cfg.input_shape))
    with no_grad():
        taps = backbone_forward(Tensor(x), cfg, store, "train")
    assert [t.block for t in taps] == [3, 4]
    assert [t.tensor.shape[1:] for t in taps] == tap_shapes(cfg)


def test_zero_batch_eval_is_finite():
    cfg = BackboneConfig.desk()
    store = ParamStore(0)
    init_backbone(store, cfg)
    with no_grad():
        taps = backbone_forward(Tensor(np.zeros((2, 3, 64, 64))), cfg, store, "eval")
    assert all(np.isfinite(t.tensor.data).all() for t in taps)


def test_indivisible_input():
    cfg = BackboneConfig((3, 10, 10), tuple(BlockSpec(4, 1, 2) for _ in range(3)), (3,))
    with pytest.raises(DimensionError):
        block_output_shapes(cfg)


def test_invalid_taps():
    with pytest.raises(ValueError):
        BackboneConfig((3, 8, 8), (BlockSpec(4),), (2,))
    with pytest.raises(ValueError):
        BackboneConfig((3, 8, 8), (BlockSpec(4), BlockSpec(4)), (2, 1))


def test_taps_alias_true_activations():
    cfg = BackboneConfig.synthetic()
    store = ParamStore(0)
    init_backbone(store, cfg)
    x = Tensor(np.random.default_rng(1).uniform(size=(2, *cfg.input_shape)))

    def run():
        with no_grad():
            return [t.tensor.data.copy() for t in backbone_forward(x, cfg, store, "eval")]

    f3, f4 = run()
    store["backbone.block2.conv0.weight"].data[0, 0, 1, 1] += 0.5
    g3, g4 = run()
    assert not np.allclose(f3, g3) and not np.allclose(f4, g4)
    store["backbone.block4.conv0.weight"].data[0, 0, 1, 1] += 0.5
    h3, h4 = run()
    np.testing.assert_array_equal(h3, g3)
    assert not np.allclose(h4, g4)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 3).flatmap(
        lambda n_blocks: st.tuples(
            st.lists(st.tuples(st.integers(1, 4), st.integers(1, 2), st.sampled_from([1, 2])), min_size=n_blocks, max_size=n_blocks),
            st.lists(st.integers(1, n_blocks), min_size=1, unique=True).map(sorted),
        )
    )
)
def test_shapes_are_pure_function_of_config(spec):
    blocks, taps = spec
    cfg = BackboneConfig((2, 8, 8), tuple(BlockSpec(*b) for b in blocks), tuple(taps))
    store = ParamStore(0)
    init_backbone(store, cfg)
    with no_grad():
        out = backbone_forward(Tensor(np.ones((2, 2, 8, 8))), cfg, store, "train")
    assert [t.tensor.shape[1:] for t in out] == tap_shapes(cfg)
    h = 8
    for b, spec_b in enumerate(cfg.blocks, start=1):
        h //= spec_b.downsample
        if b in cfg.tap_blocks:
            assert out[cfg.tap_blocks.index(b)].tensor.shape[2] == h
