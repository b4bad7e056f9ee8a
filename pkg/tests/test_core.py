import numpy as np
import pytest

from mgic.autograd import Tensor, finite_difference_check, no_grad
from mgic.core import (
    BlockTemplate,
    BottleneckBlock,
    ChannelShortcut,
    MgicConfig,
    build_mgic_block,
    channel_shortcut,
    effective_group_size,
    init_transfer,
    level_widths,
    make_identity_,
    num_levels,
    resnet_bottleneck_forward,
)
from mgic.cost import count_params
from mgic.errors import ConfigurationError, DimensionError
from oracles import channel_sensitivity, np_batch_norm, randomize_norms, two_level_transcription
from mgic.ops import conv2d_direct


def _block(c, s_g, s_c, seed=0, template=None, dtype=np.float64):
    config = MgicConfig(s_g, s_c, template or BlockTemplate("simple", 3))
    return build_mgic_block(c, config, rng=np.random.default_rng(seed), dtype=dtype)


@pytest.mark.parametrize("c,s_c,n", [(16, 4, 2), (64, 64, 0), (48, 8, 2), (64, 8, 3)])
def test_num_levels(c, s_c, n):
    assert num_levels(c, s_c) == n


def test_num_levels_rejects_small_input():
    with pytest.raises(ConfigurationError):
        num_levels(4, 8)


def test_level_widths_three_grids():
    assert level_widths(16, 4) == [16, 8, 4]
    assert level_widths(48, 8) == [48, 24, 12]


@pytest.mark.parametrize("s_g,widths,expected", [(64, [120, 40], 40), (8, [64], 8), (16, [24], 12),
                                                  (5, [7], 1)])
def test_effective_group_size(s_g, widths, expected):
    assert effective_group_size(s_g, widths) == expected


def test_transfer_rows_are_stochastic_and_positive():
    pair = init_transfer(32, 8, np.random.default_rng(0), dtype=np.float64)
    for conv in (pair.R, pair.P):
        w = conv.weight.data
        assert (w > 0).all()
        np.testing.assert_allclose(w.sum(axis=(1, 2, 3)), 1.0, atol=1e-6)


def test_transfers_preserve_constants():
    pair = init_transfer(16, 4, np.random.default_rng(1), dtype=np.float64)
    x = Tensor(np.full((2, 16, 3, 3), 2.5))
    coarse = pair.restrict(x)
    np.testing.assert_allclose(coarse.data, 2.5, rtol=1e-12)
    np.testing.assert_allclose(pair.prolong(coarse).data, 2.5, rtol=1e-12)


def test_descent_chain_preserves_constants():
    block = _block(64, 8, 8, seed=2)
    x = Tensor(np.full((1, 64, 2, 2), -1.25))
    for pair in block.transfers:
        x = pair.restrict(x)
    assert x.shape[1] == 8
    np.testing.assert_allclose(x.data, -1.25, rtol=1e-12)


def test_odd_transfer_group_rejected():
    with pytest.raises(ConfigurationError):
        init_transfer(12, 3, np.random.default_rng(0))


def test_block_structure_three_levels():
    block = _block(16, 4, 4)
    assert len(block.transfers) == 2
    assert [r.width for r in block.relaxations] == [16, 8]
    assert [r.conv.groups for r in block.relaxations] == [4, 2]
    assert block.coarse.width == 4 and block.coarse.conv.groups == 1


def test_degenerate_block_is_bare_template():
    block = _block(8, 4, 8)
    assert block.n_levels == 0 and block.transfers == []
    x = np.random.default_rng(3).standard_normal((4, 8, 3, 3))
    np.testing.assert_array_equal(block(Tensor(x)).data, block.coarse(Tensor(x)).data)


def test_parameters_are_named_and_unique():
    block = _block(16, 4, 4)
    names = [p.name for p in block.parameters()]
    assert all(names) and len(set(names)) == len(names)
    assert "level0/transfer/R/weight" in names and "coarse/conv/weight" in names


def test_worked_example_parameter_total():
    block = _block(64, 8, 8)
    assert count_params(block, include_norm=False) == 5120 + 2560 + 1280 + 576 == 9536


def test_incompatible_group_size_names_level():
    with pytest.raises(ConfigurationError, match="level 1"):
        _block(48, 16, 8)  # grouped widths 48, 24; 16 fails at 24
    with pytest.raises(ConfigurationError, match="level 2"):
        _block(32, 16, 4)  # grouped widths 32, 16, 8
    # clamping fixes it
    block = build_mgic_block(48, MgicConfig(16, 8), rng=np.random.default_rng(0), clamp=True)
    assert block.config.s_g == 12


def test_channel_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        _block(16, 4, 4)(Tensor(np.ones((1, 8, 2, 2))))


def test_forward_preserves_shape():
    block = _block(32, 8, 4)
    x = Tensor(np.random.default_rng(4).standard_normal((3, 32, 5, 6)))
    assert block(x).shape == (3, 32, 5, 6)


@pytest.mark.parametrize("template", [BlockTemplate("simple", 3), BlockTemplate("bottleneck", 3, 2.0)])
def test_identity_preservation(template):
    block = make_identity_(_block(16, 4, 4, seed=5, template=template))
    rng = np.random.default_rng(6)
    for _ in range(5):
        x = rng.standard_normal((4, 16, 3, 3))
        assert np.abs(block(Tensor(x)).data - x).max() < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_two_level_block_matches_transcription(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.choice([8, 16, 32]))
    block = _block(c, 4, c // 2, seed=seed)
    for mod in block.modules():
        if hasattr(mod, "gamma"):
            mod.gamma.data[...] = rng.uniform(0.5, 1.5, mod.gamma.shape)
            mod.beta.data[...] = rng.standard_normal(mod.beta.shape) * 0.3
    assert block.n_levels == 1
    x = rng.standard_normal((3, c, 4, 4))
    np.testing.assert_allclose(block(Tensor(x)).data, two_level_transcription(block, x), atol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_full_coupling(seed):
    rng = np.random.default_rng(seed)
    block = _block(16, 4, 4, seed=seed)
    randomize_norms(block, rng, c=16)
    sens = channel_sensitivity(block, 16, rng)
    assert (sens > 1e-12).all()


def test_single_grouped_relaxation_is_block_diagonal():
    rng = np.random.default_rng(0)
    relax = BlockTemplate("simple", 3).instantiate(16, 4, rng=rng, dtype=np.float64)
    randomize_norms(relax, rng, c=16)
    sens = channel_sensitivity(relax, 16, rng)
    mask = np.kron(np.eye(4), np.ones((4, 4))).astype(bool)
    assert np.count_nonzero(sens > 1e-12) == 64
    assert (sens[mask] > 1e-12).all() and not sens[~mask].any()


def test_block_gradient():
    rng = np.random.default_rng(7)
    block = _block(8, 4, 4, seed=7)
    weights = Tensor(rng.standard_normal((2, 8, 3, 3)))
    x = rng.standard_normal((2, 8, 3, 3))
    err = finite_difference_check(lambda t: (block(t) * weights).sum(), x, atol=1e-9)
    assert err < 1e-4


def test_shortcut_identity_and_shapes():
    rng = np.random.default_rng(8)
    layer = ChannelShortcut(8, 8, rng=rng, dtype=np.float64).set_identity_()
    x = rng.standard_normal((2, 8, 5, 5))
    np.testing.assert_array_equal(channel_shortcut(Tensor(x), 8, 1, layer).data, x)
    wide = ChannelShortcut(16, 32, stride=2, rng=rng)
    assert wide(Tensor(np.ones((2, 16, 8, 8)))).shape == (2, 32, 4, 4)
    assert wide.num_parameters() == 288


def test_shortcut_rejects_mismatched_request():
    layer = ChannelShortcut(8, 16, rng=np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        channel_shortcut(Tensor(np.ones((1, 8, 4, 4))), 8, 1, layer)
    with pytest.raises(ConfigurationError):
        ChannelShortcut(8, 8, stride=3)


def test_bottleneck_zero_residual_is_identity():
    block = BottleneckBlock(8, 8, 2.0, rng=np.random.default_rng(9), dtype=np.float64)
    block.zero_residual_()
    x = np.random.default_rng(10).standard_normal((3, 8, 4, 4))
    np.testing.assert_array_equal(block(Tensor(x)).data, x)


def test_bottleneck_matches_transcription():
    rng = np.random.default_rng(11)
    block = BottleneckBlock(6, 6, 2.0, rng=rng, dtype=np.float64)
    x = rng.standard_normal((3, 6, 4, 4))

    def conv(h, layer):
        return conv2d_direct(h, layer.weight.data, padding=layer.padding, groups=layer.groups)

    def nrelu(h, norm):
        return np.maximum(np_batch_norm(h, norm.gamma.data, norm.beta.data), 0)

    h = conv(nrelu(x, block.norm1), block.conv1)
    h = conv(nrelu(h, block.norm2), block.conv2)
    h = conv(nrelu(h, block.norm3), block.conv3)
    np.testing.assert_allclose(block(Tensor(x)).data, x + h, atol=1e-6)


def test_grouped_bottleneck_residual_is_block_diagonal():
    rng = np.random.default_rng(12)
    block = BottleneckBlock(8, 4, 1.0, rng=rng, dtype=np.float64)
    randomize_norms(block, rng, c=8)
    sens = channel_sensitivity(block, 8, rng) - np.eye(8)  # drop the skip path
    mask = np.kron(np.eye(2), np.ones((4, 4))).astype(bool)
    assert np.abs(sens[~mask]).max() < 1e-8
    assert (np.abs(sens[mask]) > 0).any()


def test_bottleneck_rejects_bad_group():
    with pytest.raises(ConfigurationError):
        BottleneckBlock(8, 3)


def test_resnet_bottleneck_forward_is_exported():
    block = BottleneckBlock(4, 4, rng=np.random.default_rng(0), dtype=np.float64)
    block.eval()
    x = Tensor(np.ones((1, 4, 3, 3)))
    with no_grad():
        out = resnet_bottleneck_forward(x, block.conv1, block.conv2, block.conv3,
                                        (block.norm1, block.norm2, block.norm3))
    np.testing.assert_array_equal(out.data, block(x).data)
