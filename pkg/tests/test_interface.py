import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stutterdet.backbone import LayerActivations
from stutterdet.interface import (
    HConvInterface,
    SingleLayerInterface,
    WeightedSumInterface,
    build_interface,
    export_learned_weights,
    hconv_aggregate,
    hconv_level_count,
    read_weights,
    select_layer,
    weighted_sum_aggregate,
    write_weights,
)


def acts(L=4, T=6, D=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    return LayerActivations(torch.randn(L + 1, T, D, generator=g), 50.0)


@pytest.mark.parametrize("n,levels", [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (13, 4), (25, 5)])
def test_level_count_is_ceil_log2(n, levels):
    assert hconv_level_count(n) == levels == (math.ceil(math.log2(n)) if n > 1 else 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 7), st.integers(1, 6))
def test_hconv_output_shape(entries, T, D):
    m = HConvInterface(entries, D)
    out = m(torch.randn(entries, T, D))
    assert out.shape == (T, D)
    assert m.depth == hconv_level_count(entries)


def test_hconv_starts_close_to_pair_average():
    a = acts()
    m = HConvInterface(5, 5)
    # a positive-valued stack keeps GELU near identity
    stack = a.stack.abs() + 3.0
    out = m(stack)
    x = stack
    for _ in range(m.depth):
        if x.shape[0] % 2:
            x = torch.cat([x, x[-1:]])
        x = (x[0::2] + x[1::2]) / 2
    assert torch.allclose(out, x[0], rtol=0.35)


def test_hconv_rejects_wrong_layer_count():
    with pytest.raises(ValueError):
        HConvInterface(3, 5)(acts(L=4).stack)


def test_weighted_sum_starts_as_mean():
    a = acts()
    out = weighted_sum_aggregate(a, WeightedSumInterface(5)).frames
    assert torch.allclose(out, a.stack.mean(0), atol=1e-6)


def test_weighted_sum_with_raw_tensor_matches_manual_softmax():
    a = acts()
    raw = torch.tensor([0.5, -1.0, 2.0, 0.0, 0.3])
    w = torch.softmax(raw, 0)
    out = weighted_sum_aggregate(a, raw).frames
    assert torch.allclose(out, (w[:, None, None] * a.stack).sum(0), atol=1e-6)


def test_weighted_sum_rejects_wrong_layer_count():
    with pytest.raises(ValueError):
        WeightedSumInterface(3)(acts(L=4).stack)


def test_select_layer_and_bounds():
    a = acts()
    assert torch.equal(select_layer(a, 2).frames, a.stack[2])
    with pytest.raises(IndexError):
        select_layer(a, 5)
    with pytest.raises(IndexError):
        SingleLayerInterface(5, 7)


def test_hconv_aggregate_wraps_module():
    a = acts()
    m = HConvInterface(5, 5)
    assert torch.equal(hconv_aggregate(a, m).frames, m(a.stack))


def test_build_interface_kinds():
    assert isinstance(build_interface("hconv", 3, 4), HConvInterface)
    assert isinstance(build_interface("weighted_sum", 3, 4), WeightedSumInterface)
    assert build_interface("single_layer:2", 3, 4).layer == 2
    with pytest.raises(ValueError):
        build_interface("attention", 3, 4)


def test_exported_weights_round_trip(tmp_path):
    m = WeightedSumInterface(4)
    with torch.no_grad():
        m.weights.copy_(torch.tensor([1.0, 0.0, -2.0, 0.5]))
    w = export_learned_weights(m)
    assert abs(w.sum() - 1) < 1e-12 and (w > 0).all()
    write_weights(w, tmp_path / "w.txt")
    assert np.array_equal(read_weights(tmp_path / "w.txt"), w)
