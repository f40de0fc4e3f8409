"""
ControlSR Window Cross-Attention Tests
"""
import math

import pytest
import torch

from src.errors import ValidationError
from src.model.wxattn import (
    WindowCrossAttention, WindowSpec, aligned_bias, aligned_index, attend, window_merge, window_partition,
)


def test_partition_merge_inverse():
    x = torch.randn(2, 5, 8, 8)
    for side in (1, 2, 4, 8):
        windows = window_partition(x, side)
        assert windows.shape == (2 * (8 // side) ** 2, side * side, 5)
        assert torch.equal(window_merge(windows, side, 8, 8), x)


def test_partition_order_row_major():
    x = torch.arange(16.0).view(1, 1, 4, 4)
    windows = window_partition(x, 2)
    assert windows[:, :, 0].tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]


def test_partition_indivisible():
    with pytest.raises(ValidationError):
        window_partition(torch.randn(1, 1, 6, 6), 4)
    with pytest.raises(ValidationError):
        window_merge(torch.randn(3, 4, 1), 2, 4, 4)


def test_aligned_bias_equal_sides_is_relative_offset():
    s = 3
    table = torch.arange(float((2 * s - 1) ** 2)).view(2 * s - 1, 2 * s - 1)
    bias = aligned_bias(table, s, s)
    for qi in range(s * s):
        for ki in range(s * s):
            dy = ki // s - qi // s
            dx = ki % s - qi % s
            assert bias[qi, ki] == table[dy + s - 1, dx + s - 1]


def test_aligned_bias_coarse_queries():
    # S=2 queries over s=4 keys: query 1 maps to key coordinate 2
    rows, cols = aligned_index(2, 4)
    assert rows.shape == (4, 16)
    q = 3  # (1, 1) -> key grid (2, 2)
    k = 0  # (0, 0): offset -2 on both axes
    assert rows[q, k] == -2 + 3 and cols[q, k] == -2 + 3


def test_aligned_bias_per_head():
    table = torch.randn(4, 3, 3)
    assert aligned_bias(table, 2, 2).shape == (4, 4, 4)
    with pytest.raises(ValidationError):
        aligned_bias(torch.randn(5, 5), 2, 2)


def test_window_spec_matches_counts():
    assert WindowSpec.resolve((8, 8), (8, 8), 4) == WindowSpec(S=4, s=4, N=4)
    assert WindowSpec.resolve((4, 4), (8, 8), 4) == WindowSpec(S=2, s=4, N=4)
    assert WindowSpec.resolve((4, 4), (8, 8), 4, partition=False) == WindowSpec(S=4, s=8, N=1)
    with pytest.raises(ValidationError):
        WindowSpec.resolve((5, 5), (8, 8), 4)
    with pytest.raises(ValidationError):
        WindowSpec.resolve((8, 8), (6, 6), 4)


def test_attend_uniform_when_logits_equal():
    q = torch.zeros(1, 2, 3)
    k = torch.randn(1, 4, 3)
    v = torch.randn(1, 4, 3)
    out, w = attend(q, k, v)
    assert torch.allclose(w, torch.full((1, 2, 4), 0.25))
    assert torch.allclose(out[0, 0], v[0].mean(0), atol=1e-6)


def test_window_attention_shapes_and_residual():
    torch.manual_seed(0)
    layer = WindowCrossAttention(8, 4, heads=2, key_window=4)
    x_d, x_lr = torch.randn(2, 8, 8, 8), torch.randn(2, 4, 8, 8)
    out, weights = layer(x_d, x_lr, return_weights=True)
    assert out.shape == x_d.shape
    assert weights.shape == (2 * 4, 2, 16, 16)
    assert torch.allclose(weights.sum(-1), torch.ones(()))
    with torch.no_grad():
        layer.proj.weight.zero_()
        layer.proj.bias.zero_()
    assert torch.equal(layer(x_d, x_lr), x_d)


def test_window_attention_is_local():
    torch.manual_seed(1)
    layer = WindowCrossAttention(8, 4, heads=2, key_window=4)
    x_d, x_lr = torch.randn(1, 8, 8, 8), torch.randn(1, 4, 8, 8)
    moved = x_lr.clone()
    moved[..., 4:, 4:] += 1.0  # only the bottom-right window
    a, b = layer(x_d, x_lr), layer(x_d, moved)
    assert torch.equal(a[..., :4, :], b[..., :4, :])
    assert not torch.allclose(a[..., 4:, 4:], b[..., 4:, 4:])


def test_bias_table_shifts_weights():
    torch.manual_seed(2)
    layer = WindowCrossAttention(4, 4, heads=1, key_window=2)
    x_d, x_lr = torch.randn(1, 4, 2, 2), torch.randn(1, 4, 2, 2)
    _, before = layer(x_d, x_lr, return_weights=True)
    with torch.no_grad():
        layer.bias_table[0, 1, 1] = 5.0  # zero offset
    _, after = layer(x_d, x_lr, return_weights=True)
    assert float(after[0, 0, 0, 0]) > float(before[0, 0, 0, 0])


def test_bias_table_adapts_to_key_window():
    layer = WindowCrossAttention(4, 4, heads=1, key_window=2, partition=False)
    out = layer(torch.randn(1, 4, 4, 4), torch.randn(1, 4, 4, 4))
    assert out.shape == (1, 4, 4, 4)
    assert layer._table(4).shape == (1, 7, 7)
    assert layer._table(1).shape == (1, 1, 1)


def test_batch_mismatch():
    layer = WindowCrossAttention(4, 4, heads=1, key_window=2)
    with pytest.raises(ValidationError):
        layer(torch.randn(2, 4, 4, 4), torch.randn(1, 4, 4, 4))


def test_scaled_dot_product():
    q = torch.tensor([[[1.0, 0.0, 0.0, 0.0]]])
    k = torch.tensor([[[2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]])
    v = torch.tensor([[[1.0], [0.0]]])
    _, w = attend(q, k, v)
    p = math.exp(1.0) / (math.exp(1.0) + 1.0)  # 2 / sqrt(4) = 1
    assert float(w[0, 0, 0]) == pytest.approx(p)


def test_aligned_index_coarse_query_to_far_key():
    # S=2, s=4: query (0,0) sits on key (0,0); key (3,3) is offset (3,3) -> entry (6,6)
    rows, cols = aligned_index(2, 4)
    assert rows[0, 15] == 6 and cols[0, 15] == 6
    table = torch.arange(49.0).view(7, 7)
    assert aligned_bias(table, 2, 4)[0, 15] == table[6, 6]


def test_attend_ignores_constant_bias_shift():
    torch.manual_seed(3)
    q, k, v = torch.randn(2, 4, 5, 8), torch.randn(2, 4, 7, 8), torch.randn(2, 4, 7, 8)
    bias = torch.randn(4, 5, 7)
    out, w = attend(q, k, v, bias)
    shifted, w_shifted = attend(q, k, v, bias + 3.5)
    assert torch.allclose(out, shifted, atol=1e-5)
    assert torch.allclose(w, w_shifted, atol=1e-5)


def test_window_attention_ignores_constant_bias_shift():
    torch.manual_seed(4)
    layer = WindowCrossAttention(8, 4, heads=2, key_window=4)
    with torch.no_grad():
        layer.bias_table.normal_()
    x_d, x_lr = torch.randn(1, 8, 8, 8), torch.randn(1, 4, 8, 8)
    before = layer(x_d, x_lr)
    with torch.no_grad():
        layer.bias_table.add_(2.0)
    assert torch.allclose(layer(x_d, x_lr), before, atol=1e-5)


def test_single_key_window_passes_values_through():
    # s = 1: every query sees one key, weight 1, out = x_d + proj(V)
    torch.manual_seed(5)
    layer = WindowCrossAttention(8, 4, heads=2, key_window=1)
    x_d, x_lr = torch.randn(2, 8, 4, 4), torch.randn(2, 4, 4, 4)
    out, weights = layer(x_d, x_lr, return_weights=True)
    assert layer.spec(x_d, x_lr) == WindowSpec(S=1, s=1, N=16)
    assert torch.equal(weights, torch.ones_like(weights))
    expected = x_d + layer.proj(layer.to_v(x_lr.permute(0, 2, 3, 1))).permute(0, 3, 1, 2)
    assert torch.allclose(out, expected, atol=1e-6)


def test_window_order_matters():
    x = torch.randn(1, 3, 8, 8)
    windows = window_partition(x, 4)
    swapped = windows[[1, 0, 2, 3]]
    assert not torch.equal(window_merge(swapped, 4, 8, 8), x)

    torch.manual_seed(6)
    layer = WindowCrossAttention(8, 4, heads=2, key_window=4)
    x_d, x_lr = torch.randn(1, 8, 8, 8), torch.randn(1, 4, 8, 8)
    lr_windows = window_partition(x_lr, 4)
    permuted = window_merge(lr_windows[[3, 2, 1, 0]], 4, 8, 8)
    assert not torch.allclose(layer(x_d, permuted), layer(x_d, x_lr))


if __name__ == '__main__':
    test_partition_merge_inverse()
    test_partition_order_row_major()
    test_partition_indivisible()
    test_aligned_bias_equal_sides_is_relative_offset()
    test_aligned_bias_coarse_queries()
    test_aligned_bias_per_head()
    test_window_spec_matches_counts()
    test_attend_uniform_when_logits_equal()
    test_window_attention_shapes_and_residual()
    test_window_attention_is_local()
    test_bias_table_shifts_weights()
    test_bias_table_adapts_to_key_window()
    test_batch_mismatch()
    test_scaled_dot_product()
    test_aligned_index_coarse_query_to_far_key()
    test_attend_ignores_constant_bias_shift()
    test_window_attention_ignores_constant_bias_shift()
    test_single_key_window_passes_values_through()
    test_window_order_matters()
    print('Window attention tests passed.')
