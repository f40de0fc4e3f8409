"""
ControlSR LoRA Tests
"""
import pytest
import torch
import torch.nn.functional as F

from src.errors import ValidationError
from src.model.lora import LoraAdapter, LoRAConv2d, LoRALinear, adapted_layers, lora_apply, lora_merge


def test_fresh_adapter_is_identity():
    torch.manual_seed(0)
    layer = LoRALinear(6, 5, rank=2)
    x = torch.randn(3, 6)
    assert torch.equal(layer(x), layer.base(x))
    assert torch.all(layer.lora.B == 0)
    assert layer.lora.A.std() > 0


def test_rank_one_update():
    adapter = LoraAdapter(3, 2, rank=1, scale=0.5)
    with torch.no_grad():
        adapter.A.copy_(torch.tensor([[1.0, 2.0, 3.0]]))
        adapter.B.copy_(torch.tensor([[1.0], [-1.0]]))
    x = torch.tensor([[1.0, 0.0, 1.0]])
    out = lora_apply(torch.zeros(1, 2), x, adapter)
    assert out.tolist() == [[2.0, -2.0]]


def test_full_rank_identity_down_projection():
    # r = in_features, A = I, scale 1: out = base(x) + B x
    torch.manual_seed(0)
    layer = LoRALinear(4, 6, rank=4)
    assert layer.lora.rank == 4
    B = torch.randn(6, 4)
    with torch.no_grad():
        layer.lora.A.copy_(torch.eye(4))
        layer.lora.B.copy_(B)
    x = torch.randn(3, 4)
    assert torch.allclose(layer(x), layer.base(x) + x @ B.T, atol=1e-6)


def test_rank_bounds():
    with pytest.raises(ValidationError):
        LoraAdapter(4, 4, rank=5)
    with pytest.raises(ValidationError):
        LoraAdapter(4, 4, rank=0)
    # layers clamp to the smaller side; rank 0 means no adapter
    assert LoRALinear(4, 3, rank=16).lora.rank == 3
    assert LoRALinear(4, 3, rank=0).lora is None


def test_merge_matches_adapted_forward():
    torch.manual_seed(1)
    layer = LoRALinear(8, 4, rank=2, scale=2.0)
    with torch.no_grad():
        layer.lora.B.normal_()
    x = torch.randn(5, 8)
    expected = layer(x)
    merged = lora_merge(layer.base.weight, layer.lora)
    assert torch.allclose(F.linear(x, merged, layer.base.bias), expected, atol=1e-5)


def test_merge_twice_adds_twice_but_module_guards():
    torch.manual_seed(2)
    layer = LoRALinear(4, 4, rank=2)
    with torch.no_grad():
        layer.lora.B.normal_()
    w = layer.base.weight.detach().clone()
    delta = layer.lora.delta()
    twice = lora_merge(lora_merge(w, layer.lora), layer.lora)
    assert torch.allclose(twice, w + 2 * delta, atol=1e-6)

    x = torch.randn(2, 4)
    before = layer(x)
    layer.merge()
    layer.merge()
    assert layer.merged
    assert torch.allclose(layer(x), before, atol=1e-5)


def test_conv_adapter_matches_unfolded_matrix():
    torch.manual_seed(3)
    conv = LoRAConv2d(3, 5, 3, stride=2, rank=2, scale=0.7)
    with torch.no_grad():
        conv.lora.B.normal_()
    x = torch.randn(2, 3, 8, 8)
    weight = lora_merge(conv.base.weight, conv.lora)
    expected = F.conv2d(x, weight, conv.base.bias, stride=2, padding=1)
    assert torch.allclose(conv(x), expected, atol=1e-5)
    assert torch.equal(conv(x, use_lora=False), conv.base(x))


def test_pointwise_conv_adapter():
    torch.manual_seed(4)
    conv = LoRAConv2d(4, 6, 1, rank=3)
    with torch.no_grad():
        conv.lora.B.normal_()
    conv.merge()
    x = torch.randn(1, 4, 3, 3)
    assert torch.allclose(conv(x), conv.base(x))


def test_shape_mismatch():
    adapter = LoraAdapter(4, 4, rank=2)
    with pytest.raises(ValidationError):
        lora_apply(torch.zeros(1, 4), torch.zeros(1, 5), adapter)
    with pytest.raises(ValidationError):
        lora_merge(torch.zeros(4, 5), adapter)


def test_adapted_layers_census():
    model = torch.nn.Sequential(LoRALinear(4, 4, rank=2), LoRALinear(4, 4, rank=0), LoRAConv2d(2, 2, rank=1))
    assert len(adapted_layers(model)) == 2


if __name__ == '__main__':
    test_fresh_adapter_is_identity()
    test_rank_one_update()
    test_full_rank_identity_down_projection()
    test_rank_bounds()
    test_merge_matches_adapted_forward()
    test_merge_twice_adds_twice_but_module_guards()
    test_conv_adapter_matches_unfolded_matrix()
    test_pointwise_conv_adapter()
    test_shape_mismatch()
    test_adapted_layers_census()
    print('LoRA tests passed.')
