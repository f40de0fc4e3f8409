"""
ControlSR Gradient Checks
Finite-difference checks in float64 for every trainable building block.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.autograd import gradcheck
from torch.func import functional_call

from micro import micro_config, micro_model, randomize_zero_inits
from src.data.toyset import ToyPairs
from src.diffusion.schedule import add_noise, make_schedule
from src.model.backbone import ConditionEmbedder, ResBlock
from src.model.control import ZeroConv
from src.model.lora import LoRAConv2d, LoRALinear
from src.model.wxattn import WindowCrossAttention
from src.storage.checkpoint import Stage
from src.training.trainer import TrainState, controlsr_loss


def _leaf(*shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=torch.float64).requires_grad_(True)


def _check(module, names, inputs, call=None, **kwargs):
    """gradcheck over `inputs` and the named parameters of `module`"""
    module = module.double()
    randomize_zero_inits(module)
    own = dict(module.named_parameters())
    params = [own[n].detach().clone().requires_grad_(True) for n in names]
    n_in = len(inputs)

    def fn(*tensors):
        replaced = dict(zip(names, tensors[n_in:]))
        if call is not None:
            return call(replaced, *tensors[:n_in])
        return functional_call(module, replaced, tuple(tensors[:n_in]))

    assert gradcheck(fn, (*inputs, *params), **kwargs)


def test_lora_linear_factors():
    torch.manual_seed(0)
    layer = LoRALinear(6, 5, rank=2)
    _check(layer, ["lora.A", "lora.B", "base.weight"], [_leaf(3, 6)])


def test_lora_conv_factors():
    torch.manual_seed(0)
    layer = LoRAConv2d(3, 4, rank=2, stride=2)
    _check(layer, ["lora.A", "lora.B", "base.bias"], [_leaf(1, 3, 6, 6)])


def test_window_cross_attention():
    torch.manual_seed(0)
    layer = WindowCrossAttention(4, 4, heads=2, key_window=2)
    with torch.no_grad():
        layer.bias_table.normal_()
    _check(layer, ["bias_table", "to_q.weight"], [_leaf(1, 4, 4, 4), _leaf(1, 4, 4, 4, seed=1)])


def test_resblock():
    torch.manual_seed(0)
    block = ResBlock(4, 8, 16, lora_rank=2)
    _check(block, ["conv1.base.weight", "conv2.lora.A", "temb.weight", "norm1.weight"],
           [_leaf(1, 4, 4, 4), _leaf(1, 16, seed=1)])


def test_zero_conv():
    torch.manual_seed(0)
    _check(ZeroConv(4), ["weight", "bias"], [_leaf(1, 4, 3, 3)])


def test_condition_embedder():
    torch.manual_seed(0)
    _check(ConditionEmbedder(8, 6), ["proj.weight"], [_leaf(1, 3, 8, 8)])


def test_full_model_fast():
    model = micro_model(dtype=torch.float64)
    randomize_zero_inits(model, std=0.05)
    lr = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    x_lr = model.latent_lr(lr).detach().requires_grad_(True)
    p = model.condition(lr).detach()
    x_t = _leaf(1, 4, 4, 4)
    t = torch.tensor([17])
    assert gradcheck(lambda a, b: model.eps(a, t, b, p), (x_t, x_lr), fast_mode=True)


class _Objective(nn.Module):
    """Module view of a loss over `model` so functional_call can swap its tensors"""

    def __init__(self, model: nn.Module, loss):
        super().__init__()
        self.model = model
        self.loss = loss

    def forward(self):
        return self.loss()


def _check_all(model, names, loss):
    objective = _Objective(model, loss)
    own = dict(model.named_parameters())
    params = tuple(own[n].detach().clone().requires_grad_(True) for n in names)

    def fn(*tensors):
        return functional_call(objective, {f"model.{n}": v for n, v in zip(names, tensors)}, ())

    assert gradcheck(fn, params, fast_mode=True)


def test_control_loss_every_trainable_tensor():
    config = micro_config()
    model = micro_model(dtype=torch.float64)
    randomize_zero_inits(model, std=0.05)
    state = TrainState.create(model, Stage.CONTROL, config)
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    pairs = ToyPairs.build(1, config.image_size, config.degrade, config.seed)
    hr, lr = pairs.batch([0], dtype=torch.float64)
    noise = torch.randn(1, 4, 4, 4, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    t = torch.tensor([37])

    names = state.store.trainable_names()
    assert {n.split(".")[0] for n in names} == {"vae", "unet", "cond", "dpm", "gspm"}
    assert any(n.startswith("dpm.time_embed.") for n in names)
    assert any(n.startswith("dpm.hint.") for n in names)
    assert any(n.startswith("dpm.enc2_attn.") for n in names)
    _check_all(model, names, lambda: controlsr_loss(hr, lr, state, schedule, noise=noise, timesteps=t))


def test_backbone_loss_every_tensor():
    model = micro_model(dtype=torch.float64)
    randomize_zero_inits(model.unet, std=0.05)
    schedule = make_schedule(100, 1e-4, 0.02)
    gen = torch.Generator().manual_seed(4)
    x0 = torch.randn(1, 4, 4, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(1, 4, 4, 4, generator=gen, dtype=torch.float64)
    t = torch.tensor([60])
    x_t = add_noise(x0, t, eps, schedule)
    names = [n for n, _ in model.unet.named_parameters()]
    _check_all(model.unet, names, lambda: F.mse_loss(model.unet(x_t, t), eps))


if __name__ == '__main__':
    test_lora_linear_factors()
    test_lora_conv_factors()
    test_window_cross_attention()
    test_resblock()
    test_zero_conv()
    test_condition_embedder()
    test_full_model_fast()
    test_control_loss_every_trainable_tensor()
    test_backbone_loss_every_tensor()
    print('Gradient tests passed.')
