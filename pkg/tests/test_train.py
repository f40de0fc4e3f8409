"""
ControlSR Training Tests
Freeze tables, the ControlSR loss, stage steps and the staged train loop.
"""
import pytest
import torch

from micro import micro_config, micro_model
from src.data.toyset import ToyPairs
from src.diffusion.schedule import make_schedule
from src.errors import FreezeViolation, PrerequisiteError, UsageError
from src.storage.checkpoint import Checkpoint, Stage, read_checkpoint, write_checkpoint
from src.training.params import ParamStore, is_trainable
from src.training.trainer import (
    TrainState, control_step, controlsr_loss, load_prerequisite, pretrain_backbone_step, pretrain_vae_step,
    train_loop,
)


def _batch(config):
    pairs = ToyPairs.build(config.dataset_size, config.image_size, config.degrade, config.seed)
    return pairs.batch([0, 1])


def test_freeze_table():
    assert is_trainable("vae.encoder.conv_in.base.weight", Stage.VAE)
    assert not is_trainable("vae.encoder.conv_in.lora.A", Stage.VAE)
    assert not is_trainable("unet.enc1.conv1.base.weight", Stage.VAE)
    assert is_trainable("unet.enc1.conv1.base.weight", Stage.BACKBONE)
    assert not is_trainable("unet.dec1.conv1.lora.B", Stage.BACKBONE)
    assert not is_trainable("dpm.zero.0.weight", Stage.BACKBONE)
    for name in ("dpm.zero.0.weight", "gspm.hint.0.weight", "cond.proj.weight",
                 "vae.encoder.conv_in.lora.A", "unet.dec1.conv1.lora.B"):
        assert is_trainable(name, Stage.CONTROL), name
    for name in ("vae.decoder.conv_in.weight", "vae.encoder.conv_in.base.weight",
                 "unet.enc1.conv1.base.weight", "unet.null_cond"):
        assert not is_trainable(name, Stage.CONTROL), name


def test_control_stage_trainable_set():
    model = micro_model()
    store = ParamStore(model, Stage.CONTROL)
    names = store.trainable_names()
    assert any(n.startswith("dpm.") for n in names)
    assert any(n.startswith("gspm.") for n in names)
    assert any(n.startswith("vae.encoder.") and ".lora." in n for n in names)
    assert not any(n.startswith("vae.decoder.") for n in names)
    assert all(p.requires_grad for p in store.trainable())
    assert not any(store.params[n].requires_grad for n in store.frozen_names())


def test_loss_with_stub_predictor():
    config = micro_config()
    state = TrainState.create(micro_model(), Stage.CONTROL, config)
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    hr, lr = _batch(config)
    noise = torch.randn(2, 4, 4, 4)
    t = torch.tensor([5, 50])
    exact = controlsr_loss(hr, lr, state, schedule, noise=noise, timesteps=t, predictor=lambda *a: noise)
    offset = controlsr_loss(hr, lr, state, schedule, noise=noise, timesteps=t, predictor=lambda *a: noise + 0.5)
    assert float(exact) == 0.0
    assert float(offset) == pytest.approx(0.25)


def test_loss_finite_and_positive_at_init():
    config = micro_config()
    state = TrainState.create(micro_model(), Stage.CONTROL, config)
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    hr, lr = _batch(config)
    loss = controlsr_loss(hr, lr, state, schedule)
    assert loss.dim() == 0
    assert torch.isfinite(loss)
    assert float(loss) > 0.0
    assert loss.requires_grad


def test_stage_mismatch():
    config = micro_config()
    state = TrainState.create(micro_model(), Stage.BACKBONE, config)
    hr, lr = _batch(config)
    with pytest.raises(UsageError):
        pretrain_vae_step(hr, state)
    with pytest.raises(UsageError):
        control_step(hr, lr, state, make_schedule(100, 1e-4, 0.02))


def test_zero_learning_rate_keeps_loss():
    config = micro_config()
    state = TrainState.create(micro_model(), Stage.CONTROL, config, lr=0.0)
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    hr, lr = _batch(config)
    noise, t = torch.randn(2, 4, 4, 4), torch.tensor([10, 90])
    before = controlsr_loss(hr, lr, state, schedule, noise=noise, timesteps=t)
    state.optimize(before)
    after = controlsr_loss(hr, lr, state, schedule, noise=noise, timesteps=t)
    assert float(after) == float(before)


def test_vae_step_touches_only_vae():
    config = micro_config()
    model = micro_model()
    state = TrainState.create(model, Stage.VAE, config)
    before = {n: p.detach().clone() for n, p in model.named_tensors().items()}
    pretrain_vae_step(_batch(config)[0], state)
    changed = [n for n, p in model.named_tensors().items() if not torch.equal(p, before[n])]
    assert changed
    assert all(n.startswith("vae.") and ".lora." not in n for n in changed)


def test_backbone_step_updates_unet():
    config = micro_config()
    model = micro_model()
    state = TrainState.create(model, Stage.BACKBONE, config)
    before = model.unet.conv_in.weight.detach().clone()
    loss = pretrain_backbone_step(_batch(config)[0], state, make_schedule(100, 1e-4, 0.02))
    assert loss > 0.0
    assert not torch.equal(model.unet.conv_in.weight, before)
    assert state.step == 1


def test_freeze_audit_catches_drift():
    model = micro_model()
    store = ParamStore(model, Stage.CONTROL)
    snapshot = store.snapshot_frozen()
    store.audit(snapshot)
    with torch.no_grad():
        model.unet.conv_in.weight.add_(1e-3)
    with pytest.raises(FreezeViolation):
        store.audit(snapshot)


def test_branch_gradients_flow_after_first_step():
    config = micro_config()
    model = micro_model()
    state = TrainState.create(model, Stage.CONTROL, config)
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    hr, lr = _batch(config)
    control_step(hr, lr, state, schedule)
    control_step(hr, lr, state, schedule)
    for name, p in model.named_parameters():
        if name.startswith(("dpm.", "gspm.")):
            assert p.grad is not None and torch.count_nonzero(p.grad) > 0, name


def test_staged_training(tmp_path):
    config = micro_config()
    vae = train_loop(config, Stage.VAE, tmp_path / "vae")
    backbone = train_loop(config, Stage.BACKBONE, tmp_path / "backbone", resume=vae)
    control = train_loop(config, Stage.CONTROL, tmp_path / "control", resume=backbone)
    assert read_checkpoint(control).stage is Stage.CONTROL
    assert (tmp_path / "control" / "control.json").exists()
    vae_ckpt, control_ckpt = read_checkpoint(vae).as_dict(), read_checkpoint(control).as_dict()
    # the VAE decoder never trains after its own stage
    for name, record in vae_ckpt.items():
        if name.startswith("vae.decoder."):
            assert (control_ckpt[name].data == record.data).all(), name
    lines = (tmp_path / "control" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,stage,loss,wall_ms"
    assert len(lines) == config.iters + 1
    assert lines[1].split(",")[1] == "control"


def test_prerequisites(tmp_path):
    config = micro_config(iters=1)
    with pytest.raises(PrerequisiteError):
        train_loop(config, Stage.BACKBONE, tmp_path / "b")
    with pytest.raises(PrerequisiteError):
        train_loop(config, Stage.CONTROL, tmp_path / "c", resume=tmp_path / "missing.csrk")
    vae = train_loop(config, Stage.VAE, tmp_path / "vae")
    with pytest.raises(PrerequisiteError) as info:
        train_loop(config, Stage.CONTROL, tmp_path / "c", resume=vae)
    assert info.value.stage == "control"


def test_vae_resume_accepts_only_vae_checkpoints(tmp_path):
    assert load_prerequisite(Stage.VAE, None) is None
    for stage in (Stage.BACKBONE, Stage.CONTROL):
        path = tmp_path / f"{stage.value}.csrk"
        write_checkpoint(path, Checkpoint(stage=stage, records=[], rng_seed=0))
        with pytest.raises(PrerequisiteError) as info:
            train_loop(micro_config(iters=0), Stage.VAE, tmp_path / "vae", resume=path)
        assert info.value.stage == "vae"
    own = tmp_path / "own.csrk"
    write_checkpoint(own, Checkpoint(stage=Stage.VAE, records=[], rng_seed=0))
    assert load_prerequisite(Stage.VAE, own).stage is Stage.VAE


def test_training_is_deterministic(tmp_path):
    config = micro_config(iters=2)
    a = train_loop(config, Stage.VAE, tmp_path / "a")
    b = train_loop(config, Stage.VAE, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    c = train_loop(micro_config(iters=2, seed=1), Stage.VAE, tmp_path / "c")
    assert a.read_bytes() != c.read_bytes()


def test_zero_iterations_resume_is_identity(tmp_path):
    config = micro_config(iters=1)
    first = train_loop(config, Stage.VAE, tmp_path / "first")
    again = train_loop(micro_config(iters=0), Stage.VAE, tmp_path / "again", resume=first)
    assert again.read_bytes() == first.read_bytes()


def test_periodic_checkpoints(tmp_path):
    train_loop(micro_config(iters=3, checkpoint_every=1), Stage.VAE, tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*.csrk"))
    assert names == ["vae.csrk", "vae_step000001.csrk", "vae_step000002.csrk"]


if __name__ == '__main__':
    raise SystemExit(pytest.main([__file__, '-q']))
