from dataclasses import replace

import numpy as np
import pytest
import torch

from artinoise.diffusion import Denoiser, DenoiserConfig, MotionDecoder, MotionDecoderConfig, make_schedule
from artinoise.noisefield import unwarp_fuse, warp
from artinoise.numeric import GradTape, backward, sample_standard_normal, seed_rng
from artinoise.training import (
    LOG_COLUMNS,
    PRESETS,
    Adam,
    TrainConfig,
    apply_preset,
    compute_losses,
    gradient_check,
    loss_diff,
    loss_mc,
    loss_md,
    miniature_instance,
    prepare_clip,
    sample_step_inputs,
    total_loss,
    train,
)


def oracle_mse(a, b):
    d = np.asarray(a, np.float64).ravel() - np.asarray(b, np.float64).ravel()
    return sum(x * x for x in d) / len(d)


def tiny_setup(seed=0, zero_out=True):
    """One 9 x 32 x 32 clip with a small denoiser and decoder in float32."""
    from artinoise.body import default_skeleton, generate_pose_sequence
    from artinoise.raster import make_appearance_texture, rasterize_sequence, render_sequence

    skel = default_skeleton(16).scaled(0.3)
    poses = generate_pose_sequence(skel, seed_rng(seed), 2, 0.4, root_position=(16.0, 16.0))
    maps = rasterize_sequence(skel, poses, 32, 32)
    video = render_sequence(maps, make_appearance_texture(skel, 16))
    clip = prepare_clip(video, maps, 8, 4, 4, (16, 16), latent_scale=5.0)
    torch.manual_seed(seed)
    den = Denoiser(DenoiserConfig(4, (8, 8), temb_dim=8, temb_hidden=8))
    dec = MotionDecoder(MotionDecoderConfig(4, (4, 4), 8, 4, groups=2))
    if not zero_out:
        with torch.no_grad():
            den.conv_out.weight.normal_(0, 0.1)
    return clip, den, dec


def test_loss_diff_examples():
    e = sample_standard_normal(seed_rng(0), (2, 3, 4))
    assert loss_diff(e, e) == 0.0
    assert loss_diff(np.zeros((3, 5)), np.ones((3, 5))) == 1.0
    f = sample_standard_normal(seed_rng(1), (2, 3, 4))
    assert abs(loss_diff(e, f) - oracle_mse(e, f)) < 1e-6
    with pytest.raises(ValueError):
        loss_diff(np.zeros(3), np.zeros(4))


def test_loss_md_examples():
    m = seed_rng(2).uniform(size=(5, 8, 8, 3))
    p = seed_rng(3).uniform(size=(5, 8, 8, 3))
    assert loss_md(m, m) == 0.0
    assert loss_md(np.zeros((5, 8, 8, 4)), np.zeros((5, 8, 8, 3))) == 0.0
    assert abs(loss_md(m, p) - oracle_mse(m, p)) < 1e-6
    with pytest.raises(ValueError):
        loss_md(m, p[:4])


def test_loss_md_masked_mode():
    target = np.zeros((1, 2, 2, 3))
    target[0, 0, 0] = [0.5, 0.5, 1.0]
    pred = torch.ones(1, 2, 2, 3)
    mask = torch.as_tensor(target[..., 2])
    expected = ((0.5 ** 2) * 2 + 0) / 3
    assert loss_md(torch.as_tensor(target), pred, mask).item() == pytest.approx(expected)


def test_loss_mc_examples():
    from artinoise.body import default_skeleton, generate_pose_sequence
    from artinoise.raster import rasterize_sequence, stack_motion_maps

    skel = default_skeleton()
    maps = stack_motion_maps(rasterize_sequence(skel, generate_pose_sequence(skel, seed_rng(0), 1, 0.4), 96, 128))
    tex = sample_standard_normal(seed_rng(1), (64, 64, 4))
    fused, cov = unwarp_fuse(warp(tex, maps, seed_rng(2)), maps, 64, 64)
    assert loss_mc(tex, fused, cov) < 1e-6
    assert loss_mc(tex, np.zeros_like(tex), np.zeros((64, 64))) == 0.0

    single = np.zeros((2, 2)); single[1, 0] = 1
    a = np.zeros((2, 2, 3)); b = np.zeros((2, 2, 3))
    a[1, 0] = [1.0, 2.0, 3.0]; b[1, 0] = [0.0, 0.0, 0.0]
    assert loss_mc(a, b, single) == pytest.approx((1 + 4 + 9) / 3)


def test_total_loss_examples():
    assert total_loss(1.0, 2.0, 4.0, TrainConfig()) == 4.0
    zero = TrainConfig(lambda_diff=0, lambda_mc=0, lambda_md=0)
    assert total_loss(1.0, 2.0, 4.0, zero) == 0.0
    base = apply_preset(TrainConfig(), "base")
    assert total_loss(1.0, 2.0, 4.0, base) == 1.0


def test_default_weights():
    cfg = TrainConfig()
    assert (cfg.lambda_diff, cfg.lambda_mc, cfg.lambda_md) == (1.0, 0.5, 0.5)
    assert cfg.learning_rate == 1e-4
    assert (cfg.gamma_low, cfg.gamma_high) == (0.0, 1.0)


def test_presets():
    assert apply_preset(TrainConfig(), "base").lambda_mc == 0 and apply_preset(TrainConfig(), "base").lambda_md == 0
    jaml = apply_preset(TrainConfig(), "jaml")
    assert jaml.lambda_mc == 0 and jaml.lambda_md == 0.5
    assert apply_preset(TrainConfig(), "full") == TrainConfig()
    assert set(PRESETS) == {"base", "jaml", "full"}
    with pytest.raises(ValueError):
        apply_preset(TrainConfig(), "bogus")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_mc=-1)
    with pytest.raises(ValueError):
        TrainConfig(gamma_low=0.6, gamma_high=0.5)


def test_adam_first_step_moves_by_lr():
    p = torch.tensor([1.0, -2.0])
    opt = Adam({"p": p}, lr=0.1)
    opt.step({"p": torch.tensor([3.0, -0.5])})
    assert torch.allclose(p, torch.tensor([0.9, -1.9]), atol=1e-6)


def test_l_diff_target_is_degraded_noise():
    clip, den, dec = tiny_setup(zero_out=False)
    sch = make_schedule()
    inputs = sample_step_inputs([clip], TrainConfig(), sch, seed_rng(0), (16, 16), gamma=0.4, t=30)
    warped = warp(inputs.textures[0], clip.motion_latent, seed_rng(0).stream(0).stream("background"))
    assert not np.allclose(inputs.eps[0], warped)
    from artinoise.noisefield import degrade
    assert np.allclose(inputs.eps[0], degrade(warped, inputs.zeta[0], 0.4), atol=1e-6)


def test_high_gamma_skips_consistency_loss():
    clip, den, dec = tiny_setup(zero_out=False)
    sch = make_schedule()
    inputs = sample_step_inputs([clip], TrainConfig(), sch, seed_rng(0), (16, 16), gamma=0.97, t=30)
    losses = compute_losses(inputs, den, dec, TrainConfig(), sch)
    assert losses["mc_skipped"] == 1
    assert losses["l_mc"].item() == 0.0


def test_consistency_loss_vanishes_for_oracle_prediction():
    clip, den, dec = tiny_setup()
    sch = make_schedule()
    inputs = sample_step_inputs([clip], TrainConfig(), sch, seed_rng(1), (16, 16), gamma=0.3, t=30)

    class Oracle(torch.nn.Module):
        def forward(self, zt, cond, t):
            return torch.as_tensor(inputs.eps)

    losses = compute_losses(inputs, Oracle(), None, TrainConfig(), sch)
    assert losses["l_diff"].item() == 0.0
    assert losses["l_mc"].item() < 1e-6


def test_overfit_single_clip():
    clip, den, dec = tiny_setup(zero_out=False)
    sch = make_schedule()
    cfg = TrainConfig()
    inputs = sample_step_inputs([clip], cfg, sch, seed_rng(2), (16, 16), gamma=0.3, t=60)
    tape = GradTape.from_modules(denoiser=den, motion_decoder=dec)
    opt = Adam(dict(tape.params), lr=3e-3)
    first = None
    for _ in range(50):
        total = compute_losses(inputs, den, dec, cfg, sch)["total"]
        first = total.item() if first is None else first
        opt.step(backward(tape, total))
    final = compute_losses(inputs, den, dec, cfg, sch)["total"].item()
    assert final < first


def test_training_is_deterministic(tmp_path):
    runs = []
    for k in range(2):
        clip, den, dec = tiny_setup(zero_out=False)
        hist = train([clip], den, dec, replace(TrainConfig(), steps=5, learning_rate=1e-3),
                     make_schedule(), (16, 16), log_path=tmp_path / f"log{k}.csv")
        runs.append([(h["l_diff"], h["l_mc"], h["l_md"], h["total"]) for h in hist])
    assert runs[0] == runs[1]
    header = (tmp_path / "log0.csv").read_text().splitlines()[0]
    assert header == ",".join(LOG_COLUMNS)
    assert len((tmp_path / "log0.csv").read_text().splitlines()) == 6


def test_training_writes_checkpoint(tmp_path):
    from artinoise.diffusion import load_checkpoint

    clip, den, dec = tiny_setup()
    train([clip], den, dec, replace(TrainConfig(), steps=4), make_schedule(), (16, 16),
          checkpoint_path=tmp_path / "m.ckpt", checkpoint_every=2)
    _, dec2, _, manifest = load_checkpoint(tmp_path / "m.ckpt")
    assert manifest["step"] == 4 and dec2 is not None


def test_miniature_instance_is_small():
    clip, den, dec = miniature_instance()
    n = sum(p.numel() for p in den.parameters()) + sum(p.numel() for p in dec.parameters())
    assert n <= 1000
    assert clip.z0.shape == (2, 4, 4, 3)


@pytest.mark.parametrize("config", [TrainConfig(), TrainConfig(lambda_mc=0.0, lambda_md=0.0)],
                         ids=["full", "diff_only"])
def test_gradient_check(config):
    report = gradient_check(config, gamma=0.3)
    assert report["max_relative_error"] < 1e-3


def test_zero_output_layer_has_no_dead_graph():
    # with the final convolution at zero, the first step updates it; from then on
    # gradients reach the earlier layers
    clip, den, dec = tiny_setup(zero_out=True)
    sch = make_schedule()
    cfg = TrainConfig()
    inputs = sample_step_inputs([clip], cfg, sch, seed_rng(3), (16, 16), gamma=0.3, t=60)
    tape = GradTape.from_modules(denoiser=den, motion_decoder=dec)
    grads = backward(tape, compute_losses(inputs, den, dec, cfg, sch)["total"])
    assert grads["denoiser.conv_out.weight"].abs().sum().item() > 0
    assert any(g.abs().sum().item() > 0 for k, g in grads.items() if k.startswith("motion_decoder."))
    Adam(dict(tape.params), lr=1e-3).step(grads)
    grads = backward(tape, compute_losses(inputs, den, dec, cfg, sch)["total"])
    for name in ("denoiser.conv_in.weight", "denoiser.down.weight", "denoiser.temb.0.weight"):
        assert grads[name].abs().sum().item() > 0, name
