import math
import zipfile

import numpy as np
import pytest
import torch

from conftest import TINY
from oracles import finite_difference_check, relative_errors
from vidcolor.diffusion import (
    FORMAT_VERSION,
    STAGE_ORDER,
    Colorizer,
    Denoiser,
    DiffusionTrainer,
    NoiseSchedule,
    add_noise,
    colorize,
    ddim_step,
    load_checkpoint,
    load_split,
    parameter_hash,
    prepare_latents,
    save_checkpoint,
    train_stage2,
)
from vidcolor.diffusion.autoencoder import ColorAutoencoder
from vidcolor.errors import ValidationError
from vidcolor.synthvid import generate_clip, DatasetConfig


class TestSchedule:
    def test_invariants(self):
        s = NoiseSchedule()
        assert (s.betas[1:] > s.betas[:-1]).all()
        assert s.betas.min() > 1e-5 and s.betas.max() < 0.5
        assert (s.alpha_bars[1:] < s.alpha_bars[:-1]).all()
        assert s.alpha_bars.max() <= 1 and s.alpha_bars.min() > 0

    def test_sampling_timesteps(self):
        ts = NoiseSchedule().sampling_timesteps(50)
        assert len(ts) == 50 and ts[0] == 999 and ts[-1] == 0
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_add_noise_endpoint(self):
        s = NoiseSchedule()
        z0 = torch.randn(1000, dtype=torch.float64)
        zt, eps = add_noise(z0, 0, s, torch.Generator().manual_seed(0))
        ab = s.alpha_bar(0)
        torch.testing.assert_close(zt, ab.sqrt() * z0 + (1 - ab).sqrt() * eps)
        assert (zt - z0).norm() / z0.norm() <= 2 * math.sqrt(1 - ab)

    def test_add_noise_mean_monte_carlo(self):
        s = NoiseSchedule()
        z0 = torch.randn(4, dtype=torch.float64)
        t = 400
        zt, _ = add_noise(z0.expand(10000, 4), torch.full((10000,), t), s, torch.Generator().manual_seed(1))
        ab = s.alpha_bar(t)
        sigma = math.sqrt(1 - ab) / math.sqrt(10000)
        assert ((zt.mean(0) - ab.sqrt() * z0).abs() <= 3 * sigma).all()

    def test_add_noise_reproducible_and_checked(self):
        s = NoiseSchedule()
        z0 = torch.randn(3, 4)
        a = add_noise(z0, 10, s, torch.Generator().manual_seed(3))
        b = add_noise(z0, 10, s, torch.Generator().manual_seed(3))
        assert torch.equal(a[1], b[1])
        with pytest.raises(ValidationError):
            add_noise(z0, 1000, s)

    def test_ddim_with_true_noise_recovers_clean_latent(self):
        s = NoiseSchedule()
        z0 = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        zt, eps = add_noise(z0, 700, s, torch.Generator().manual_seed(2))
        torch.testing.assert_close(ddim_step(zt, eps, 700, None, s), z0)
        z_mid = ddim_step(zt, eps, 700, 300, s)
        torch.testing.assert_close(z_mid, add_noise(z0, 300, s, noise=eps)[0])


class TestAutoencoder:
    def test_shape_law(self):
        ae = ColorAutoencoder()
        frames = torch.rand(2, 3, 32, 32)
        z = ae.encode(frames)
        assert z.shape == (2, 4, 8, 8)
        grid, skips = ae.encode_luminance(frames[:, :1])
        assert grid.shape == (2, 32, 8, 8) and sorted(skips) == [1, 2, 4]
        out = ae.decode(z, skips)
        assert out.shape == (2, 3, 32, 32) and out.min() >= 0 and out.max() <= 1


def _denoiser(dtype=torch.float32):
    net = Denoiser(latent_channels=4, lum_channels=8, context_dim=8, widths=(8, 16), heads=2, temb_dim=16).to(dtype)
    for stage in net.stages:
        torch.nn.init.normal_(stage.tda.tda.offset_conv2.weight, std=0.1)
    return net


def _inputs(b=2, f=4, dtype=torch.float32):
    gen = torch.Generator().manual_seed(0)
    return (
        torch.randn(b, f, 4, 4, 4, generator=gen, dtype=dtype),
        torch.randint(0, 1000, (b,), generator=gen),
        torch.randn(b, 3, 8, generator=gen, dtype=dtype),
        torch.randn(b, f, 8, 4, 4, generator=gen, dtype=dtype),
    )


class TestDenoiser:
    def test_output_shape(self):
        z, t, ctx, y = _inputs()
        assert _denoiser()(z, t, ctx, y).shape == z.shape

    def test_block_order_in_every_stage(self):
        net = Colorizer(TINY).denoiser
        for stage in net.stages:
            order = stage.block_order
            assert order == STAGE_ORDER
            assert order.index("spatial_attn") < order.index("tda") < order.index("cross_attn")

    def test_temporal_blocks_inert_without_tda(self):
        net = _denoiser().eval()
        net.set_tda_enabled(False)
        z, t, ctx, y = _inputs(b=1, f=3)
        video = net(z, t, ctx, y)
        per_frame = net(z[0][:, None], t.expand(3), ctx.expand(3, -1, -1), y[0][:, None])
        torch.testing.assert_close(video[0], per_frame[:, 0], rtol=1e-5, atol=1e-6)

    def test_single_frame_with_identity_tda(self):
        net = _denoiser().eval()
        z, t, ctx, y = _inputs(b=1, f=1)
        with_tda = net(z, t, ctx, y)
        net.set_tda_enabled(False)
        assert with_tda.shape == net(z, t, ctx, y).shape

    def test_shape_errors_name_the_stage(self):
        net = _denoiser()
        z, t, ctx, y = _inputs()
        with pytest.raises(ValidationError, match="stage"):
            net(z[:, :, :3], t, ctx, y)
        with pytest.raises(ValidationError, match="luminance"):
            net(z, t, ctx, y[:, :2])
        with pytest.raises(ValidationError, match="cross_attn"):
            net(z, t, ctx[:1], y)

    def test_loss_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(9)
        net = _denoiser(torch.float64)
        z, t, ctx, y = _inputs(dtype=torch.float64)
        noise = torch.randn(z.shape, generator=gen, dtype=torch.float64)
        zt, _ = add_noise(z, t, NoiseSchedule(), noise=noise)
        loss = lambda: ((net(zt, t, ctx, y) - noise) ** 2).mean()
        pairs = finite_difference_check(loss, list(net.parameters()), 10, gen)
        assert max(relative_errors(pairs)) <= 1e-3


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = Colorizer(TINY)
        for p in model.cmpf.parameters():
            torch.nn.init.normal_(p, std=0.1)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        loss = sum((p**2).sum() for p in model.parameters())
        loss.backward()
        opt.step()
        gen = torch.Generator().manual_seed(5)
        torch.randn(3, generator=gen)
        path = save_checkpoint(tmp_path / "m.ckpt", model, step=7, stage=1, optimizer=opt, generator=gen)
        ckpt = load_checkpoint(path)
        assert ckpt.step == 7 and ckpt.stage == 1 and ckpt.header["format"] == FORMAT_VERSION
        again = ckpt.build_model()
        for (n, a), (_, b) in zip(model.state_dict().items(), again.state_dict().items()):
            assert torch.equal(a, b), n
        opt2 = torch.optim.AdamW(again.parameters(), lr=1e-3)
        ckpt.restore_optimizer(opt2, again)
        for p, q in zip(model.parameters(), again.parameters()):
            assert torch.equal(opt.state[p]["exp_avg_sq"], opt2.state[q]["exp_avg_sq"])
        gen2 = torch.Generator()
        ckpt.restore_generator(gen2)
        assert torch.equal(torch.randn(4, generator=gen), torch.randn(4, generator=gen2))
        with zipfile.ZipFile(path) as zf:
            assert set(zf.namelist()) == {"header.json", "params.bin", "rng.bin"}

    def test_forward_identical_after_reload(self, tmp_path):
        model = Colorizer(TINY).eval()
        path = save_checkpoint(tmp_path / "m.ckpt", model, step=0, stage=1)
        other = load_checkpoint(path).build_model().eval()
        clip = generate_clip(1, DatasetConfig(frame_size=(16, 16)))
        a = colorize(model, clip.luminance, clip.caption, seed=3, steps=3)
        b = colorize(other, clip.luminance, clip.caption, seed=3, steps=3)
        assert np.array_equal(a, b)

    def test_bad_format_and_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.ckpt")
        with zipfile.ZipFile(tmp_path / "bad.ckpt", "w") as zf:
            zf.writestr("header.json", '{"format": "other"}')
            zf.writestr("params.bin", b"")
        with pytest.raises(ValueError, match="format"):
            load_checkpoint(tmp_path / "bad.ckpt")


def _fixed_batch(trainer, seed=123):
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randint(len(trainer.data), (8,), generator=gen)
    t = torch.randint(1000, (8,), generator=gen)
    noise = torch.randn(trainer.data.z0[idx].shape, generator=gen)
    return idx, t, noise


@torch.no_grad()
def _eval_loss(trainer, batch):
    trainer.model.eval()
    return trainer.batch_loss(*batch).item()


def _stage1_trainer(ckpt_path, manifest, config=None):
    """Fresh denoiser on top of the trained tiny autoencoder."""
    trained = load_checkpoint(ckpt_path).build_model()
    torch.manual_seed(0)
    model = Colorizer(TINY)
    model.ae.load_state_dict(trained.ae.state_dict())
    data = prepare_latents(model, load_split(manifest, "train"))
    return DiffusionTrainer(model, data, 1, config or TINY)


class TestTraining:
    def test_stage1_loss_decreases_on_fixed_batch(self, tiny_stage1, tiny_data):
        trainer = _stage1_trainer(tiny_stage1[0], tiny_data)
        batches = [_fixed_batch(trainer, s) for s in range(4)]
        before = np.mean([_eval_loss(trainer, b) for b in batches])
        trainer.run(200)
        after = np.mean([_eval_loss(trainer, b) for b in batches])
        assert after < before

    def test_step_100_loss_is_deterministic(self, tiny_stage1, tiny_data):
        losses = [_stage1_trainer(tiny_stage1[0], tiny_data).run(100)[-1] for _ in range(2)]
        assert losses[0] == losses[1]

    def test_stage1_leaves_prefusion_untouched(self, tiny_stage1):
        path, trainer = tiny_stage1
        assert trainer.step == TINY.stage1_steps
        assert load_checkpoint(path).step == TINY.stage1_steps
        assert not trainer.model.cmpf.w_e.weight.any()

    def test_stage2_freezes_and_starts_from_identity(self, tiny_stage1, tiny_data):
        base = load_checkpoint(tiny_stage1[0])
        model = base.build_model()
        data = prepare_latents(model, load_split(tiny_data, "train"))
        stage1 = DiffusionTrainer(model, data, 1, base.config)
        batch = _fixed_batch(stage1)
        loss1 = _eval_loss(stage1, batch)
        stage2 = DiffusionTrainer(model, data, 2, base.config)
        assert abs(_eval_loss(stage2, batch) - loss1) <= 1e-6
        before_hash = parameter_hash(model)
        norm0 = torch.cat([p.detach().flatten() for p in model.cmpf.parameters()]).norm()
        stage2.run(100)
        norm1 = torch.cat([p.detach().flatten() for p in model.cmpf.parameters()]).norm()
        assert parameter_hash(model) == before_hash
        assert norm1 > norm0

    def test_stage2_rejects_frozen_update(self, tiny_stage1, tiny_data):
        model = load_checkpoint(tiny_stage1[0]).build_model()
        data = prepare_latents(model, load_split(tiny_data, "train"))
        trainer = DiffusionTrainer(model, data, 2, TINY)
        model.denoiser.conv_out.weight.requires_grad_(True)
        with pytest.raises(AssertionError, match="frozen"):
            trainer.train_step()

    def test_stage2_header_records_stage1_hash(self, tiny_stage1, tiny_data, tmp_path):
        path = tiny_stage1[0]
        out = tmp_path / "s2.ckpt"
        train_stage2(tiny_data, path, TINY, out, checkpoint_every=0)
        header = load_checkpoint(out).header
        assert header["stage"] == 2
        assert header["stage1_frozen_hash"] == load_checkpoint(path).header["frozen_hash"]
        assert header["frozen_hash"] == header["stage1_frozen_hash"]

    def test_resume_reproduces_loss_trajectory(self, tiny_stage1, tiny_data, tmp_path):
        base = load_checkpoint(tiny_stage1[0])

        def fresh_trainer():
            model = base.build_model()
            return DiffusionTrainer(model, prepare_latents(model, load_split(tiny_data, "train")), 1, base.config)

        full = fresh_trainer().run(30)
        first = fresh_trainer()
        head = first.run(12)
        first.save(tmp_path / "mid.ckpt")
        resumed = DiffusionTrainer.resume(load_checkpoint(tmp_path / "mid.ckpt"), first.data)
        assert resumed.step == 12
        assert head + resumed.run(30) == full


class TestColorize:
    def test_deterministic_and_bounded(self, tiny_stage1):
        model = load_checkpoint(tiny_stage1[0]).build_model()
        clip = generate_clip(4, DatasetConfig(frame_size=(16, 16)))
        a = colorize(model, clip.luminance, clip.caption, seed=1, steps=4)
        b = colorize(model, clip.luminance, clip.caption, seed=1, steps=4)
        assert np.array_equal(a, b)
        assert a.shape == (8, 16, 16, 3) and a.min() >= 0 and a.max() <= 1

    def test_empty_caption(self, tiny_stage1):
        model = load_checkpoint(tiny_stage1[0]).build_model()
        with pytest.raises(ValidationError):
            colorize(model, np.zeros((8, 16, 16)), "  ")

    def test_long_video_routes_through_fusion(self, tiny_stage1, tmp_path):
        model = load_checkpoint(tiny_stage1[0]).build_model()
        clip = generate_clip(4, DatasetConfig(frame_size=(16, 16), clip_length=16))
        out = colorize(model, clip.luminance, clip.caption, seed=0, steps=2, plan_path=tmp_path / "plan.json")
        assert out.shape == (16, 16, 16, 3)
        assert (tmp_path / "plan.json").exists()

    def test_single_clip_fusion_equals_short_path(self, tiny_stage1):
        model = load_checkpoint(tiny_stage1[0]).build_model()
        clip = generate_clip(4, DatasetConfig(frame_size=(16, 16)))
        a = colorize(model, clip.luminance, clip.caption, seed=2, steps=3)
        b = colorize(model, clip.luminance, clip.caption, seed=2, steps=3, intervals=[1])
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)
