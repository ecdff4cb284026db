"""Optimizer, schedule, view sampling and training-loop tests."""

import json

import numpy as np
import pytest

from gnt.data import generate_scene, make_dataset
from gnt.imagefeat import EncoderConfig
from gnt.model import GNTConfig, init_params, load_checkpoint
from gnt.tensor import (
    ContractError,
    Graph,
    NumericError,
    ShapeError,
    Tensor,
    grad_check,
)
from gnt.train import (
    AdamState,
    RayBatch,
    TrainConfig,
    adam_step,
    is_fine_step,
    lr_at,
    mse_loss,
    sample_ray_batch,
    sample_source_target,
    train_loop,
)

TINY_ENC = EncoderConfig(down_channels=(4, 8), up_channels=(8,), out_dim=8)
TINY_MODEL = GNTConfig(dim=16, ffn_hidden=32, ray_heads=2, n_blocks=1, pos_enc_L=4)


def tiny_dataset(seed=0, n_views=6):
    scene = generate_scene(seed=seed)
    return make_dataset(scene, n_views=n_views, ring_radius=2.5, width=16, height=16)


def tiny_train_cfg(**kw):
    base = dict(
        rays_per_step=8, total_steps=2, n_coarse=4, n_views_range=(2, 3),
        seed=0, stratified=False,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_endpoints(self):
        cfg = TrainConfig(total_steps=1000)
        assert lr_at(0, cfg) == (cfg.lr_encoder, cfg.lr_gnt)
        e, g = lr_at(1000, cfg)
        assert e == pytest.approx(0.1 * cfg.lr_encoder)
        assert g == pytest.approx(0.1 * cfg.lr_gnt)

    def test_monotone(self):
        cfg = TrainConfig(total_steps=100)
        vals = [lr_at(s, cfg)[0] for s in range(0, 101, 10)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestLoss:
    def test_zero_on_identical(self):
        x = np.random.default_rng(0).random((5, 3)).astype(np.float32)
        assert mse_loss(Tensor(x), x).item() == 0.0

    def test_constant_offset(self):
        gt = np.zeros((4, 3), dtype=np.float32)
        pred = Tensor(np.full((4, 3), 0.1, dtype=np.float32))
        assert mse_loss(pred, gt).item() == pytest.approx(0.01, abs=1e-8)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        pred = Tensor(rng.random((6, 3)), requires_grad=True, dtype=np.float64)
        gt = rng.random((6, 3))
        report = grad_check(lambda: mse_loss(pred, gt), {"pred": pred})
        assert report.passed, report

    def test_analytic_gradient(self):
        pred = Tensor(np.array([[0.5, 0.2, 0.9]]), requires_grad=True, dtype=np.float64)
        gt = np.array([[0.1, 0.2, 0.5]])
        with Graph() as g:
            grads = g.backward(mse_loss(pred, gt))
        np.testing.assert_allclose(grads[pred], 2 * (pred.data - gt) / 3, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(Tensor(np.zeros((2, 3), dtype=np.float32)), np.zeros((3, 3)))


class TestAdam:
    def test_first_step_magnitude_is_lr_signed(self):
        p = Tensor(np.zeros(4, dtype=np.float64))
        params = _wrap({"w": p})
        state = AdamState.for_params(params)
        g = np.array([3.0, -0.5, 1e-3, 0.0])
        adam_step(params, {"w": g}, state, (0.1, 0.01))
        expected = -0.01 * g / (np.abs(g) + 1e-8)
        expected[3] = 0.0
        np.testing.assert_allclose(p.data, expected, atol=1e-9)

    def test_encoder_group_uses_own_lr(self):
        pe = Tensor(np.zeros(1, dtype=np.float64))
        pg = Tensor(np.zeros(1, dtype=np.float64))
        params = _wrap({"encoder.down0.w": pe, "rgb.fc1.w": pg})
        state = AdamState.for_params(params)
        g = np.array([1.0])
        adam_step(params, {"encoder.down0.w": g, "rgb.fc1.w": g}, state, (0.2, 0.05))
        assert pe.data[0] == pytest.approx(-0.2, rel=1e-6)
        assert pg.data[0] == pytest.approx(-0.05, rel=1e-6)

    def test_missing_grads_leave_params_unchanged(self):
        p = Tensor(np.ones(3, dtype=np.float64))
        params = _wrap({"w": p})
        adam_step(params, {}, AdamState.for_params(params), (0.1, 0.1))
        np.testing.assert_array_equal(p.data, 1.0)

    def test_quadratic_converges(self):
        x = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        params = _wrap({"x": x})
        state = AdamState.for_params(params)
        for _ in range(100):
            adam_step(params, {"x": 2.0 * x.data}, state, (0.1, 0.1))
        assert abs(x.data[0]) < 0.1


def _wrap(d):
    from gnt.model import ModelParams

    return ModelParams(d)


class TestViewSampling:
    def test_target_never_a_source(self):
        ds = tiny_dataset()
        cfg = tiny_train_cfg()
        rng = np.random.default_rng(2)
        for _ in range(200):
            t, srcs = sample_source_target(ds, cfg, rng)
            assert t not in srcs
            assert len(set(srcs)) == len(srcs)

    def test_k_equal_one_gives_exact_nearest(self):
        ds = tiny_dataset(n_views=8)
        cfg = tiny_train_cfg(k_range=(1.0, 1.0), n_views_range=(3, 3))
        rng = np.random.default_rng(3)
        axes = np.stack([c.rotation[:, 2] for c in ds.cameras])
        for _ in range(20):
            t, srcs = sample_source_target(ds, cfg, rng)
            ang = np.arccos(np.clip(axes @ axes[t], -1, 1))
            nearest = [i for i in np.argsort(ang, kind="stable") if i != t][:3]
            assert sorted(srcs) == sorted(nearest)

    def test_n_frequency_uniform(self):
        ds = tiny_dataset(n_views=8)
        cfg = tiny_train_cfg(n_views_range=(2, 4))
        rng = np.random.default_rng(4)
        counts = {2: 0, 3: 0, 4: 0}
        draws = 10_000
        for _ in range(draws):
            _, srcs = sample_source_target(ds, cfg, rng)
            counts[len(srcs)] += 1
        for n in (2, 3, 4):
            assert abs(counts[n] / draws - 1 / 3) < 0.02, counts

    def test_too_few_views_rejected(self):
        ds = tiny_dataset(n_views=4)
        cfg = tiny_train_cfg(n_views_range=(2, 4))
        with pytest.raises(ContractError):
            sample_source_target(ds, cfg, np.random.default_rng(0))

    def test_ray_batch_contents(self):
        ds = tiny_dataset()
        batch = sample_ray_batch(ds, 2, 16, np.random.default_rng(5))
        assert batch.n_rays == 16
        assert batch.colors.min() >= 0 and batch.colors.max() <= 1
        np.testing.assert_allclose(np.linalg.norm(batch.directions, axis=1), 1.0, atol=1e-9)
        i = 7
        np.testing.assert_array_equal(
            batch.colors[i], ds.images[2][batch.vs[i], batch.us[i]]
        )


class TestConfigValidation:
    def test_rejects_bad_values(self):
        for kw in (
            dict(rays_per_step=0),
            dict(lr_encoder=-1.0),
            dict(k_range=(2.0, 1.0)),
            dict(k_range=(0.5, 2.0)),
            dict(n_views_range=(4, 2)),
            dict(renderer="nerf"),
            dict(n_coarse=0),
            dict(fine_every=0),
        ):
            with pytest.raises(ContractError):
                TrainConfig(**kw)


class TestFineCadence:
    def test_predicate(self):
        cfg = tiny_train_cfg(n_fine=4, fine_every=3)
        assert [is_fine_step(s, cfg) for s in range(6)] == [
            False, False, True, False, False, True,
        ]
        assert not any(is_fine_step(s, tiny_train_cfg()) for s in range(6))
        assert all(is_fine_step(s, tiny_train_cfg(n_fine=4)) for s in range(6))

    def test_loop_switches_samplers(self, tmp_path, monkeypatch):
        import gnt.train as train_mod

        seen = []
        real = train_mod.render_rays

        def spy(origins, dirs, sources, cfg, params, sampler, renderer, **kw):
            seen.append(sampler.n_fine)
            return real(origins, dirs, sources, cfg, params, sampler, renderer, **kw)

        monkeypatch.setattr(train_mod, "render_rays", spy)
        monkeypatch.setattr(train_mod, "n_workers", lambda: 1)
        ds = tiny_dataset()
        cfg = tiny_train_cfg(total_steps=4, n_fine=4, fine_every=2)
        train_loop(ds, TINY_MODEL, TINY_ENC, cfg, tmp_path)
        assert seen == [0, 4, 0, 4]


class TestTrainLoop:
    def test_runs_logs_and_checkpoints(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_train_cfg(total_steps=3, checkpoint_every=2)
        params, log = train_loop(ds, TINY_MODEL, TINY_ENC, cfg, tmp_path)
        lines = [json.loads(l) for l in open(log)]
        assert len(lines) == 3
        assert [l["step"] for l in lines] == [0, 1, 2]
        for l in lines:
            assert set(l) == {"step", "loss", "lr_enc", "lr_gnt", "wallclock_ms"}
            assert 0.0 <= l["loss"] < 1.0
        assert (tmp_path / "ckpt_000002").is_dir()
        loaded, meta = load_checkpoint(tmp_path / "ckpt_final")
        assert meta["step"] == 3
        for name, p in params.items():
            np.testing.assert_array_equal(loaded[name].data, p.data)

    def test_fixed_seed_reproduces_loss_curve(self, tmp_path):
        ds = tiny_dataset()
        curves = []
        for sub in ("a", "b"):
            cfg = tiny_train_cfg(total_steps=3)
            _, log = train_loop(ds, TINY_MODEL, TINY_ENC, cfg, tmp_path / sub)
            curves.append([json.loads(l)["loss"] for l in open(log)])
        assert curves[0] == curves[1]

    def test_zero_learning_rates_freeze_params(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_train_cfg(total_steps=2, lr_encoder=0.0, lr_gnt=0.0)
        init = init_params(TINY_MODEL, TINY_ENC, seed=cfg.seed)
        before = {name: p.data.copy() for name, p in init.items()}
        params, _ = train_loop(ds, TINY_MODEL, TINY_ENC, cfg, tmp_path, params=init)
        for name, p in params.items():
            np.testing.assert_array_equal(p.data, before[name])

    def test_step_touches_both_groups(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_train_cfg(total_steps=1)
        init = init_params(TINY_MODEL, TINY_ENC, seed=cfg.seed)
        before = {name: p.data.copy() for name, p in init.items()}
        params, _ = train_loop(ds, TINY_MODEL, TINY_ENC, cfg, tmp_path, params=init)
        moved = {name for name, p in params.items() if not np.array_equal(p.data, before[name])}
        assert any(n.startswith("encoder.") for n in moved)
        assert any(n.startswith(("view0", "ray0", "rgb.", "input.")) for n in moved)
        # The unused volumetric head gets no gradient from the gnt renderer.
        assert not any(n.startswith("vol.") for n in moved)

    def test_nonfinite_loss_aborts_with_dump(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_train_cfg(total_steps=2)
        init = init_params(TINY_MODEL, TINY_ENC, seed=cfg.seed)
        init["rgb.fc2.b"].data[0] = np.nan
        with pytest.raises(NumericError):
            train_loop(ds, TINY_MODEL, TINY_ENC, cfg, tmp_path, params=init)
        dump = json.loads((tmp_path / "diagnostic_dump.json").read_text())
        assert dump["step"] == 0 and len(dump["us"]) == cfg.rays_per_step

    def test_loss_drops_on_tiny_overfit(self, tmp_path):
        # Single fixed target view, enough steps to see clear movement.
        ds = tiny_dataset(seed=1)
        cfg = tiny_train_cfg(
            rays_per_step=64, total_steps=30, n_coarse=8, n_views_range=(3, 3),
            k_range=(1.0, 1.0), stratified=False, seed=3,
        )
        _, log = train_loop(ds, TINY_MODEL, TINY_ENC, cfg, tmp_path)
        losses = [json.loads(l)["loss"] for l in open(log)]
        assert np.mean(losses[-5:]) < 0.7 * np.mean(losses[:5])

    def test_ray_batch_color_validation(self):
        with pytest.raises(ContractError):
            RayBatch(
                origins=np.zeros((2, 3)),
                directions=np.zeros((2, 3)),
                colors=np.array([[0.2, 0.3, 1.4], [0.0, 0.0, 0.0]]),
                target_view=0,
            )
