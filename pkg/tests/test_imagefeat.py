"""Encoder tests: convolution semantics, shapes, determinism,
translation covariance, and gradients against central differences."""

import numpy as np
import pytest

from gnt.imagefeat import (
    EncoderConfig,
    FeatureMap,
    conv2d,
    encode_image,
    init_encoder_params,
    upsample_nearest,
)
from gnt.tensor import ContractError, Graph, ShapeError, Tensor


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((5, 6, 3)), dtype=np.float64)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0] = np.eye(3)
        out = conv2d(x, Tensor(w, dtype=np.float64))
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_averaging_kernel_on_constant_valid(self):
        x = Tensor(np.full((6, 6, 1), 2.5), dtype=np.float64)
        w = Tensor(np.full((3, 3, 1, 1), 1.0 / 9.0), dtype=np.float64)
        out = conv2d(x, w, padding="valid")
        assert out.shape == (4, 4, 1)
        np.testing.assert_allclose(out.data, 2.5, atol=1e-12)

    def test_same_padding_shape_and_stride(self):
        x = Tensor(np.zeros((8, 10, 2)))
        w = Tensor(np.zeros((3, 3, 2, 5)))
        assert conv2d(x, w).shape == (8, 10, 5)
        assert conv2d(x, w, stride=2).shape == (4, 5, 5)

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((7, 8, 2))
        w = rng.standard_normal((3, 3, 2, 4))
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), padding="valid").data
        expected = np.zeros((5, 6, 4))
        for i in range(5):
            for j in range(6):
                patch = x[i : i + 3, j : j + 3, :]
                expected[i, j] = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2]))
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractError):
            conv2d(Tensor(np.zeros((4, 4, 1))), Tensor(np.zeros((2, 2, 1, 1))))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((4, 4, 2)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((3, 3, 2, 3)), requires_grad=True, dtype=np.float64)

        def loss_fn():
            out = conv2d(x, w, stride=2)
            return (out * out).sum()

        with Graph() as g:
            loss = loss_fn()
        grads = g.backward(loss, accumulate=False)
        for t in (x, w):
            num = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + 1e-6
                up = loss_fn().item()
                flat[i] = orig - 1e-6
                down = loss_fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / 2e-6
            np.testing.assert_allclose(grads[t], num, atol=1e-5)


class TestUpsample:
    def test_nearest_repeats_blocks(self):
        x = Tensor(np.arange(4.0).reshape(2, 2, 1))
        out = upsample_nearest(x).data[..., 0]
        expected = np.array(
            [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=np.float64
        )
        np.testing.assert_array_equal(out, expected)


class TestEncoder:
    def test_config_validation(self):
        with pytest.raises(ContractError):
            EncoderConfig(down_channels=(16, 32), up_channels=(32, 32), out_dim=32)
        with pytest.raises(ContractError):
            EncoderConfig(down_channels=(16, 32, 64), up_channels=(32, 24), out_dim=32)
        with pytest.raises(ContractError):
            EncoderConfig(kernel=4)

    def test_output_shape_half_resolution(self):
        cfg = EncoderConfig()
        params = init_encoder_params(cfg, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        img = rng.random((24, 32, 3))
        fm = encode_image(img, cfg, params, source_view_id=7)
        assert (fm.height, fm.width, fm.dim) == (12, 16, 32)
        assert fm.grid.shape == (12 * 16, 32)
        assert fm.source_view_id == 7

    def test_min_size_and_divisibility_enforced(self):
        cfg = EncoderConfig()
        params = init_encoder_params(cfg, np.random.default_rng(5))
        with pytest.raises(ContractError):
            encode_image(np.zeros((8, 8, 3)), cfg, params)
        with pytest.raises(ContractError):
            encode_image(np.zeros((20, 24, 3)), cfg, params)

    def test_range_enforced(self):
        cfg = EncoderConfig()
        params = init_encoder_params(cfg, np.random.default_rng(6))
        with pytest.raises(ContractError):
            encode_image(np.full((16, 16, 3), 1.5), cfg, params)

    def test_deterministic(self):
        cfg = EncoderConfig()
        params = init_encoder_params(cfg, np.random.default_rng(7))
        img = np.random.default_rng(8).random((16, 16, 3))
        a = encode_image(img, cfg, params).grid.data
        b = encode_image(img, cfg, params).grid.data
        np.testing.assert_array_equal(a, b)

    def test_finite_for_bounded_params(self):
        cfg = EncoderConfig(down_channels=(8, 8, 8), up_channels=(8, 8), out_dim=8)
        rng = np.random.default_rng(9)
        for seed in range(3):
            params = init_encoder_params(cfg, np.random.default_rng(100 + seed))
            for t in params.values():
                t.data = np.clip(t.data * 10.0, -10.0, 10.0)
            img = rng.random((16, 16, 3))
            fm = encode_image(img, cfg, params)
            assert np.all(np.isfinite(fm.grid.data))

    def test_translation_covariance_single_stride2_stage(self):
        # Shifting the input by 2 px shifts the half-res features by
        # 1 px wherever no window touches padding or the fill column.
        cfg = EncoderConfig(down_channels=(8,), up_channels=(), out_dim=8)
        params = init_encoder_params(cfg, np.random.default_rng(10), dtype=np.float64)
        rng = np.random.default_rng(11)
        img = rng.random((24, 24, 3))
        shifted = np.zeros_like(img)
        shifted[:, 2:, :] = img[:, :-2, :]
        f_base = encode_image(img, cfg, params).array()
        f_shift = encode_image(shifted, cfg, params).array()
        np.testing.assert_allclose(
            f_shift[1:-1, 2:11], f_base[1:-1, 1:10], atol=1e-5
        )

    def test_gradients_through_single_pixel_loss(self):
        cfg = EncoderConfig(down_channels=(4, 4), up_channels=(4,), out_dim=4, kernel=3)
        params = init_encoder_params(cfg, np.random.default_rng(12), dtype=np.float64)
        img = np.random.default_rng(13).random((16, 16, 3))

        def loss_fn():
            fm = encode_image(img, cfg, params)
            return (fm.grid * fm.grid).sum()

        with Graph() as g:
            loss = loss_fn()
        grads = g.backward(loss, accumulate=False)
        rng = np.random.default_rng(14)
        for name, t in params.items():
            ana = grads.get(t, np.zeros_like(t.data))
            flat = t.data.reshape(-1)
            for _ in range(4):
                i = int(rng.integers(flat.size))
                orig = flat[i]
                flat[i] = orig + 1e-6
                up = loss_fn().item()
                flat[i] = orig - 1e-6
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / 2e-6
                a = ana.reshape(-1)[i]
                denom = max(abs(a), abs(num), 1e-8)
                assert abs(a - num) / denom < 1e-5, f"{name}[{i}]"
