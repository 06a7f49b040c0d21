#!/usr/bin/env python3
"""
频率线索测试：亮度、DCT、高通滤波、图像读写
"""

import numpy as np
import pytest

from core.errors import ConfigError, DimensionError
from core.frequency_cue import (batch_frequency_cue, dct2d, frequency_cue, highpass_filter, idct2d,
                                lowfreq_triangle, to_luminance)
from core.image_io import load_image, load_mask, save_image, save_mask


def dct_basis(n: int) -> np.ndarray:
    """正交 DCT-II 基，C[u, x] = a(u) cos(pi (2x+1) u / 2n)"""
    u = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    basis = np.cos(np.pi * (2 * x + 1) * u / (2 * n))
    scale = np.full((n, 1), np.sqrt(2.0 / n))
    scale[0, 0] = np.sqrt(1.0 / n)
    return scale * basis


def naive_dct2d(img: np.ndarray) -> np.ndarray:
    height, width = img.shape
    out = np.zeros((height, width))
    for u in range(height):
        for v in range(width):
            au = np.sqrt(1.0 / height) if u == 0 else np.sqrt(2.0 / height)
            av = np.sqrt(1.0 / width) if v == 0 else np.sqrt(2.0 / width)
            total = 0.0
            for x in range(height):
                for y in range(width):
                    total += img[x, y] * np.cos(np.pi * (2 * x + 1) * u / (2 * height)) \
                        * np.cos(np.pi * (2 * y + 1) * v / (2 * width))
            out[u, v] = au * av * total
    return out


class TestLuminance:

    def test_white_is_one(self):
        assert np.allclose(to_luminance(np.ones((8, 8, 3))), 1.0)

    def test_pure_red(self):
        img = np.zeros((8, 8, 3))
        img[..., 0] = 1.0
        assert np.allclose(to_luminance(img), 0.299)

    def test_matches_scalar_arithmetic(self, rng):
        img = rng.random((8, 8, 3))
        gray = to_luminance(img)
        for i in range(8):
            for j in range(8):
                r, g, b = img[i, j]
                assert gray[i, j] == pytest.approx(0.299 * r + 0.587 * g + 0.114 * b, abs=1e-15)

    def test_rejects_single_channel(self):
        with pytest.raises(DimensionError):
            to_luminance(np.zeros((8, 8)))


class TestDct:

    def test_constant_image_is_dc_only(self):
        n, c = 16, 0.7
        coeffs = dct2d(np.full((n, n), c))
        assert coeffs[0, 0] == pytest.approx(c * n, abs=1e-12)
        rest = coeffs.copy()
        rest[0, 0] = 0.0
        assert np.max(np.abs(rest)) < 1e-12

    def test_round_trip_parseval_and_basis_oracle(self, rng):
        for _ in range(50):
            height, width = rng.integers(8, 33, size=2)
            img = rng.random((height, width))
            coeffs = dct2d(img)
            assert np.max(np.abs(idct2d(coeffs) - img)) < 1e-9
            assert np.sum(coeffs ** 2) == pytest.approx(np.sum(img ** 2), rel=1e-9)
            oracle = dct_basis(height) @ img @ dct_basis(width).T
            assert np.max(np.abs(coeffs - oracle)) < 1e-9

    def test_matches_brute_force_double_sum(self, rng):
        img = rng.random((8, 8))
        assert np.max(np.abs(dct2d(img) - naive_dct2d(img))) < 1e-9

    def test_linearity(self, rng):
        x, y = rng.random((12, 10)), rng.random((12, 10))
        a, b = 1.7, -0.4
        assert np.allclose(dct2d(a * x + b * y), a * dct2d(x) + b * dct2d(y), atol=1e-9)

    def test_rejects_multichannel(self):
        with pytest.raises(DimensionError):
            dct2d(np.zeros((8, 8, 3)))


class TestHighpass:

    def test_alpha_zero_is_identity(self, rng):
        coeffs = rng.normal(size=(10, 10))
        assert np.array_equal(highpass_filter(coeffs, 0.0), coeffs)

    def test_alpha_one_square(self, rng):
        coeffs = rng.normal(size=(9, 9))
        out = highpass_filter(coeffs, 1.0)
        assert out[0, 0] == 0.0
        rows, cols = np.indices((9, 9))
        assert np.all(out[rows + cols < 9] == 0.0)
        assert np.array_equal(out[rows + cols >= 9], coeffs[rows + cols >= 9])

    def test_default_alpha_on_twelve(self):
        zeroed = lowfreq_triangle(12, 12, 0.33)
        rows, cols = np.indices((12, 12))
        assert zeroed.sum() == 10
        assert np.array_equal(zeroed, rows + cols < 4)

    @pytest.mark.parametrize("alpha", [-0.1, 1.01])
    def test_alpha_out_of_range(self, alpha):
        with pytest.raises(ConfigError):
            highpass_filter(np.zeros((8, 8)), alpha)

    def test_monotone_zeroed_sets(self):
        alphas = np.linspace(0.0, 1.0, 21)
        for low, high in zip(alphas[:-1], alphas[1:]):
            small, large = lowfreq_triangle(16, 20, low), lowfreq_triangle(16, 20, high)
            assert np.all(large[small])

    def test_idempotent(self, rng):
        coeffs = rng.normal(size=(14, 14))
        once = highpass_filter(coeffs, 0.33)
        assert np.array_equal(highpass_filter(once, 0.33), once)


class TestFrequencyCue:

    def test_alpha_zero_returns_luminance(self, rng):
        img = rng.random((16, 16, 3))
        assert np.max(np.abs(frequency_cue(img, 0.0) - to_luminance(img))) < 1e-9

    def test_constant_image_vanishes(self):
        assert np.max(np.abs(frequency_cue(np.full((32, 32, 3), 0.4), 0.33))) < 1e-12

    def test_energy_concentrates_on_paste_boundary(self):
        img = np.full((64, 64, 3), 0.2)
        img[20:44, 20:44] = 0.9
        cue = np.abs(frequency_cue(img, 0.33))
        square = np.zeros((64, 64), dtype=bool)
        square[20:44, 20:44] = True
        inner = np.zeros_like(square)
        inner[22:42, 22:42] = True
        outer = np.zeros_like(square)
        outer[18:46, 18:46] = True
        band = outer & ~inner
        assert cue[band].mean() > cue[~band].mean()

    def test_signed_values_not_clamped(self, rng):
        cue = frequency_cue(rng.random((32, 32, 3)), 0.33)
        assert cue.min() < 0.0

    def test_rejects_small_or_nonfinite(self):
        with pytest.raises(DimensionError):
            frequency_cue(np.zeros((4, 16)), 0.33)
        bad = np.zeros((8, 8))
        bad[0, 0] = np.nan
        with pytest.raises(DimensionError):
            frequency_cue(bad, 0.33)

    def test_batch_shape(self, rng):
        images = rng.random((3, 16, 16, 3))
        cues = batch_frequency_cue(images)
        assert cues.shape == (3, 16, 16, 1)
        for i in range(3):
            assert np.array_equal(cues[i, :, :, 0], frequency_cue(images[i], 0.33))


class TestImageIO:

    def test_png_round_trip_quantizes(self, tmp_path, rng):
        img = rng.random((12, 10, 3))
        path = str(tmp_path / "img.png")
        save_image(path, img)
        loaded = load_image(path)
        assert loaded.shape == (12, 10, 3)
        assert np.max(np.abs(loaded - img)) <= 0.5 / 255 + 1e-12

    def test_save_clamps(self, tmp_path):
        path = str(tmp_path / "gray.pgm")
        save_image(path, np.array([[-1.0, 2.0], [0.5, 0.0]]))
        loaded = load_image(path)
        assert loaded[0, 0] == 0.0 and loaded[0, 1] == 1.0
        assert loaded[1, 0] == pytest.approx(128 / 255)

    def test_mask_pgm(self, tmp_path):
        mask = np.zeros((8, 8))
        mask[2:5, 3:6] = 1.0
        path = str(tmp_path / "mask.pgm")
        save_mask(path, mask)
        assert np.array_equal(load_mask(path), mask)

    def test_unsupported_extension(self, tmp_path):
        with pytest.raises(ValueError):
            save_image(str(tmp_path / "x.jpg"), np.zeros((8, 8)))
