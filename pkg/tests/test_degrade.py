"""
ControlSR Degradation Tests
Bicubic resampling, the single-order degradation pipeline and toy images.
"""
import hashlib

import numpy as np
import pytest
import torch

from src.analysis.probe import hf_energy_fraction
from src.data.degrade import DegradeConfig, block_dct_quantize, degrade_image, quantizer_steps, synth_toy_image
from src.data.resize import bicubic_weights, cubic_kernel, resize_array, resize_tensor
from src.data.toyset import ToyPairs, image_rng
from src.errors import ValidationError
from src.storage.ppm import ImageBuffer

IDENTITY = DegradeConfig(blur_sigma=(0.0, 0.0), scale=1, noise_sigma=(0.0, 0.0), jpeg_quality=(100.0, 100.0))


def test_cubic_kernel_values():
    assert cubic_kernel(np.array([0.0, 1.0, 2.0])).tolist() == [1.0, 0.0, 0.0]
    # a = -0.5 at x = 0.5: 1.5/8 - 2.5/4 + 1
    assert float(cubic_kernel(np.array([0.5]))[0]) == pytest.approx(0.5625)


def test_resize_identity_and_constant():
    assert np.allclose(bicubic_weights(7, 7), np.eye(7))
    const = np.full((16, 16, 3), 0.3)
    assert np.allclose(resize_array(const, 4, 4), 0.3)
    assert np.allclose(resize_array(const, 40, 24), 0.3)


def test_downscale_matches_direct_convolution_on_ramp():
    n, out = 64, 16
    ramp = np.tile(np.arange(n, dtype=np.float64)[None, :, None], (n, 1, 1))
    got = resize_array(ramp, out, out)[0, :, 0]
    scale = out / n
    for o in range(2, 14):  # kernel support stays inside the image
        center = (o + 0.5) / scale - 0.5
        taps = np.arange(n)
        w = cubic_kernel((center - taps) * scale)
        assert got[o] == pytest.approx(float(np.sum(w * taps) / np.sum(w)), abs=1e-9)
        assert got[o] == pytest.approx(center, abs=1e-9)


def test_resize_tensor_matches_array():
    pixels = np.random.default_rng(0).uniform(size=(16, 16, 3))
    a = resize_array(pixels, 4, 4)
    b = resize_tensor(torch.from_numpy(pixels.transpose(2, 0, 1)[None].copy()), 4, 4)[0].numpy().transpose(1, 2, 0)
    assert np.allclose(a, b)


def test_identity_pipeline():
    hr = synth_toy_image(32, image_rng(0, 0, 0))
    lr = degrade_image(hr, IDENTITY, np.random.default_rng(1))
    assert np.max(np.abs(lr.pixels - hr.pixels)) <= 1 / 510


def test_scale_shape_and_determinism():
    hr = synth_toy_image(64, image_rng(0, 1, 0))
    cfg = DegradeConfig()
    a = degrade_image(hr, cfg, np.random.default_rng(5))
    b = degrade_image(hr, cfg, np.random.default_rng(5))
    assert (a.height, a.width) == (16, 16)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0


def test_indivisible_dims():
    with pytest.raises(ValidationError):
        degrade_image(ImageBuffer(np.zeros((48, 48, 3))), DegradeConfig(scale=4), np.random.default_rng(0))


def test_quantizer():
    assert not np.any(quantizer_steps(100))
    assert np.all(quantizer_steps(50) > quantizer_steps(90))
    pixels = np.random.default_rng(2).uniform(size=(16, 8, 3))
    assert np.array_equal(block_dct_quantize(pixels, 100), pixels)
    coarse = block_dct_quantize(pixels, 10)
    assert coarse.shape == pixels.shape
    assert not np.allclose(coarse, pixels)


def test_toy_image_reproducible():
    digest = lambda im: hashlib.sha256(im.pixels.tobytes()).hexdigest()
    assert digest(synth_toy_image(32, image_rng(3, 0, 0))) == digest(synth_toy_image(32, image_rng(3, 0, 0)))
    assert digest(synth_toy_image(32, image_rng(3, 0, 0))) != digest(synth_toy_image(32, image_rng(3, 1, 0)))
    with pytest.raises(ValidationError):
        synth_toy_image(30, image_rng(0, 0, 0))


def test_toy_image_statistics():
    images = [synth_toy_image(32, image_rng(11, i, 0)) for i in range(100)]
    mean = np.mean([im.pixels.mean() for im in images])
    assert 0.2 <= mean <= 0.8
    textured = sum(hf_energy_fraction(im) > 0 for im in images)
    assert textured >= 95


def test_toy_pairs():
    pairs = ToyPairs.build(3, 32, DegradeConfig(), seed=4)
    assert len(pairs) == 3
    hr, lr = pairs.batch([0, 2])
    assert hr.shape == (2, 3, 32, 32)
    assert lr.shape == (2, 3, 8, 8)
    again = ToyPairs.build(3, 32, DegradeConfig(), seed=4)
    assert np.array_equal(again.lr[1].pixels, pairs.lr[1].pixels)


if __name__ == '__main__':
    test_cubic_kernel_values()
    test_resize_identity_and_constant()
    test_downscale_matches_direct_convolution_on_ramp()
    test_resize_tensor_matches_array()
    test_identity_pipeline()
    test_scale_shape_and_determinism()
    test_indivisible_dims()
    test_quantizer()
    test_toy_image_reproducible()
    test_toy_image_statistics()
    test_toy_pairs()
    print('Degradation tests passed.')
