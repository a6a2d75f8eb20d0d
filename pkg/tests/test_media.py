import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from patternmark import media
from patternmark.errors import ConfigError


# --- independent brute-force references -----------------------------------

def psnr_reference(a, b):
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mse = np.mean(diff ** 2)
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def ssim_reference(a, b, window=11, sigma=1.5):
    """Direct per-window loop, no filtering shortcuts."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    half = (window - 1) / 2.0
    x = np.arange(window) - half
    w1 = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w1 /= w1.sum()
    w = np.outer(w1, w1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    per_channel = []
    for c in range(a.shape[0]):
        vals = []
        for i in range(a.shape[1] - window + 1):
            for j in range(a.shape[2] - window + 1):
                pa = a[c, i:i + window, j:j + window]
                pb = b[c, i:i + window, j:j + window]
                mu_a = (w * pa).sum()
                mu_b = (w * pb).sum()
                va = (w * pa * pa).sum() - mu_a ** 2
                vb = (w * pb * pb).sum() - mu_b ** 2
                cov = (w * pa * pb).sum() - mu_a * mu_b
                vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                            / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


# --- messages ---------------------------------------------------------------

def test_random_message_deterministic():
    assert np.array_equal(media.random_message(42), media.random_message(42))


def test_random_message_length_and_values():
    m = media.random_message(7)
    assert m.shape == (196,)
    assert set(np.unique(m)) <= {0, 1}


def test_random_message_mean_over_many_seeds():
    # Monte-Carlo check: 10k draws of 196 bits, mean well inside the binomial CI
    total = sum(media.random_message(s).sum() for s in range(10_000))
    mean = total / (10_000 * 196)
    assert 0.49 <= mean <= 0.51


def test_hex_all_zeros():
    assert media.message_to_hex(np.zeros(196, dtype=np.uint8)) == "0" * 49


def test_hex_leading_bit():
    m = np.zeros(196, dtype=np.uint8)
    m[0] = 1
    assert media.message_to_hex(m) == "8" + "0" * 48


@settings(max_examples=50)
@given(st.integers(min_value=0, max_value=10 ** 9))
def test_hex_round_trip(seed):
    m = media.random_message(seed)
    assert np.array_equal(media.hex_to_message(media.message_to_hex(m)), m)


def test_hex_round_trip_many():
    for seed in range(10_000):
        m = media.random_message(seed)
        assert np.array_equal(media.hex_to_message(media.message_to_hex(m)), m)


@pytest.mark.parametrize("bad", ["", "12", "x" * 49, "0" * 48, "0" * 50])
def test_hex_malformed(bad):
    with pytest.raises(ConfigError):
        media.hex_to_message(bad)


# --- ber ---------------------------------------------------------------------

def test_ber_identity_and_complement():
    m = media.random_message(3)
    assert media.ber(m, m) == 0.0
    assert media.ber(m, 1 - m) == 1.0


def test_ber_two_flips():
    m = media.random_message(4)
    other = m.copy()
    other[10] ^= 1
    other[100] ^= 1
    assert media.ber(m, other) == pytest.approx(2 / 196)


def test_ber_length_mismatch():
    with pytest.raises(ConfigError):
        media.ber(np.zeros(196, dtype=np.uint8), np.zeros(64, dtype=np.uint8))


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
def test_ber_metric_properties(s1, s2):
    a, b = media.random_message(s1), media.random_message(s2)
    assert media.ber(a, b) >= 0
    assert media.ber(a, b) == media.ber(b, a)
    assert (media.ber(a, b) == 0) == np.array_equal(a, b)


# --- psnr ---------------------------------------------------------------------

def test_psnr_identity_is_inf(rng):
    a = rng.uniform(0, 1, (3, 16, 16))
    assert media.psnr(a, a) == math.inf


def test_psnr_zero_vs_one():
    assert media.psnr(np.zeros((1, 8, 8)), np.ones((1, 8, 8))) == pytest.approx(0.0)


def test_psnr_uniform_offset(rng):
    a = rng.uniform(0, 0.89, (3, 16, 16))
    assert media.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_reference(rng):
    for _ in range(50):
        a = rng.uniform(0, 1, (3, 12, 12))
        b = rng.uniform(0, 1, (3, 12, 12))
        assert media.psnr(a, b) == pytest.approx(psnr_reference(a, b), abs=1e-6)


def test_psnr_monotone_in_noise(rng):
    a = rng.uniform(0.2, 0.8, (1, 24, 24))
    values = [media.psnr(a, np.clip(a + eps, 0, 1))
              for eps in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ConfigError):
        media.psnr(np.zeros((1, 8, 8)), np.zeros((1, 9, 8)))


# --- ssim ---------------------------------------------------------------------

def test_ssim_self_similarity(rng):
    a = rng.uniform(0, 1, (3, 24, 24))
    assert media.ssim(a, a) == pytest.approx(1.0, abs=1e-6)


def test_ssim_constant_vs_negation():
    a = np.zeros((1, 16, 16))
    b = np.ones((1, 16, 16))
    # closed form: C1 / (1 + C1) for two constant images at 0 and 1
    assert media.ssim(a, b) == pytest.approx(1e-4 / (1 + 1e-4), abs=1e-9)
    assert media.ssim(a, b) < 0.05


def test_ssim_symmetric(rng):
    a = rng.uniform(0, 1, (3, 20, 20))
    b = rng.uniform(0, 1, (3, 20, 20))
    assert media.ssim(a, b) == pytest.approx(media.ssim(b, a), abs=1e-12)


def test_ssim_matches_bruteforce(rng):
    for _ in range(10):
        a = rng.uniform(0, 1, (1, 18, 18))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert media.ssim(a, b) == pytest.approx(ssim_reference(a, b), abs=1e-6)


def test_ssim_window_too_large():
    with pytest.raises(ConfigError):
        media.ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


# --- image files ----------------------------------------------------------------

def test_save_load_round_trip(tmp_path, rng):
    img = rng.uniform(0, 1, (3, 20, 24)).astype(np.float32)
    path = tmp_path / "img.png"
    media.save_image(img, path)
    back = media.load_image(path)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 255 + 1e-9


def test_load_grayscale_gives_one_channel(tmp_path, rng):
    from PIL import Image
    arr = (rng.uniform(0, 1, (10, 12)) * 255).astype(np.uint8)
    path = tmp_path / "gray.png"
    Image.fromarray(arr, mode="L").save(path)
    img = media.load_image(path)
    assert img.shape == (1, 10, 12)
    assert img.min() >= 0 and img.max() <= 1


def test_load_16bit_png_normalized(tmp_path, rng):
    from PIL import Image
    arr = (rng.uniform(0, 1, (9, 11)) * 65535).astype(np.uint16)
    path = tmp_path / "deep.png"
    Image.fromarray(arr).save(path)
    img = media.load_image(path)
    assert img.shape == (1, 9, 11)
    assert img.min() >= 0 and img.max() <= 1
    assert np.abs(img[0] - arr / 65535).max() < 1e-4
