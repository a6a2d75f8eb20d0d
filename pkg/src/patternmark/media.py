"""Core media types and metrics: bit messages, PSNR/SSIM/BER, image file I/O.

Images are numpy float arrays of shape (C, H, W) with values in [0, 1]
(C in {1, 3}); messages are 1-D uint8 arrays of 0/1 bits.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from .errors import ConfigError

MESSAGE_BITS = 196

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2  # (0.01 * L)^2 with peak L = 1
SSIM_C2 = 0.03 ** 2


def random_message(seed: int, n_bits: int = MESSAGE_BITS) -> np.ndarray:
    """n_bits i.i.d. uniform bits, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=n_bits, dtype=np.uint8)


def _check_message(bits, n_bits=None):
    bits = np.asarray(bits)
    if bits.ndim != 1:
        raise ConfigError(f"message must be 1-D, got shape {bits.shape}")
    if n_bits is not None and bits.shape[0] != n_bits:
        raise ConfigError(f"message must have {n_bits} bits, got {bits.shape[0]}")
    if not np.isin(bits, (0, 1)).all():
        raise ConfigError("message bits must be 0 or 1")
    return bits.astype(np.uint8)


def message_to_hex(bits) -> str:
    """Big-endian hex string; first bit is the MSB of the first digit."""
    bits = _check_message(bits)
    if bits.shape[0] % 4 != 0:
        raise ConfigError("bit count must be a multiple of 4 for hex encoding")
    value = int("".join("1" if b else "0" for b in bits), 2)
    return format(value, f"0{bits.shape[0] // 4}x")


def hex_to_message(text: str, n_bits: int = MESSAGE_BITS) -> np.ndarray:
    """Inverse of message_to_hex; the hex string must encode exactly n_bits."""
    text = text.strip().lower()
    if len(text) != n_bits // 4 or n_bits % 4 != 0:
        raise ConfigError(f"expected {n_bits // 4} hex digits, got {len(text)!r}")
    try:
        value = int(text, 16)
    except ValueError as exc:
        raise ConfigError(f"not a hex string: {text!r}") from exc
    bitstr = format(value, f"0{n_bits}b")
    return np.frombuffer(bitstr.encode(), dtype=np.uint8) - ord("0")


def ber(truth, got) -> float:
    """Fraction of differing bits between two equal-length messages."""
    truth = _check_message(truth)
    got = _check_message(got)
    if truth.shape != got.shape:
        raise ConfigError(f"length mismatch: {truth.shape[0]} vs {got.shape[0]}")
    return float(np.mean(truth != got))


def _as_chw(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ConfigError(f"expected (C, H, W) or (H, W) image, got shape {img.shape}")
    return img


def psnr(a, b) -> float:
    """10 * log10(1 / MSE) for unit-range images; +inf when the MSE is zero."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian sampled at integer offsets."""
    half = (size - 1) / 2
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _local_mean(img2d: np.ndarray, window: np.ndarray) -> np.ndarray:
    # separable valid-mode filtering: filter then crop the padded margin
    r = (window.size - 1) // 2
    out = correlate1d(img2d, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean local SSIM over Gaussian-weighted sliding windows, averaged over channels."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[1] < window or a.shape[2] < window:
        raise ConfigError(f"image {a.shape[1]}x{a.shape[2]} smaller than {window}x{window} window")
    w = gaussian_window(window, sigma)
    vals = []
    for c in range(a.shape[0]):
        x, y = a[c], b[c]
        mu_x = _local_mean(x, w)
        mu_y = _local_mean(y, w)
        var_x = _local_mean(x * x, w) - mu_x ** 2
        var_y = _local_mean(y * y, w) - mu_y ** 2
        cov = _local_mean(x * y, w) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def load_image(path) -> np.ndarray:
    """Load an image file as (C, H, W) float32 in [0, 1]; no resizing."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("1", "L", "I", "I;16", "F"):
            arr = np.asarray(im.convert("F" if im.mode in ("I", "I;16", "F") else "L"),
                             dtype=np.float64)
            if im.mode == "1":
                arr = arr * 255.0
            scale = 65535.0 if im.mode in ("I", "I;16") else (1.0 if im.mode == "F" else 255.0)
            arr = arr / scale
            return np.clip(arr, 0.0, 1.0)[None].astype(np.float32)
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return arr.transpose(2, 0, 1).astype(np.float32)


def save_image(img, path) -> None:
    """Write an image as 8-bit PNG (or JPEG when the suffix says so)."""
    img = _as_chw(img)
    arr = np.clip(img, 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.shape[0] == 1:
        pil = Image.fromarray(u8[0], mode="L")
    elif u8.shape[0] == 3:
        pil = Image.fromarray(u8.transpose(1, 2, 0), mode="RGB")
    else:
        raise ConfigError(f"cannot save image with {u8.shape[0]} channels")
    pil.save(path)
