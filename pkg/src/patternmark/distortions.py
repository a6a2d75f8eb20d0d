"""Differentiable image distortions, warp sampling, and the staged pipelines.

All ops take float tensors shaped (B, C, H, W) (a 3-D tensor is treated as a
single sample) with values in [0, 1], and draw randomness from an explicit
torch.Generator so every pipeline is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigError

ERASE_AREA_BOUNDS = (0.02, 0.33)
ERASE_ASPECT_BOUNDS = (0.3, 3.3)
PERSPECTIVE_SCALE_MAX = 0.7
COLOR_CAPS = {"brightness": 0.3, "contrast": 0.3, "saturation": 0.3, "hue": 0.1}

PIXEL_DISTORTIONS = (
    "brightness", "contrast", "saturation", "hue",
    "gaussian_blur", "motion_blur", "gaussian_noise", "simulated_jpeg",
)
SPATIAL_DISTORTIONS = ("perspective", "affine")


def _ensure_batch(img):
    if img.dim() == 3:
        return img.unsqueeze(0), True
    if img.dim() != 4:
        raise ConfigError(f"expected (B, C, H, W) tensor, got {tuple(img.shape)}")
    return img, False


def _unbatch(img, squeezed):
    return img.squeeze(0) if squeezed else img


def _uniform(gen, lo, hi):
    return lo + (hi - lo) * torch.rand((), generator=gen).item()


def _check_range(name, rng, bounds):
    lo, hi = rng
    if lo > hi or lo < bounds[0] - 1e-9 or hi > bounds[1] + 1e-9:
        raise ConfigError(f"{name} range {rng} outside allowed bounds {bounds}")


# ---------------------------------------------------------------------------
# homographies
#
# A warp matrix maps OUTPUT pixel coordinates to INPUT pixel coordinates,
# with integer coordinates at pixel centers (x = column, y = row).
# ---------------------------------------------------------------------------

def identity_matrix() -> np.ndarray:
    return np.eye(3, dtype=np.float64)


def apply_homography(img: torch.Tensor, mats) -> torch.Tensor:
    """Resample img through per-sample homographies (bilinear, zero fill)."""
    img, squeezed = _ensure_batch(img)
    mats = np.asarray(mats, dtype=np.float64)
    if mats.ndim == 2:
        mats = mats[None].repeat(img.shape[0], axis=0)
    if mats.shape != (img.shape[0], 3, 3):
        raise ConfigError(f"need one 3x3 matrix per sample, got {mats.shape}")
    if np.allclose(mats, np.eye(3), atol=0.0):
        return _unbatch(img.clone(), squeezed)
    b, _, h, w = img.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=0)  # 3 x HW
    src = mats @ pts  # B x 3 x HW
    sx = src[:, 0] / src[:, 2]
    sy = src[:, 1] / src[:, 2]
    gx = 2.0 * sx / max(w - 1, 1) - 1.0
    gy = 2.0 * sy / max(h - 1, 1) - 1.0
    grid = torch.from_numpy(np.stack([gx, gy], axis=-1).reshape(b, h, w, 2))
    grid = grid.to(dtype=img.dtype, device=img.device)
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros",
                        align_corners=True)
    return _unbatch(out, squeezed)


def _solve_homography(dst, src) -> np.ndarray:
    """3x3 matrix H with H @ [dst_i, 1] ~ [src_i, 1] for four point pairs."""
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(dst, src)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i] = u
        rhs[2 * i + 1] = v
    h = np.linalg.solve(a, rhs)
    return np.concatenate([h, [1.0]]).reshape(3, 3)


def _is_convex(quad) -> bool:
    quad = np.asarray(quad)
    sign = 0.0
    for i in range(4):
        d1 = quad[(i + 1) % 4] - quad[i]
        d2 = quad[(i + 2) % 4] - quad[(i + 1) % 4]
        cross = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(cross) < 1e-8:
            return False
        if sign == 0.0:
            sign = cross
        elif sign * cross < 0:
            return False
    return True


def sample_perspective_matrix(size_hw, scale_range, gen, max_tries: int = 50) -> np.ndarray:
    """Random four-corner perspective; corners move inward by up to scale*(side/2)."""
    _check_range("perspective scale", scale_range, (0.0, PERSPECTIVE_SCALE_MAX))
    h, w = size_hw
    scale = _uniform(gen, *scale_range)
    if scale == 0.0:
        return identity_matrix()
    half_w, half_h = (w - 1) / 2.0, (h - 1) / 2.0
    src = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)]
    for _ in range(max_tries):
        dx = [_uniform(gen, 0, scale * half_w) for _ in range(4)]
        dy = [_uniform(gen, 0, scale * half_h) for _ in range(4)]
        dst = [(dx[0], dy[0]),
               (w - 1 - dx[1], dy[1]),
               (w - 1 - dx[2], h - 1 - dy[2]),
               (dx[3], h - 1 - dy[3])]
        if _is_convex(dst):
            return _solve_homography(dst, src)
    raise ConfigError("could not sample a non-degenerate perspective quad")


def sample_affine_matrix(size_hw, rot_range_deg, scale_range, trans_range, gen) -> np.ndarray:
    """Rotate about center, scale, translate; returns the output->input map."""
    if scale_range[0] <= 0:
        raise ConfigError(f"affine scale must be positive, got {scale_range}")
    h, w = size_hw
    theta = math.radians(_uniform(gen, *rot_range_deg))
    s = _uniform(gen, *scale_range)
    tx = _uniform(gen, *trans_range) * w
    ty = _uniform(gen, *trans_range) * h
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # inverse of p_out = s * R(theta) @ (p_in - c) + c + t
    inv_rot = np.array([[cos_t, sin_t], [-sin_t, cos_t]]) / s
    mat = identity_matrix()
    mat[:2, :2] = inv_rot
    mat[:2, 2] = -inv_rot @ np.array([cx + tx, cy + ty]) + np.array([cx, cy])
    return mat


def perspective_warp(img, scale_range, gen):
    """Warp with a random perspective; returns (warped, per-sample matrices)."""
    img, squeezed = _ensure_batch(img)
    mats = np.stack([sample_perspective_matrix(img.shape[-2:], scale_range, gen)
                     for _ in range(img.shape[0])])
    return _unbatch(apply_homography(img, mats), squeezed), mats


def affine_warp(img, rot_range_deg, scale_range, trans_range, gen):
    """Warp with a random affine map; returns (warped, per-sample matrices)."""
    img, squeezed = _ensure_batch(img)
    mats = np.stack([sample_affine_matrix(img.shape[-2:], rot_range_deg,
                                          scale_range, trans_range, gen)
                     for _ in range(img.shape[0])])
    return _unbatch(apply_homography(img, mats), squeezed), mats


# ---------------------------------------------------------------------------
# pixel-wise distortions
# ---------------------------------------------------------------------------

def random_erase(img, area_frac_range=ERASE_AREA_BOUNDS, aspect_range=ERASE_ASPECT_BOUNDS,
                 gen=None, max_tries: int = 50):
    """Zero out one random rectangle per sample."""
    _check_range("erase area fraction", area_frac_range, ERASE_AREA_BOUNDS)
    _check_range("erase aspect", aspect_range, ERASE_ASPECT_BOUNDS)
    img, squeezed = _ensure_batch(img)
    _, _, h, w = img.shape
    out = img.clone()
    for b in range(img.shape[0]):
        best, best_err = None, math.inf
        for _ in range(max_tries):
            frac = _uniform(gen, *area_frac_range)
            aspect = _uniform(gen, *aspect_range)
            area = frac * h * w
            eh = max(1, round(math.sqrt(area * aspect)))
            ew = max(1, round(area / eh))
            if eh > h or ew > w:
                continue
            got_frac = eh * ew / (h * w)
            got_aspect = eh / ew
            err = (max(0.0, area_frac_range[0] - got_frac, got_frac - area_frac_range[1])
                   + max(0.0, aspect_range[0] - got_aspect, got_aspect - aspect_range[1]))
            if err < best_err:
                best, best_err = (eh, ew), err
            if err == 0.0:
                break
        if best is None:
            raise ConfigError("erase rectangle does not fit inside the image")
        eh, ew = best
        y0 = int(torch.randint(0, h - eh + 1, (), generator=gen))
        x0 = int(torch.randint(0, w - ew + 1, (), generator=gen))
        out[b, :, y0:y0 + eh, x0:x0 + ew] = 0.0
    return _unbatch(out, squeezed)


_LUMA = (0.299, 0.587, 0.114)


def _luma(img):
    r, g, b = img[:, 0:1], img[:, 1:2], img[:, 2:3]
    return _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b


def adjust_brightness(img, delta):
    img, squeezed = _ensure_batch(img)
    return _unbatch((img * (1.0 + delta)).clamp(0.0, 1.0), squeezed)


def adjust_contrast(img, delta):
    img, squeezed = _ensure_batch(img)
    f = 1.0 + delta
    mean = _luma(img).mean(dim=(1, 2, 3), keepdim=True)
    return _unbatch((f * img + (1.0 - f) * mean).clamp(0.0, 1.0), squeezed)


def adjust_saturation(img, delta):
    img, squeezed = _ensure_batch(img)
    f = 1.0 + delta
    gray = _luma(img)
    return _unbatch((f * img + (1.0 - f) * gray).clamp(0.0, 1.0), squeezed)


_RGB_TO_YUV = np.array([[0.299, 0.587, 0.114],
                        [-0.14713, -0.28886, 0.436],
                        [0.615, -0.51499, -0.10001]])
_YUV_TO_RGB = np.linalg.inv(_RGB_TO_YUV)


def adjust_hue(img, delta):
    """Rotate the chroma plane by delta turns (delta in [-0.5, 0.5])."""
    img, squeezed = _ensure_batch(img)
    to_yuv = torch.as_tensor(_RGB_TO_YUV, dtype=img.dtype, device=img.device)
    to_rgb = torch.as_tensor(_YUV_TO_RGB, dtype=img.dtype, device=img.device)
    yuv = torch.einsum("rc,bchw->brhw", to_yuv, img)
    angle = 2.0 * math.pi * delta
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    u = cos_a * yuv[:, 1] - sin_a * yuv[:, 2]
    v = sin_a * yuv[:, 1] + cos_a * yuv[:, 2]
    yuv = torch.stack([yuv[:, 0], u, v], dim=1)
    rgb = torch.einsum("rc,bchw->brhw", to_rgb, yuv)
    return _unbatch(rgb.clamp(0.0, 1.0), squeezed)


def color_jitter(img, brightness=0.3, contrast=0.3, saturation=0.3, hue=0.1, gen=None):
    """Random brightness/contrast/saturation/hue jitter within the given caps."""
    for name, cap in zip(COLOR_CAPS, (brightness, contrast, saturation, hue)):
        if cap < 0 or cap > COLOR_CAPS[name] + 1e-9:
            raise ConfigError(f"{name} factor {cap} exceeds cap {COLOR_CAPS[name]}")
    img = adjust_brightness(img, _uniform(gen, -brightness, brightness))
    img = adjust_contrast(img, _uniform(gen, -contrast, contrast))
    img = adjust_saturation(img, _uniform(gen, -saturation, saturation))
    img = adjust_hue(img, _uniform(gen, -hue, hue))
    return img


def _gaussian_kernel1d(size, sigma, dtype, device):
    half = (size - 1) / 2.0
    x = torch.arange(size, dtype=dtype, device=device) - half
    k = torch.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_blur(img, kernel: int = 3, sigma=(0.1, 1.0), gen=None):
    """Separable Gaussian blur with reflect padding; sigma may be a range."""
    if kernel % 2 != 1 or kernel < 1:
        raise ConfigError(f"kernel size must be odd and positive, got {kernel}")
    if isinstance(sigma, (tuple, list)):
        sigma = _uniform(gen, *sigma)
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    if kernel == 1:
        return img
    img, squeezed = _ensure_batch(img)
    c = img.shape[1]
    k1 = _gaussian_kernel1d(kernel, sigma, img.dtype, img.device)
    r = kernel // 2
    out = F.pad(img, (r, r, r, r), mode="reflect")
    out = F.conv2d(out, k1.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    out = F.conv2d(out, k1.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return _unbatch(out, squeezed)


def motion_blur_kernel(kernel: int, angle_deg: float, dtype=torch.float32) -> torch.Tensor:
    """Normalized 1-D line kernel of the given length splatted on a k x k grid."""
    k = torch.zeros(kernel, kernel, dtype=torch.float64)
    c = (kernel - 1) / 2.0
    ang = math.radians(angle_deg)
    dx, dy = math.cos(ang), math.sin(ang)
    for r in range(-(kernel // 2), kernel // 2 + 1):
        x, y = c + r * dx, c + r * dy
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for oy, wy in ((0, 1 - fy), (1, fy)):
            for ox, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + oy, x0 + ox
                if 0 <= yy < kernel and 0 <= xx < kernel and wx * wy > 0:
                    k[yy, xx] += wx * wy
    return (k / k.sum()).to(dtype)


def motion_blur(img, kernel: int = 3, gen=None, angle_deg=None):
    """Line blur of the given length at a uniformly random direction."""
    if kernel % 2 != 1 or kernel < 1:
        raise ConfigError(f"kernel size must be odd and positive, got {kernel}")
    if kernel == 1:
        return img
    if angle_deg is None:
        angle_deg = _uniform(gen, 0.0, 360.0)
    img, squeezed = _ensure_batch(img)
    c = img.shape[1]
    k = motion_blur_kernel(kernel, angle_deg, img.dtype).to(img.device)
    r = kernel // 2
    out = F.pad(img, (r, r, r, r), mode="reflect")
    out = F.conv2d(out, k.view(1, 1, kernel, kernel).expand(c, 1, -1, -1), groups=c)
    return _unbatch(out, squeezed)


def gaussian_noise(img, mean: float = 0.0, variance: float = 0.05, gen=None, clamp: bool = True):
    """Additive i.i.d. normal noise, clamped back to [0, 1] unless disabled."""
    if variance < 0:
        raise ConfigError(f"variance must be nonnegative, got {variance}")
    if variance == 0.0 and mean == 0.0:
        return img
    img, squeezed = _ensure_batch(img)
    noise = torch.randn(img.shape, generator=gen, dtype=img.dtype, device=img.device)
    out = img + noise * math.sqrt(variance) + mean
    if clamp:
        out = out.clamp(0.0, 1.0)
    return _unbatch(out, squeezed)


# ---------------------------------------------------------------------------
# JPEG surrogate
# ---------------------------------------------------------------------------

_QT_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

_QT_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def soft_quantize(x: torch.Tensor) -> torch.Tensor:
    """Differentiable stand-in for rounding: x^3 inside (-0.5, 0.5), identity outside."""
    return torch.where(x.abs() < 0.5, x ** 3, x)


def _scaled_tables(quality: float) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ConfigError(f"JPEG quality must be in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    tables = np.stack([_QT_LUMA, _QT_CHROMA, _QT_CHROMA])
    return np.clip(np.floor((tables * scale + 50.0) / 100.0), 1.0, 255.0)


def _dct_matrix(dtype, device):
    n = torch.arange(8, dtype=torch.float64)
    k = n.view(-1, 1)
    d = torch.cos(math.pi * (2 * n + 1) * k / 16.0) * math.sqrt(2.0 / 8.0)
    d[0] = math.sqrt(1.0 / 8.0)
    return d.to(dtype=dtype, device=device)


def _rgb_to_ycbcr255(x255):
    r, g, b = x255[:, 0], x255[:, 1], x255[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return torch.stack([y, cb, cr], dim=1)


def _ycbcr_to_rgb255(x):
    y, cb, cr = x[:, 0], x[:, 1] - 128.0, x[:, 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=1)


def simulated_jpeg(img, quality=(50.0, 100.0), gen=None, clamp: bool = True):
    """Differentiable JPEG: block DCT, quality-scaled quantization with a cubic
    soft quantizer, inverse DCT. No chroma subsampling."""
    if isinstance(quality, (tuple, list)):
        quality = _uniform(gen, *quality)
    img, squeezed = _ensure_batch(img)
    if img.shape[1] != 3:
        raise ConfigError(f"simulated_jpeg needs a 3-channel image, got {img.shape[1]}")
    b, _, h, w = img.shape
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    x = img
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
    hh, ww = x.shape[-2:]
    ycc = _rgb_to_ycbcr255(x * 255.0) - 128.0
    d = _dct_matrix(img.dtype, img.device)
    tables = torch.as_tensor(_scaled_tables(quality), dtype=img.dtype, device=img.device)
    # (B, 3, nh, 8, nw, 8) -> (B, 3, nh, nw, 8, 8)
    blocks = ycc.view(b, 3, hh // 8, 8, ww // 8, 8).permute(0, 1, 2, 4, 3, 5)
    coef = d @ blocks @ d.t()
    t = tables.view(1, 3, 1, 1, 8, 8)
    deq = soft_quantize(coef / t) * t
    rec = d.t() @ deq @ d
    ycc = rec.permute(0, 1, 2, 4, 3, 5).reshape(b, 3, hh, ww) + 128.0
    out = _ycbcr_to_rgb255(ycc) / 255.0
    out = out[:, :, :h, :w]
    if clamp:
        out = out.clamp(0.0, 1.0)
    return _unbatch(out, squeezed)


# ---------------------------------------------------------------------------
# composition onto a background + ground-truth geometry
# ---------------------------------------------------------------------------

def mask_to_crop_box(mask, target_hw):
    """Bounding box of the largest connected component of mask > 0.5, mapped
    into target pixel coordinates. Returns (x0, y0, x1, y1) with x1/y1 exclusive."""
    from .errors import NotLocatedError
    m = mask.detach().cpu().numpy() if torch.is_tensor(mask) else np.asarray(mask)
    m = np.squeeze(m)
    if m.ndim != 2:
        raise ConfigError(f"mask must be 2-D after squeeze, got {m.shape}")
    fg = m > 0.5
    if not fg.any():
        raise NotLocatedError("mask has no foreground above 0.5")
    labels, n = ndimage.label(fg)
    if n > 1:
        sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        fg = labels == keep
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    th, tw = target_hw
    sy, sx = th / m.shape[0], tw / m.shape[1]
    x0 = max(0, int(math.floor(cols[0] * sx)))
    y0 = max(0, int(math.floor(rows[0] * sy)))
    x1 = min(tw, int(math.ceil((cols[-1] + 1) * sx)))
    y1 = min(th, int(math.ceil((rows[-1] + 1) * sy)))
    return x0, y0, max(x1, x0 + 1), max(y1, y0 + 1)


def crop_and_resize(img, box, out_size: int) -> torch.Tensor:
    """Crop (x0, y0, x1, y1) and bilinearly resize to out_size; keeps gradients."""
    img, squeezed = _ensure_batch(img)
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= img.shape[-1] and 0 <= y0 < y1 <= img.shape[-2]):
        raise ConfigError(f"box {box} outside image of size {tuple(img.shape[-2:])}")
    crop = img[:, :, y0:y1, x0:x1]
    out = F.interpolate(crop, size=(out_size, out_size), mode="bilinear",
                        align_corners=False)
    return _unbatch(out, squeezed)


@dataclass
class CompositeSample:
    """A warped encoded image pasted over a background plus aligned ground truth."""
    composite: torch.Tensor   # B x 3 x K x K
    gt_mask: torch.Tensor     # B x 1 x M x M, values in {0, 1}
    gt_pattern: torch.Tensor  # B x 1 x S x S, cropped exactly as the decoder input
    warp: np.ndarray          # B x 3 x 3 output->input homographies (canvas coords)
    crop_box: list            # per-sample (x0, y0, x1, y1) in canvas coordinates
    applied: list             # names of the spatial distortions that fired


def _sample_spatial_matrix(size_hw, specs, fired, gen) -> np.ndarray:
    mat = identity_matrix()
    for spec in specs:
        if spec.name not in fired:
            continue
        if spec.name == "perspective":
            m = sample_perspective_matrix(size_hw, spec.params["scale"], gen)
        elif spec.name == "affine":
            m = sample_affine_matrix(size_hw, spec.params["rotate_deg"],
                                     spec.params["scale"], spec.params["translate"], gen)
        else:
            raise ConfigError(f"unknown spatial distortion {spec.name!r}")
        # a later op resamples the earlier output, so output->input maps chain
        # left to right: H_total = H_first @ H_second
        mat = mat @ m
    return mat


def compose_onto_background(encoded, background, pattern, specs, gen, *,
                            mask_size: int = 320, crop_size=None,
                            min_frac: float = 0.01, max_tries: int = 20) -> CompositeSample:
    """Warp the encoded image (and its pattern) onto a background canvas.

    The warp stack is sampled from `specs` (spatial DistortionSpec list, applied
    in order, each gated by its probability); the ground-truth mask is the warped
    footprint binarized at 0.5 after downscaling to mask_size, and the ground-truth
    pattern is cropped from the warped pattern canvas with the same box that
    crop-by-mask will use on the composite.
    """
    encoded, _ = _ensure_batch(encoded)
    background, _ = _ensure_batch(background)
    pattern, _ = _ensure_batch(pattern)
    b, _, s, s2 = encoded.shape
    k = background.shape[-1]
    if background.shape[-2] != k or s != s2:
        raise ConfigError("encoded image and background must be square")
    if k < s:
        raise ConfigError(f"canvas {k} smaller than encoded image {s}")
    if crop_size is None:
        crop_size = s
    fired = [spec.name for spec in specs
             if torch.rand((), generator=gen).item() < spec.probability]

    alpha = torch.ones(b, 1, s, s, dtype=encoded.dtype, device=encoded.device)
    stack = torch.cat([encoded, alpha, pattern], dim=1)
    off = (k - s) // 2
    stack = F.pad(stack, (off, k - s - off, off, k - s - off))

    mats = np.stack([_sample_spatial_matrix((k, k), specs, fired, gen) for _ in range(b)])
    warped = apply_homography(stack, mats)
    for _ in range(max_tries):
        frac = (warped[:, 3:4] > 0.5).float().mean(dim=(1, 2, 3))
        bad = (frac < min_frac).nonzero().flatten().tolist()
        if not bad:
            break
        for i in bad:
            mats[i] = _sample_spatial_matrix((k, k), specs, fired, gen)
        warped_bad = apply_homography(stack[bad], mats[bad])
        warped = warped.clone()
        warped[bad] = warped_bad
    else:
        raise ConfigError(f"warp footprint stayed below {min_frac:.2%} of the canvas")

    alpha_w = warped[:, 3:4]
    composite = (warped[:, :3] + (1.0 - alpha_w) * background).clamp(0.0, 1.0)
    gt_mask = F.interpolate(alpha_w, size=(mask_size, mask_size), mode="bilinear",
                            align_corners=False)
    gt_mask = (gt_mask > 0.5).to(encoded.dtype)
    boxes, crops = [], []
    for i in range(b):
        box = mask_to_crop_box(gt_mask[i], (k, k))
        boxes.append(box)
        crops.append(crop_and_resize(warped[i:i + 1, 4:5], box, crop_size))
    return CompositeSample(composite=composite, gt_mask=gt_mask,
                           gt_pattern=torch.cat(crops, dim=0), warp=mats,
                           crop_box=boxes, applied=fired)


# ---------------------------------------------------------------------------
# pipeline declaration
# ---------------------------------------------------------------------------

@dataclass
class DistortionSpec:
    """One distortion with named parameter ranges and an application probability."""
    name: str
    params: dict = field(default_factory=dict)
    probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"probability {self.probability} outside [0, 1]")
        if self.name == "random_erase":
            _check_range("erase area fraction", self.params["area_frac"], ERASE_AREA_BOUNDS)
            _check_range("erase aspect", self.params["aspect"], ERASE_ASPECT_BOUNDS)
        elif self.name == "perspective":
            _check_range("perspective scale", self.params["scale"], (0.0, PERSPECTIVE_SCALE_MAX))
        elif self.name in COLOR_CAPS:
            _check_range(self.name, self.params["amount"], (0.0, COLOR_CAPS[self.name]))
        elif self.name == "simulated_jpeg":
            _check_range("jpeg quality", self.params["quality"], (1.0, 100.0))


STAGE1_DEFAULTS = (
    ("random_erase", {"area_frac": (0.02, 0.33), "aspect": (0.3, 3.3)}),
    ("perspective", {"scale": (0.0, 0.7)}),
    ("affine", {"rotate_deg": (-15.0, 15.0), "scale": (1.0, 2.0), "translate": (-0.3, 0.3)}),
)

STAGE2_DEFAULTS = (
    ("perspective", {"scale": (0.0, 0.7)}),
    ("affine", {"rotate_deg": (-15.0, 15.0), "scale": (0.15, 1.0), "translate": (-0.3, 0.3)}),
    ("brightness", {"amount": (0.0, 0.3)}),
    ("contrast", {"amount": (0.0, 0.3)}),
    ("saturation", {"amount": (0.0, 0.3)}),
    ("hue", {"amount": (0.0, 0.1)}),
    ("gaussian_blur", {"kernel": (3, 3), "sigma": (0.1, 1.0)}),
    ("motion_blur", {"kernel": (3, 3)}),
    ("gaussian_noise", {"variance": (0.05, 0.05)}),
    ("simulated_jpeg", {"quality": (50.0, 100.0)}),
)


def build_pipeline(stage, overrides=None) -> list:
    """Ordered DistortionSpec list for a training stage or a fixed eval distortion."""
    overrides = dict(overrides or {})
    if stage in ("I", "1", 1):
        defaults = STAGE1_DEFAULTS
    elif stage in ("II", "2", 2):
        defaults = STAGE2_DEFAULTS
    elif stage == "eval":
        name = overrides.get("distortion")
        if name is None:
            raise ConfigError("eval pipeline needs a 'distortion' override")
        strength = float(overrides.get("strength", 0.0))
        return [DistortionSpec(name, {"strength": (strength, strength)}, probability=1.0)]
    else:
        raise ConfigError(f"unknown stage {stage!r}; expected 'I', 'II', or 'eval'")
    specs = []
    for name, params in defaults:
        params = dict(params)
        prob = 0.5
        if name in overrides:
            over = dict(overrides[name])
            prob = float(over.pop("probability", prob))
            for key, rng in over.items():
                if key not in params:
                    raise ConfigError(f"unknown parameter {key!r} for {name}")
                params[key] = tuple(rng)
        specs.append(DistortionSpec(name, params, prob))
    return specs


def pixel_specs(pipeline):
    return [s for s in pipeline if s.name in PIXEL_DISTORTIONS]


def spatial_specs(pipeline):
    return [s for s in pipeline if s.name in SPATIAL_DISTORTIONS]


def _amount(spec, gen):
    hi = spec.params["amount"][1]
    return _uniform(gen, -hi, hi)


def apply_pixel_pipeline(img, specs, gen):
    """Apply pixel-wise specs in order, each gated by its probability.

    Returns (image, names-of-fired-distortions)."""
    fired = []
    for spec in specs:
        if torch.rand((), generator=gen).item() >= spec.probability:
            continue
        fired.append(spec.name)
        if spec.name == "brightness":
            img = adjust_brightness(img, _amount(spec, gen))
        elif spec.name == "contrast":
            img = adjust_contrast(img, _amount(spec, gen))
        elif spec.name == "saturation":
            img = adjust_saturation(img, _amount(spec, gen))
        elif spec.name == "hue":
            img = adjust_hue(img, _amount(spec, gen))
        elif spec.name == "gaussian_blur":
            img = gaussian_blur(img, int(spec.params["kernel"][0]), spec.params["sigma"], gen)
        elif spec.name == "motion_blur":
            img = motion_blur(img, int(spec.params["kernel"][0]), gen)
        elif spec.name == "gaussian_noise":
            img = gaussian_noise(img, variance=_uniform(gen, *spec.params["variance"]), gen=gen)
        elif spec.name == "simulated_jpeg":
            img = simulated_jpeg(img, spec.params["quality"], gen)
        else:
            raise ConfigError(f"{spec.name!r} is not a pixel-wise distortion")
    return img, fired


def apply_stage1_pipeline(pattern, specs, gen):
    """Apply the pattern-space distortions (erase, perspective, affine) in order."""
    fired = []
    for spec in specs:
        if torch.rand((), generator=gen).item() >= spec.probability:
            continue
        fired.append(spec.name)
        if spec.name == "random_erase":
            pattern = random_erase(pattern, spec.params["area_frac"], spec.params["aspect"], gen)
        elif spec.name == "perspective":
            pattern, _ = perspective_warp(pattern, spec.params["scale"], gen)
        elif spec.name == "affine":
            pattern, _ = affine_warp(pattern, spec.params["rotate_deg"],
                                     spec.params["scale"], spec.params["translate"], gen)
        else:
            raise ConfigError(f"{spec.name!r} is not a stage-I distortion")
    return pattern, fired


# ---------------------------------------------------------------------------
# fixed-strength distortions for evaluation sweeps
# ---------------------------------------------------------------------------

EVAL_DISTORTIONS = ("brightness", "contrast", "saturation", "hue", "gaussian_noise",
                    "simulated_jpeg", "gaussian_blur", "perspective", "translation")


def apply_eval_distortion(img, name: str, strength: float, gen):
    """One named distortion at a fixed strength (no application coin flip)."""
    if name in ("brightness", "contrast", "saturation", "hue"):
        fn = {"brightness": adjust_brightness, "contrast": adjust_contrast,
              "saturation": adjust_saturation, "hue": adjust_hue}[name]
        return img if strength == 0.0 else fn(img, strength)
    if name == "gaussian_noise":
        return img if strength == 0.0 else gaussian_noise(img, variance=strength ** 2, gen=gen)
    if name == "simulated_jpeg":
        return simulated_jpeg(img, float(strength), gen)
    if name == "gaussian_blur":
        kernel = max(1, int(round(strength)) | 1)
        return img if kernel == 1 else gaussian_blur(img, kernel, sigma=100.0)
    if name == "perspective":
        if strength == 0.0:
            return img
        out, _ = perspective_warp(img, (strength, strength), gen)
        return out
    if name == "translation":
        if strength == 0.0:
            return img
        out, _ = affine_warp(img, (0.0, 0.0), (1.0, 1.0), (-strength, strength), gen)
        return out
    raise ConfigError(f"unknown distortion {name!r}; valid names: {', '.join(EVAL_DISTORTIONS)}")


# ---------------------------------------------------------------------------
# key-value serialization of pipelines
# ---------------------------------------------------------------------------

def specs_to_kv(specs) -> dict:
    """Flatten a pipeline into dotted key/value strings for config files."""
    out = {}
    for i, spec in enumerate(specs):
        prefix = f"distortion.{i}"
        out[f"{prefix}.name"] = spec.name
        out[f"{prefix}.probability"] = repr(spec.probability)
        for key, rng in spec.params.items():
            out[f"{prefix}.{key}"] = f"{rng[0]},{rng[1]}"
    return out


def specs_from_kv(mapping) -> list:
    """Inverse of specs_to_kv."""
    by_index = {}
    for key, value in mapping.items():
        parts = key.split(".")
        if len(parts) != 3 or parts[0] != "distortion":
            continue
        by_index.setdefault(int(parts[1]), {})[parts[2]] = value
    specs = []
    for i in sorted(by_index):
        fields = by_index[i]
        params = {k: tuple(float(x) for x in v.split(","))
                  for k, v in fields.items() if k not in ("name", "probability")}
        specs.append(DistortionSpec(fields["name"], params,
                                    float(fields.get("probability", 0.5))))
    return specs
