"""Deployed dataflow: embed (process -> encode) and extract (locate -> crop ->
decode -> extract) against a loaded checkpoint."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import media
from .distortions import crop_and_resize, mask_to_crop_box
from .errors import ConfigError, NotLocatedError
from .models import load_checkpoint

LOCATED_MIN_FRACTION = 0.005  # of mask pixels above 0.5


@dataclass
class EmbedResult:
    encoded: np.ndarray    # same shape as the cover
    residual: np.ndarray   # encoded - cover, offset by 0.5 for display
    psnr: float
    ssim: float


@dataclass
class ExtractResult:
    mask: np.ndarray           # 1 x L x L soft mask
    crop_box: tuple | None     # (x0, y0, x1, y1) in source pixel coordinates
    pattern: np.ndarray | None
    scores: np.ndarray | None
    message: np.ndarray | None
    located: bool


def _to_tensor(img) -> torch.Tensor:
    if torch.is_tensor(img):
        t = img.detach().float()
    else:
        t = torch.from_numpy(np.asarray(img, dtype=np.float32))
    if t.dim() == 2:
        t = t.unsqueeze(0)
    if t.dim() != 3:
        raise ConfigError(f"expected a (C, H, W) image, got shape {tuple(t.shape)}")
    return t


class WatermarkCodec:
    """Read-only embed/extract interface over a set of trained handles."""

    def __init__(self, handles: dict, geometry: dict, device: str = "cpu"):
        self.handles = handles
        self.geometry = dict(geometry)
        self.device = torch.device(device)
        for handle in handles.values():
            handle.module.eval().to(self.device)

    @classmethod
    def from_checkpoint(cls, ckpt_dir, device: str = "cpu") -> "WatermarkCodec":
        handles, manifest = load_checkpoint(ckpt_dir)
        return cls(handles, manifest["geometry"], device)

    @property
    def message_bits(self) -> int:
        return self.geometry["message_bits"]

    def _prep_cover(self, img) -> torch.Tensor:
        t = _to_tensor(img)
        if t.shape[0] == 1:
            warnings.warn("grayscale cover replicated to 3 channels")
            t = t.expand(3, -1, -1).contiguous()
        if t.shape[0] != 3:
            raise ConfigError(f"cover must have 1 or 3 channels, got {t.shape[0]}")
        return t.clamp(0.0, 1.0).to(self.device)

    def embed(self, cover, message) -> EmbedResult:
        """Embed a message; arbitrary cover sizes are handled by upsampling the
        embedding residual back to the original resolution."""
        bits = np.asarray(message).reshape(-1)
        if bits.shape[0] != self.message_bits:
            raise ConfigError(f"message must have {self.message_bits} bits, "
                              f"got {bits.shape[0]}")
        cover_t = self._prep_cover(cover)
        size = self.geometry["image_size"]
        with torch.no_grad():
            small = cover_t.unsqueeze(0)
            if small.shape[-2:] != (size, size):
                small = F.interpolate(small, size=(size, size), mode="bilinear",
                                      align_corners=False)
            msg_t = torch.from_numpy(bits.astype(np.float32)).unsqueeze(0).to(self.device)
            pattern = self.handles["processor"](msg_t)
            if pattern.shape[-1] != size:
                pattern = F.interpolate(pattern, size=(size, size), mode="bilinear",
                                        align_corners=False)
            encoded_small = self.handles["encoder"](torch.cat([small, pattern], dim=1))
            residual = encoded_small - small
            if residual.shape[-2:] != cover_t.shape[-2:]:
                residual = F.interpolate(residual, size=cover_t.shape[-2:],
                                         mode="bilinear", align_corners=False)
            encoded = (cover_t + residual.squeeze(0)).clamp(0.0, 1.0)
        cover_np = cover_t.cpu().numpy()
        encoded_np = encoded.cpu().numpy()
        return EmbedResult(
            encoded=encoded_np,
            residual=np.clip(0.5 + encoded_np - cover_np, 0.0, 1.0),
            psnr=media.psnr(cover_np, encoded_np),
            ssim=media.ssim(cover_np, encoded_np),
        )

    def _decode_from_crop(self, crop: torch.Tensor):
        decoded = self.handles["decoder"](crop)
        native = decoded
        psize = self.geometry["pattern_size"]
        if native.shape[-1] != psize:
            native = F.interpolate(native, size=(psize, psize), mode="bilinear",
                                   align_corners=False)
        scores = self.handles["extractor"](native)
        return native.squeeze(0).cpu().numpy(), scores.squeeze(0).cpu().numpy()

    def extract(self, photo) -> ExtractResult:
        """Locate, crop, decode, and extract. Failure to locate is reported via
        the located flag, never raised."""
        photo_t = self._prep_cover(photo)
        lsize = self.geometry["locator_size"]
        with torch.no_grad():
            loc_in = F.interpolate(photo_t.unsqueeze(0), size=(lsize, lsize),
                                   mode="bilinear", align_corners=False)
            mask = self.handles["locator"](loc_in).squeeze(0)
            mask_np = mask.cpu().numpy()
            if float((mask_np > 0.5).mean()) <= LOCATED_MIN_FRACTION:
                return ExtractResult(mask_np, None, None, None, None, False)
            try:
                box = mask_to_crop_box(mask, photo_t.shape[-2:])
            except NotLocatedError:
                return ExtractResult(mask_np, None, None, None, None, False)
            crop = crop_and_resize(photo_t.unsqueeze(0), box,
                                   self.geometry["image_size"])
            pattern, scores = self._decode_from_crop(crop)
        return ExtractResult(mask_np, box, pattern, scores,
                             (scores > 0).astype(np.uint8), True)

    def extract_with_gt_box(self, photo, box) -> ExtractResult:
        """Debug path with a caller-supplied crop box, bypassing the locator."""
        photo_t = self._prep_cover(photo)
        x0, y0, x1, y1 = (int(v) for v in box)
        h, w = photo_t.shape[-2:]
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ConfigError(f"box {box} outside image of size {(h, w)}")
        lsize = self.geometry["locator_size"]
        mask = np.zeros((1, lsize, lsize), dtype=np.float32)
        sy, sx = lsize / h, lsize / w
        mask[0, int(y0 * sy):max(int(y1 * sy), int(y0 * sy) + 1),
             int(x0 * sx):max(int(x1 * sx), int(x0 * sx) + 1)] = 1.0
        with torch.no_grad():
            crop = crop_and_resize(photo_t.unsqueeze(0), (x0, y0, x1, y1),
                                   self.geometry["image_size"])
            pattern, scores = self._decode_from_crop(crop)
        return ExtractResult(mask, (x0, y0, x1, y1), pattern, scores,
                             (scores > 0).astype(np.uint8), True)


def _as_codec(ckpt) -> WatermarkCodec:
    if isinstance(ckpt, WatermarkCodec):
        return ckpt
    return WatermarkCodec.from_checkpoint(ckpt)


def embed(cover, message, ckpt) -> EmbedResult:
    return _as_codec(ckpt).embed(cover, message)


def extract(photo, ckpt) -> ExtractResult:
    return _as_codec(ckpt).extract(photo)


def extract_with_gt_box(photo, box, ckpt) -> ExtractResult:
    return _as_codec(ckpt).extract_with_gt_box(photo, box)
