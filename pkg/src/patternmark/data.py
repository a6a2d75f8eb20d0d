"""Image-folder dataset access and synthetic cover generation for smoke runs."""

from __future__ import annotations

import os

import numpy as np
import torch
from PIL import Image

from .errors import MissingArtifactError

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


class ImageFolder:
    """Flat folder of images, loadable at any square size.

    An optional split file (one filename per line) restricts and orders the set.
    """

    def __init__(self, root, split_list=None):
        self.root = str(root)
        if not os.path.isdir(self.root):
            raise MissingArtifactError(f"dataset folder not found: {self.root}")
        if split_list is not None:
            with open(split_list) as fh:
                names = [line.strip() for line in fh if line.strip()]
        else:
            names = sorted(n for n in os.listdir(self.root)
                           if n.lower().endswith(IMAGE_EXTS))
        if not names:
            raise MissingArtifactError(f"no images found under {self.root}")
        self.names = names

    def __len__(self):
        return len(self.names)

    def path(self, idx):
        return os.path.join(self.root, self.names[idx])

    def load(self, idx, size: int) -> torch.Tensor:
        """RGB tensor (3, size, size) in [0, 1]."""
        with Image.open(self.path(idx)) as im:
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
        return torch.from_numpy(arr.transpose(2, 0, 1))

    def load_batch(self, indices, size: int) -> torch.Tensor:
        return torch.stack([self.load(i, size) for i in indices])


def make_synthetic_dataset(out_dir, n: int = 120, size: int = 128, seed: int = 0):
    """Write n colorful synthetic covers (smooth texture + shapes) as PNGs."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    paths = []
    for i in range(n):
        low = rng.uniform(0.0, 1.0, size=(3, 4, 4))
        img = np.stack([np.kron(low[c], np.ones((size // 4, size // 4)))
                        for c in range(3)])
        # smooth the blocky base
        for _ in range(2):
            img = (img + np.roll(img, 7, axis=1) + np.roll(img, 7, axis=2)
                   + np.roll(img, -7, axis=1) + np.roll(img, -7, axis=2)) / 5.0
        for _ in range(rng.integers(2, 6)):
            cx, cy = rng.uniform(0.1, 0.9, 2)
            rx, ry = rng.uniform(0.05, 0.3, 2)
            color = rng.uniform(0.0, 1.0, 3)
            inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 < 1.0
            alpha = rng.uniform(0.4, 1.0)
            for c in range(3):
                img[c][inside] = (1 - alpha) * img[c][inside] + alpha * color[c]
        img += rng.normal(0.0, 0.02, img.shape)
        img = np.clip(img, 0.0, 1.0)
        u8 = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        path = os.path.join(out_dir, f"img_{i:04d}.png")
        Image.fromarray(u8).save(path)
        paths.append(path)
    return paths
