"""Digital-robustness sweeps and quality evaluation, emitting CSVs and plots."""

from __future__ import annotations

import csv
import hashlib
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from . import distortions as dist
from . import media
from .errors import ConfigError

# five evenly spaced points spanning each training range
DEFAULT_SWEEP_AXES = {
    "brightness": [0.0, 0.075, 0.15, 0.225, 0.3],
    "contrast": [0.0, 0.075, 0.15, 0.225, 0.3],
    "saturation": [0.0, 0.075, 0.15, 0.225, 0.3],
    "hue": [0.0, 0.025, 0.05, 0.075, 0.1],
    "gaussian_noise": [0.0, 0.056, 0.112, 0.168, 0.224],  # sigma; training var 0.05
    "simulated_jpeg": [50.0, 63.0, 75.0, 88.0, 100.0],    # quality factors
    "gaussian_blur": [1.0, 3.0, 5.0, 7.0, 9.0],           # kernel sizes, sigma 100
    "perspective": [0.0, 0.175, 0.35, 0.525, 0.7],
    "translation": [0.0, 0.075, 0.15, 0.225, 0.3],
}

CSV_FIELDS = ("distortion", "strength", "n", "mean_ber", "std_ber", "locate_rate",
              "mean_psnr", "mean_ssim", "mean_ber_pessimistic")


@dataclass
class SweepSpec:
    distortion: str
    strengths: list = field(default_factory=list)
    n_images: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.distortion not in dist.EVAL_DISTORTIONS:
            raise ConfigError(f"unknown distortion {self.distortion!r}; valid names: "
                              f"{', '.join(dist.EVAL_DISTORTIONS)}")
        if not self.strengths:
            self.strengths = list(DEFAULT_SWEEP_AXES[self.distortion])
        if list(self.strengths) != sorted(self.strengths):
            raise ConfigError(f"strengths must be monotone: {self.strengths}")


@dataclass
class SweepRow:
    distortion: str
    strength: float
    n: int
    mean_ber: float
    std_ber: float
    locate_rate: float
    mean_psnr: float
    mean_ssim: float
    mean_ber_pessimistic: float


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def for_distortion(self, name):
        return [r for r in self.rows if r.distortion == name]


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 31)


def _cell_messages(seed, image_idx, bits) -> np.ndarray:
    return media.random_message(_stable_seed("msg", seed, image_idx), bits)


def _aggregate(name, strength, bers, located, psnrs, ssims) -> SweepRow:
    located = np.asarray(located, dtype=bool)
    bers = np.asarray(bers, dtype=np.float64)
    hit = bers[located]
    pessimistic = np.where(located, bers, 0.5)
    return SweepRow(
        distortion=name, strength=float(strength), n=len(bers),
        mean_ber=float(hit.mean()) if hit.size else float("nan"),
        std_ber=float(hit.std()) if hit.size else float("nan"),
        locate_rate=float(located.mean()),
        mean_psnr=float(np.mean(psnrs)),
        mean_ssim=float(np.mean(ssims)),
        mean_ber_pessimistic=float(pessimistic.mean()),
    )


def run_quality_eval(codec, dataset, n: int = 100, seed: int = 0):
    """Mean PSNR/SSIM of embedding fresh random messages into n covers."""
    n = min(n, len(dataset))
    psnrs, ssims = [], []
    size = codec.geometry["image_size"] if hasattr(codec, "geometry") else 256
    for i in range(n):
        msg = _cell_messages(seed, i, codec.message_bits)
        cover = dataset.load(i, size)
        res = codec.embed(cover, msg)
        psnrs.append(res.psnr)
        ssims.append(res.ssim)
    return float(np.mean(psnrs)), float(np.mean(ssims))


def _roundtrip_cell(codec, encoded, truth, name, strength, gen):
    img = torch.from_numpy(np.asarray(encoded, dtype=np.float32)).unsqueeze(0)
    distorted = dist.apply_eval_distortion(img, name, strength, gen).squeeze(0)
    res = codec.extract(distorted.numpy())
    if not res.located:
        return float("nan"), False
    return media.ber(truth, res.message), True


def undistorted_roundtrip(codec, dataset, n: int, seed: int = 0):
    """Per-image BER of embed -> extract with no distortion in between."""
    n = min(n, len(dataset))
    size = codec.geometry["image_size"]
    bers, located = [], []
    for i in range(n):
        msg = _cell_messages(seed, i, codec.message_bits)
        res = codec.embed(dataset.load(i, size), msg)
        ext = codec.extract(res.encoded)
        located.append(ext.located)
        bers.append(media.ber(msg, ext.message) if ext.located else float("nan"))
    return bers, located


def run_digital_sweep(codec, specs, dataset) -> SweepResult:
    """Embed, apply one distortion at an exact strength, extract; one row per
    (distortion, strength)."""
    result = SweepResult()
    size = codec.geometry["image_size"]
    for spec in specs:
        n = min(spec.n_images, len(dataset))
        embeds, truths, psnrs, ssims = [], [], [], []
        for i in range(n):
            msg = _cell_messages(spec.seed, i, codec.message_bits)
            res = codec.embed(dataset.load(i, size), msg)
            embeds.append(res.encoded)
            truths.append(msg)
            psnrs.append(res.psnr)
            ssims.append(res.ssim)
        for si, strength in enumerate(spec.strengths):
            bers, located = [], []
            for i in range(n):
                gen = torch.Generator().manual_seed(
                    _stable_seed(spec.seed, spec.distortion, si, i))
                b, loc = _roundtrip_cell(codec, embeds[i], truths[i],
                                         spec.distortion, strength, gen)
                bers.append(b)
                located.append(loc)
            result.rows.append(_aggregate(spec.distortion, strength, bers,
                                          located, psnrs, ssims))
    return result


COMBINED_SPATIAL = (("perspective", (0.0, 0.7)), ("translation", (0.0, 0.3)))


def run_combined_distortion_eval(codec, dataset, n: int = 20, seed: int = 0,
                                 probability: float = 0.5):
    """Apply every training-strength distortion at the given probability and
    report pooled statistics plus per-image BER quantiles."""
    n = min(n, len(dataset))
    size = codec.geometry["image_size"]
    pixel = dist.pixel_specs(dist.build_pipeline("II"))
    for spec in pixel:
        spec.probability = probability
    bers, located, psnrs, ssims = [], [], [], []
    for i in range(n):
        gen = torch.Generator().manual_seed(_stable_seed(seed, "combined", i))
        msg = _cell_messages(seed, i, codec.message_bits)
        res = codec.embed(dataset.load(i, size), msg)
        psnrs.append(res.psnr)
        ssims.append(res.ssim)
        img = torch.from_numpy(res.encoded).unsqueeze(0)
        for name, rng in COMBINED_SPATIAL:
            if torch.rand((), generator=gen).item() < probability:
                strength = rng[0] + (rng[1] - rng[0]) * torch.rand((), generator=gen).item()
                img = dist.apply_eval_distortion(img, name, strength, gen)
        img, _ = dist.apply_pixel_pipeline(img, pixel, gen)
        ext = codec.extract(img.squeeze(0).numpy())
        located.append(ext.located)
        bers.append(media.ber(msg, ext.message) if ext.located else float("nan"))
    row = _aggregate("combined", probability, bers, located, psnrs, ssims)
    hit = np.asarray(bers)[np.asarray(located, dtype=bool)]
    quantiles = {"p50": float(np.percentile(hit, 50)) if hit.size else float("nan"),
                 "p90": float(np.percentile(hit, 90)) if hit.size else float("nan")}
    return row, quantiles


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, f)) for f in CSV_FIELDS])


def _plot(path, name, rows):
    fig = Figure(figsize=(5, 3.5))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    xs = [r.strength for r in rows]
    ax.plot(xs, [r.mean_ber for r in rows], "o-", label="BER (located)")
    ax.plot(xs, [r.mean_ber_pessimistic for r in rows], "s--",
            label="BER (unlocated = 0.5)")
    ax.set_xlabel(name)
    ax.set_ylabel("bit error ratio")
    ax.set_ylim(-0.02, 0.55)
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)


def emit_report(result: SweepResult, quality, out_dir,
                timestamp: bool = True) -> list:
    """One CSV and one plot per distortion plus a markdown summary."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    names = []
    for row in result.rows:
        if row.distortion not in names:
            names.append(row.distortion)
    lines = ["# Robustness report", ""]
    if timestamp:
        lines.append(f"generated: {time.strftime('%Y-%m-%d %H:%M:%S')}")
        lines.append("")
    if quality is not None:
        lines += ["## Visual quality", "",
                  "| mean PSNR (dB) | mean SSIM |", "| --- | --- |",
                  f"| {_fmt(float(quality[0]))} | {_fmt(float(quality[1]))} |", ""]
    for name in names:
        rows = result.for_distortion(name)
        csv_path = os.path.join(out_dir, f"sweep_{name}.csv")
        _write_csv(csv_path, rows)
        paths.append(csv_path)
        png_path = os.path.join(out_dir, f"sweep_{name}.png")
        _plot(png_path, name, rows)
        paths.append(png_path)
        lines += [f"## {name}", "",
                  "| strength | mean BER | locate rate | pessimistic BER |",
                  "| --- | --- | --- | --- |"]
        lines += [f"| {_fmt(r.strength)} | {_fmt(r.mean_ber)} | "
                  f"{_fmt(r.locate_rate)} | {_fmt(r.mean_ber_pessimistic)} |"
                  for r in rows]
        lines.append("")
    md_path = os.path.join(out_dir, "summary.md")
    with open(md_path, "w") as fh:
        fh.write("\n".join(lines))
    paths.append(md_path)
    return paths
