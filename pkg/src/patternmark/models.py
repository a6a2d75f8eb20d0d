"""The five networks (message processor, encoder, locator, decoder, extractor),
their shape contracts, and checkpoint persistence."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, ConfigError, MissingArtifactError

ROLES = ("processor", "encoder", "locator", "decoder", "extractor")


# ---------------------------------------------------------------------------
# message processor: bit vector -> single-channel square pattern
# ---------------------------------------------------------------------------

# channel schedule tail used when none is configured, shallowest block last
_PROCESSOR_TAIL = (1, 16, 32, 64, 64, 128, 128, 256, 256, 256)


class MessageProcessor(nn.Module):
    """Upsamples a bit vector to a pattern via stacked transposed convolutions."""

    def __init__(self, message_bits=196, pattern_size=256, channels=None):
        super().__init__()
        n_blocks = int(round(math.log2(pattern_size)))
        if 2 ** n_blocks != pattern_size or n_blocks < 1:
            raise ConfigError(f"pattern_size must be a power of two, got {pattern_size}")
        if channels is None:
            channels = tuple(reversed(_PROCESSOR_TAIL[:n_blocks]))
        channels = tuple(int(c) for c in channels)
        if len(channels) != n_blocks or channels[-1] != 1:
            raise ConfigError(
                f"channel schedule {channels} cannot reach a 1x{pattern_size}x{pattern_size} "
                f"pattern in {n_blocks} doubling blocks")
        self.message_bits = message_bits
        self.pattern_size = pattern_size
        layers = []
        prev = message_bits
        for i, ch in enumerate(channels):
            layers.append(nn.ConvTranspose2d(prev, ch, 4, stride=2, padding=1))
            if i < len(channels) - 1:
                layers += [nn.BatchNorm2d(ch), nn.ReLU(inplace=True)]
            prev = ch
        self.blocks = nn.Sequential(*layers)

    def forward(self, bits):
        if bits.dim() == 2:
            bits = bits[:, :, None, None]
        return torch.sigmoid(self.blocks(bits))


# ---------------------------------------------------------------------------
# U-Net used by both the encoder and the pattern decoder
# ---------------------------------------------------------------------------

class _DoubleConv(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class UNet(nn.Module):
    """Encoder-decoder with skip connections and a bounded output head.

    head='sigmoid' squashes the output; head='residual' adds the output to the
    first out_channels input planes and clamps to [0, 1].
    """

    def __init__(self, in_channels, out_channels, base=32, levels=4, head="sigmoid"):
        super().__init__()
        if head not in ("sigmoid", "residual"):
            raise ConfigError(f"unknown head {head!r}")
        self.head = head
        self.out_channels = out_channels
        widths = [base * 2 ** i for i in range(levels + 1)]
        self.inc = _DoubleConv(in_channels, widths[0])
        self.downs = nn.ModuleList(
            [_DoubleConv(widths[i], widths[i + 1]) for i in range(levels)])
        self.ups = nn.ModuleList(
            [_DoubleConv(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(levels))])
        self.outc = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x):
        feats = [self.inc(x)]
        for down in self.downs:
            feats.append(down(F.max_pool2d(feats[-1], 2)))
        h = feats[-1]
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = up(torch.cat([h, skip], dim=1))
        out = self.outc(h)
        if self.head == "residual":
            return (x[:, : self.out_channels] + out).clamp(0.0, 1.0)
        return torch.sigmoid(out)


# ---------------------------------------------------------------------------
# nested-U salient detection network (the locator)
# ---------------------------------------------------------------------------

class _ConvBNReLU(nn.Module):
    def __init__(self, in_ch, out_ch, dilation=1):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


def _resize_like(x, ref):
    if x.shape[-2:] == ref.shape[-2:]:
        return x
    return F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)


class _RSU(nn.Module):
    """Residual U-block: a small U-Net whose output is added to its input conv."""

    def __init__(self, height, in_ch, mid_ch, out_ch):
        super().__init__()
        self.height = height
        self.conv_in = _ConvBNReLU(in_ch, out_ch)
        encoders = [_ConvBNReLU(out_ch, mid_ch)]
        encoders += [_ConvBNReLU(mid_ch, mid_ch) for _ in range(height - 2)]
        self.encoders = nn.ModuleList(encoders)
        self.bottom = _ConvBNReLU(mid_ch, mid_ch, dilation=2)
        decoders = [_ConvBNReLU(2 * mid_ch, mid_ch) for _ in range(height - 2)]
        decoders.append(_ConvBNReLU(2 * mid_ch, out_ch))
        self.decoders = nn.ModuleList(decoders)

    def forward(self, x):
        hxin = self.conv_in(x)
        hx = hxin
        skips = []
        for i, enc in enumerate(self.encoders):
            hx = enc(hx)
            skips.append(hx)
            if i < len(self.encoders) - 1:
                hx = F.max_pool2d(hx, 2, ceil_mode=True)
        hx = self.bottom(hx)
        for i, dec in enumerate(self.decoders):
            skip = skips[-(i + 1)]
            hx = dec(torch.cat([_resize_like(hx, skip), skip], dim=1))
        return hxin + hx


class _RSUF(nn.Module):
    """Dilation-only residual U-block (no spatial resampling)."""

    def __init__(self, in_ch, mid_ch, out_ch):
        super().__init__()
        self.conv_in = _ConvBNReLU(in_ch, out_ch)
        self.enc1 = _ConvBNReLU(out_ch, mid_ch, 1)
        self.enc2 = _ConvBNReLU(mid_ch, mid_ch, 2)
        self.enc3 = _ConvBNReLU(mid_ch, mid_ch, 4)
        self.bottom = _ConvBNReLU(mid_ch, mid_ch, 8)
        self.dec3 = _ConvBNReLU(2 * mid_ch, mid_ch, 4)
        self.dec2 = _ConvBNReLU(2 * mid_ch, mid_ch, 2)
        self.dec1 = _ConvBNReLU(2 * mid_ch, out_ch, 1)

    def forward(self, x):
        hxin = self.conv_in(x)
        h1 = self.enc1(hxin)
        h2 = self.enc2(h1)
        h3 = self.enc3(h2)
        h4 = self.bottom(h3)
        d3 = self.dec3(torch.cat([h4, h3], dim=1))
        d2 = self.dec2(torch.cat([d3, h2], dim=1))
        d1 = self.dec1(torch.cat([d2, h1], dim=1))
        return hxin + d1


_NESTED_U_CFGS = {
    # (encoder stages, decoder stages); entries are (height|'F', in, mid, out)
    "full": (
        [(7, 3, 32, 64), (6, 64, 32, 128), (5, 128, 64, 256),
         (4, 256, 128, 512), ("F", 512, 256, 512), ("F", 512, 256, 512)],
        [("F", 1024, 256, 512), (4, 1024, 128, 256), (5, 512, 64, 128),
         (6, 256, 32, 64), (7, 128, 16, 64)],
    ),
    "light": (
        [(7, 3, 16, 64), (6, 64, 16, 64), (5, 64, 16, 64),
         (4, 64, 16, 64), ("F", 64, 16, 64), ("F", 64, 16, 64)],
        [("F", 128, 16, 64), (4, 128, 16, 64), (5, 128, 16, 64),
         (6, 128, 16, 64), (7, 128, 16, 64)],
    ),
}


def _make_stage(spec):
    height, in_ch, mid_ch, out_ch = spec
    if height == "F":
        return _RSUF(in_ch, mid_ch, out_ch)
    return _RSU(height, in_ch, mid_ch, out_ch)


class NestedUNet(nn.Module):
    """Nested-U segmentation network predicting a soft mask in [0, 1]."""

    def __init__(self, variant="light"):
        super().__init__()
        if variant not in _NESTED_U_CFGS:
            raise ConfigError(f"unknown locator variant {variant!r}")
        enc_cfg, dec_cfg = _NESTED_U_CFGS[variant]
        self.encoders = nn.ModuleList(_make_stage(s) for s in enc_cfg)
        self.decoders = nn.ModuleList(_make_stage(s) for s in dec_cfg)
        side_srcs = [enc_cfg[-1][3]] + [s[3] for s in dec_cfg]
        self.sides = nn.ModuleList(nn.Conv2d(ch, 1, 3, padding=1) for ch in side_srcs)
        self.fuse = nn.Conv2d(len(self.sides), 1, 1)

    def forward(self, x):
        skips = []
        hx = x
        for i, stage in enumerate(self.encoders):
            hx = stage(hx)
            skips.append(hx)
            if i < len(self.encoders) - 1:
                hx = F.max_pool2d(hx, 2, ceil_mode=True)
        d = skips[-1]
        feats = [d]
        for i, stage in enumerate(self.decoders):
            skip = skips[-(i + 2)]
            d = stage(torch.cat([_resize_like(d, skip), skip], dim=1))
            feats.append(d)
        sides = [_resize_like(conv(f), x) for conv, f in zip(self.sides, feats)]
        return torch.sigmoid(self.fuse(torch.cat(sides, dim=1)))


# ---------------------------------------------------------------------------
# message extractor backbones
# ---------------------------------------------------------------------------

class _ConvNeXtBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pw1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.pw2 = nn.Linear(4 * dim, dim)
        self.gamma = nn.Parameter(1e-6 * torch.ones(dim))

    def forward(self, x):
        y = self.dwconv(x).permute(0, 2, 3, 1)
        y = self.pw2(self.act(self.pw1(self.norm(y))))
        y = (self.gamma * y).permute(0, 3, 1, 2)
        return x + y


class _LayerNorm2d(nn.Module):
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ConvNeXt(nn.Module):
    """Modern-convolutional classifier emitting unbounded per-bit scores."""

    def __init__(self, in_channels=1, out_dim=196, depths=(3, 3, 9, 3),
                 dims=(96, 192, 384, 768)):
        super().__init__()
        stems = [nn.Sequential(nn.Conv2d(in_channels, dims[0], 4, stride=4),
                               _LayerNorm2d(dims[0]))]
        for i in range(len(dims) - 1):
            stems.append(nn.Sequential(_LayerNorm2d(dims[i]),
                                       nn.Conv2d(dims[i], dims[i + 1], 2, stride=2)))
        self.downsamples = nn.ModuleList(stems)
        self.stages = nn.ModuleList(
            nn.Sequential(*[_ConvNeXtBlock(dims[i]) for _ in range(depths[i])])
            for i in range(len(dims)))
        self.norm = nn.LayerNorm(dims[-1], eps=1e-6)
        self.head = nn.Linear(dims[-1], out_dim)
        nn.init.zeros_(self.head.weight)  # scores start at 0: chance-level BCE
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        for down, stage in zip(self.downsamples, self.stages):
            x = stage(down(x))
        return self.head(self.norm(x.mean(dim=(-2, -1))))


class _BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.short = None
        if stride != 1 or in_ch != out_ch:
            self.short = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                                       nn.BatchNorm2d(out_ch))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)), inplace=True)
        y = self.bn2(self.conv2(y))
        skip = x if self.short is None else self.short(x)
        return F.relu(y + skip, inplace=True)


class ResNetExtractor(nn.Module):
    """Residual-convolutional alternate for the message extractor."""

    def __init__(self, in_channels=1, out_dim=196, layers=(2, 2, 2, 2), width=64):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(width), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1))
        blocks = []
        in_ch = width
        for i, n in enumerate(layers):
            out_ch = width * 2 ** i
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(_BasicBlock(in_ch, out_ch, stride))
                in_ch = out_ch
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(in_ch, out_dim)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x):
        x = self.blocks(self.stem(x))
        return self.fc(x.mean(dim=(-2, -1)))


# ---------------------------------------------------------------------------
# handles and builders
# ---------------------------------------------------------------------------

@dataclass
class ModelHandle:
    """A role-tagged network with its build config and freeze state."""
    role: str
    module: nn.Module
    config: dict
    frozen: bool = False

    def __call__(self, *args):
        return self.module(*args)

    def parameters(self):
        return self.module.parameters()

    def freeze(self):
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.module.eval()
        self.frozen = True

    def unfreeze(self):
        for p in self.module.parameters():
            p.requires_grad_(True)
        self.frozen = False


def _normalize(config, defaults):
    cfg = dict(defaults)
    for key, value in (config or {}).items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}; expected one of {sorted(cfg)}")
        cfg[key] = value
    return json.loads(json.dumps(cfg))  # canonical JSON-able form


def build_processor(config=None) -> ModelHandle:
    cfg = _normalize(config, {"message_bits": 196, "pattern_size": 256, "channels": None})
    module = MessageProcessor(cfg["message_bits"], cfg["pattern_size"], cfg["channels"])
    return ModelHandle("processor", module, cfg)


def build_encoder(config=None) -> ModelHandle:
    cfg = _normalize(config, {"in_channels": 4, "out_channels": 3, "base": 32,
                              "levels": 4, "head": "sigmoid"})
    module = UNet(cfg["in_channels"], cfg["out_channels"], cfg["base"], cfg["levels"],
                  cfg["head"])
    return ModelHandle("encoder", module, cfg)


def build_locator(config=None) -> ModelHandle:
    cfg = _normalize(config, {"variant": "light", "size": 320})
    return ModelHandle("locator", NestedUNet(cfg["variant"]), cfg)


def build_decoder(config=None) -> ModelHandle:
    cfg = _normalize(config, {"in_channels": 3, "out_channels": 1, "base": 32,
                              "levels": 4, "head": "sigmoid"})
    module = UNet(cfg["in_channels"], cfg["out_channels"], cfg["base"], cfg["levels"],
                  cfg["head"])
    return ModelHandle("decoder", module, cfg)


def build_extractor(config=None) -> ModelHandle:
    cfg = _normalize(config, {"message_bits": 196, "backbone": "convnext",
                              "depths": (3, 3, 9, 3), "dims": (96, 192, 384, 768),
                              "layers": (2, 2, 2, 2), "width": 64})
    if cfg["backbone"] == "convnext":
        module = ConvNeXt(1, cfg["message_bits"], cfg["depths"], cfg["dims"])
    elif cfg["backbone"] == "resnet":
        module = ResNetExtractor(1, cfg["message_bits"], cfg["layers"], cfg["width"])
    else:
        raise ConfigError(f"unknown extractor backbone {cfg['backbone']!r}")
    return ModelHandle("extractor", module, cfg)


ROLE_BUILDERS = {
    "processor": build_processor,
    "encoder": build_encoder,
    "locator": build_locator,
    "decoder": build_decoder,
    "extractor": build_extractor,
}


def build_all(model_configs) -> dict:
    """Build handles for every role from a {role: config} mapping."""
    return {role: ROLE_BUILDERS[role](model_configs.get(role)) for role in ROLES}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(handles: dict, manifest: dict, out_dir) -> str:
    """Write one weight file per role plus a JSON manifest; returns out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    roles = sorted(handles)
    for role in roles:
        handle = handles[role]
        torch.save({"state_dict": handle.module.state_dict(), "config": handle.config},
                   os.path.join(out_dir, f"{role}.pt"))
    meta = {
        "roles": roles,
        "configs": {role: handles[role].config for role in roles},
        "config_hashes": {role: config_hash(handles[role].config) for role in roles},
    }
    meta.update(manifest)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return str(out_dir)


def load_manifest(ckpt_dir) -> dict:
    path = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.isfile(path):
        raise MissingArtifactError(f"no checkpoint manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def load_checkpoint(ckpt_dir, map_location="cpu"):
    """Rebuild handles from a checkpoint directory; returns (handles, manifest)."""
    manifest = load_manifest(ckpt_dir)
    handles = {}
    for role in manifest["roles"]:
        path = os.path.join(ckpt_dir, f"{role}.pt")
        if not os.path.isfile(path):
            raise CheckpointError(f"checkpoint is missing weights for role '{role}'")
        payload = torch.load(path, map_location=map_location, weights_only=True)
        cfg = payload["config"]
        if config_hash(cfg) != manifest["config_hashes"].get(role):
            raise CheckpointError(f"config hash mismatch for role '{role}'")
        handle = ROLE_BUILDERS[role](cfg)
        handle.module.load_state_dict(payload["state_dict"])
        handle.module.eval()
        handles[role] = handle
    return handles, manifest
