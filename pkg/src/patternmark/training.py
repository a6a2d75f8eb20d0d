"""Three-stage training: message diffusion pretraining, embed/locate/decode
training with frozen ends, and end-to-end fine-tuning."""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from . import distortions as dist
from .data import ImageFolder
from .errors import ConfigError, MissingArtifactError
from .losses import loss_stage1, loss_stage2, loss_stage3
from .models import load_manifest, save_checkpoint

DEFAULT_GEOMETRY = {
    "message_bits": 196,
    "pattern_size": 256,
    "image_size": 256,
    "canvas_size": 448,
    "locator_size": 320,
}

_STAGE_DEFAULTS = {
    1: dict(epochs=20, batch_size=32, lr=1e-3, accumulate_every=1,
            lambdas=(1.0, 1.0, 1.0, 1.0)),
    2: dict(epochs=14, batch_size=10, lr=1e-3, accumulate_every=2,
            lambdas=(1.0, 1.0, 1.0, 1.0)),
    3: dict(epochs=20, batch_size=10, lr=1e-4, accumulate_every=2,
            lambdas=(10.0, 1.0, 1.0, 1.0)),
}


@dataclass
class StageConfig:
    stage: int
    epochs: int
    batch_size: int
    lr: float
    weight_decay: float = 1e-2
    lambdas: tuple = (1.0, 1.0, 1.0, 1.0)
    accumulate_every: int = 1
    seed: int = 0
    dataset_root: str | None = None
    split_list: str | None = None
    out_dir: str = "runs/default"
    steps_per_epoch: int = 1000       # stage-1 synthetic message stream length
    eval_every: int = 0               # steps between held-out evals; 0 = per epoch
    eval_messages: int = 64
    overfit_steps: int = 0            # stage 1: train this long on one fixed batch
    distortions_enabled: bool = True
    distortion_overrides: dict = field(default_factory=dict)
    geometry: dict = field(default_factory=lambda: dict(DEFAULT_GEOMETRY))
    device: str = "cpu"
    resume_from: str | None = None

    @classmethod
    def defaults(cls, stage: int, **overrides) -> "StageConfig":
        if stage not in _STAGE_DEFAULTS:
            raise ConfigError(f"stage must be 1, 2, or 3, got {stage}")
        kw = dict(_STAGE_DEFAULTS[stage])
        kw.update(overrides)
        return cls(stage=stage, **kw)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    loss_history: dict = field(default_factory=dict)  # term -> per-epoch means


class JsonlLogger:
    def __init__(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self.path = path

    def log(self, record: dict):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def crop_by_mask(composite: torch.Tensor, mask: torch.Tensor, out_size: int = 256):
    """Crop the composite to the largest mask component's bounding box and resize.

    Box selection is index-only; gradients flow through the resampled pixels.
    Raises NotLocatedError when the mask has no foreground above 0.5.
    """
    squeeze = composite.dim() == 3
    if squeeze:
        composite = composite.unsqueeze(0)
    box = dist.mask_to_crop_box(mask, composite.shape[-2:])
    out = dist.crop_and_resize(composite, box, out_size)
    return out.squeeze(0) if squeeze else out


def _harden(scores: torch.Tensor) -> torch.Tensor:
    return (scores > 0).to(torch.uint8)


def _random_messages(n, bits, gen, device="cpu"):
    return torch.randint(0, 2, (n, bits), generator=gen).float().to(device)


def _ckpt_dir(cfg, stage):
    return os.path.join(cfg.out_dir, "checkpoints", f"stage{stage}")


def _save_stage(cfg, handles, stage, epoch, opt, gen, state):
    out = _ckpt_dir(cfg, stage)
    save_checkpoint(handles, {"stage": stage, "seed": cfg.seed, "epoch": epoch,
                              "geometry": cfg.geometry}, out)
    torch.save({"optimizer": opt.state_dict(), "step": state.step,
                "epoch": epoch, "rng_state": gen.get_state(),
                "loss_history": state.loss_history},
               os.path.join(out, "train_state.pt"))
    return out


def _load_weights(handles, ckpt_dir, roles):
    for role in roles:
        path = os.path.join(ckpt_dir, f"{role}.pt")
        if not os.path.isfile(path):
            raise MissingArtifactError(f"checkpoint at {ckpt_dir} has no weights for "
                                       f"role '{role}'")
        payload = torch.load(path, map_location="cpu", weights_only=True)
        handles[role].module.load_state_dict(payload["state_dict"])


def _resume(cfg, handles, opt, gen, state) -> int:
    """Restore weights/optimizer/rng from a mid-stage checkpoint; returns start epoch."""
    src = cfg.resume_from
    state_path = os.path.join(src, "train_state.pt")
    if not os.path.isfile(state_path):
        raise MissingArtifactError(f"no train state at {state_path}")
    _load_weights(handles, src, list(handles))
    payload = torch.load(state_path, map_location="cpu", weights_only=True)
    opt.load_state_dict(payload["optimizer"])
    gen.set_state(payload["rng_state"])
    state.step = payload["step"]
    state.loss_history = payload["loss_history"]
    return payload["epoch"] + 1


def _require_stage(ckpt_dir, minimum: int):
    manifest = load_manifest(ckpt_dir)
    reached = int(manifest.get("stage", 0))
    if reached < minimum:
        raise MissingArtifactError(
            f"{ckpt_dir} holds a stage-{reached} checkpoint; stage-{minimum} "
            f"training must finish first")
    return manifest


def _epoch_mean(values):
    return float(sum(values) / max(len(values), 1))


# ---------------------------------------------------------------------------
# stage I: message processor + extractor on distorted patterns
# ---------------------------------------------------------------------------

def run_stage1(cfg: StageConfig, handles: dict) -> str:
    device = torch.device(cfg.device)
    proc, extr = handles["processor"], handles["extractor"]
    for h in (proc, extr):
        h.unfreeze()
        h.module.train().to(device)
    bits = cfg.geometry["message_bits"]
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(list(proc.parameters()) + list(extr.parameters()),
                            lr=cfg.lr, weight_decay=cfg.weight_decay)
    specs = dist.build_pipeline("I", cfg.distortion_overrides) \
        if cfg.distortions_enabled else []
    logger = JsonlLogger(os.path.join(cfg.out_dir, "train_log.jsonl"))
    state = TrainState()
    held = _random_messages(cfg.eval_messages, bits,
                            torch.Generator().manual_seed(cfg.seed + 1), device)
    start_epoch = _resume(cfg, handles, opt, gen, state) if cfg.resume_from else 0

    overfit = cfg.overfit_steps > 0
    fixed = _random_messages(cfg.batch_size, bits, gen, device) if overfit else None
    epochs = 1 if overfit else cfg.epochs
    steps_per = cfg.overfit_steps if overfit else cfg.steps_per_epoch
    out = _ckpt_dir(cfg, 1)
    for epoch in range(start_epoch, epochs):
        epoch_losses = []
        for i in range(steps_per):
            msgs = fixed if overfit else _random_messages(cfg.batch_size, bits, gen, device)
            pattern = proc(msgs)
            if specs and not overfit:
                pattern, _ = dist.apply_stage1_pipeline(pattern, specs, gen)
            loss = loss_stage1(msgs, extr(pattern))
            (loss / cfg.accumulate_every).backward()
            if (i + 1) % cfg.accumulate_every == 0:
                opt.step()
                opt.zero_grad()
            state.step += 1
            value = float(loss.detach())
            epoch_losses.append(value)
            logger.log({"stage": 1, "epoch": epoch, "step": state.step,
                        "total": value, "terms": {"msg": value}})
            if cfg.eval_every and state.step % cfg.eval_every == 0:
                logger.log({"stage": 1, "epoch": epoch, "step": state.step,
                            "eval_ber": _pattern_ber(proc, extr, held)})
        if steps_per % cfg.accumulate_every:
            opt.step()
            opt.zero_grad()
        state.epoch = epoch
        state.loss_history.setdefault("msg", []).append(_epoch_mean(epoch_losses))
        logger.log({"stage": 1, "epoch": epoch, "step": state.step,
                    "eval_ber": _pattern_ber(proc, extr, held)})
        out = _save_stage(cfg, handles, 1, epoch, opt, gen, state)
    return out


def _pattern_ber(proc, extr, messages) -> float:
    was_training = proc.module.training
    proc.module.eval()
    extr.module.eval()
    with torch.no_grad():
        pred = _harden(extr(proc(messages)))
        value = float((pred != messages.to(torch.uint8)).float().mean())
    if was_training and not proc.frozen:
        proc.module.train()
    if was_training and not extr.frozen:
        extr.module.train()
    return value


# ---------------------------------------------------------------------------
# stages II / III: shared forward graph
# ---------------------------------------------------------------------------

def stage_forward(handles, covers, backgrounds, messages, spatial, pixel, gen,
                  geometry, with_extractor: bool):
    """One embed -> distort -> locate/crop -> decode (-> extract) pass.

    Cropping uses the ground-truth boxes (teacher forcing); the locator trains
    against the ground-truth mask in parallel.
    """
    proc = handles["processor"]
    image_size = geometry["image_size"]
    pattern_ctx = torch.no_grad() if proc.frozen else torch.enable_grad()
    with pattern_ctx:
        pattern = proc(messages)
    if proc.frozen:
        pattern = pattern.detach()
    if pattern.shape[-1] != image_size:
        pattern = F.interpolate(pattern, size=(image_size, image_size),
                                mode="bilinear", align_corners=False)
    encoded = handles["encoder"](torch.cat([covers, pattern], dim=1))
    comp = dist.compose_onto_background(
        encoded, backgrounds, pattern, spatial, gen,
        mask_size=geometry["locator_size"], crop_size=image_size)
    distorted, fired = dist.apply_pixel_pipeline(comp.composite, pixel, gen)
    loc_in = F.interpolate(distorted, size=(geometry["locator_size"],) * 2,
                           mode="bilinear", align_corners=False)
    pred_mask = handles["locator"](loc_in)
    crops = [dist.crop_and_resize(distorted[i:i + 1], comp.crop_box[i], image_size)
             for i in range(distorted.shape[0])]
    decoded = handles["decoder"](torch.cat(crops, dim=0))
    scores = None
    if with_extractor:
        native = decoded
        if native.shape[-1] != geometry["pattern_size"]:
            native = F.interpolate(native, size=(geometry["pattern_size"],) * 2,
                                   mode="bilinear", align_corners=False)
        scores = handles["extractor"](native)
    return {"encoded": encoded, "gt_mask": comp.gt_mask, "pred_mask": pred_mask,
            "gt_pattern": comp.gt_pattern, "decoded": decoded, "scores": scores,
            "fired": comp.applied + fired}


def _run_image_stage(cfg: StageConfig, handles: dict, stage: int) -> str:
    device = torch.device(cfg.device)
    trained = ("encoder", "locator", "decoder") if stage == 2 else tuple(handles)
    for role, h in handles.items():
        h.module.to(device)
        if role in trained:
            h.unfreeze()
            h.module.train()
    if cfg.dataset_root is None:
        raise MissingArtifactError(f"stage {stage} needs a dataset_root")
    dataset = ImageFolder(cfg.dataset_root, cfg.split_list)
    geo = cfg.geometry
    gen = torch.Generator().manual_seed(cfg.seed)
    params = [p for role in trained for p in handles[role].parameters()]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    pipeline = dist.build_pipeline("II", cfg.distortion_overrides)
    if not cfg.distortions_enabled:
        for spec in pipeline:
            spec.probability = 0.0
    spatial = dist.spatial_specs(pipeline)
    pixel = dist.pixel_specs(pipeline)
    logger = JsonlLogger(os.path.join(cfg.out_dir, "train_log.jsonl"))
    state = TrainState()
    start_epoch = _resume(cfg, handles, opt, gen, state) if cfg.resume_from else 0

    out = _ckpt_dir(cfg, stage)
    for epoch in range(start_epoch, cfg.epochs):
        perm = torch.randperm(len(dataset), generator=gen).tolist()
        batches = [perm[i:i + cfg.batch_size]
                   for i in range(0, len(perm), cfg.batch_size)]
        epoch_terms = defaultdict(list)
        for bi, idx in enumerate(batches):
            covers = dataset.load_batch(idx, geo["image_size"]).to(device)
            bg_idx = torch.randint(len(dataset), (len(idx),), generator=gen).tolist()
            backgrounds = dataset.load_batch(bg_idx, geo["canvas_size"]).to(device)
            msgs = _random_messages(len(idx), geo["message_bits"], gen, device)
            fwd = stage_forward(handles, covers, backgrounds, msgs, spatial, pixel,
                                gen, geo, with_extractor=stage == 3)
            if stage == 2:
                total, terms = loss_stage2(covers, fwd["encoded"], fwd["gt_mask"],
                                           fwd["pred_mask"], fwd["gt_pattern"],
                                           fwd["decoded"], cfg.lambdas)
            else:
                total, terms = loss_stage3(covers, fwd["encoded"], fwd["gt_mask"],
                                           fwd["pred_mask"], fwd["gt_pattern"],
                                           fwd["decoded"], msgs, fwd["scores"],
                                           cfg.lambdas)
            (total / cfg.accumulate_every).backward()
            if (bi + 1) % cfg.accumulate_every == 0:
                opt.step()
                opt.zero_grad()
            state.step += 1
            record = {"stage": stage, "epoch": epoch, "step": state.step,
                      "total": float(total.detach()),
                      "terms": {k: float(v.detach()) for k, v in terms.items()},
                      "lambdas": list(cfg.lambdas)}
            with torch.no_grad():
                mse = float(F.mse_loss(covers, fwd["encoded"]))
            record["psnr"] = 99.0 if mse == 0 else 10.0 * math.log10(1.0 / mse)
            for k, v in record["terms"].items():
                epoch_terms[k].append(v)
            logger.log(record)
        if len(batches) % cfg.accumulate_every:
            opt.step()
            opt.zero_grad()
        state.epoch = epoch
        for k, values in epoch_terms.items():
            state.loss_history.setdefault(k, []).append(_epoch_mean(values))
        out = _save_stage(cfg, handles, stage, epoch, opt, gen, state)
    return out


def run_stage2(cfg: StageConfig, handles: dict, stage1_ckpt: str) -> str:
    """Train encoder/locator/decoder with the message ends frozen."""
    _require_stage(stage1_ckpt, 1)
    _load_weights(handles, stage1_ckpt, ["processor", "extractor"])
    handles["processor"].freeze()
    handles["extractor"].freeze()
    return _run_image_stage(cfg, handles, 2)


def run_stage3(cfg: StageConfig, handles: dict, stage2_ckpt: str) -> str:
    """Fine-tune all five modules end to end."""
    _require_stage(stage2_ckpt, 2)
    _load_weights(handles, stage2_ckpt, list(handles))
    for h in handles.values():
        h.unfreeze()
    return _run_image_stage(cfg, handles, 3)
