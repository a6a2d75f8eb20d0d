"""Command-line entry point: train / embed / extract / locate / evaluate.

Exit codes: 0 ok, 1 usage or bad config, 2 missing artifact, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import config as cfgmod
from . import evaluation, media
from .data import ImageFolder
from .errors import ConfigError, MissingArtifactError
from .inference import WatermarkCodec
from .models import build_all
from .training import StageConfig, run_stage1, run_stage2, run_stage3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--profile", default="desk", choices=sorted(cfgmod.PROFILES))
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", dest="sets", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--device", default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="patternmark", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one or all training stages")
    _add_common(p)
    p.add_argument("--stage", default="all", choices=["1", "2", "3", "all"])
    p.add_argument("--dataset", required=True)
    p.add_argument("--split-list", default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--from", dest="from_ckpt", default=None,
                   help="prerequisite checkpoint (defaults to the previous stage "
                        "under --out-dir)")

    p = sub.add_parser("embed", help="embed a hex message into a cover image")
    _add_common(p)
    p.add_argument("--cover", required=True)
    p.add_argument("--message", required=True, help="hex string")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--residual", default=None)

    p = sub.add_parser("extract", help="recover the message from a photo")
    _add_common(p)
    p.add_argument("--photo", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--json", action="store_true")
    p.add_argument("--mask-out", default=None)
    p.add_argument("--truth", default=None, help="hex string to score BER against")

    p = sub.add_parser("locate", help="emit only the mask and crop box")
    _add_common(p)
    p.add_argument("--photo", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--json", action="store_true")
    p.add_argument("--mask-out", default=None)

    p = sub.add_parser("evaluate", help="quality eval plus digital-distortion sweeps")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--distortions", default=None, help="comma-separated subset")
    p.add_argument("--n", type=int, default=20, help="images per sweep cell")
    p.add_argument("--skip-combined", action="store_true")
    return parser


def _resolve(args, **flags) -> dict:
    return cfgmod.resolve_run_config(profile=args.profile, config_file=args.config,
                                     sets=args.sets, seed=args.seed,
                                     device=args.device, **flags)


def _stage_config(tree, stage: int, dataset, out_dir, split_list=None) -> StageConfig:
    kw = dict(tree["stages"][str(stage)])
    kw["lambdas"] = tuple(kw.get("lambdas", (1, 1, 1, 1)))
    return StageConfig(stage=stage, seed=tree["seed"], device=tree["device"],
                       dataset_root=dataset, split_list=split_list, out_dir=out_dir,
                       geometry=dict(tree["geometry"]),
                       distortion_overrides=tree.get("distortions", {}), **kw)


def _reference_ber(ckpt_dir, dataset_root, seed) -> float | None:
    codec = WatermarkCodec.from_checkpoint(ckpt_dir)
    dataset = ImageFolder(dataset_root)
    bers, located = evaluation.undistorted_roundtrip(codec, dataset,
                                                     n=min(10, len(dataset)), seed=seed)
    hits = [b for b, loc in zip(bers, located) if loc]
    return float(np.mean(hits)) if hits else None


def cmd_train(args) -> int:
    tree = _resolve(args)
    out_dir = args.out_dir or os.path.join(tree["run_root"], f"train-{tree['profile']}")
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.write_kv(os.path.join(out_dir, "run_config.txt"), tree)
    torch.manual_seed(tree["seed"])
    handles = build_all(tree["models"])
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    ckpt = args.from_ckpt
    for stage in stages:
        cfg = _stage_config(tree, stage, args.dataset, out_dir, args.split_list)
        if stage == 1:
            ckpt = run_stage1(cfg, handles)
        else:
            prereq = ckpt or os.path.join(out_dir, "checkpoints", f"stage{stage - 1}")
            if not os.path.isdir(prereq):
                raise MissingArtifactError(
                    f"stage {stage} needs the stage-{stage - 1} checkpoint at "
                    f"{prereq}; run `train --stage {stage - 1}` first")
            ckpt = (run_stage2 if stage == 2 else run_stage3)(cfg, handles, prereq)
        print(f"stage {stage} complete -> {ckpt}")
    if stages[-1] >= 2:
        ref = _reference_ber(ckpt, args.dataset, tree["seed"])
        if ref is not None:
            with open(os.path.join(ckpt, "metrics.json"), "w") as fh:
                json.dump({"reference_ber": ref}, fh)
            print(f"reference round-trip BER: {ref:.4f}")
    return 0


def _load_message(text, bits) -> np.ndarray:
    return media.hex_to_message(text, bits)


def cmd_embed(args) -> int:
    codec = WatermarkCodec.from_checkpoint(args.ckpt, device=args.device or "cpu")
    cover = media.load_image(args.cover)
    msg = _load_message(args.message, codec.message_bits)
    result = codec.embed(cover, msg)
    media.save_image(result.encoded, args.out)
    if args.residual:
        media.save_image(result.residual, args.residual)
    print(f"embedded: psnr={result.psnr:.2f} dB ssim={result.ssim:.4f} -> {args.out}")
    return 0


def _extract_record(args, result, bits) -> dict:
    record = {
        "located": bool(result.located),
        "message_hex": media.message_to_hex(result.message) if result.located else None,
        "crop_box": list(result.crop_box) if result.located else None,
        "mask_path": args.mask_out,
    }
    if args.mask_out:
        media.save_image(result.mask, args.mask_out)
    if getattr(args, "truth", None) and result.located:
        truth = _load_message(args.truth, bits)
        record["ber_vs"] = media.ber(truth, result.message)
    return record


def cmd_extract(args) -> int:
    codec = WatermarkCodec.from_checkpoint(args.ckpt, device=args.device or "cpu")
    result = codec.extract(media.load_image(args.photo))
    record = _extract_record(args, result, codec.message_bits)
    if args.json:
        print(json.dumps(record))
    elif result.located:
        line = f"located box={record['crop_box']} message={record['message_hex']}"
        if "ber_vs" in record:
            line += f" ber={record['ber_vs']:.4f}"
        print(line)
    else:
        print("no watermark located")
    return 0


def cmd_locate(args) -> int:
    codec = WatermarkCodec.from_checkpoint(args.ckpt, device=args.device or "cpu")
    result = codec.extract(media.load_image(args.photo))
    if args.mask_out:
        media.save_image(result.mask, args.mask_out)
    record = {"located": bool(result.located),
              "crop_box": list(result.crop_box) if result.located else None,
              "mask_path": args.mask_out}
    print(json.dumps(record) if args.json else
          f"located={record['located']} box={record['crop_box']}")
    return 0


def cmd_evaluate(args) -> int:
    tree = _resolve(args)
    os.makedirs(args.out_dir, exist_ok=True)
    cfgmod.write_kv(os.path.join(args.out_dir, "run_config.txt"), tree)
    codec = WatermarkCodec.from_checkpoint(args.ckpt, device=tree["device"])
    dataset = ImageFolder(args.dataset)
    names = (args.distortions.split(",") if args.distortions
             else list(evaluation.DEFAULT_SWEEP_AXES))
    specs = [evaluation.SweepSpec(name.strip(), n_images=args.n, seed=tree["seed"])
             for name in names]
    quality = evaluation.run_quality_eval(codec, dataset, n=args.n, seed=tree["seed"])
    result = evaluation.run_digital_sweep(codec, specs, dataset)
    if not args.skip_combined:
        row, quantiles = evaluation.run_combined_distortion_eval(
            codec, dataset, n=args.n, seed=tree["seed"])
        result.rows.append(row)
        with open(os.path.join(args.out_dir, "combined_quantiles.json"), "w") as fh:
            json.dump(quantiles, fh)
    paths = evaluation.emit_report(result, quality, args.out_dir)
    print(f"report written: {len(paths)} files under {args.out_dir}")
    return 0


_COMMANDS = {"train": cmd_train, "embed": cmd_embed, "extract": cmd_extract,
             "locate": cmd_locate, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # internal
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
