"""Layered run configuration: profile defaults < config file < env < CLI sets."""

from __future__ import annotations

import copy
import json
import os

from .errors import ConfigError

ENV_RUN_ROOT = "PATTERNMARK_RUN_ROOT"
ENV_DEVICE = "PATTERNMARK_DEVICE"


def paper_profile() -> dict:
    return {
        "profile": "paper",
        "seed": 0,
        "device": "cpu",
        "geometry": {"message_bits": 196, "pattern_size": 256, "image_size": 256,
                     "canvas_size": 448, "locator_size": 320},
        "models": {
            "processor": {"message_bits": 196, "pattern_size": 256},
            "encoder": {"base": 32, "levels": 4, "head": "sigmoid"},
            "locator": {"variant": "light", "size": 320},
            "decoder": {"base": 32, "levels": 4},
            "extractor": {"message_bits": 196, "backbone": "convnext",
                          "depths": [3, 3, 9, 3], "dims": [96, 192, 384, 768]},
        },
        "stages": {
            "1": {"epochs": 20, "batch_size": 32, "lr": 1e-3, "accumulate_every": 1,
                  "lambdas": [1, 1, 1, 1], "steps_per_epoch": 1000},
            "2": {"epochs": 14, "batch_size": 10, "lr": 1e-3, "accumulate_every": 2,
                  "lambdas": [1, 1, 1, 1]},
            "3": {"epochs": 20, "batch_size": 10, "lr": 1e-4, "accumulate_every": 2,
                  "lambdas": [10, 1, 1, 1]},
        },
        "distortions": {},
    }


def desk_profile() -> dict:
    """CPU-trainable scale: 64-bit messages, 64^2 patterns, 128^2 covers,
    small networks, short schedules, gentler distortions."""
    return {
        "profile": "desk",
        "seed": 0,
        "device": "cpu",
        "geometry": {"message_bits": 64, "pattern_size": 64, "image_size": 128,
                     "canvas_size": 224, "locator_size": 128},
        "models": {
            "processor": {"message_bits": 64, "pattern_size": 64},
            "encoder": {"base": 16, "levels": 3, "head": "sigmoid"},
            "locator": {"variant": "light", "size": 128},
            "decoder": {"base": 16, "levels": 3},
            "extractor": {"message_bits": 64, "backbone": "convnext",
                          "depths": [2, 2, 4, 2], "dims": [32, 64, 128, 256]},
        },
        "stages": {
            "1": {"epochs": 2, "batch_size": 16, "lr": 1e-3, "accumulate_every": 1,
                  "lambdas": [1, 1, 1, 1], "steps_per_epoch": 350},
            "2": {"epochs": 2, "batch_size": 2, "lr": 1e-3, "accumulate_every": 2,
                  "lambdas": [1, 1, 1, 1]},
            "3": {"epochs": 2, "batch_size": 2, "lr": 3e-4, "accumulate_every": 2,
                  "lambdas": [10, 1, 1, 1]},
        },
        "distortions": {
            "perspective": {"scale": [0.0, 0.15]},
            "affine": {"rotate_deg": [-8.0, 8.0], "scale": [0.7, 1.0],
                       "translate": [-0.12, 0.12]},
            "random_erase": {"area_frac": [0.02, 0.15]},
            "brightness": {"amount": [0.0, 0.15]},
            "contrast": {"amount": [0.0, 0.15]},
            "saturation": {"amount": [0.0, 0.15]},
            "hue": {"amount": [0.0, 0.05]},
            "gaussian_blur": {"sigma": [0.1, 0.5]},
            "gaussian_noise": {"variance": [0.01, 0.01]},
            "simulated_jpeg": {"quality": [80.0, 100.0]},
        },
    }


PROFILES = {"paper": paper_profile, "desk": desk_profile}


def parse_value(text: str):
    try:
        return json.loads(text)
    except (json.JSONDecodeError, ValueError):
        return text


def load_kv(path) -> dict:
    """Flat `dotted.key = value` file; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def flatten(tree, prefix="") -> dict:
    flat = {}
    for key, value in tree.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, dict):
            flat.update(flatten(value, path))
        else:
            flat[path] = json.dumps(value)
    return flat


def write_kv(path, tree) -> None:
    flat = flatten(tree)
    with open(path, "w") as fh:
        for key in sorted(flat):
            fh.write(f"{key} = {flat[key]}\n")


def set_path(tree: dict, dotted: str, value) -> None:
    """Assign into a nested dict; `lambdas.lN` aliases stage-3 lambda N."""
    if dotted.startswith("lambdas.l"):
        idx = int(dotted.rsplit("l", 1)[1]) - 1
        if not 0 <= idx < 4:
            raise ConfigError(f"unknown lambda alias {dotted!r}")
        lam = tree.setdefault("stages", {}).setdefault("3", {}).setdefault(
            "lambdas", [10, 1, 1, 1])
        lam[idx] = value
        return
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {key!r} of {dotted!r}")
    node[keys[-1]] = value


def resolve_run_config(profile: str = "desk", config_file=None, sets=(),
                       env=None, **flags) -> dict:
    """Merge profile defaults, config file, environment, and CLI overrides."""
    env = os.environ if env is None else env
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    tree = copy.deepcopy(PROFILES[profile]())
    if config_file:
        if not os.path.isfile(config_file):
            raise ConfigError(f"config file not found: {config_file}")
        for key, raw in load_kv(config_file).items():
            set_path(tree, key, parse_value(raw))
    if env.get(ENV_RUN_ROOT):
        tree["run_root"] = env[ENV_RUN_ROOT]
    if env.get(ENV_DEVICE):
        tree["device"] = env[ENV_DEVICE]
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_path(tree, key.strip(), parse_value(raw.strip()))
    for key, value in flags.items():
        if value is not None:
            tree[key] = value
    tree.setdefault("run_root", "runs")
    tree.setdefault("seed", 0)
    tree.setdefault("device", "cpu")
    return tree
