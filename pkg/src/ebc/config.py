"""Experiment configuration: defaults, loading, hashing, and validation.

A single JSON config drives every command. Any leaf can be overridden from
the command line with ``--set section.key=value``; the canonical hash of
the fully merged config identifies an experiment cell in results tables.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

from .bins import BinPolicy, build_bins, validate
from .data import IMAGENET_MEAN, IMAGENET_STD, AugmentConfig
from .losses import OTConfig

DEFAULT_CONFIG: dict[str, Any] = {
    "data": {
        "root": ".",
        "train_split": "train",
        "val_split": "val",
        "base_size": 224,
        "scale_range": [1.0, 2.0],
        "hflip_prob": 0.5,
        "brightness": 0.1,
        "saturation": 0.1,
        "hue": 0.0,
        "blur_kernel": 5,
        "blur_prob": 1.0,
        "normalize_mean": list(IMAGENET_MEAN),
        "normalize_std": list(IMAGENET_STD),
    },
    "bins": {
        "granularity": "fine",
        "m": 4,
        "switch_point": None,
        "representatives": None,
        "mode": "integer",  # "sbc" switches the harness to interval bins
        "sbc_sigma": 4.0,
        "calibrate_terminal": True,
    },
    "model": {
        "encoder": "toy",
        "encoder_width": 32,
        "encoder_channels": 64,
        "encoder_weights": None,
        "encoder_checksum": None,
        "embedding_dim": 64,
        "r": 8,
        "logit_scale_init": 1.0,
        "vpt_tokens": 32,
        "head": "classification",
    },
    "loss": {
        "lambda": 1.0,
        "clamp_density": False,
        "ot": {
            "epsilon": 0.01,
            "max_iters": 100,
            "tolerance": 1e-6,
            "weight": 0.1,
            "tv_weight": 0.01,
            "normalize_cost": True,
            "mass_floor": 1e-6,
        },
    },
    "optim": {
        "lr": 1e-4,
        "batch_size": 8,
        "epochs": 50,
        "seed": 0,
        "weight_decay": 0.0,
    },
    "eval": {
        "window": None,  # defaults to data.base_size
        "overlap": 0,
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    """Defaults, overlaid with a JSON file, overlaid with CLI overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        text = Path(path).read_text()
        try:
            user = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: config is not valid JSON ({e})") from e
        if not isinstance(user, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        cfg = deep_merge(cfg, user)
    for item in overrides or []:
        cfg = apply_override(cfg, item)
    return cfg


def apply_override(cfg: dict, item: str) -> dict:
    """Applies one ``dotted.path=value`` override; values parse as JSON first."""
    if "=" not in item:
        raise ValueError(f"override must look like section.key=value, got {item!r}")
    dotted, raw = item.split("=", 1)
    keys = dotted.strip().split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = copy.deepcopy(cfg)
    node = out
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot descend into non-dict at {key!r} in {dotted!r}")
    node[keys[-1]] = value
    return out


def config_hash(cfg: dict) -> str:
    """Canonical content hash of a fully merged config."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def policy_from_cfg(cfg: dict) -> BinPolicy:
    b = cfg["bins"]
    m = b["m"]
    if not isinstance(m, int):
        raise ValueError(f"bins.m must be an integer here, got {m!r}")
    return build_bins(
        granularity=b["granularity"],
        m=m,
        switch_point=b.get("switch_point"),
        representatives=b.get("representatives"),
    )


def augment_cfg_from(cfg: dict) -> AugmentConfig:
    d = cfg["data"]
    return AugmentConfig(
        base_size=d["base_size"],
        scale_range=tuple(d["scale_range"]),
        hflip_prob=d["hflip_prob"],
        brightness=d["brightness"],
        saturation=d["saturation"],
        hue=d["hue"],
        blur_kernel=d["blur_kernel"],
        blur_prob=d["blur_prob"],
        normalize_mean=tuple(d["normalize_mean"]),
        normalize_std=tuple(d["normalize_std"]),
    )


def ot_cfg_from(cfg: dict) -> OTConfig:
    o = cfg["loss"]["ot"]
    return OTConfig(
        epsilon=o["epsilon"],
        max_iters=o["max_iters"],
        tolerance=o["tolerance"],
        ot_weight=o["weight"],
        tv_weight=o["tv_weight"],
        normalize_cost=o.get("normalize_cost", True),
        mass_floor=o.get("mass_floor", 1e-6),
    )


def eval_window(cfg: dict) -> int:
    return cfg["eval"]["window"] or cfg["data"]["base_size"]


def validate_config(cfg: dict, check_data: bool = True) -> list[tuple[str, str]]:
    """Static config checks; returns (code, message) pairs, empty when clean.

    ``check_data`` additionally verifies that the split annotation files
    exist (full manifest integrity is checked by the validate command).
    """
    issues: list[tuple[str, str]] = []
    s = cfg["data"]["base_size"]
    r = cfg["model"]["r"]
    if r < 1:
        issues.append(("E_BLOCK", f"model.r must be >= 1, got {r}"))
    elif s % r != 0:
        issues.append(("E_DIVIS", f"crop size {s} is not divisible by block size {r}"))
    window = eval_window(cfg)
    if r >= 1 and window % r != 0:
        issues.append(("E_DIVIS", f"eval window {window} is not divisible by r={r}"))
    if cfg["eval"]["overlap"] and cfg["eval"]["overlap"] % r != 0:
        issues.append(("E_DIVIS", f"eval overlap must be divisible by r={r}"))

    mode = cfg["bins"]["mode"]
    if mode not in ("integer", "sbc"):
        issues.append(("E_BINS", f"bins.mode must be integer|sbc, got {mode!r}"))
    m = cfg["bins"]["m"]
    if isinstance(m, str) and m != "auto_max":
        issues.append(("E_BINS", f"bins.m must be an int or 'auto_max', got {m!r}"))
    if isinstance(m, int):
        try:
            report = validate(policy_from_cfg(cfg))
            if not report.ok:
                issues += [("E_BINS", v) for v in report.violations]
        except ValueError as e:
            issues.append(("E_BINS", str(e)))

    head = cfg["model"]["head"]
    if head not in ("classification", "regression"):
        issues.append(("E_MODEL", f"model.head must be classification|regression, got {head!r}"))
    vpt = cfg["model"]["vpt_tokens"]
    if not 8 <= vpt <= 40:
        issues.append(("E_MODEL", f"model.vpt_tokens must lie in [8, 40], got {vpt}"))
    if cfg["loss"]["lambda"] < 0:
        issues.append(("E_LOSS", "loss.lambda must be nonnegative"))
    try:
        ot_cfg_from(cfg)
    except (ValueError, KeyError) as e:
        issues.append(("E_LOSS", f"bad OT config: {e}"))
    try:
        augment_cfg_from(cfg)
    except (ValueError, KeyError) as e:
        issues.append(("E_DATA", f"bad augmentation config: {e}"))
    if cfg["optim"]["batch_size"] < 1:
        issues.append(("E_OPTIM", "optim.batch_size must be >= 1"))
    if cfg["optim"]["epochs"] < 1:
        issues.append(("E_OPTIM", "optim.epochs must be >= 1"))

    if check_data:
        root = Path(cfg["data"]["root"])
        for split_key in ("train_split", "val_split"):
            split = cfg["data"][split_key]
            ann = root / f"{split}.jsonl"
            if not ann.exists():
                issues.append(("E_MANIFEST", f"annotation file missing: {ann}"))
    return issues
