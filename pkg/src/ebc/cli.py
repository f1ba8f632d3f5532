"""Command-line entry points.

Subcommands: ``validate``, ``train``, ``evaluate``, ``predict``, ``ablate``,
``prompts dump``, ``bins show``. Every command is driven by a JSON config
(defaults apply when omitted); any leaf can be overridden with repeated
``--set section.key=value`` flags. The ``EBC_SEED`` environment variable
overrides the configured seed.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .ablation import run_ablation
from .bins import validate as validate_policy
from .config import (
    config_hash,
    eval_window,
    load_config,
    policy_from_cfg,
    validate_config,
)
from .evaluation import (
    evaluate_manifest,
    normalize_image,
    render_density_png,
    tiled_inference,
    write_density_file,
    write_eval_csv,
)
from .prompts import build_prompt_set

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _load_cfg(args) -> dict:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None) or [])
    env_seed = os.environ.get("EBC_SEED")
    if env_seed is not None:
        cfg["optim"]["seed"] = int(env_seed)
    return cfg


def cmd_validate(args) -> int:
    cfg = _load_cfg(args)
    issues = validate_config(cfg, check_data=not args.no_data)
    if not args.no_data and not issues:
        from .data import load_manifest

        for split_key in ("train_split", "val_split"):
            try:
                load_manifest(cfg["data"]["root"], cfg["data"][split_key])
            except Exception as e:
                issues.append(("E_MANIFEST", str(e)))
    for code, message in issues:
        print(f"{code}: {message}")
    if issues:
        print(f"invalid: {len(issues)} issue(s)")
        return EXIT_VALIDATION
    print(f"ok: config hash {config_hash(cfg)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainingDiverged, train

    cfg = _load_cfg(args)
    issues = validate_config(cfg)
    if issues:
        for code, message in issues:
            print(f"{code}: {message}")
        return EXIT_VALIDATION
    try:
        result = train(cfg, args.workdir, resume=args.resume)
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"best val MAE {result.best_val_mae:.4f}")
    print(f"checkpoints: {result.best_checkpoint} {result.last_checkpoint}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .head import load_checkpoint

    cfg = _load_cfg(args)
    model, meta = load_checkpoint(args.checkpoint)
    cfg_policy = policy_from_cfg(cfg)
    ckpt_policy = meta.get("policy")
    if ckpt_policy is not None:
        # Representatives may differ (terminal calibration happens at train
        # time); the structural policy must match.
        want = {k: v for k, v in ckpt_policy.items() if k != "representatives"}
        have = {
            "granularity": cfg_policy.granularity,
            "m": cfg_policy.m,
            "switch_point": cfg_policy.switch_point,
        }
        if want != have:
            print(
                "checkpoint/config bin-policy mismatch:\n"
                f"  checkpoint: {json.dumps(want, sort_keys=True)}\n"
                f"  config:     {json.dumps(have, sort_keys=True)}",
                file=sys.stderr,
            )
            return EXIT_VALIDATION
    from .data import load_manifest

    manifest = load_manifest(cfg["data"]["root"], args.split)
    result = evaluate_manifest(
        model,
        manifest,
        eval_window(cfg),
        cfg["model"]["r"],
        tuple(cfg["data"]["normalize_mean"]),
        tuple(cfg["data"]["normalize_std"]),
        overlap=cfg["eval"]["overlap"],
    )
    out = Path(args.out)
    write_eval_csv(out, result)
    print(f"MAE {result.mae:.4f} RMSE {result.rmse:.4f} over {len(result.per_image)} images")
    print(f"per-image results: {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data import load_image
    from .head import load_checkpoint

    model, meta = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    tensor = normalize_image(image)
    window = args.window or 224
    count, density = tiled_inference(tensor, model, window, model.r)
    out = Path(args.out)
    write_density_file(out, density, model.r)
    if args.render:
        render_density_png(args.render, density)
    print(f"count {count:.6f}")
    print(f"density map: {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    grid = json.loads(Path(args.grid).read_text())
    base = grid.get("base", {})
    if isinstance(base, str):
        base_cfg = load_config(Path(args.grid).parent / base)
    else:
        base_cfg = load_config(None)
        from .config import deep_merge

        base_cfg = deep_merge(base_cfg, base)
    cells = list(grid.get("cells", []))
    if "axes" in grid:
        from .ablation import expand_grid

        cells += expand_grid(grid["axes"])
    if not cells:
        print("grid defines no cells", file=sys.stderr)
        return EXIT_VALIDATION
    csv_path = args.csv or (Path(args.workdir) / "results.csv")
    rows = run_ablation(base_cfg, cells, csv_path, args.workdir)
    print(f"{len(rows)} cell(s) run, results in {csv_path}")
    return EXIT_OK


def cmd_prompts_dump(args) -> int:
    cfg = _load_cfg(args)
    policy = policy_from_cfg(cfg)
    for prompt in build_prompt_set(policy, natural_zero=args.natural_zero):
        print(prompt)
    return EXIT_OK


def cmd_bins_show(args) -> int:
    cfg = _load_cfg(args)
    policy = policy_from_cfg(cfg)
    report = validate_policy(policy)
    print(f"granularity={policy.granularity} m={policy.m} switch_point={policy.switch_point}")
    for k, b in enumerate(policy.bins):
        print(f"  {k}: {b.label()} -> {b.representative:g}")
    print("valid" if report.ok else "INVALID: " + "; ".join(report.violations))
    return EXIT_OK if report.ok else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebc",
        description="Blockwise-classification crowd counting toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=False):
        p.add_argument(
            "--config", required=config_required, default=None, help="JSON config path"
        )
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config leaf (repeatable)",
        )

    p = sub.add_parser("validate", help="check config, bins, prompts, and manifests")
    add_common(p)
    p.add_argument("--no-data", action="store_true", help="skip dataset checks")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train a counting model")
    add_common(p)
    p.add_argument("--workdir", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True, help="per-image CSV output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict a density map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="density-grid output path")
    p.add_argument("--render", default=None, help="optional grayscale PNG path")
    p.add_argument("--window", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="run an experiment grid")
    p.add_argument("--grid", required=True, help="grid JSON path")
    p.add_argument("--workdir", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("prompts", help="prompt utilities")
    psub = p.add_subparsers(dest="subcommand", required=True)
    pd = psub.add_parser("dump", help="print the prompt list for the configured bins")
    add_common(pd)
    pd.add_argument("--natural-zero", action="store_true")
    pd.set_defaults(func=cmd_prompts_dump)

    p = sub.add_parser("bins", help="bin-policy utilities")
    bsub = p.add_subparsers(dest="subcommand", required=True)
    bs = bsub.add_parser("show", help="print the configured bin policy")
    add_common(bs)
    bs.set_defaults(func=cmd_bins_show)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
