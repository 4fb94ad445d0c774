"""Command-line entry points for the staged pipeline.

Subcommands map one-to-one onto the stages in :mod:`cvmd.pipeline`:
``prepare``, ``train-vqvae``, ``train-diffusion``, ``fit-uq``, ``predict``,
``evaluate``, ``ablate``. Each stage reads and writes artifacts under a run
directory, taken from ``--run-dir``, the ``CVMD_RUN_ROOT`` environment
variable, or ``./runs/default``.

Configuration comes from ``--config run.json`` plus any number of dotted
overrides, e.g. ``--sampling.num_samples=16`` or ``--dataset.source=/data/01``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, InputError, SchemaError, TrainingError
from .pipeline import (
    RunConfig,
    cmd_ablate,
    cmd_evaluate,
    cmd_fit_uq,
    cmd_predict,
    cmd_prepare,
    cmd_train_diffusion,
    cmd_train_vqvae,
    desk_config,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3

STAGES = (
    "prepare",
    "train-vqvae",
    "train-diffusion",
    "fit-uq",
    "predict",
    "evaluate",
    "ablate",
)


def _split_overrides(argv):
    """Separate ``--section.key=value`` overrides from regular arguments."""
    regular, overrides = [], []
    for arg in argv:
        if arg.startswith("--") and "." in arg.split("=", 1)[0]:
            overrides.append(arg)
        else:
            regular.append(arg)
    return regular, overrides


def _coerce(text: str):
    """Parse an override value: JSON literal if possible, else a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(cfg_dict: dict, overrides) -> dict:
    for item in overrides:
        body = item[2:]
        if "=" not in body:
            raise ConfigError(f"override {item!r} is missing '=value'")
        dotted, raw = body.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override {item!r} must be --section.key=value")
        section, key = parts
        cfg_dict.setdefault(section, {})[key] = _coerce(raw)
    return cfg_dict


def _load_config(args, overrides) -> RunConfig:
    if args.config is not None:
        with open(args.config) as fh:
            base = json.load(fh)
    else:
        base = desk_config().to_dict()
    if args.seed is not None:
        base["seed"] = args.seed
    base = _apply_overrides(base, overrides)
    return RunConfig.from_dict(base)


def _run_dir(args) -> Path:
    if args.run_dir is not None:
        return Path(args.run_dir)
    root = os.environ.get("CVMD_RUN_ROOT", "runs")
    return Path(root) / "default"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvmd",
        description="Context-conditioned vehicle motion diffusion pipeline.",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", help="JSON run configuration file")
        p.add_argument("--run-dir", help="artifact directory for this run")
        p.add_argument("--seed", type=int, help="run seed (overrides config)")
        if stage == "predict":
            p.add_argument("--split", default="test", choices=("train", "test"))
            p.add_argument("--guidance",
                           help='fixed scale or "uc" (overrides config)')
        if stage == "ablate":
            p.add_argument("--guidance-values",
                           help='comma list, e.g. "1,3,5,7,13,uc"')
    return parser


def _dispatch(args, cfg: RunConfig, run_dir: Path) -> None:
    if args.stage == "prepare":
        out = cmd_prepare(cfg, run_dir)
        print(f"dataset written to {out}")
    elif args.stage == "train-vqvae":
        out = cmd_train_vqvae(cfg, run_dir)
        print(f"context model written to {out}")
    elif args.stage == "train-diffusion":
        out = cmd_train_diffusion(cfg, run_dir)
        print(f"denoiser written to {out}")
    elif args.stage == "fit-uq":
        out = cmd_fit_uq(cfg, run_dir)
        print(f"cluster statistics written to {out}")
    elif args.stage == "predict":
        guidance = None
        if args.guidance is not None:
            guidance = "uc" if args.guidance == "uc" else float(args.guidance)
        reports = cmd_predict(cfg, run_dir, split_name=args.split,
                              guidance=guidance)
        print(f"{len(reports)} predictions written to {run_dir / 'predictions'}")
    elif args.stage == "evaluate":
        summary = cmd_evaluate(cfg, run_dir)
        print(json.dumps(summary, indent=2, sort_keys=True))
    elif args.stage == "ablate":
        values = None
        if args.guidance_values:
            values = ["uc" if v == "uc" else float(v)
                      for v in args.guidance_values.split(",")]
        rows = cmd_ablate(cfg, run_dir, guidance_values=values)
        for row in rows:
            print(f"w={row['w']}: ade={row['mean_ade']:.4f} "
                  f"fde={row['mean_fde']:.4f}")
    else:  # pragma: no cover - argparse enforces the choices
        raise ConfigError(f"unknown stage {args.stage!r}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    regular, overrides = _split_overrides(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(regular)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = _load_config(args, overrides)
        run_dir = _run_dir(args)
        _dispatch(args, cfg, run_dir)
    except (ConfigError, InputError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SchemaError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
