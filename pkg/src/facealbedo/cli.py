"""Command-line entry point: ``facealbedo <subcommand> [run_dir] [options]``.

Exit codes: 0 success, 1 failed check, 2 invalid configuration,
3 missing upstream checkpoint, 4 corrupt checkpoint or nothing to resume.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io, pipeline
from .config import ConfigError, RunConfig, apply_overrides, load_config, parse_config_text, parse_set_flags

RUN_ROOT_ENV = "FACEALBEDO_RUN_ROOT"
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_MISSING, EXIT_CORRUPT = 0, 1, 2, 3, 4


def resolve_run_dir(arg: str | None) -> pipeline.RunDir:
    root = os.environ.get(RUN_ROOT_ENV)
    if arg is None:
        if not root:
            raise ConfigError(f"no run directory given and ${RUN_ROOT_ENV} is unset")
        return pipeline.RunDir(Path(root) / "default")
    p = Path(arg)
    if not p.is_absolute() and root:
        p = Path(root) / p
    return pipeline.RunDir(p)


def resolve_config(run: pipeline.RunDir, args) -> RunConfig:
    """Explicit ``--config`` wins; otherwise the run's echo; otherwise defaults. ``--set`` applies last."""
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif run.config_echo.is_file():
        cfg = parse_config_text(run.config_echo.read_text())
    else:
        cfg = load_config(None)
    return apply_overrides(cfg, parse_set_flags(getattr(args, "set", None) or []))


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def cmd_gen_data(args) -> int:
    run = resolve_run_dir(args.run_dir)
    cfg = resolve_config(run, args)
    manifest = pipeline.gen_data(run, cfg)
    _print({"records": len(manifest["records"]), "manifest": str(run.manifest)})
    return EXIT_OK


def cmd_train_codebook(args) -> int:
    run = resolve_run_dir(args.run_dir)
    cfg = resolve_config(run, args)
    pipeline.write_config_echo(run, cfg)
    _print(pipeline.train_codebook(run, cfg, stop_at=args.stop_at))
    return EXIT_OK


def cmd_train_texture(args) -> int:
    run = resolve_run_dir(args.run_dir)
    cfg = resolve_config(run, args)
    pipeline.write_config_echo(run, cfg)
    out = pipeline.train_texture(run, cfg, args.variant, stop_at=args.stop_at, freeze_check=args.freeze_check)
    _print(out)
    if args.freeze_check and not out.get("freeze_ok", True):
        print("freeze check failed: codebook/decoder drifted", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_train_albedo(args) -> int:
    run = resolve_run_dir(args.run_dir)
    cfg = resolve_config(run, args)
    pipeline.write_config_echo(run, cfg)
    _print(pipeline.train_albedo(run, cfg, args.variant, stop_at=args.stop_at))
    return EXIT_OK


def cmd_eval(args) -> int:
    run = resolve_run_dir(args.run_dir)
    metrics = pipeline.evaluate(run, args.variant)
    if args.stage2:
        stats = pipeline.stage2_statistics(run, args.stage2)
        io.write_json(run.root / "eval" / f"stage2-{args.stage2}.json", stats)
        metrics["stage2_masked_psnr"] = stats["mean_masked_psnr"]
    _print({k: metrics[k] for k in ("psnr", "ssim", "id_sim", "perceptual", "delighting", "fair", "n_curve")})
    return EXIT_OK


def cmd_report(args) -> int:
    run = resolve_run_dir(args.run_dir)
    _print(pipeline.report(run))
    return EXIT_OK


def cmd_resume(args) -> int:
    run = resolve_run_dir(args.run_dir)
    _print(pipeline.resume(run, stop_at=args.stop_at))
    return EXIT_OK


def cmd_infer(args) -> int:
    import torch

    run = resolve_run_dir(args.run_dir)
    state = pipeline.load_albedo_state(run, args.variant)
    images = np.stack([io.load_png(p) for p in args.images])
    albedo, lights = pipeline.infer(torch.as_tensor(images), state)
    out = Path(args.out)
    io.save_png(out, albedo.numpy())
    sidecar = {
        "inputs": [str(p) for p in args.images],
        "sh": lights.numpy().round(8).tolist(),
        "sh_layout": "per input: 3 colour rows x 9 order-2 real SH coefficients",
        "run_dir": str(run.root),
        "variant": args.variant,
    }
    io.write_json(out.with_suffix(".json"), sidecar)
    _print({"albedo": str(out), "sidecar": str(out.with_suffix(".json"))})
    return EXIT_OK


def cmd_freeze_check(args) -> int:
    ok = pipeline.freeze_check_pair(args.ckpt_a, args.ckpt_b)
    _print({"frozen_parameters_identical": ok})
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facealbedo", description="Facial albedo estimation pipeline on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True, stop=False):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("run_dir", nargs="?", help=f"run directory (relative paths resolve under ${RUN_ROOT_ENV})")
        if config:
            sp.add_argument("--config", help="sectioned key=value config file")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        if stop:
            sp.add_argument("--stop-at", type=int, help="stop (with a checkpoint) once this step is reached")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate the synthetic dataset")
    add("train-codebook", cmd_train_codebook, "stage 1: codebook pretraining", stop=True)
    sp = add("train-texture", cmd_train_texture, "stage 2: dual-discriminator encoder fine-tuning", stop=True)
    sp.add_argument("--variant", default=pipeline.DEFAULT_STAGE2, choices=sorted(pipeline.STAGE2_VARIANTS))
    sp.add_argument("--freeze-check", action="store_true", help="verify codebook/decoder are unchanged after training")
    sp = add("train-albedo", cmd_train_albedo, "stage 3: multi-image albedo head", stop=True)
    sp.add_argument("--variant", default=pipeline.DEFAULT_STAGE3, choices=sorted(pipeline.STAGE3_VARIANTS))
    sp = add("eval", cmd_eval, "evaluate on the held-out identities", config=False)
    sp.add_argument("--variant", default=pipeline.DEFAULT_STAGE3, choices=sorted(pipeline.STAGE3_VARIANTS))
    sp.add_argument("--stage2", choices=sorted(pipeline.STAGE2_VARIANTS), help="also score this stage-2 variant")
    add("report", cmd_report, "write the image grid and n-curve", config=False)
    add("resume", cmd_resume, "continue the first unfinished stage", config=False, stop=True)
    sp = sub.add_parser("infer", help="estimate an albedo from 1..n images of one person")
    sp.add_argument("images", nargs="+")
    sp.add_argument("--run-dir", dest="run_dir", required=True)
    sp.add_argument("--out", required=True, help="output PNG; the SH sidecar is written next to it as .json")
    sp.add_argument("--variant", default=pipeline.DEFAULT_STAGE3, choices=sorted(pipeline.STAGE3_VARIANTS))
    sp.set_defaults(fn=cmd_infer)
    sp = sub.add_parser("freeze-check", help="compare codebook/decoder arrays of two checkpoints")
    sp.add_argument("ckpt_a")
    sp.add_argument("ckpt_b")
    sp.set_defaults(fn=cmd_freeze_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingCheckpointError as exc:
        print(f"missing upstream checkpoint: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (io.CheckpointError, pipeline.ResumeError) as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
