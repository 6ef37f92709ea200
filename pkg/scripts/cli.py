#!/usr/bin/env python3
"""
Command-line interface for the tiny SR architecture search
Every subcommand writes machine-readable JSON (or CSV) to stdout; progress
and diagnostics go to stderr. Errors print one JSON line on stderr and exit
with the code of the error class.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from config import DEFAULT_RUN_ROOT, setup_logging
from controller import load_checkpoint
from cost_model import discriminator_cost, generator_cost
from errors import CheckpointError, ConfigError, TinySRError
from model_builder import build_frozen_extractor, load_generator
from orchestrator import (
    RunDirectory, StopToken, export_csv, finetune_generator, install_signal_handlers, log_stats,
    read_log, replay_run, run_discriminator_search, run_distortion_training, run_gan_finetune,
    run_generator_search, run_pipeline, train_full_generator,
)
from run_config import RunConfig
from search_space import (
    DISCRIMINATOR, GENERATOR, DiscriminatorGenome, decode_discriminator, decode_generator,
    genome_from_dict, genome_from_json, genome_to_dict,
)
from sr_data import generate_dataset, load_image, load_png_folder
from trainer import evaluate_feature_distance, evaluate_psnr, feature_distance, psnr

logger = logging.getLogger("tinysr")


def emit(payload) -> None:
    print(json.dumps(payload, indent=2, default=str))


# ── Helpers ─────────────────────────────────────────────────────

def load_config(args) -> RunConfig:
    """--config file (or the run directory's config.json), else defaults; then --set overrides"""
    if args.config:
        config = RunConfig.load(Path(args.config))
    elif args.run_dir and (Path(args.run_dir) / "config.json").exists():
        config = RunConfig.load(Path(args.run_dir) / "config.json")
    elif args.smoke:
        config = RunConfig.smoke()
    elif args.surrogate:
        config = RunConfig.surrogate()
    else:
        config = RunConfig()
    return config.with_overrides(args.set) if args.set else config


def resolve_run_dir(args, config: RunConfig) -> RunDirectory:
    if args.run_dir:
        return RunDirectory(Path(args.run_dir))
    if config.output_dir:
        return RunDirectory(Path(config.output_dir))
    return RunDirectory(DEFAULT_RUN_ROOT / config.config_hash()[:12])


def read_genome(path: str):
    try:
        return genome_from_json(Path(path).read_text())
    except OSError as e:
        raise CheckpointError(f"Could not read genome {path}: {e}")


def _phase_value(rundir: RunDirectory, phase: str, key: str, hint: str):
    done = rundir.phase(phase)
    if not done:
        raise ConfigError(f"Phase {phase} has not finished in {rundir.root}; {hint}")
    return done[key]


def _kinds(kind: str) -> List[str]:
    return [GENERATOR, DISCRIMINATOR] if kind == "all" else [kind]


# ── Commands ────────────────────────────────────────────────────

def cmd_run(args, config: RunConfig) -> int:
    rundir = resolve_run_dir(args, config)
    stop = StopToken()
    install_signal_handlers(stop)
    logger.info(f"🚀 Run directory: {rundir.root}")
    result = run_pipeline(config, rundir.root, stop)
    emit({
        "completed": result.completed,
        "run_dir": str(rundir.root),
        "generator_genome": result.generator_genome and genome_to_dict(result.generator_genome),
        "discriminator_genome": result.discriminator_genome and genome_to_dict(result.discriminator_genome),
        "generator_snapshot": result.generator_snapshot,
        "final_snapshot": result.final_snapshot,
    })
    return 0


def cmd_search_gen(args, config: RunConfig) -> int:
    rundir = resolve_run_dir(args, config)
    rundir.prepare(config)
    stop = StopToken()
    install_signal_handlers(stop)
    best = run_generator_search(config, rundir, stop)
    emit({"completed": best is not None, "run_dir": str(rundir.root),
          **(rundir.phase("generator_search") or {})})
    return 0


def cmd_search_disc(args, config: RunConfig) -> int:
    rundir = resolve_run_dir(args, config)
    rundir.prepare(config)
    if args.generator:
        g_stem = Path(args.generator)
    else:
        g_stem = Path(_phase_value(rundir, "distortion_training", "snapshot", "pass --generator STEM"))
    stop = StopToken()
    install_signal_handlers(stop)
    best = run_discriminator_search(config, rundir, g_stem, stop)
    emit({"completed": best is not None, "run_dir": str(rundir.root),
          **(rundir.phase("discriminator_search") or {})})
    return 0


def cmd_train(args, config: RunConfig) -> int:
    """Full distortion training of one genome; a run directory without --genome uses phase 2"""
    if args.genome:
        genome = read_genome(args.genome)
        out_dir = Path(args.out) if args.out else resolve_run_dir(args, config).snapshot_dir
        stem, results = train_full_generator(config, genome, out_dir)
        emit({"snapshot": str(stem), "scales": results})
        return 0
    rundir = resolve_run_dir(args, config)
    rundir.prepare(config)
    g_genome = genome_from_dict(_phase_value(rundir, "generator_search", "genome", "pass --genome G.json"))
    stem = run_distortion_training(config, rundir, g_genome)
    emit({"snapshot": str(stem), **rundir.phase("distortion_training")})
    return 0


def cmd_finetune_gan(args, config: RunConfig) -> int:
    if args.generator and args.genome:
        out_dir = Path(args.out) if args.out else Path(args.generator).parent
        stem, report, provenance = finetune_generator(config, Path(args.generator), read_genome(args.genome),
                                                      out_dir)
        emit({"snapshot": str(stem), "feat_dist": report.value, "trace": report.trace,
              "provenance": provenance})
        return 0
    rundir = resolve_run_dir(args, config)
    rundir.prepare(config)
    hint = "pass --generator STEM --genome D.json"
    g_stem = Path(args.generator or _phase_value(rundir, "distortion_training", "snapshot", hint))
    if args.genome:
        d_genome = read_genome(args.genome)
    else:
        d_genome = genome_from_dict(_phase_value(rundir, "discriminator_search", "genome", hint))
    stem = run_gan_finetune(config, rundir, g_stem, d_genome)
    emit({"snapshot": str(stem), **rundir.phase("gan_finetune")})
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    extractor = build_frozen_extractor(config.gan_full.extractor_seed)
    depth = config.gan_full.feature_depth
    if args.pred or args.hr:
        if not (args.pred and args.hr):
            raise ConfigError("--pred and --hr go together")
        pred, hr = load_image(args.pred), load_image(args.hr)
        emit({
            "psnr": psnr(pred, hr, shave=args.shave),
            "psnr_y": psnr(pred, hr, shave=args.shave, y_channel=True),
            "feat_dist": feature_distance(pred, hr, extractor, depth),
        })
        return 0
    if not args.snapshot:
        raise ConfigError("eval needs --snapshot STEM or --pred/--hr")
    generator, meta = load_generator(Path(args.snapshot))
    dataset = generate_dataset(replace(config.dataset, scale=generator.scale))
    pairs = load_png_folder(Path(args.val_dir), generator.scale) if args.val_dir else (dataset.val or dataset.train)
    mean_rgb = meta.get("mean_rgb", dataset.mean_rgb)
    emit({
        "snapshot": args.snapshot,
        "genome": meta.get("genome"),
        "scale": generator.scale,
        "images": len(pairs),
        "psnr": evaluate_psnr(generator, pairs, mean_rgb),
        "psnr_y": evaluate_psnr(generator, pairs, mean_rgb, y_channel=True),
        "feat_dist": evaluate_feature_distance(generator, pairs, mean_rgb, extractor, depth),
    })
    return 0


def cmd_cost(args, config: RunConfig) -> int:
    genome = read_genome(args.genome)
    n = args.channels or config.channels
    if isinstance(genome, DiscriminatorGenome):
        report = discriminator_cost(decode_discriminator(genome), n, config.bottleneck,
                                    args.patch or config.gan_proxy.hr_patch)
    else:
        report = generator_cost(decode_generator(genome), n, args.scale or config.scales[0],
                                tuple(config.ref_resolution))
    emit(report.to_dict())
    return 0


def cmd_sample(args, config: RunConfig) -> int:
    """N genomes from a controller checkpoint; the checkpoint itself is not modified"""
    if args.checkpoint:
        path = Path(args.checkpoint)
    else:
        path = resolve_run_dir(args, config).checkpoint_path(args.kind)
    controller, _, progress = load_checkpoint(path)
    if args.greedy:
        print(json.dumps({"decisions": list(controller.greedy_decode()), "greedy": True}))
        return 0
    for _ in range(args.count):
        sample = controller.sample()
        print(json.dumps({"genome": genome_to_dict(sample.genome) if sample.genome else None,
                          "decisions": list(sample.decisions), "log_prob": sample.log_prob,
                          "entropy": sample.entropy}))
    return 0


def cmd_replay(args, config: RunConfig) -> int:
    rundir = resolve_run_dir(args, config)
    total = 0
    for kind in _kinds(args.kind):
        if not rundir.log_path(kind).exists():
            if args.kind != "all":
                raise CheckpointError(f"No search log at {rundir.log_path(kind)}")
            continue
        count = replay_run(rundir, kind, config)
        logger.info(f"  ✅ {kind}: {count} records verified")
        total += count
        if args.csv:
            out = Path(args.csv)
            if args.kind == "all":
                out = out.with_name(f"{out.stem}_{kind}{out.suffix}")
            with open(out, "w", newline="") as f:
                export_csv(read_log(rundir.log_path(kind)), f)
    if not total:
        raise CheckpointError(f"No search logs in {rundir.root}")
    print(f"OK, {total} records verified")
    return 0


def cmd_stats(args, config: RunConfig) -> int:
    rundir = resolve_run_dir(args, config)
    stats = {}
    for kind in _kinds(args.kind):
        if rundir.log_path(kind).exists():
            stats[kind] = log_stats(read_log(rundir.log_path(kind)), maximize=kind == GENERATOR)
    emit({"run_dir": str(rundir.root), "phases": rundir.manifest().get("phases", {}), "logs": stats})
    return 0


COMMANDS = {
    "run": cmd_run,
    "search-gen": cmd_search_gen,
    "search-disc": cmd_search_disc,
    "train": cmd_train,
    "finetune-gan": cmd_finetune_gan,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "sample": cmd_sample,
    "replay": cmd_replay,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Run configuration JSON')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config value, e.g. generator_search.steps=50')
    common.add_argument('--smoke', action='store_true', help='Start from the surrogate smoke preset')
    common.add_argument('--surrogate', action='store_true',
                        help='Start from the long surrogate-search preset (2500 generator steps)')
    common.add_argument('--run-dir', help='Run directory (default: $TINYSR_RUN_ROOT/<config hash>)')
    common.add_argument('--verbose', '-v', action='store_true', help='Debug logging on stderr')

    parser = argparse.ArgumentParser(description='Tiny GAN super-resolution architecture search')
    subparsers = parser.add_subparsers(dest='command', help='Commands')

    subparsers.add_parser('run', parents=[common], help='Run (or resume) all four phases')
    subparsers.add_parser('search-gen', parents=[common], help='Phase 1: generator search')

    disc = subparsers.add_parser('search-disc', parents=[common], help='Phase 3: discriminator search')
    disc.add_argument('--generator', help='Generator snapshot stem (default: phase 2 output)')

    train = subparsers.add_parser('train', parents=[common], help='Full distortion training of a genome')
    train.add_argument('--genome', help='Generator genome JSON')
    train.add_argument('--out', help='Snapshot directory')

    gan = subparsers.add_parser('finetune-gan', parents=[common], help='Phase 4: GAN fine-tuning')
    gan.add_argument('--generator', help='Generator snapshot stem')
    gan.add_argument('--genome', help='Discriminator genome JSON')
    gan.add_argument('--out', help='Snapshot directory')

    ev = subparsers.add_parser('eval', parents=[common], help='PSNR and feature distance')
    ev.add_argument('--snapshot', help='Generator snapshot stem')
    ev.add_argument('--val-dir', help='Folder of HR PNGs (default: synthetic validation split)')
    ev.add_argument('--pred', help='Predicted image (.png or .npy)')
    ev.add_argument('--hr', help='Reference image (.png or .npy)')
    ev.add_argument('--shave', type=int, default=0, help='Border pixels ignored by PSNR')

    cost = subparsers.add_parser('cost', parents=[common], help='Mult-Adds and parameters of a genome')
    cost.add_argument('--genome', required=True, help='Genome JSON')
    cost.add_argument('--scale', type=int, choices=[1, 2, 4], help='Generator scale')
    cost.add_argument('--channels', type=int, help='Feature width n')
    cost.add_argument('--patch', type=int, help='Discriminator input patch')

    sample = subparsers.add_parser('sample', parents=[common], help='Sample genomes from a controller')
    sample.add_argument('--checkpoint', help='controller.ckpt path')
    sample.add_argument('--kind', choices=[GENERATOR, DISCRIMINATOR], default=GENERATOR)
    sample.add_argument('--count', type=int, default=1)
    sample.add_argument('--greedy', action='store_true', help='Most probable genome only')

    replay = subparsers.add_parser('replay', parents=[common], help='Verify logged rewards')
    replay.add_argument('--kind', choices=[GENERATOR, DISCRIMINATOR, 'all'], default='all')
    replay.add_argument('--csv', help='Also export the log as CSV')

    stats = subparsers.add_parser('stats', parents=[common], help='Search log summary')
    stats.add_argument('--kind', choices=[GENERATOR, DISCRIMINATOR, 'all'], default='all')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help(sys.stderr)
        return 2
    setup_logging(args.verbose)
    try:
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except TinySRError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        error = CheckpointError(str(e))
        print(json.dumps(error.to_dict()), file=sys.stderr)
        return error.exit_code
    except KeyboardInterrupt:
        print(json.dumps({"error": "KeyboardInterrupt", "message": "interrupted"}), file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
