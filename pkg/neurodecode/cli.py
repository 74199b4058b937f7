"""Command-line entrypoint: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

from neurodecode import __version__
from neurodecode.config import settings
from neurodecode.schemas.config import (
    PRESETS,
    ExperimentConfig,
    load_config,
    load_preset,
    with_overrides,
)
from neurodecode.services.common import ArtifactStore
from neurodecode.services.embed_service import EmbedService
from neurodecode.services.glm_service import GlmService
from neurodecode.services.hvae_service import HvaeService
from neurodecode.services.ldm_service import LdmService
from neurodecode.services.reconstruct_service import ReconstructService
from neurodecode.services.report_service import ReportService
from neurodecode.services.ridge_embed_service import RidgeEmbedService
from neurodecode.services.shapes_service import ShapesService
from neurodecode.services.stage1_service import Stage1Service
from neurodecode.services.sweep_service import SweepService
from neurodecode.services.synth_service import SynthService
from neurodecode.utils.errors import AppError

logger = logging.getLogger(__name__)

Runner = Callable[[ArtifactStore, ExperimentConfig, argparse.Namespace], dict[str, Any]]

STAGES: dict[str, Runner] = {
    "synth": lambda store, cfg, _: SynthService(store, cfg).run(),
    "glm": lambda store, cfg, args: GlmService(store, cfg).run(
        shuffled=getattr(args, "shuffled", False)
    ),
    "train-hvae": lambda store, cfg, _: HvaeService(store, cfg).run(),
    "train-stage1": lambda store, cfg, _: Stage1Service(store, cfg).run(),
    "train-embed": lambda store, cfg, _: EmbedService(store, cfg).run(),
    "fit-ridge-embed": lambda store, cfg, _: RidgeEmbedService(store, cfg).run(),
    "train-ldm": lambda store, cfg, _: LdmService(store, cfg).run(),
    "reconstruct": lambda store, cfg, _: ReconstructService(store, cfg).run(),
    "noise-sweep": lambda store, cfg, _: SweepService(store, cfg).run(),
    "report": lambda store, cfg, _: ReportService(store, cfg).run(),
}
RUN_ALL = tuple(STAGES)
SUBJECT_STAGES = ("train-stage1", "fit-ridge-embed", "reconstruct", "noise-sweep")


def run_subjects(cfg: ExperimentConfig, args: argparse.Namespace) -> list[int]:
    """Return the subjects run-all fits: every subject with --all-subjects, else cfg.subject."""
    if getattr(args, "all_subjects", False):
        return list(range(cfg.dataset.n_subjects))
    return [cfg.subject]


def _run_all(store: ArtifactStore, cfg: ExperimentConfig, args: argparse.Namespace) -> dict:
    results: dict[str, Any] = {}
    for name in RUN_ALL:
        if name in SUBJECT_STAGES or name == "report":
            continue
        results[name] = STAGES[name](store, cfg, argparse.Namespace())
    if getattr(args, "shuffled", False):
        results["glm-shuffled"] = GlmService(store, cfg).run(shuffled=True)
    for subject in run_subjects(cfg, args):
        subject_cfg = with_overrides(cfg, subject=subject)
        for name in SUBJECT_STAGES:
            results.setdefault(name, {})[f"s{subject}"] = STAGES[name](store, subject_cfg, args)
    results["report"] = STAGES["report"](store, cfg, args)
    return results


COMMANDS: dict[str, Runner] = {
    **STAGES,
    "run-all": _run_all,
    "shapes": lambda store, cfg, _: ShapesService(store, cfg).run(),
}

HELP = {
    "synth": "generate stimuli, schedules and BOLD",
    "glm": "estimate z-scored single-stimulus betas",
    "train-hvae": "train the hierarchical VAE and export latent targets",
    "train-stage1": "fit the betas to latents regressor",
    "train-embed": "train the dual encoder and the metric classifier",
    "fit-ridge-embed": "fit betas to embedding ridge maps",
    "train-ldm": "train the latent codec and the conditional denoiser",
    "reconstruct": "decode and refine the test split",
    "noise-sweep": "refine perturbed guesses at each noise amplitude",
    "report": "summarize metrics and render montages",
    "run-all": "run every stage from synth to report",
    "shapes": "write the shape contract of the configured dimensions",
}


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser with every subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named configuration")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--subject", type=int, help="subject whose betas are decoded")
    common.add_argument("--out", type=Path, help="run directory")
    common.add_argument("--log-level", help="logging level (default from NEURODECODE_LOG_LEVEL)")

    parser = argparse.ArgumentParser(
        prog="neurodecode", description="Desk-scale two-stage fMRI visual decoding."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name, parents=[common], help=HELP[name])
        if name in ("glm", "run-all"):
            sub.add_argument(
                "--shuffled",
                action="store_true",
                help="fit the permuted-label negative control under glm/shuffled/",
            )
        if name in ("train-stage1", "run-all"):
            sub.add_argument(
                "--kind", choices=("gru", "conv", "transformer", "ridge"), help="stage-1 model"
            )
            sub.add_argument(
                "--compare", action="store_true", help="also fit every alternative stage-1 model"
            )
        if name == "run-all":
            sub.add_argument(
                "--all-subjects",
                action="store_true",
                help="fit and evaluate every subject in turn",
            )
        if name in ("noise-sweep", "run-all"):
            sub.add_argument(
                "--amplitudes", type=int, nargs="+", help="noise amplitudes on the 8-bit scale"
            )
    return parser


def resolve_config(args: argparse.Namespace, store: ArtifactStore) -> ExperimentConfig:
    """Resolve --config, then --preset, then the run's config.json, then ``smoke``."""
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.preset is not None:
        cfg = load_preset(args.preset)
    else:
        cfg = store.load_config() or load_preset("smoke")
    updates: dict[str, Any] = {"seed": args.seed}
    if getattr(args, "subject", None) is not None:
        updates["subject"] = args.subject
    if getattr(args, "kind", None) or getattr(args, "compare", False):
        stage1 = cfg.stage1.model_dump(mode="json")
        if args.kind:
            stage1["kind"] = args.kind
        if args.compare:
            stage1["compare"] = True
        updates["stage1"] = stage1
    if getattr(args, "amplitudes", None):
        updates["sweep"] = cfg.sweep.model_dump(mode="json") | {"amplitudes": args.amplitudes}
    return with_overrides(cfg, **updates)


def _configure_logging(level: str | None) -> None:
    name = (level or settings.log_level).upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
    )


def main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level)
    store = ArtifactStore(args.out or Path(settings.default_out_dir))
    try:
        cfg = resolve_config(args, store)
        store.root.mkdir(parents=True, exist_ok=True)
        store.save_config(cfg)
        logger.info("%s: config %s, seed %s, out %s", args.command, cfg.name, cfg.seed, store.root)
        result = COMMANDS[args.command](store, cfg, args)
    except AppError as exc:
        logger.error("%s failed: %s", args.command, exc.message)
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return exc.exit_code
    except Exception:
        logger.exception("Unhandled exception in %s", args.command)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0
