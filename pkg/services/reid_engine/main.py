import sys
from dotenv import load_dotenv

# Load environment variables FIRST before any local imports
load_dotenv()

import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from loguru import logger

from app.analysis.ablation import run_ablation
from app.analysis.alignment_report import alignment_report
from app.analysis.protocols import PROTOCOLS, cross_dataset_eval, run_protocol, summarize, write_reports
from app.core.config import RunConfig, get_settings, load_run_config
from app.core.errors import ConfigError, ReIDError
from app.core.log_setup import configure_logging
from app.models.two_stream import ABLATION_VARIANTS, TwoStreamReID
from app.services.dataset import DatasetIndex, load_dataset
from app.simulation.synth import synth_generate
from app.train import build_model, checkpoint_path, load_model, train, training_identities
from app.training.verification import run_model_gradcheck

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2


# ============================================================
# HELPERS
# ============================================================

def _load_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config)
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.out is not None:
        overrides["run.output_dir"] = str(args.out)
    return config.with_overrides(overrides) if overrides else config


def _model_for(config: RunConfig, checkpoint: Optional[Path], dataset: DatasetIndex) -> Tuple[TwoStreamReID, List[int]]:
    """Checkpointed model, or a freshly initialized one when no checkpoint is given or found"""
    path = checkpoint
    if path is None:
        default = checkpoint_path(config, 2)
        path = default if default.exists() else None
    if path is not None:
        return load_model(config, path)
    identities = training_identities(dataset, config)
    logger.warning("⚠️ No checkpoint given; using an untrained model")
    return build_model(config, len(identities)), identities


def _print_summaries(summaries) -> None:
    if not summaries:
        return
    header = "  ".join(f"{name:>12}" for name in summaries[0].as_row())
    print(f"{'stream':<8} {header}")
    for summary in summaries:
        print(summary.line())


def _split_csv(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


# ============================================================
# COMMANDS
# ============================================================

def cmd_gen(args: argparse.Namespace) -> int:
    config = _load_config(args)
    summary = synth_generate(config.synth, config.data.root, config.run.seed)
    print(summary.line())
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    result = train(config, stage=args.stage, resume=args.resume)
    if result.losses:
        last = result.losses[-1]
        print(f"stage {last.stage} iteration {last.iteration}: loss {last.loss:.6f} -> {config.run.output_dir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    dataset = load_dataset(config.data.root, config.data.min_length)
    model, identities = _model_for(config, args.checkpoint, dataset)
    protocol = args.protocol or config.eval.protocol

    if args.cross is not None:
        cross_root = config.data.cross_root if args.cross is True else args.cross
        if not cross_root:
            raise ConfigError("--cross without a path needs data.cross_root in the config", key="data.cross_root")
        target = load_dataset(cross_root, config.data.min_length)
        reports = cross_dataset_eval(
            model, target, protocol, config.run.seed, config.eval,
            train_domain=Path(config.data.root).name, test_domain=Path(cross_root).name,
            train_identities=identities, source_root=config.data.root,
        )
        tag = "cross"
    else:
        reports = run_protocol(dataset, model, protocol, config.run.seed, config.eval, train_identities=identities)
        tag = "eval"

    summaries = summarize(reports)
    write_reports(reports, summaries, config.run.output_dir, tag=f"{tag}_{protocol}")
    _print_summaries(summaries)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = _load_config(args)
    report = run_model_gradcheck(config.architecture(), seed=config.run.seed)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_alignviz(args: argparse.Namespace) -> int:
    config = _load_config(args)
    dataset = load_dataset(config.data.root, config.data.min_length)
    model, _ = _model_for(config, args.checkpoint, dataset)
    report = alignment_report(model, dataset, args.sequence, Path(config.run.output_dir) / "alignviz", config.eval.max_frames)
    for line in report.lines():
        print(line)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    variants = _split_csv(args.variants) if args.variants else list(ABLATION_VARIANTS)
    seeds = [int(s) for s in _split_csv(args.seeds)]
    table = run_ablation(config, variants, seeds)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "alignviz": cmd_alignviz,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtrl", description="RTRL Desk - two-stream video re-identification")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="flat section.key = value run config")
    common.add_argument("--seed", type=int, default=None, help="override run.seed")
    common.add_argument("--out", type=Path, default=None, help="override run.output_dir")

    sub.add_parser("gen", parents=[common], help="generate the synthetic dataset at data.root")

    train_p = sub.add_parser("train", parents=[common], help="two-stage training")
    train_p.add_argument("--stage", choices=["1", "2", "all"], default="all")
    train_p.add_argument("--resume", action="store_true", help="continue from the stage checkpoints in the output dir")

    eval_p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    eval_p.add_argument("--checkpoint", type=Path, default=None)
    eval_p.add_argument("--protocol", choices=PROTOCOLS, default=None)
    eval_p.add_argument("--cross", nargs="?", const=True, default=None,
                        help="evaluate on dataset B at PATH (data.cross_root when PATH is omitted)")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")

    viz_p = sub.add_parser("alignviz", parents=[common], help="θ trace and aligned feature maps of one sequence")
    viz_p.add_argument("--checkpoint", type=Path, default=None)
    viz_p.add_argument("--sequence", required=True, help="root-relative sequence path, e.g. 0003/cam1/seq00")

    ablate_p = sub.add_parser("ablate", parents=[common], help="train and evaluate model variants over seeds")
    ablate_p.add_argument("--variants", default=None, help=f"comma separated, from {', '.join(ABLATION_VARIANTS)}")
    ablate_p.add_argument("--seeds", default="0,1,2,3,4")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(get_settings())
    try:
        return COMMANDS[args.command](args)
    except ReIDError as exc:
        logger.error(f"❌ {type(exc).__name__}: {exc}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
