"""Command-line entry point: ``mind-decoder <subcommand> [--config PATH] [--seed N] [--out DIR]``.

On failure one JSON error line (``create_error_response``) is printed to stderr and the exit code
is 2, or 1 for unexpected exceptions.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

from mind_decoder import commands
from mind_decoder.configuration import Configuration
from mind_decoder.errors import MindDecoderError
from mind_decoder.utils import create_error_response

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="Configuration JSON file.")
    parser.add_argument("--seed", type=int, default=None, help="Run seed; overrides the configuration.")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="Output directory.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mind-decoder", description="Decode fMRI ROI responses into captions.")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("synth-data", help="Generate a synthetic train/test dataset."))

    p = sub.add_parser("pretrain-lm", help="Pre-train and freeze the caption decoder.")
    _common(p)
    p.add_argument("--train", type=Path, required=True, help="Training manifest or split directory.")

    p = sub.add_parser("train", help="Train the fMRI encoder and cross-attention bridge.")
    _common(p)
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--decoder", type=Path, required=True, help="Frozen decoder checkpoint directory.")

    p = sub.add_parser("decode", help="Decode a split into predictions.tsv.")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--average", dest="average", action="store_true", default=None,
                       help="Average repeated presentations before decoding.")
    group.add_argument("--no-average", dest="average", action="store_false")
    p.add_argument("--strategy", choices=["greedy", "beam"], default=None)
    p.add_argument("--beam-width", type=int, default=None)
    p.add_argument("--prompt", default=None)

    p = sub.add_parser("evaluate", help="Score predictions against reference captions.")
    _common(p)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)

    for name, description in (("ablate-roi", "Compare LVC, HVC and VC inputs."),
                              ("variant-grid", "Run every encoder size x bridge scaling cell.")):
        p = sub.add_parser(name, help=description)
        _common(p)
        p.add_argument("--train", type=Path, required=True)
        p.add_argument("--test", type=Path, required=True)
        p.add_argument("--decoder", type=Path, required=True)

    p = sub.add_parser("tsne-export", help="Export t-SNE coordinates of class embeddings.")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--perplexity", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)

    p = sub.add_parser("visualize-cues", help="Export cosine-similarity cue maps and masks.")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("pipeline", help="Run synth -> pretrain -> train -> decode -> evaluate.")
    _common(p)
    p.add_argument("--train", type=Path, default=None)
    p.add_argument("--test", type=Path, default=None)
    return parser


def _configuration(args: argparse.Namespace) -> Configuration:
    overrides: Dict[str, object] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    generation = {k: v for k, v in (("strategy", getattr(args, "strategy", None)),
                                    ("beam_width", getattr(args, "beam_width", None)),
                                    ("prompt", getattr(args, "prompt", None))) if v is not None}
    if generation:
        overrides["generation"] = generation
    tsne = {k: v for k, v in (("perplexity", getattr(args, "perplexity", None)),
                              ("iterations", getattr(args, "iterations", None))) if v is not None}
    if tsne:
        overrides["analysis"] = {"tsne": tsne}
    config = Configuration.from_file(args.config)
    return config.with_overrides(overrides) if overrides else config


def _run_pipeline(config: Configuration, args: argparse.Namespace):
    from mind_decoder.graph import graph

    inputs = {"out_dir": str(args.out)}
    if args.train and args.test:
        inputs.update(train_manifest=str(args.train), test_manifest=str(args.test))
    return graph.invoke(inputs, {"configurable": config.to_dict()})["report"]


def dispatch(args: argparse.Namespace) -> object:
    config = _configuration(args)
    out = args.out
    path = args.config
    handlers: Dict[str, Callable[[], object]] = {
        "synth-data": lambda: commands.cmd_synth_data(config, out, path),
        "pretrain-lm": lambda: commands.cmd_pretrain_lm(config, args.train, out, path),
        "train": lambda: commands.cmd_train(config, args.train, args.decoder, out, path),
        "decode": lambda: commands.cmd_decode(config, args.model, args.test, out, args.average, path),
        "evaluate": lambda: commands.cmd_evaluate(config, args.predictions, args.test, out, path),
        "ablate-roi": lambda: commands.cmd_ablate_roi(config, args.train, args.test, args.decoder, out, path),
        "variant-grid": lambda: commands.cmd_variant_grid(config, args.train, args.test, args.decoder, out, path),
        "tsne-export": lambda: commands.cmd_tsne_export(config, args.model, args.data, out, path),
        "visualize-cues": lambda: commands.cmd_visualize_cues(config, args.model, args.data, out, args.threshold, path),
        "pipeline": lambda: _run_pipeline(config, args),
    }
    return handlers[args.command]()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        dispatch(args)
    except MindDecoderError as e:
        logger.error(f"{args.command} failed: {e.message}")
        response = create_error_response(e.message, e.error_type, e.additional_info)
        print(json.dumps(response, sort_keys=True), file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}")
        print(json.dumps(create_error_response(str(e), "InternalError"), sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
