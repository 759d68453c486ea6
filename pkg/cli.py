import argparse
import logging.handlers
import os
import sys
from typing import List, Optional

from sepprune import __version__
from sepprune.config import RunConfig
from sepprune.core.errors import (
    ArtifactExistsError,
    ConfigError,
    InvalidArgumentError,
    StageOrderError,
)
from sepprune.sepprune_service import SepPruneService

#
# START INIT
#

# Logging
log = logging.getLogger("root")
log.setLevel(logging.DEBUG)

formatter = logging.Formatter(fmt="%(asctime)s - %(levelname)s - %(module)s - %(message)s")

stream_handler = logging.StreamHandler()
stream_handler.setFormatter(formatter)
stream_handler.setLevel(logging.INFO)
log.addHandler(stream_handler)

#
# END INIT
#

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

USAGE_ERRORS = (ConfigError, StageOrderError, ArtifactExistsError, InvalidArgumentError)

COMMAND_HELP = {
    "profile": "count parameters and MACs per layer and component",
    "train": "train the separation network",
    "learn-mask": "search channel masks on the trained, frozen network",
    "prune": "remove the masked channels from the trained network",
    "finetune": "fine-tune the pruned network",
    "eval": "evaluate the fine-tuned network against the original and baseline pruning",
    "ablate": "run the threshold, iteration, joint-vs-stepwise, recovery and timing studies",
    "pipeline": "run train, learn-mask, prune, finetune and eval in one go",
}


def _add_file_handler(output_root: str) -> None:
    for handler in list(log.handlers):
        if isinstance(handler, logging.handlers.RotatingFileHandler):
            log.removeHandler(handler)
            handler.close()
    os.makedirs(output_root, exist_ok=True)
    rotating_file_handler = logging.handlers.RotatingFileHandler(
        os.path.join(output_root, "sepprune.log"), mode="a", maxBytes=5 * 1024 * 1024, backupCount=2, delay=True
    )
    rotating_file_handler.setFormatter(formatter)
    rotating_file_handler.setLevel(logging.WARN)
    log.addHandler(rotating_file_handler)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="INI configuration file (defaults apply to anything it leaves out)")
    shared.add_argument(
        "--output", help="output directory; defaults to [run] output, then $SEPPRUNE_OUTPUT_ROOT, then ./runs"
    )
    shared.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    shared.add_argument("--verbose", action="store_true", help="log debug messages to the console")
    shared.add_argument("--seed", type=int, help="seed of the pipeline random stream, overrides [run] seed")

    parser = argparse.ArgumentParser(
        prog="sepprune", description="Structured channel pruning for waveform separation networks."
    )
    parser.add_argument("--version", action="version", version="%(prog)s {}".format(__version__))
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True
    for command, help_text in COMMAND_HELP.items():
        sub = commands.add_parser(command, parents=[shared], help=help_text, description=help_text)
        if command == "profile":
            sub.add_argument("--checkpoint", help="profile this checkpoint instead of a freshly built network")
            sub.add_argument("--length", type=int, help="input length in samples, defaults to [data] length")
    return parser


def run(args: argparse.Namespace) -> int:
    stream_handler.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        config = RunConfig.load(args.config)
        _add_file_handler(config.output_root(args.output))
        options = {}
        if args.command == "profile":
            options = {"checkpoint": args.checkpoint, "length": args.length}
        service = SepPruneService(config, args.output, args.force, args.seed, options)
        if args.command == "pipeline":
            written = service.run_pipeline()
        else:
            written = service.run_stage(args.command)
    except USAGE_ERRORS as ex:
        log.error("%s", ex)
        return EXIT_USAGE
    except Exception as ex:
        log.exception("%s", ex)
        return EXIT_FAILURE
    log.info("Done: {} wrote {}".format(args.command, ", ".join(written)))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
