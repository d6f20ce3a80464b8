"""
StructCBR Toolkit - Điểm Vào Chính
Giao diện dòng lệnh cho pipeline thí nghiệm.
"""

import sys
import argparse
import logging
from typing import Optional, Sequence

from core.config_loader import ConfigLoader
from core.pipeline import METHODS, ExperimentPipeline
from utils.error_handler import ClassifiedError, ConfigError, MissingArtifactError
from utils.file_utils import DirectoryLock
from utils.logger import init_structured_logger

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train-base", "train-cbr", "train-baselines", "adapt-eval",
            "ablate-similarity", "timing", "case-sweep", "report")

# Seed bị ghi đè bởi --seed cho từng lệnh
COMMAND_SEEDS = {
    "gen-data": "CORPUS",
    "train-base": "TRAIN_BASE",
    "train-cbr": "TRAIN_CBR",
    "train-baselines": "RETRIEVER",
    "timing": "FINETUNE",
}

EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3


def _int_list(text: str):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="StructCBR - structured case-based adaptation of a bottom-up text-to-query parser.\n"
                    "Run the commands in order: gen-data, train-base, train-cbr, train-baselines,\n"
                    "then adapt-eval / ablate-similarity / timing / case-sweep, and finally report.",
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument('command', choices=COMMANDS, help='Command to run')
    parser.add_argument('--config', type=str, default='config.json', help='Path to config.json')
    parser.add_argument('--preset', type=str, default=None, help='Named preset from PRESETS (e.g. large)')
    parser.add_argument('--split', type=int, default=None, help='Evaluate one resplit only')
    parser.add_argument('--method', type=str, default='structcbr',
                        choices=list(METHODS) + ['all'], help='Adaptation method for adapt-eval')
    parser.add_argument('--seed', type=int, default=None, help="Override the command's phase seed")
    parser.add_argument('--out', type=str, default=None, help='Output directory (overrides PATHS.OUTPUT_DIR)')
    parser.add_argument('--epochs', type=_int_list, default=None, help='Finetune epochs for timing, e.g. 1,2,5')
    parser.add_argument('--counts', type=_int_list, default=None, help='Case counts for case-sweep, e.g. 10,20,30')
    parser.add_argument('--no-progress', action='store_true', help='Hide progress bars')
    return parser


def load_config(args: argparse.Namespace) -> ConfigLoader:
    """Mặc định < config.json < preset < biến môi trường < cờ CLI"""
    config = ConfigLoader(args.config, preset=args.preset)
    if args.out:
        config.set("PATHS.OUTPUT_DIR", args.out)
    if args.seed is not None and args.command in COMMAND_SEEDS:
        config.set(f"SEEDS.{COMMAND_SEEDS[args.command]}", args.seed)
    return config


def run_command(pipeline: ExperimentPipeline, args: argparse.Namespace):
    command = args.command
    if command == "gen-data":
        return pipeline.gen_data()
    if command == "train-base":
        return pipeline.train_base()
    if command == "train-cbr":
        return pipeline.train_cbr()
    if command == "train-baselines":
        return pipeline.train_baselines()
    if command == "adapt-eval":
        return pipeline.adapt_eval(args.method, args.split)
    if command == "ablate-similarity":
        return pipeline.ablate_similarity(args.split)
    if command == "timing":
        return pipeline.timing(args.split, args.epochs)
    if command == "case-sweep":
        return pipeline.case_sweep(args.counts)
    return pipeline.report()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG

    out_dir = config.output_dir
    init_structured_logger("structcbr", str(out_dir / "logs"), json_log=True)

    try:
        with DirectoryLock(out_dir):
            pipeline = ExperimentPipeline(config, show_progress=not args.no_progress)
            result = run_command(pipeline, args)
        logger.info(f"{args.command} finished: {result}")
        return 0
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except MissingArtifactError as e:
        logger.error(str(e))
        return EXIT_MISSING_ARTIFACT
    except ClassifiedError as e:
        logger.error(str(e), exc_info=True)
        return 1
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
