import argparse
import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Tuple

from spygr.core.errors import ConfigError, SpyGRError
from spygr.utils.config_loader import load_config_file, load_environment, resolve_config
from spygr.utils.stage_base import EXIT_CONFIG_ERROR, EXIT_FAILURE

# Setup Logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(sys.stdout)
    ]
)
logger = logging.getLogger("SpyGR")


def _stage_entry(subcommand: str) -> Tuple[Dict[str, Any], Dict[str, str], Callable]:
    """(defaults, flag aliases, run function) of a subcommand."""
    if subcommand == "verify":
        from spygr.stage_verify import VERIFY_DEFAULTS, run_verify
        return VERIFY_DEFAULTS, {}, run_verify
    if subcommand == "bench":
        from spygr.stage_bench import BENCH_DEFAULTS, run_bench
        return BENCH_DEFAULTS, {}, run_bench
    if subcommand == "train":
        from spygr.stage_train import FLAG_ALIASES, TRAIN_DEFAULTS, run_train
        return TRAIN_DEFAULTS, FLAG_ALIASES, run_train
    if subcommand == "ablate":
        from spygr.stage_ablate import ABLATE_DEFAULTS, FLAG_ALIASES, run_ablate
        return ABLATE_DEFAULTS, FLAG_ALIASES, run_ablate
    if subcommand == "heatmap":
        from spygr.stage_heatmap import HEATMAP_DEFAULTS, run_heatmap
        return HEATMAP_DEFAULTS, {}, run_heatmap
    raise ConfigError("subcommand", f"unknown subcommand '{subcommand}'")


def _add_shared_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="JSON config file (flags override its values)")
    parser.add_argument("--seed", type=int, help="Master seed")
    parser.add_argument("--shape", type=str, help="Input shape N,C,H,W")
    parser.add_argument("--levels", type=int, help="Pyramid levels")
    parser.add_argument("--m", type=int, help="Embedding dimension M")
    parser.add_argument("--ablation", type=str, help="Ablation row (comma-separated for ablate)")
    parser.add_argument("--out", type=str, help="Output directory (default output/<subcommand>)")
    parser.add_argument("--oracle-cap", dest="oracle_cap", type=int,
                        help="Largest n the dense oracle accepts")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="SpyGR spatial pyramid graph reasoning toolkit")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    verify = sub.add_parser("verify", help="Numerical verification suites")
    _add_shared_flags(verify)
    verify.add_argument("--cases", type=int, help="Random cases per suite")
    verify.add_argument("--skip-epsilon", dest="skip_epsilon", action="store_true", default=None,
                        help="Drop the degree floor (demonstrates the zero-degree failure)")

    bench = sub.add_parser("bench", help="FLOP/memory report and Laplacian timings")
    _add_shared_flags(bench)

    for name, help_text in (("train", "Train one ablation row"), ("ablate", "Run the ablation ladder")):
        p = sub.add_parser(name, help=help_text)
        _add_shared_flags(p)
        p.add_argument("--iters", type=int, help="Training iterations")
        p.add_argument("--samples", type=int, help="Training samples")

    heatmap = sub.add_parser("heatmap", help="Similarity heatmaps of one pixel")
    _add_shared_flags(heatmap)
    heatmap.add_argument("--pixel", type=str, help="Queried pixel ROW,COL")
    heatmap.add_argument("--params", type=str, help="Model, pyramid or params directory")
    heatmap.add_argument("--image", type=str, help="Input tensor file (.spgt)")
    return parser


def flag_overrides(args: argparse.Namespace, aliases: Dict[str, str]) -> Dict[str, Any]:
    """Flags that were given, renamed to config keys."""
    skip = {"subcommand", "config", "out", "verbose"}
    overrides = {}
    for dest, value in vars(args).items():
        if dest in skip or value is None:
            continue
        overrides[aliases.get(dest, dest)] = value
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    load_environment()

    logger.info(f"Starting SpyGR subcommand: {args.subcommand}")
    try:
        defaults, aliases, run_stage = _stage_entry(args.subcommand)
        config = resolve_config(defaults, load_config_file(args.config), flag_overrides(args, aliases))
        outcome = run_stage(config, args.out)
    except ConfigError as e:
        logger.error(e.message)
        return EXIT_CONFIG_ERROR
    except SpyGRError as e:
        logger.error(str(e))
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"Subcommand {args.subcommand} failed: {e}")
        return EXIT_FAILURE

    logger.info(f"Outputs written to {outcome.output_dir}")
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
