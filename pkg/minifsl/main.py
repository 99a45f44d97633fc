import argparse
import logging
import sys

import minifsl
from minifsl.errors import ConfigError, EpisodeFailed, FslError
from minifsl.minifsl import run_ablate, run_embed, run_eval, run_export_traj, run_train


def _banner():
    return rf"""
            _         _   __       _ 
 _ __ ___  (_) _ __  (_) / _| ___ | |
| '_ ` _ \ | || '_ \ | || |_ / __|| |
| | | | | || || | | || ||  _|\__ \| |
|_| |_| |_||_||_| |_||_||_|  |___/|_|
                                  {minifsl.__version__}
A minimalistic few-shot learning toolkit.
"""


COMMANDS = {
    "train": (run_train, "fit an embedding network on the base classes"),
    "embed": (run_embed, "run a trained model over a dataset and write an FSLE file"),
    "eval": (run_eval, "evaluate one inference configuration over many episodes"),
    "ablate": (run_ablate, "evaluate an ablation grid and write a CSV table"),
    "export-traj": (run_export_traj, "export prototype trajectories of one episode"),
}


def _parser():
    parser = argparse.ArgumentParser(
        description="MiniFSL, a minimalistic toolkit for few-shot learning experiments.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default="config.json", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--episodes", type=int, default=None, help="number of evaluation episodes")
    common.add_argument("--workers", type=int, default=None, help="threads evaluating episodes")
    common.add_argument("--out", type=str, default=None, help="output file")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help) in COMMANDS.items():
        sub.add_parser(
            name,
            parents=[common],
            help=help,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.seed is not None and args.seed < 0:
        print("** Error: --seed must be non-negative")
        return 2
    if args.workers is not None and args.workers < 1:
        print("** Error: --workers must be at least 1")
        return 2

    print(_banner())
    run, _ = COMMANDS[args.command]
    try:
        run(args)
    except ConfigError as e:
        print("** Configuration error: " + str(e))
        return 2
    except EpisodeFailed as e:
        if isinstance(e.cause, ConfigError):
            print("** Configuration error: " + str(e))
            return 2
        print("** Error reported: " + str(e))
        return 3
    except (FslError, OSError) as e:
        print("** Error reported: " + str(e))
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
