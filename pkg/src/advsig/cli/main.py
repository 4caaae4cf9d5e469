"""``advsig`` command line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import dataclasses
import json
import logging
import sys

from ..errors import AdvSigError, UsageError
from .config import PARAMS
from .run import make_config, run

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_param_flags(sub, stage):
    for f in dataclasses.fields(PARAMS[stage]):
        sub.add_argument(f"--{f.name.replace('_', '-')}", dest=f"p_{f.name}", default=None, metavar="VALUE")


def build_parser():
    parser = _Parser(prog="advsig", description="Adversarial-signature experiments for speaker identification.")
    parser.add_argument("--config", help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="root directory for run directories")
    parser.add_argument("--reuse", action="store_true", help="skip a stage whose run directory already has a summary")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="stage", parser_class=_Parser)
    for stage in PARAMS:
        sp = subs.add_parser(stage, help=f"run the {stage} stage")
        _add_param_flags(sp, stage)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.stage is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        overrides = {k[2:]: v for k, v in vars(args).items() if k.startswith("p_") and v is not None}
        cfg = make_config(args.stage, args.config, args.seed, args.out, overrides)
        d = run(cfg, reuse=args.reuse)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AdvSigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps({"run_dir": str(d)}))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
