"""Command-line entry point.

    relnav --config scenario.toml --mode simulate --out-dir run/
    relnav --config scenario.toml --mode solve --reldyn off --out-dir run/
    relnav --config scenario.toml --mode all --seed 7 --out-dir run/

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 I/O error.  Failures print one machine-readable line on stderr:
``error code=<n> kind=<ExceptionType> msg=<message>``.

Set RELNAV_LOG_LEVEL (DEBUG/INFO/WARNING/ERROR) to control verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ConfigError, NumericalError, RelNavError
from .pipeline import run_pipeline

log = logging.getLogger("relnav")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="relnav",
        description="Small-body relative-navigation smoothing pipeline")
    p.add_argument("--config", required=True, help="scenario TOML file")
    p.add_argument("--mode", required=True,
                   choices=["simulate", "solve", "evaluate", "report", "all"],
                   help="pipeline stage to run ('all' chains every stage)")
    p.add_argument("--reldyn", choices=["on", "off"], default="on",
                   help="include dynamics-prior factors in the solve (default on)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the scenario seed")
    p.add_argument("--out-dir", default=None,
                   help="artifact directory (default ./run_<name>)")
    p.add_argument("--fixed-lag", type=int, default=None, metavar="N",
                   help="freeze frame variables older than N frames (incremental mode)")
    p.add_argument("--monte-carlo", type=int, default=None, metavar="N",
                   help="run N repetitions with derived seeds into mc_### subdirs")
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("RELNAV_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return run_pipeline(args.config, args.mode, reldyn=(args.reldyn == "on"),
                            seed=args.seed, out_dir=args.out_dir,
                            fixed_lag=args.fixed_lag, monte_carlo=args.monte_carlo)
    except ConfigError as e:
        print(f"error code=1 kind={type(e).__name__} msg={e}", file=sys.stderr)
        return 1
    except (NumericalError, RelNavError) as e:
        print(f"error code=2 kind={type(e).__name__} msg={e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error code=3 kind={type(e).__name__} msg={e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
