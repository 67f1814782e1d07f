"""Command line entry point: ``vprdb {build,eval,sweep,synth}``.

Exit codes: 0 success, 1 configuration error, 2 input error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, VprdbError
from .pipeline import DEFAULT_SWEEP, load_config, run_build, run_eval, run_sweep
from .sequence_io import SyntheticSceneSpec, write_synthetic_scene

log = logging.getLogger("vprdb")


def _thresholds(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--input", dest="input_root", type=Path, help="scan sequence directory")
    p.add_argument("--format", choices=["default", "7scenes"])
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--threshold", type=float, help="IoU overlap threshold in (0, 1)")
    p.add_argument("--selector", choices=["greedy", "exact"])
    p.add_argument("--vertex-limit", dest="exact_vertex_limit", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--max-depth", type=float)
    p.add_argument("--frame-range", help="start:stop slice of the scan, stop exclusive")
    p.add_argument("--extend-depth", action="store_true", default=None)
    p.add_argument("--workers", type=int)
    p.add_argument("--write-overlap", action="store_true", default=None)
    p.add_argument("--out", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vprdb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("build", help="select a database from a scan"))

    p = sub.add_parser("eval", help="recall@k of precomputed descriptors")
    _common(p)
    p.add_argument("--db-descriptors", type=Path)
    p.add_argument("--query-descriptors", type=Path)
    p.add_argument("--query-root", type=Path)
    p.add_argument("--k", type=int)
    p.add_argument("--gt-threshold", type=float)

    p = sub.add_parser("sweep", help="database statistics over several thresholds")
    _common(p)
    p.add_argument("--thresholds", type=_thresholds, default=list(DEFAULT_SWEEP))

    p = sub.add_parser("synth", help="write a synthetic scan to disk")
    p.add_argument("--kind", choices=["corridor", "grid-room"], default="corridor")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--step", type=float, default=1.5)
    p.add_argument("--view-extent", type=int, default=10)
    p.add_argument("--voxel-size", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


_CONFIG_KEYS = (
    "input_root", "format", "voxel_size", "threshold", "selector", "exact_vertex_limit",
    "stride", "max_depth", "frame_range", "extend_depth", "workers", "write_overlap", "out",
    "db_descriptors", "query_descriptors", "query_root", "k", "gt_threshold",
)


def _run(args) -> None:
    if args.command == "synth":
        spec = SyntheticSceneSpec(
            kind=args.kind,
            frame_count=args.frames,
            step=args.step,
            view_extent=args.view_extent,
            voxel_size=args.voxel_size,
            seed=args.seed,
        )
        sequence, _ = write_synthetic_scene(spec, args.out)
        log.info("wrote %d synthetic frames to %s", len(sequence), args.out)
        return

    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if hasattr(args, k)}
    config = load_config(args.config, **overrides)
    if args.command == "build":
        result = run_build(config)
        print(result.stats.summary())
    elif args.command == "sweep":
        for stats in run_sweep(config, args.thresholds):
            print(stats.summary())
    elif args.command == "eval":
        result = run_eval(config)
        print(f"recall@{result.k} = {result.recall:.4f} ({result.evaluated} queries, "
              f"{len(result.queries_without_gt)} without ground truth)")
    else:
        raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _run(args)
    except VprdbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
