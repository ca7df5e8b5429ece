"""Command-line interface: ``tude {denoise,add-noise,evaluate,benchmark,synth}``.

Exit codes: 0 success, 1 usage error, 2 I/O or parse error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import yaml

from .denoiser import CONFIG_ENV_VAR, DenoiseConfig, denoise, load_config
from .evaluation import (
    NoiseModel,
    add_noise,
    mse,
    parse_manifest,
    run_benchmark,
    write_report,
)
from .geometry import CloudParseError, EmptyCloudError, read_cloud, write_cloud
from .synth import SHAPES, make_shape, normalize_scale

logger = logging.getLogger("tude")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PIPELINE = 0, 1, 2, 3

_DEFAULTS = DenoiseConfig()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    pass


def _add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("denoiser parameters (override the config file)")
    g.add_argument("--config", type=Path, help=f"YAML config file (default: ${CONFIG_ENV_VAR})")
    g.add_argument("--k", type=int, help="patch size K (default: from --sigma, else 21)")
    g.add_argument("--sigma", type=float, help="noise level used to choose K automatically")
    g.add_argument("--sigma-scale", type=float, help=f"model scale for --sigma (default: {_DEFAULTS.sigma_scale})")
    g.add_argument("--delta-sim", type=float, help=f"similarity threshold (default: {_DEFAULTS.delta_sim})")
    g.add_argument("--n-reg", type=int, help=f"search region size (default: {_DEFAULTS.n_reg})")
    g.add_argument("--ranks", type=int, nargs=3, metavar=("R1", "R2", "R3"),
                   help="core tensor size (default: %s)" % " ".join(map(str, _DEFAULTS.ranks)))
    g.add_argument("--delta-thre", type=float, help=f"hard threshold fraction (default: {_DEFAULTS.delta_thre})")
    g.add_argument("--seed-ratio", type=float, help=f"target seeds / points (default: {_DEFAULTS.seed_ratio})")
    g.add_argument("--seed-method", choices=("radius", "voxel"),
                   help=f"seed selection (default: {_DEFAULTS.seed_method})")
    g.add_argument("--seed-size", type=float, help="fixed seed radius / voxel edge (default: automatic)")
    g.add_argument("--threads", type=int, help="worker processes (default: available CPUs)")


def _config_from_args(args) -> DenoiseConfig:
    overrides = {
        "k": args.k,
        "sigma": args.sigma,
        "sigma_scale": args.sigma_scale,
        "delta_sim": args.delta_sim,
        "n_reg": args.n_reg,
        "ranks": tuple(args.ranks) if args.ranks else None,
        "delta_thre": args.delta_thre,
        "seed_ratio": args.seed_ratio,
        "seed_method": args.seed_method,
        "seed_size": args.seed_size,
        "threads": args.threads,
    }
    path = args.config or os.environ.get(CONFIG_ENV_VAR) or None
    file_sets_threads = False
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            file_sets_threads = "threads" in (yaml.safe_load(fh) or {})
    if args.threads is None and not file_sets_threads:
        overrides["threads"] = os.cpu_count() or 1
    try:
        return load_config(path, **overrides)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_denoise(args) -> int:
    cfg = _config_from_args(args)
    if args.dump_config:
        sys.stdout.write(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
        return EXIT_OK
    if args.input is None or args.output is None:
        raise UsageError("denoise needs INPUT and OUTPUT")
    cloud = read_cloud(args.input, args.format)
    out, report = denoise(cloud, cfg)
    write_cloud(out, args.output, args.format)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    return EXIT_OK


def cmd_add_noise(args) -> int:
    cloud = read_cloud(args.input, args.format)
    if args.normalize:
        cloud = normalize_scale(cloud)
    noisy = add_noise(cloud, NoiseModel(args.sigma, args.seed))
    write_cloud(noisy, args.output, args.format)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    value = mse(read_cloud(args.truth, args.format), read_cloud(args.test, args.format))
    print(repr(value))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _config_from_args(args)
    models, sigmas, seeds = parse_manifest(args.manifest)
    if args.seeds:
        seeds = args.seeds
    out_dir = Path(args.out)
    result = run_benchmark(
        models, sigmas, seeds, cfg,
        variants=not args.no_variants,
        cloud_dir=out_dir / "clouds" if args.save_clouds else None,
    )
    write_report(result, out_dir, cfg)
    sys.stdout.write((out_dir / "results.txt").read_text(encoding="utf-8"))
    failed = [r for r in result.rows if r.status != "ok"]
    if failed:
        logger.error("%d of %d benchmark rows failed", len(failed), len(result.rows))
        return EXIT_PIPELINE
    return EXIT_OK


def cmd_synth(args) -> int:
    cloud = make_shape(args.shape, args.n)
    if args.normalize:
        cloud = normalize_scale(cloud)
    write_cloud(cloud, args.output, args.format)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tude", description="Tucker-decomposition point cloud denoising.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    fmt = dict(choices=("auto", "ply", "xyz"), default="auto", help="cloud file format")

    p = sub.add_parser("denoise", help="denoise a point cloud")
    p.add_argument("input", type=Path, nargs="?")
    p.add_argument("output", type=Path, nargs="?")
    p.add_argument("--format", **fmt)
    p.add_argument("--report", type=Path, help="write the run report as JSON here")
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    _add_config_args(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("add-noise", help="add Gaussian noise to every coordinate")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true", help="scale to bounding-box diagonal 10 first")
    p.add_argument("--format", **fmt)
    p.set_defaults(func=cmd_add_noise)

    p = sub.add_parser("evaluate", help="print the symmetric nearest-neighbour MSE")
    p.add_argument("truth", type=Path)
    p.add_argument("test", type=Path)
    p.add_argument("--format", **fmt)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="run a benchmark manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("out", type=Path, help="output directory")
    p.add_argument("--seeds", type=int, nargs="+", help="override the manifest's seeds")
    p.add_argument("--no-variants", action="store_true", help="skip the rank-1 and no-threshold runs")
    p.add_argument("--save-clouds", action="store_true", help="write noisy and denoised clouds")
    _add_config_args(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("synth", help="write a clean synthetic surface sampling")
    p.add_argument("shape", choices=SHAPES)
    p.add_argument("n", type=int)
    p.add_argument("output", type=Path)
    p.add_argument("--normalize", action="store_true", help="scale to bounding-box diagonal 10")
    p.add_argument("--format", **fmt)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tude: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CloudParseError, EmptyCloudError) as exc:
        print(f"tude: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        logger.debug("pipeline failure", exc_info=True)
        print(f"tude: pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
