"""Command-line interface.

Subcommands: ``run`` (full pipeline), ``synth`` (scene generation), ``score``
(evaluation only), ``overlay`` (render result images).  Exit codes: 0 on
success, 1 on data errors, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, PoseFuseError

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_CONFIG_ERROR = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posefuse",
        description="Multi-view multi-person 3D pose fusion",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the full fusion pipeline")
    p_run.add_argument("--config", required=True, help="pipeline config JSON")
    p_run.add_argument("--seed", type=int, default=None, help="override the master seed")
    p_run.add_argument(
        "--factors",
        default=None,
        help="comma list from data,temp,col (data is mandatory)",
    )

    p_synth = sub.add_parser("synth", help="generate a synthetic scene")
    p_synth.add_argument("--spec", required=True, help="scene spec JSON")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--seed", type=int, default=0)

    p_score = sub.add_parser("score", help="score estimates against ground truth")
    p_score.add_argument("--est", required=True, help="results JSON")
    p_score.add_argument("--gt", required=True, help="ground truth JSON")
    p_score.add_argument("--alpha", type=float, default=0.5)
    p_score.add_argument("--out", default=None, help="write the CSV report here")

    p_overlay = sub.add_parser("overlay", help="render skeleton overlays")
    p_overlay.add_argument("--results", required=True, help="results JSON")
    p_overlay.add_argument("--calibration", required=True, help="calibration JSON")
    p_overlay.add_argument("--out", required=True, help="output directory")
    p_overlay.add_argument("--gt", default=None, help="optional ground truth JSON")
    p_overlay.add_argument("--background", default=None, help="optional background image dir")
    return parser


_FACTOR_ALIASES = {"data": "data", "temp": "temporal", "temporal": "temporal",
                   "col": "collision", "collision": "collision"}


def _parse_factors(text: str) -> tuple[str, ...]:
    out = []
    for name in text.split(","):
        name = name.strip().lower()
        if not name:
            continue
        if name not in _FACTOR_ALIASES:
            raise ConfigError(f"unknown factor {name!r} (choose from data,temp,col)")
        out.append(_FACTOR_ALIASES[name])
    return tuple(dict.fromkeys(out))


def _cmd_run(args) -> int:
    from .pipeline import PipelineConfig, run_pipeline

    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.factors is not None:
        overrides["factors"] = _parse_factors(args.factors)
    config = PipelineConfig.from_json(args.config, **overrides)
    result = run_pipeline(config)
    print(f"wrote {result.results_path}")
    if result.report is not None:
        print(result.report.to_text())
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .synth import generate, load_scene_spec

    spec = load_scene_spec(args.spec)
    scene = generate(spec, args.seed, args.out)
    print(
        f"generated {spec.n_actors} actors x {spec.n_frames} frames x "
        f"{spec.n_cameras} cameras under {scene.out_dir}"
    )
    return EXIT_OK


def _cmd_score(args) -> int:
    from .evaluation import load_pose_sequences, score

    est = load_pose_sequences(args.est)
    gt = load_pose_sequences(args.gt)
    report = score(est, gt, alpha=args.alpha)
    print(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_csv())
        print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_overlay(args) -> int:
    from .evaluation import load_pose_sequences
    from .geometry import load_calibrations
    from .overlay import emit_overlays

    skeletons = load_pose_sequences(args.results)
    cals = load_calibrations(args.calibration)
    gt = load_pose_sequences(args.gt) if args.gt else None
    written = emit_overlays(
        skeletons, cals, args.out, ground_truth=gt, background_dir=args.background
    )
    print(f"wrote {len(written)} overlays under {args.out}")
    return EXIT_OK


def _is_config_error(e: BaseException) -> bool:
    seen = set()
    while e is not None and id(e) not in seen:
        if isinstance(e, ConfigError):
            return True
        seen.add(id(e))
        e = e.__cause__ or e.__context__
    return False


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "run": _cmd_run,
        "synth": _cmd_synth,
        "score": _cmd_score,
        "overlay": _cmd_overlay,
    }
    try:
        return handlers[args.command](args)
    except PoseFuseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR if _is_config_error(e) else EXIT_DATA_ERROR
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
