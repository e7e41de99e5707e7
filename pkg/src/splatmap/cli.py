"""Command line entry point: ``splatmap run|synth|ablate|metrics``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .ablation import ABLATIONS, run_ablation
from .config import format_config, load_config
from .errors import InvariantViolation, MapperError, ParseError
from .io import ensure_dir, export_frames, export_ply, load_sequence, write_report_csv, write_synth
from .management import GroundTruthDepth, NearestTrackedDepth
from .pipeline import PipelineConfig, RunReport, aggregate_rows, run_pipeline
from .rasterizer import render
from .synth import PRESETS, synth_scene

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_INVARIANT = 3


def _write_outputs(out, report, mapper, frames):
    out = ensure_dir(out)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "timings.json").write_text(
        json.dumps({"timings": report.timings, "wall_time": report.wall_time}, indent=2,
                   sort_keys=True) + "\n", encoding="utf-8")
    write_report_csv(report, out / "report.csv")
    export_ply(mapper.map, out / "map.ply")
    export_frames(out / "renders", {
        f.index: render(mapper.map, mapper.eval_pose(f), f.K, mapper.cfg.background).image
        for f in frames})


def cmd_run(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    seq = load_sequence(args.manifest)
    if not seq.frames:
        raise InvariantViolation(f"{args.manifest}: manifest lists no frames")
    provider = (GroundTruthDepth(seq.depth_maps) if len(seq.depth_maps) == len(seq.frames)
                else NearestTrackedDepth())
    report, mapper = run_pipeline(seq.frames, cfg, provider, post_refine_steps=args.post_refine,
                                  extra={"manifest": str(args.manifest),
                                         "depth_provider": type(provider).__name__})
    agg = report.aggregates
    print(f"frames {len(seq.frames)}  keyframes {report.n_keyframes}  gaussians {len(mapper.map)}")
    print(f"train  PSNR {agg['train_psnr']:.2f}  SSIM {agg['train_ssim']:.4f}  MAE {agg['train_mae']:.4f}")
    print(f"heldout PSNR {agg['heldout_psnr']:.2f}  SSIM {agg['heldout_ssim']:.4f}  "
          f"MAE {agg['heldout_mae']:.4f}")
    print("time " + "  ".join(f"{k} {v:.1f}s" for k, v in report.timings.items())
          + f"  wall {report.wall_time:.1f}s")
    if args.out:
        _write_outputs(args.out, report, mapper, seq.frames)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_synth(args):
    if args.preset not in PRESETS:
        raise ParseError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
    scfg = dataclasses.replace(PRESETS[args.preset], seed=args.seed)
    scene = synth_scene(scfg)
    manifest = write_synth(scene, args.out)
    (Path(args.out) / "synth.json").write_text(
        json.dumps({"config": scfg.to_dict(), "segments": scene.segments}, indent=2,
                   sort_keys=True) + "\n", encoding="utf-8")
    (Path(args.out) / "default.cfg").write_text(format_config(PipelineConfig()), encoding="utf-8")
    print(f"wrote {len(scene.frames)} frames to {manifest}")
    return EXIT_OK


def cmd_ablate(args):
    if args.name not in ABLATIONS:
        raise ParseError(f"unknown ablation {args.name!r}; choose from {', '.join(ABLATIONS)}")
    cfg = load_config(args.config) if args.config else PipelineConfig()
    rep = run_ablation(args.name, cfg, seed=args.seed)
    out = ensure_dir(args.out)
    (out / f"{args.name}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    for variant, metrics in rep.variants.items():
        print(f"{variant:>18}: " + "  ".join(f"{k} {v:.4g}" for k, v in sorted(metrics.items())))
    print(f"verdict: {'PASS' if rep.verdict else 'FAIL'} ({rep.criterion})")
    return EXIT_OK


def cmd_metrics(args):
    path = Path(args.report)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        report = RunReport.from_dict(data)
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"not a run report: {exc}", path) from None
    recomputed = aggregate_rows(report.rows)
    if recomputed != report.aggregates:
        raise InvariantViolation(f"{path}: aggregates do not match per-frame rows")
    for key, value in report.aggregates.items():
        print(f"{key:>14} {value:.6g}")
    print(f"{'keyframes':>14} {report.n_keyframes}")
    print(f"{'gaussians':>14} {report.gaussian_counts[-1] if report.gaussian_counts else 0}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="splatmap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="map a sequence from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--post-refine", type=int, default=None, metavar="N")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="write a synthetic sequence")
    p.add_argument("--preset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="run a paired ablation on a synthetic scene")
    p.add_argument("--name", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", help="summarise a run report")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (InvariantViolation, MapperError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
