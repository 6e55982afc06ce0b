"""Command-line surface tying the toolkit together.

Subcommands: simulate, track, postfuse, eval, project, report. Every command
is deterministic given --seed; defaults can be overridden by a config file
named in $CROSSVIEW_CONFIG (one `key = value` per line, keys matching
TrackerConfig fields). `crossview --show-config` prints every default.
"""

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from crossview import dataio, evalkit, kernels, postfuse as postfuse_mod, scenesim
from crossview.camera import BevGridSpec, VolumeSpec, backproject_to_height, load_calibration, project_point
from crossview.errors import ToolkitError
from crossview.pipeline import Tracker, TrackerConfig, TrackRun
from crossview.trackhead import LossWeights

ENV_CONFIG = "CROSSVIEW_CONFIG"


def _config_overrides():
    path = os.environ.get(ENV_CONFIG)
    if not path:
        return {}
    overrides = {}
    field_types = {f.name: f.type for f in dataclasses.fields(TrackerConfig)}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in field_types:
                continue
            kind = field_types[key]
            if kind == "bool":
                overrides[key] = value.lower() in ("1", "true", "yes")
            elif kind == "int":
                overrides[key] = int(value)
            elif kind == "float":
                overrides[key] = float(value)
    return overrides


def make_tracker_config(args):
    overrides = _config_overrides()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for name in ("search_out", "ref_out", "patch"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    cells = getattr(args, "volume_cells", None)
    if cells is not None:
        base = VolumeSpec()
        overrides["volume"] = dataclasses.replace(base, nx=cells, ny=cells)
    return TrackerConfig(**overrides)


def show_config(stream=None):
    stream = stream if stream is not None else sys.stdout
    cfg = TrackerConfig()
    for f in dataclasses.fields(TrackerConfig):
        stream.write(f"tracker.{f.name} = {getattr(cfg, f.name)}\n")
    w = LossWeights()
    stream.write(f"loss.lambda_giou = {w.lambda_giou}\n")
    stream.write(f"loss.lambda_l1 = {w.lambda_l1}\n")
    stream.write(f"loss.lambda_bev = {w.lambda_bev}\n")
    grid = BevGridSpec()
    stream.write(f"bev_grid.cells = {grid.cells_x}x{grid.cells_y}\n")
    stream.write(f"bev_grid.extent_m = {grid.extent}\n")
    stream.write(f"bev_grid.cell_m = {grid.cell_size_x}\n")
    stream.write(f"eval.precision_px = {evalkit.DEFAULT_PRECISION_PX}\n")
    stream.write(f"eval.norm_precision = {evalkit.DEFAULT_NORM_PRECISION}\n")
    stream.write(f"eval.recovery_window = {evalkit.DEFAULT_RECOVERY_WINDOW}\n")
    stream.write(f"eval.recovery_iou = {evalkit.RECOVERY_IOU}\n")
    stream.write(f"eval.loss_iou = {evalkit.LOSS_IOU}\n")
    stream.write(f"kernels.backend = {kernels.backend_name()}\n")


def cmd_simulate(args):
    if args.occlusion:
        scene = scenesim.make_occlusion_scene(
            args.seed, n_frames=args.frames, occluded_view=args.occluded_view,
            occlusion_start=args.occlusion_start, occlusion_length=args.occlusion_length,
            n_cameras=args.cameras, image_width=args.image_width,
            image_height=args.image_height)
    else:
        scene = scenesim.generate_scene(scenesim.SceneConfig(
            seed=args.seed, n_frames=args.frames, n_cameras=args.cameras,
            image_width=args.image_width, image_height=args.image_height))
    dataio.export_scene(scene, args.out, sequence_id=f"seq{args.seed:04d}",
                        features=not args.no_features)
    print(f"wrote bundle {args.out}")
    return 0


def cmd_track(args):
    bundle = dataio.load_bundle(args.bundle, require_calibration=(args.mode == "multi"))
    cfg = make_tracker_config(args)
    tracker = Tracker(cfg, cameras=bundle.cameras)
    on_step = None
    if args.dump_bev and args.mode == "multi":
        dump_dir = Path(args.dump_bev)
        dump_dir.mkdir(parents=True, exist_ok=True)

        def on_step(t, out):
            dataio.write_pgm16(dump_dir / f"bev_{t:06d}.pgm", out.bev_score)

    run = tracker.run_sequence(bundle, mode=args.mode, on_step=on_step)
    dataio.save_track_run(args.out, run)
    print(f"tracked {bundle.n_frames} frames ({args.mode}) -> {args.out}")
    return 0


def cmd_postfuse(args):
    bundle = dataio.load_bundle(args.bundle, require_calibration=True)
    run = dataio.load_track_run(args.pred)
    tracks = dataio.records_to_view_tracks(run, bundle.n_frames, len(bundle.views))
    grid = BevGridSpec()
    records, bev = [], []
    skipped = 0
    for t in range(bundle.n_frames):
        frame_boxes = [tracks[k][t] for k in range(len(bundle.views))]
        if not any(b.visible and b.w > 0 and b.h > 0 for b in frame_boxes):
            skipped += 1
            continue
        result = postfuse_mod.post_fuse(frame_boxes, bundle.cameras, grid,
                                        height_prior=args.height_prior)
        for k, box in enumerate(result.boxes):
            records.append(dataio.BoxRecord(frame=t, view=k, box=box, score=1.0))
        bev.append((t, result.world_xy[0], result.world_xy[1]))
    dataio.save_track_run(args.out, TrackRun(mode="postfuse", records=records,
                                             bev_track=bev, stats={}))
    if skipped:
        print(f"skipped {skipped} frames with nothing to fuse", file=sys.stderr)
    print(f"fused {bundle.n_frames - skipped} frames -> {args.out}")
    return 0


def cmd_eval(args):
    bundle = dataio.load_bundle(args.bundle)
    run = dataio.load_track_run(args.pred)
    tracks = dataio.records_to_view_tracks(run, bundle.n_frames, len(bundle.views))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = []
    for k, name in enumerate(bundle.views):
        res = evalkit.evaluate_sequence(tracks[k], bundle.annotations[k],
                                        recovery_window=args.recovery_k,
                                        manual_attrs=bundle.manual_attrs[k] or None)
        results.append(res)
        evalkit.write_summary_csv(out_dir / f"summary_{name}.csv", res)
    evalkit.write_curve_csv(out_dir / "success_curve.csv", evalkit.SUCCESS_THRESHOLDS,
                            np.mean([r.success_curve for r in results], axis=0))
    evalkit.write_curve_csv(out_dir / "precision_curve.csv", evalkit.PRECISION_THRESHOLDS,
                            np.mean([r.precision_curve for r in results], axis=0))
    evalkit.write_curve_csv(out_dir / "norm_precision_curve.csv",
                            evalkit.NORM_PRECISION_THRESHOLDS,
                            np.mean([r.norm_precision_curve for r in results], axis=0))
    summary = evalkit.aggregate_results(results, per_frame=args.per_frame)
    if bundle.bev_track is not None and run.bev_track:
        grid = BevGridSpec()
        errs = [np.hypot(x - bundle.bev_track[f, 0], y - bundle.bev_track[f, 1])
                / grid.cell_size_x
                for f, x, y in run.bev_track if 0 <= f < bundle.n_frames]
        if errs:
            summary["bev_mean_cell_error"] = float(np.mean(errs))
    _write_kv_csv(out_dir / "summary.csv", summary)
    auc = summary.get("auc")
    print(f"auc={'' if auc is None else f'{auc:.4f}'} -> {out_dir}")
    return 0


def _write_kv_csv(path, mapping):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("metric,value\n")
        for key, value in mapping.items():
            if value is None:
                fh.write(f"{key},\n")
            elif isinstance(value, float):
                fh.write(f"{key},{value:.6f}\n")
            else:
                fh.write(f"{key},{value}\n")


def _read_kv_csv(path):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            key, _, value = line.strip().partition(",")
            out[key] = float(value) if value else None
    return out


def cmd_project(args):
    cam = load_calibration(args.calib)
    if args.to_pixel:
        x, y, z = args.to_pixel
        p = project_point(cam, (x, y, z))
        print(f"{p.u:.6f} {p.v:.6f} {p.depth:.6f}")
    else:
        u, v = args.to_world
        w = backproject_to_height(cam, u, v, args.height)
        print(f"{w[0]:.6f} {w[1]:.6f} {w[2]:.6f}")
    return 0


def cmd_report(args):
    with ThreadPoolExecutor(max_workers=max(args.threads, 1)) as pool:
        summaries = list(pool.map(_read_kv_csv, args.inputs))
    keys = sorted({k for s in summaries for k in s})
    rows = []
    for key in keys:
        values = [s[key] for s in summaries if s.get(key) is not None]
        rows.append((key, float(np.mean(values)) if values else None))
    _write_kv_csv(args.out, dict(rows))
    print(f"aggregated {len(summaries)} summaries -> {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="crossview",
                                     description="multi-view tracking toolkit")
    parser.add_argument("--show-config", action="store_true",
                        help="print every default constant and exit")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for multi-file commands")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="render a synthetic scene into a bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--cameras", type=int, default=3)
    p.add_argument("--image-width", type=int, default=256)
    p.add_argument("--image-height", type=int, default=192)
    p.add_argument("--occlusion", action="store_true",
                   help="add a wall fully hiding the target from one view")
    p.add_argument("--occluded-view", type=int, default=0)
    p.add_argument("--occlusion-start", type=int, default=40)
    p.add_argument("--occlusion-length", type=int, default=30)
    p.add_argument("--no-features", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="run the tracker over a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--mode", choices=("single", "multi"), default="multi")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--search-out", type=int, default=None, dest="search_out")
    p.add_argument("--ref-out", type=int, default=None, dest="ref_out")
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--volume-cells", type=int, default=None,
                   help="override nx=ny of the feature volume")
    p.add_argument("--dump-bev", default=None,
                   help="directory for per-frame BEV score maps (16-bit PGM)")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("postfuse", help="fuse per-view tracks by ground overlap")
    p.add_argument("--bundle", required=True)
    p.add_argument("--pred", required=True, help="track records to fuse")
    p.add_argument("--out", required=True)
    p.add_argument("--height-prior", type=float, default=1.0)
    p.set_defaults(func=cmd_postfuse)

    p = sub.add_parser("eval", help="score predictions against a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--recovery-k", type=int, default=evalkit.DEFAULT_RECOVERY_WINDOW)
    p.add_argument("--per-frame", action="store_true",
                   help="weight multi-view averages by frame counts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("project", help="calibration point <-> pixel utility")
    p.add_argument("--calib", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--to-pixel", nargs=3, type=float, metavar=("X", "Y", "Z"))
    group.add_argument("--to-world", nargs=2, type=float, metavar=("U", "V"))
    p.add_argument("--height", type=float, default=0.0,
                   help="world height of the --to-world plane")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("report", help="average summary CSVs across sequences")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.show_config:
        show_config()
        return 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ToolkitError as exc:
        print(f"error code={exc.code}: {exc.message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
