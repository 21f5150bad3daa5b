"""Command-line pipeline driver.

Typical run::

    nucprop simulate --out data --seed 0
    nucprop degrade --data data --seed 2
    nucprop track --data data
    nucprop propagate --data data --out repaired
    nucprop eval-iou --data repaired --report iou.json
    nucprop eval-iou --data data --categories repaired/update_log.json
    nucprop eval-map --data data
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import DimensionError, FlowField
from .metrics import average_precision, collect_detections, mean_iou_by_category
from .motion import DeformationSpec, generate_elastic_flow, invert_flow, synthesize_flow_pair
from .propagate import MissingFlowError, PropagationConfig, Scope, WarpMode, run_propagation
from .sim import DegradeConfig, SimConfig, SimulationError, degrade_predictions, generate_video
from .tracker import LinkConfig, build_tracks

log = logging.getLogger("nucprop")

REPORT_FIELDS = ("map_sm", "map_ent", "iou_all", "iou_updated", "iou_interpolated",
                 "iou_non_updated", "counts")


class UsageError(Exception):
    pass


def _report(values: dict) -> str:
    report = {k: values.get(k) for k in REPORT_FIELDS}
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _emit(text: str, path):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _require(ds, *fields):
    for name in fields:
        if getattr(ds, name) is None:
            raise io.DatasetError(f"dataset has no {name.replace('_', ' ')}")


# -- subcommands ----------------------------------------------------------

def cmd_simulate(a):
    cfg = SimConfig(width=a.width, height=a.height, frames=a.frames, cells=a.cells, seed=a.seed,
                    cytosol_intensity=a.cytosol, nucleus_contrast_amplitude=a.amplitude,
                    oscillation_period=a.period, oscillation_waveform=a.waveform,
                    noise_sigma=a.noise,
                    motion=DeformationSpec(a.control_points, a.motion_magnitude, a.seed + 1))
    io.write_dataset(generate_video(cfg), a.out)


def cmd_degrade(a):
    ds = io.read_dataset(a.data)
    _require(ds, "gt_cells", "gt_nuclei", "contrast")
    cfg = DegradeConfig(seed=a.seed, visibility_threshold=a.visibility_threshold,
                        miss_probability=a.miss_probability, erode_dilate_px=a.erode_dilate_px,
                        min_erode_dilate_px=a.min_erode_dilate_px,
                        split_probability=a.split_probability,
                        base_uncertainty=a.base_uncertainty,
                        error_uncertainty=a.error_uncertainty)
    out = degrade_predictions(ds, cfg)
    out.tracks = out.update_log = None
    io.write_dataset(out, a.out or a.data)


def cmd_track(a):
    ds = io.read_dataset(a.data)
    _require(ds, "pred_cells")
    cfg = LinkConfig(min_link_iou=a.min_link_iou, gap=a.gap)
    ds.tracks = build_tracks(ds.pred_cells, cfg)
    ds.meta["track"] = {"min_link_iou": cfg.min_link_iou, "gap": cfg.gap}
    io.write_dataset(ds, a.out or a.data)


def cmd_propagate(a):
    ds = io.read_dataset(a.data)
    _require(ds, "pred_cells", "pred_nuclei", "uncertainty")
    cfg = PropagationConfig(theta=a.theta, alpha=a.alpha, beta=a.beta,
                            warp_mode=WarpMode(a.warp), fuse=a.fuse,
                            update_scope=Scope(a.scope))
    nuclei, entries, tracks = run_propagation(ds.pred_cells, ds.pred_nuclei, ds.uncertainty,
                                              ds.flows_fwd, ds.flows_bwd, cfg, tracks=ds.tracks)
    ds.pred_nuclei = nuclei
    ds.tracks = tracks
    ds.update_log = entries
    ds.meta["propagate"] = cfg.to_dict()
    io.write_dataset(ds, a.out or a.data)


def cmd_eval_iou(a):
    ds = io.read_dataset(a.data)
    _require(ds, "pred_cells", "pred_nuclei", "gt_cells", "gt_nuclei")
    update_log = ds.update_log
    if a.categories:
        update_log = io.read_update_log(a.categories)
    report = mean_iou_by_category(ds.pred_cells, ds.pred_nuclei, ds.gt_cells, ds.gt_nuclei,
                                  update_log)
    _emit(_report(report.to_dict()), a.report)


def cmd_eval_map(a):
    ds = io.read_dataset(a.data)
    _require(ds, "pred_nuclei", "gt_nuclei", "uncertainty")
    dets, gts = collect_detections(ds.pred_nuclei, ds.gt_nuclei, ds.scores, ds.uncertainty)
    values = {
        "map_sm": average_precision(dets, gts, a.iou, "sm"),
        "map_ent": average_precision(dets, gts, a.iou, "ent"),
        "counts": {"detections": len(dets), "ground_truth": len(gts)},
    }
    _emit(_report(values), a.report)


def cmd_defgen(a):
    spec = DeformationSpec(a.control_points, a.magnitude, a.seed)
    if a.image:
        img = io.read_pgm(a.image)
        warped, flow = synthesize_flow_pair(img, spec)
        if a.warped_out:
            io.write_pgm(a.warped_out, np.clip(np.rint(warped), 0, 65535).astype(np.uint16))
    else:
        if a.width is None or a.height is None:
            raise UsageError("defgen needs --image or both --width and --height")
        flow = generate_elastic_flow(spec, a.width, a.height)
    io.write_flow(a.out, flow)


def cmd_invert_flow(a):
    flow = io.read_flow(a.flow)
    inv = invert_flow(flow, iterations=a.iterations)
    io.write_flow(a.out, FlowField(inv.u.astype(np.float32), inv.v.astype(np.float32),
                                   inv.direction, inv.max_magnitude))


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nucprop",
                                description="Uncertainty-gated nucleus mask propagation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("simulate", help="generate a synthetic oscillating-nucleus video")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--cells", type=int, default=8)
    s.add_argument("--period", type=int, default=6)
    s.add_argument("--waveform", choices=("square", "sine"), default="square")
    s.add_argument("--cytosol", type=float, default=1000.0)
    s.add_argument("--amplitude", type=float, default=1500.0)
    s.add_argument("--noise", type=float, default=40.0)
    s.add_argument("--control-points", type=int, default=3)
    s.add_argument("--motion-magnitude", type=float, default=8.0)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("degrade", help="emulate unreliable nucleus predictions")
    d.add_argument("--data", required=True)
    d.add_argument("--out")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--visibility-threshold", type=float, default=0.5)
    d.add_argument("--miss-probability", type=float, default=0.3)
    d.add_argument("--erode-dilate-px", type=int, default=3)
    d.add_argument("--min-erode-dilate-px", type=int, default=1)
    d.add_argument("--split-probability", type=float, default=0.3)
    d.add_argument("--base-uncertainty", type=float, default=0.1)
    d.add_argument("--error-uncertainty", type=float, default=0.9)
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("track", help="link predicted cells into tracks")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--min-link-iou", type=float, default=0.2)
    t.add_argument("--gap", type=int, default=2)
    t.set_defaults(func=cmd_track)

    g = sub.add_parser("propagate", help="repair uncertain nuclei from confident neighbours")
    g.add_argument("--data", required=True)
    g.add_argument("--out")
    g.add_argument("--theta", type=float, default=0.5)
    g.add_argument("--alpha", type=float, default=0.7)
    g.add_argument("--beta", type=float, default=0.85)
    g.add_argument("--warp", choices=[m.value for m in WarpMode], default="mean-flow")
    g.add_argument("--fuse", action="store_true")
    g.add_argument("--scope", choices=[s.value for s in Scope], default="uncertain")
    g.add_argument("--seed", type=int, default=0,
                   help="accepted for uniformity; propagation is deterministic")
    g.set_defaults(func=cmd_propagate)

    e = sub.add_parser("eval-iou", help="mean nucleus IoU per update category")
    e.add_argument("--data", required=True)
    e.add_argument("--categories", help="update_log.json defining the categories")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval_iou)

    m = sub.add_parser("eval-map", help="nucleus AP ranked by score and by entropy")
    m.add_argument("--data", required=True)
    m.add_argument("--iou", type=float, default=0.5)
    m.add_argument("--report")
    m.set_defaults(func=cmd_eval_map)

    f = sub.add_parser("defgen", help="generate a random elastic flow")
    f.add_argument("--out", required=True)
    f.add_argument("--width", type=int)
    f.add_argument("--height", type=int)
    f.add_argument("--control-points", type=int, default=10)
    f.add_argument("--magnitude", type=float, default=10.0)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--image", help="PGM to deform; sets the grid size")
    f.add_argument("--warped-out", help="where to write the deformed image")
    f.set_defaults(func=cmd_defgen)

    i = sub.add_parser("invert-flow", help="approximate inverse of a flow field")
    i.add_argument("--flow", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--iterations", type=int, default=5)
    i.set_defaults(func=cmd_invert_flow)
    return p


RUNTIME_ERRORS = (io.DatasetError, DimensionError, MissingFlowError, SimulationError,
                  ValueError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nucprop: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"nucprop: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
