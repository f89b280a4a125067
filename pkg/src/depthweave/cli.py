"""Command-line surface: upsample, sceneflow, synth, eval-flow, eval-depth.

Exit codes: 0 success, 1 input/config error, 2 partial computation
failure. Every subcommand is deterministic for identical inputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evalio, reconstruct, synth
from .camera import align_depth_to_color
from .core import DepthMap, DepthweaveError, InputError
from .evalio import AppConfig, load_config, scan_dataset
from .reconstruct import scene_flow_raster


def _load_app_config(path: str | None) -> AppConfig:
    if path is None:
        return AppConfig()
    return load_config(path)


def _resolve_threads(args, cfg: AppConfig) -> int:
    if getattr(args, "threads", None) is not None:
        return max(1, args.threads)
    env = os.environ.get("DEPTHWEAVE_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise InputError(f"DEPTHWEAVE_THREADS must be an integer, got {env!r}") from exc
    return max(1, cfg.pipeline.threads)


def _crop_depth(d: DepthMap, crop) -> DepthMap:
    if crop is None:
        return d
    x, y, w, h = crop
    return DepthMap(d.depth[y : y + h, x : x + w], d.valid[y : y + h, x : x + w])


def _scaled_depth(d: DepthMap, scale: float) -> DepthMap:
    if scale == 1.0:
        return d
    return DepthMap(d.depth * scale, d.valid)


def _prepare_inputs(layout, cfg: AppConfig):
    depths = []
    identity_rig = np.allclose(layout.rig.depth_to_color.rotation, np.eye(3)) and np.allclose(
        layout.rig.depth_to_color.translation, 0.0
    )
    for tick in sorted(layout.depth_files):
        d = evalio.read_pfm(layout.depth_files[tick])
        d = _scaled_depth(d, cfg.pipeline.depth_scale)
        if not identity_rig:
            d = align_depth_to_color(d, layout.rig)
        depths.append(_crop_depth(d, cfg.pipeline.crop))
    colors = [evalio.read_image(p) for p in layout.color_files]
    if cfg.pipeline.crop is not None:
        x, y, w, h = cfg.pipeline.crop
        from .core import ColorImage

        colors = [ColorImage(c.rgb[y : y + h, x : x + w]) for c in colors]
    return depths, colors


def cmd_upsample(args) -> int:
    cfg = _load_app_config(args.config)
    layout = scan_dataset(args.input)
    rig = cfg.rig or layout.rig
    cfg.pipeline.threads = _resolve_threads(args, cfg)
    layout.rig = rig
    depths, colors = _prepare_inputs(layout, cfg)
    out = Path(args.output)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    (out / "sceneflow").mkdir(exist_ok=True)
    result = reconstruct.upsample_sequence(
        depths, colors, rig, cfg.weights, cfg.solver, cfg.flow, cfg.pipeline
    )
    for t, dm in enumerate(result.depths):
        evalio.write_pfm(out / "depth" / f"frame_{t:06d}.pfm", dm)
    h, w = depths[0].depth.shape
    for i, interval in enumerate(result.intervals):
        if interval is None:
            continue
        frames = [
            scene_flow_raster(interval.anchor, interval.scene_flow[s], w, h)
            for s in range(layout.g)
        ]
        evalio.write_sf3d(out / "sceneflow" / f"interval_{i:06d}.sf3d", frames)
        if args.dump_holes:
            (out / "holes").mkdir(exist_ok=True)
            for s, mask in enumerate(interval.hole_masks):
                _write_pgm(
                    out / "holes" / f"frame_{i * layout.g + s + 1:06d}.pgm", mask
                )
    if args.dump_energy:
        _write_energy_csv(args.dump_energy, result)
    for i, msg in result.failures:
        print(f"interval {i} failed: {msg}", file=sys.stderr)
    print(
        f"wrote {len(result.depths)} depth frames to {out / 'depth'} "
        f"({len(result.failures)} failed intervals)"
    )
    return 2 if result.failures else 0


def _write_pgm(path, mask: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode())
        f.write(mask.astype(np.uint8).tobytes())


def _write_energy_csv(path, result) -> None:
    terms = ("opti", "point", "plane", "proj", "iso", "reg", "short")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["interval", "pass", "round", "level", "iteration", *terms, "total"])
        for i, interval in enumerate(result.intervals):
            if interval is None:
                continue
            for name, solve in (("forward", interval.forward), ("backward", interval.backward)):
                if solve is None:
                    continue
                for row in solve.trace:
                    writer.writerow(
                        [i, name, row.round, row.level, row.iteration]
                        + [f"{row.breakdown.get(t, 0.0):.9g}" for t in terms]
                        + [f"{row.total:.9g}"]
                    )


def cmd_sceneflow(args) -> int:
    cfg = _load_app_config(args.config)
    d0 = _scaled_depth(evalio.read_pfm(args.depth0), cfg.pipeline.depth_scale)
    d1 = _scaled_depth(evalio.read_pfm(args.depth1), cfg.pipeline.depth_scale)
    c0 = evalio.read_image(args.frame0)
    c1 = evalio.read_image(args.frame1)
    if cfg.rig is None:
        rig = synth.default_rig(c0.width) if c0.width == c0.height else None
        if rig is None:
            raise InputError("non-square frames need a calibration in the config")
    else:
        rig = cfg.rig
    est = reconstruct.estimate_scene_flow(
        d0, d1, c0, c1, rig, cfg.weights, cfg.solver, cfg.flow, cfg.pipeline
    )
    if args.out_flow:
        evalio.write_flo(args.out_flow, est.flow)
    if args.out_sf:
        raster = scene_flow_raster(est.anchor, est.displacement, c0.width, c0.height)
        evalio.write_sf3d(args.out_sf, [raster])
    payload = {
        "points": int(len(est.anchor)),
        "mean_displacement_m": float(np.linalg.norm(est.displacement, axis=1).mean()),
        "energy": est.result.energy,
    }
    if args.gt_flow:
        gt = evalio.read_flo(args.gt_flow)
        payload["epe"] = evalio.metric_epe(est.flow, gt)
        print(f"EPE vs ground truth: {payload['epe']:.6f} px")
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    spec = synth.SceneSpec(
        scene=args.scene,
        g=args.g,
        frames=args.frames,
        resolution=args.resolution,
        seed=args.seed,
    )
    dataset = synth.generate(spec)
    evalio.write_dataset(dataset, args.out)
    print(
        f"wrote {len(dataset.colors)} color frames, {len(dataset.input_depths)} "
        f"depth frames and ground truth to {args.out}"
    )
    return 0


def _print_report(report, header: str) -> None:
    print(header)
    if report.epe is not None:
        print(f"  EPE:  {report.epe:.6f} px")
    if report.aae is not None:
        print(f"  AAE:  {report.aae:.6f} degrees")
    if report.rmse_flow is not None:
        print(f"  RMSE: {report.rmse_flow:.6f} px")
    if report.rmse_depth is not None:
        print(f"  RMSE: {report.rmse_depth:.6f} (native depth units)")
    print(f"  valid pixels: {report.valid_pixel_count}")
    print(report.to_json())


def cmd_eval_flow(args) -> int:
    est = evalio.read_flo(args.est)
    gt = evalio.read_flo(args.gt)
    _print_report(evalio.flow_report(est, gt), f"flow error: {args.est} vs {args.gt}")
    return 0


def cmd_eval_depth(args) -> int:
    est = evalio.read_pfm(args.est)
    gt = evalio.read_pfm(args.gt)
    _print_report(evalio.depth_report(est, gt), f"depth error: {args.est} vs {args.gt}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="depthweave",
        description=(
            "Temporal depth-map upsampling and RGB-D scene flow from a "
            "hybrid low-rate depth / high-rate color capture."
        ),
    )
    sub = p.add_subparsers(dest="command", required=True)

    up = sub.add_parser("upsample", help="reconstruct the full high-rate depth sequence")
    up.add_argument("--input", required=True, help="dataset directory")
    up.add_argument("--output", required=True, help="output directory")
    up.add_argument("--config", default=None, help="JSON configuration file")
    up.add_argument("--dump-energy", default=None, help="write the energy trace CSV here")
    up.add_argument("--dump-holes", action="store_true", help="write hole-label rasters")
    up.add_argument("--threads", type=int, default=None, help="parallel interval workers")
    up.set_defaults(func=cmd_upsample)

    sf = sub.add_parser("sceneflow", help="standalone two-frame scene flow")
    sf.add_argument("--frame0", required=True)
    sf.add_argument("--frame1", required=True)
    sf.add_argument("--depth0", required=True)
    sf.add_argument("--depth1", required=True)
    sf.add_argument("--config", default=None)
    sf.add_argument("--out-flow", default=None, help="write refined 2-D flow (.flo)")
    sf.add_argument("--out-sf", default=None, help="write 3-D displacements (.sf3d)")
    sf.add_argument("--gt-flow", default=None, help="optional ground truth for EPE")
    sf.set_defaults(func=cmd_sceneflow)

    sy = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    sy.add_argument("--scene", required=True, choices=synth.SCENE_NAMES)
    sy.add_argument("--g", type=int, default=4)
    sy.add_argument("--frames", type=int, default=9)
    sy.add_argument("--resolution", type=int, default=128)
    sy.add_argument("--seed", type=int, default=7)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)

    ef = sub.add_parser("eval-flow", help="flow metrics between two .flo files")
    ef.add_argument("--est", required=True)
    ef.add_argument("--gt", required=True)
    ef.set_defaults(func=cmd_eval_flow)

    ed = sub.add_parser("eval-depth", help="depth RMSE between two .pfm files")
    ed.add_argument("--est", required=True)
    ed.add_argument("--gt", required=True)
    ed.set_defaults(func=cmd_eval_depth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except DepthweaveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
