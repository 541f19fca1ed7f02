"""Command-line entry points.

    parkingtwin init-geometry --map map.osm --voxel 0.1 --height 3.0 --out mesh.ply
    parkingtwin reconstruct --dataset dir/ [--config run.cfg] [--set k=v ...]
    parkingtwin synth --spec scene.cfg --out dataset/
    parkingtwin eval --pred renders/ --gt gt/ --report metrics.json
    parkingtwin export --mesh twin.ply --out twin.obj

Exit codes: 0 success, 1 input/configuration error, 2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigError, DatasetError, TwinError
from .osm_ingest import dominant_angle, parse_osm, project_to_local, align_axes
from .synthbench import SceneSpec, default_vehicles, psnr, ssim, synth_dataset
from .tsdf_geometry import (TsdfParams, build_blueprint_mesh, read_obj,
                            read_ply, write_obj, write_ply)

log = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parkingtwin",
        description="Blueprint-guided RGB-D reconstruction of parking garages")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("init-geometry",
                       help="build the static mesh from a blueprint map")
    g.add_argument("--map", required=True)
    g.add_argument("--voxel", type=float, default=0.1)
    g.add_argument("--height", type=float, default=3.0)
    g.add_argument("--out", required=True)
    g.add_argument("--coordinate-mode", choices=("planar", "geodetic"),
                   default="planar")
    g.add_argument("--no-align", action="store_true",
                   help="skip dominant-angle axis alignment")

    r = sub.add_parser("reconstruct", help="run the full pipeline")
    r.add_argument("--dataset", help="dataset directory")
    r.add_argument("--config", help="key=value config file")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    r.add_argument("--mode", choices=("offline", "online"))
    r.add_argument("--preset", choices=("A", "B", "C"))
    r.add_argument("--out", help="output mesh path")
    r.add_argument("--dump-masks", metavar="DIR",
                   help="write per-frame exclusion masks as PNG")
    r.add_argument("--debug-constraints", action="store_true",
                   help="also write per-constraint field PNGs")
    r.add_argument("--realtime", action="store_true",
                   help="online mode: drop frames instead of blocking")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="scene config file (key=value)")
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    e = sub.add_parser("eval", help="score rendered images against references")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)

    x = sub.add_parser("export", help="convert a mesh between PLY and OBJ")
    x.add_argument("--mesh", required=True)
    x.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# subcommands

def _cmd_init_geometry(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    path = Path(args.map)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read map {path}: {exc}") from exc
    osm = parse_osm(text)
    osm = project_to_local(osm, mode=args.coordinate_mode)
    angle = dominant_angle(osm)
    if not args.no_align:
        osm = align_axes(osm, angle)
    params = TsdfParams(voxel_size=args.voxel, height=args.height)
    mesh, report = build_blueprint_mesh(osm, params)
    write_ply(mesh, args.out)
    lo, hi = osm.bounds()
    report.update({
        "map": str(path),
        "out": args.out,
        "bounds_min": [float(v) for v in lo],
        "bounds_max": [float(v) for v in hi],
        "dominant_angle_deg": float(np.degrees(angle)),
        "wall_clock_s": round(time.perf_counter() - t0, 3),
    })
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def _cmd_reconstruct(args: argparse.Namespace) -> int:
    from . import pipeline  # deferred: numba JIT import cost

    overrides = list(args.set)
    if args.dataset:
        overrides.insert(0, f"dataset={args.dataset}")
    if args.mode:
        overrides.append(f"mode={args.mode}")
    if args.preset:
        overrides.insert(0, f"preset={args.preset}")
    if args.out:
        overrides.append(f"out_mesh={args.out}")
    if args.dump_masks:
        overrides.append(f"dump_masks={args.dump_masks}")
    if args.debug_constraints:
        overrides.append("debug_fields=true")
    if args.realtime:
        overrides.append("realtime=true")
    config = load_config(args.config, overrides)
    if not config.dataset:
        raise ConfigError("no dataset given (--dataset or dataset= in config)")

    mesh, report = pipeline.run(config)
    summary = {
        "mesh": report["outputs"]["mesh"],
        "report": report["outputs"]["report"],
        "frames": report["frames"]["processed"],
        "coverage": round(report["fusion"]["coverage"], 4),
        "fps": round(report["timing"]["fps"], 2),
    }
    if "eval" in report:
        summary["psnr_mean"] = round(report["eval"]["psnr_mean"], 2)
        summary["ssim_mean"] = round(report["eval"]["ssim_mean"], 4)
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def _scene_from_config(path: str | None, overrides: list[str]) -> SceneSpec:
    """SceneSpec from key=value text. Scalar fields assign directly;
    `vehicles = default | none` picks the built-in schedule."""
    spec = SceneSpec()
    vehicles = "default"

    def assign(key: str, value: str) -> str:
        nonlocal vehicles
        key = key.strip()
        value = value.strip()
        if key == "vehicles":
            if value not in ("default", "none"):
                raise ConfigError(
                    f"vehicles must be 'default' or 'none', got {value!r}")
            vehicles = value
            return key
        if not hasattr(spec, key):
            valid = [f.name for f in dataclasses.fields(spec)
                     if not isinstance(getattr(spec, f.name), (list, tuple))]
            raise ConfigError(
                f"unknown scene key {key!r}; scalar keys: {', '.join(valid)}")
        current = getattr(spec, key)
        if isinstance(current, bool):
            setattr(spec, key, value.lower() in ("1", "true", "yes", "on"))
        elif isinstance(current, int):
            setattr(spec, key, int(value))
        elif isinstance(current, float):
            setattr(spec, key, float(value))
        elif isinstance(current, str):
            setattr(spec, key, value)
        else:
            raise ConfigError(f"scene key {key!r} is not settable from text")
        return key

    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read scene spec {path}: {exc}") from exc
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            try:
                assign(k, v)
            except (ConfigError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        assign(k, v)

    if vehicles == "default":
        spec.vehicles = default_vehicles(spec.n_frames)
    spec.validate()
    return spec


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = _scene_from_config(args.spec, args.set)
    manifest = synth_dataset(spec, args.out)
    json.dump({"out": args.out, "frames": manifest["frames"],
               "static_faces": manifest["n_static_faces"],
               "vehicle_pixels": manifest["vehicle_pixels"]},
              sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from .dataset import read_rgb_png

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir():
        raise DatasetError(f"prediction directory not found: {pred_dir}")
    if not gt_dir.is_dir():
        raise DatasetError(f"reference directory not found: {gt_dir}")
    rows = []
    for pred_path in sorted(pred_dir.glob("*.png")):
        gt_path = gt_dir / pred_path.name
        if not gt_path.is_file():
            log.warning("no reference for %s, skipped", pred_path.name)
            continue
        a = read_rgb_png(pred_path)
        b = read_rgb_png(gt_path)
        if a.shape != b.shape:
            raise DatasetError(
                f"{pred_path.name}: size {a.shape} vs reference {b.shape}")
        rows.append({"frame": pred_path.stem, "psnr": psnr(a, b),
                     "ssim": ssim(a, b)})
    if not rows:
        raise DatasetError("no overlapping frames to score")
    report = {
        "frames": rows,
        "psnr_mean": float(np.mean([r["psnr"] for r in rows])),
        "ssim_mean": float(np.mean([r["ssim"] for r in rows])),
        "n": len(rows),
    }
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True))
    json.dump({"n": report["n"], "psnr_mean": round(report["psnr_mean"], 3),
               "ssim_mean": round(report["ssim_mean"], 5)},
              sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    src, dst = Path(args.mesh), Path(args.out)
    readers = {".ply": read_ply, ".obj": read_obj}
    writers = {".ply": write_ply, ".obj": write_obj}
    if src.suffix.lower() not in readers:
        raise ConfigError(f"unsupported input format {src.suffix!r}")
    if dst.suffix.lower() not in writers:
        raise ConfigError(f"unsupported output format {dst.suffix!r}")
    mesh = readers[src.suffix.lower()](src)
    writers[dst.suffix.lower()](mesh, dst)
    print(json.dumps({"vertices": mesh.n_vertices, "faces": mesh.n_faces,
                      "out": str(dst)}))
    return 0


_COMMANDS = {
    "init-geometry": _cmd_init_geometry,
    "reconstruct": _cmd_reconstruct,
    "synth": _cmd_synth,
    "eval": _cmd_eval,
    "export": _cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except TwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # pragma: no cover - the catch-all contract
        log.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
