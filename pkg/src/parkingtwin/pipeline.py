"""End-to-end reconstruction: blueprint geometry, frame processing, fusion,
refinement, export. Offline mode folds each frame into the accumulator as
it is processed. Online mode runs decode and per-frame processing in worker
threads while a single merger applies results in frame order, so the fused
colors are byte-identical to the offline run; streaming state stays
constant-size regardless of sequence length.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .dataset import Dataset, load_dataset, read_rgb_png, write_rgb_png
from .dynamic_filter import compute_filter
from .errors import ConfigError, DatasetError
from .osm_ingest import (OsmMap, align_axes, dominant_angle, parse_osm,
                         project_to_local)
from .projection import (CameraFrame, Intrinsics, interpolate_vertex_attribute,
                         render_gbuffer)
from .seam_refine import refine_seams
from .synthbench import psnr, ssim
from .texture_fusion import (FrameObservations, VertexAccumulator,
                             finalize_colors, observe_frame, quality_score)
from .tsdf_geometry import TriangleMesh, build_blueprint_mesh, write_ply

log = logging.getLogger(__name__)


def resolve_workers(config: PipelineConfig) -> int:
    if config.workers > 0:
        return config.workers
    env = os.environ.get("PARKINGTWIN_THREADS", "")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(
                f"PARKINGTWIN_THREADS={env!r} is not an integer") from exc
        if n < 1:
            raise ConfigError("PARKINGTWIN_THREADS must be >= 1")
        return n
    return max(os.cpu_count() or 1, 1)


# ---------------------------------------------------------------------------
# geometry

def build_geometry(config: PipelineConfig
                   ) -> tuple[TriangleMesh, OsmMap, dict]:
    """Parse the blueprint, register it, and extract the static mesh."""
    map_path = Path(config.map_path) if config.map_path else (
        Path(config.dataset) / "map.osm")
    try:
        text = map_path.read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read map {map_path}: {exc}") from exc

    osm = parse_osm(text)
    osm = project_to_local(osm, mode=config.coordinate_mode,
                           origin=config.origin)
    angle = dominant_angle(osm, bin_width_deg=config.angle_bin_deg)
    if config.align_to_axes:
        osm = align_axes(osm, angle)
    mesh, geo = build_blueprint_mesh(osm, config.tsdf)
    mesh.recompute_normals()
    geo["dominant_angle_deg"] = float(np.degrees(angle))
    geo["aligned_to_axes"] = bool(config.align_to_axes)
    geo["map_path"] = str(map_path)
    return mesh, osm, geo


def pose_adjustment(config: PipelineConfig, osm: OsmMap) -> np.ndarray:
    """World-to-map transform applied to every camera pose: the user's
    initial registration followed by whatever the map projection and axis
    alignment did to map coordinates."""
    return osm.frame.se3() @ config.initial_alignment


# ---------------------------------------------------------------------------
# per-frame work

@dataclass
class FrameResult:
    seq: int
    obs: FrameObservations
    quality: float
    mask_fraction: float = 0.0
    exclusion_fraction: float = 0.0
    timings: dict = field(default_factory=dict)


def process_frame(mesh: TriangleMesh, frame: CameraFrame, K: Intrinsics,
                  config: PipelineConfig, seq: int) -> FrameResult:
    t0 = time.perf_counter()
    frame.quality = quality_score(frame.rgb, config.fusion.v_ref)
    gb = render_gbuffer(mesh, K, frame.pose, observed_depth=frame.depth)
    t1 = time.perf_counter()

    exclusion = None
    mask_frac = excl_frac = 0.0
    if config.filter_enabled:
        res = compute_filter(frame, gb, K, config.filter,
                             keep_fields=config.debug_fields)
        exclusion = res.exclusion
        mask_frac = float(res.occlusion.mask.mean())
        excl_frac = float(exclusion.mean())
        if config.dump_masks:
            out = Path(config.dump_masks)
            out.mkdir(parents=True, exist_ok=True)
            img = np.repeat(exclusion[:, :, None], 3, axis=2)
            write_rgb_png(out / f"{frame.index:06d}.png",
                          img.astype(np.uint8) * 255)
            if config.debug_fields:
                for name, fld in res.occlusion.fields.items():
                    img = np.repeat(fld[:, :, None], 3, axis=2)
                    write_rgb_png(out / f"{frame.index:06d}_{name}.png",
                                  img.astype(np.uint8) * 255)
    t2 = time.perf_counter()

    obs = observe_frame(mesh, frame, gb, exclusion, K, config.fusion)
    t3 = time.perf_counter()
    return FrameResult(
        seq=seq, obs=obs, quality=frame.quality,
        mask_fraction=mask_frac, exclusion_fraction=excl_frac,
        timings={"render": t1 - t0, "filter": t2 - t1, "observe": t3 - t2})


# ---------------------------------------------------------------------------
# runs

def run(config: PipelineConfig) -> tuple[TriangleMesh, dict]:
    config.validate()
    if config.mode == "online":
        return run_online(config)
    return run_offline(config)


def _open_inputs(config: PipelineConfig
                 ) -> tuple[TriangleMesh, Dataset, np.ndarray, dict]:
    mesh, osm, geo = build_geometry(config)
    ds = load_dataset(config.dataset)
    adjust = pose_adjustment(config, osm)
    return mesh, ds, adjust, geo


def run_offline(config: PipelineConfig) -> tuple[TriangleMesh, dict]:
    t_start = time.perf_counter()
    mesh, ds, adjust, geo = _open_inputs(config)
    acc = VertexAccumulator(mesh.n_vertices)
    stats = _StreamStats()

    seq = 0
    for frame in ds.iter_frames():
        frame.pose = adjust @ frame.pose
        result = process_frame(mesh, frame, ds.intrinsics, config, seq)
        result.obs.apply(acc, config.fusion)
        stats.absorb(result, acc)
        seq += 1

    report = _assemble_report(config, geo, ds, stats, acc, seq,
                              time.perf_counter() - t_start)
    mesh = _finalize(mesh, acc, config, report)
    _evaluate(mesh, ds, adjust, config, report)
    _write_outputs(mesh, config, report)
    return mesh, report


def run_online(config: PipelineConfig) -> tuple[TriangleMesh, dict]:
    t_start = time.perf_counter()
    mesh, ds, adjust, geo = _open_inputs(config)
    acc = VertexAccumulator(mesh.n_vertices)
    stats = _StreamStats()
    n_workers = resolve_workers(config)

    in_q: queue.Queue = queue.Queue(maxsize=config.queue_depth)
    out_q: queue.Queue = queue.Queue(maxsize=config.queue_depth + n_workers)
    dropped = [0]

    def reader() -> None:
        seq = 0
        for frame in ds.iter_frames():
            frame.pose = adjust @ frame.pose
            if config.realtime:
                try:
                    in_q.put((seq, frame), block=False)
                    seq += 1
                except queue.Full:
                    dropped[0] += 1
                continue
            in_q.put((seq, frame))
            seq += 1
        for _ in range(n_workers):
            in_q.put(None)

    def worker() -> None:
        while True:
            item = in_q.get()
            if item is None:
                out_q.put(None)
                return
            seq, frame = item
            try:
                out_q.put(process_frame(mesh, frame, ds.intrinsics,
                                        config, seq))
            except Exception:  # propagate through the merger
                log.exception("frame %d failed", frame.index)
                out_q.put(None)
                return

    threads = [threading.Thread(target=reader, name="pt-reader", daemon=True)]
    threads += [threading.Thread(target=worker, name=f"pt-worker-{i}",
                                 daemon=True) for i in range(n_workers)]
    for t in threads:
        t.start()

    # merge in submission order so online equals offline exactly
    pending: dict[int, FrameResult] = {}
    next_seq = 0
    finished = 0
    snapshots = []
    while finished < n_workers or pending:
        if finished < n_workers:
            item = out_q.get()
            if item is None:
                finished += 1
            else:
                pending[item.seq] = item
        while next_seq in pending:
            result = pending.pop(next_seq)
            result.obs.apply(acc, config.fusion)
            stats.absorb(result, acc)
            next_seq += 1
            if config.snapshot_every and next_seq % config.snapshot_every == 0:
                snapshots.append(_write_snapshot(mesh, acc, config, next_seq))
    for t in threads:
        t.join()

    report = _assemble_report(config, geo, ds, stats, acc, next_seq,
                              time.perf_counter() - t_start)
    report["frames"]["dropped_realtime"] = dropped[0]
    report["workers"] = n_workers
    if snapshots:
        report["snapshots"] = snapshots
    mesh = _finalize(mesh, acc, config, report)
    _evaluate(mesh, ds, adjust, config, report)
    _write_outputs(mesh, config, report)
    return mesh, report


# ---------------------------------------------------------------------------
# bookkeeping

class _StreamStats:
    def __init__(self) -> None:
        self.qualities: list[float] = []
        self.mask_fractions: list[float] = []
        self.exclusion_fractions: list[float] = []
        self.stage_times: dict[str, float] = {}
        self.samples = 0
        self.acc_bytes: list[int] = []
        self.rss: list[int] = []

    def absorb(self, result: FrameResult, acc: VertexAccumulator) -> None:
        self.qualities.append(result.quality)
        self.mask_fractions.append(result.mask_fraction)
        self.exclusion_fractions.append(result.exclusion_fraction)
        for k, v in result.timings.items():
            self.stage_times[k] = self.stage_times.get(k, 0.0) + v
        self.samples += len(result.obs.idx)
        self.acc_bytes.append(acc.nbytes)
        self.rss.append(_rss_bytes())


def _rss_bytes() -> int:
    try:
        with open("/proc/self/statm") as fh:
            return int(fh.read().split()[1]) * os.sysconf("SC_PAGE_SIZE")
    except (OSError, ValueError, IndexError):
        return 0


def _assemble_report(config: PipelineConfig, geo: dict, ds: Dataset,
                     stats: _StreamStats, acc: VertexAccumulator,
                     processed: int, wall_s: float) -> dict:
    observed = int(((acc.count > 0) & (acc.sum_w > config.fusion.w_eps)).sum())
    counts = acc.count[acc.count > 0]
    report = {
        "schema_version": 1,
        "mode": config.mode,
        "preset": config.preset,
        "geometry": geo,
        "frames": {
            "listed": len(ds.frame_indices) + len(ds.skipped),
            "processed": processed,
            "skipped": sorted(set(ds.skipped)),
        },
        "fusion": {
            "vertices": acc.n_vertices,
            "observed": observed,
            "coverage": observed / max(acc.n_vertices, 1),
            "samples": stats.samples,
            "obs_per_vertex_p50": float(np.percentile(counts, 50)) if counts.size else 0.0,
            "obs_per_vertex_p95": float(np.percentile(counts, 95)) if counts.size else 0.0,
            "accumulator_bytes": acc.nbytes,
            "accumulator_bytes_series": stats.acc_bytes[:: max(1, len(stats.acc_bytes) // 200)],
        },
        "filter": {
            "enabled": config.filter_enabled,
            "mean_mask_fraction": float(np.mean(stats.mask_fractions)) if stats.mask_fractions else 0.0,
            "mean_exclusion_fraction": float(np.mean(stats.exclusion_fractions)) if stats.exclusion_fractions else 0.0,
        },
        "quality": {
            "mean": float(np.mean(stats.qualities)) if stats.qualities else 0.0,
            "min": float(np.min(stats.qualities)) if stats.qualities else 0.0,
            "max": float(np.max(stats.qualities)) if stats.qualities else 0.0,
        },
        "timing": {
            "wall_s": wall_s,
            "fps": processed / wall_s if wall_s > 0 else 0.0,
            "stages_s": {k: round(v, 4) for k, v in stats.stage_times.items()},
        },
        "memory": {
            "rss_series_bytes": stats.rss[:: max(1, len(stats.rss) // 200)],
        },
    }
    if processed == 0:
        log.warning("no frames processed; mesh will carry fallback colors")
    return report


def _finalize(mesh: TriangleMesh, acc: VertexAccumulator,
              config: PipelineConfig, report: dict) -> TriangleMesh:
    lab, rgb, unobserved = finalize_colors(acc, config.fusion)
    mesh.colors_lab = lab
    mesh.colors_rgb = rgb
    mesh.unobserved = unobserved
    if config.seam.enabled:
        rgb2, seam_report = refine_seams(mesh, rgb.astype(np.float64),
                                         unobserved, config.seam)
        mesh.colors_rgb = rgb2
        report["seam"] = seam_report
    return mesh


def _write_snapshot(mesh: TriangleMesh, acc: VertexAccumulator,
                    config: PipelineConfig, n_applied: int) -> dict:
    """Freeze the stream mid-flight: finalize a copy of the running sums
    into colors and write an intermediate mesh."""
    out_dir = Path(config.snapshot_dir or
                   Path(config.out_mesh).parent / "snapshots")
    out_dir.mkdir(parents=True, exist_ok=True)
    lab, rgb, unobserved = finalize_colors(acc.copy(), config.fusion)
    snap = TriangleMesh(vertices=mesh.vertices, faces=mesh.faces,
                        normals=mesh.normals, colors_rgb=rgb,
                        colors_lab=lab, unobserved=unobserved)
    path = out_dir / f"snapshot_{n_applied:06d}.ply"
    write_ply(snap, path)
    return {"frames_applied": n_applied, "path": str(path)}


def _evaluate(mesh: TriangleMesh, ds: Dataset, adjust: np.ndarray,
              config: PipelineConfig, report: dict) -> None:
    """Render the fused mesh at every eval_every-th pose and score against
    reference images of the same index."""
    if not config.eval_gt:
        return
    gt_dir = Path(config.eval_gt)
    colors = mesh.colors_rgb.astype(np.float64)
    scores = {"psnr": [], "ssim": [], "indices": []}
    for pos, idx in enumerate(ds.frame_indices):
        if pos % config.eval_every:
            continue
        gt_path = gt_dir / f"{idx:06d}.png"
        if not gt_path.is_file():
            continue
        gt = read_rgb_png(gt_path)
        pose = adjust @ ds.poses[idx]
        gb = render_gbuffer(mesh, ds.intrinsics, pose)
        img = interpolate_vertex_attribute(mesh, gb, colors)
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        scores["psnr"].append(psnr(img, gt))
        scores["ssim"].append(ssim(img, gt))
        scores["indices"].append(idx)
    if scores["indices"]:
        report["eval"] = {
            "n": len(scores["indices"]),
            "psnr_mean": float(np.mean(scores["psnr"])),
            "ssim_mean": float(np.mean(scores["ssim"])),
            "psnr": [round(v, 4) for v in scores["psnr"]],
            "ssim": [round(v, 6) for v in scores["ssim"]],
            "indices": scores["indices"],
        }


def _write_outputs(mesh: TriangleMesh, config: PipelineConfig,
                   report: dict) -> None:
    out_mesh = Path(config.out_mesh)
    if out_mesh.parent != Path(""):
        out_mesh.parent.mkdir(parents=True, exist_ok=True)
    write_ply(mesh, out_mesh)
    report_path = Path(config.report_path) if config.report_path else \
        out_mesh.with_suffix(".report.json")
    report["outputs"] = {"mesh": str(out_mesh), "report": str(report_path)}
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))


__all__ = ["run", "run_offline", "run_online", "build_geometry",
           "process_frame", "resolve_workers"]
