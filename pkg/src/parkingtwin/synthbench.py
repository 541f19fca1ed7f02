"""Synthetic parking-garage datasets with exact ground truth.

Everything here is deterministic given the scene seed: blueprint map,
camera path, vehicle schedules, lighting, image noise. The renderer is the
same software rasterizer the reconstruction side uses, shading flat
Lambertian vertex albedo with a position-dependent luminance field and a
per-frame exposure multiplier. That gives each dataset:

    map.osm           blueprint (walls, pillars, parking lines)
    intrinsics.txt    pinhole parameters
    trajectory.txt    camera-to-world poses
    rgb/, depth/      rendered input sequence (depth in 16-bit mm, noisy)
    gt_masks/         exact vehicle masks from the rasterizer's face ids
    gt_rgb/           vehicle-free renders at exposure 1.0 (no noise)
    gt_colors.npy     expected fused color per blueprint vertex
    scene.json        manifest

Vehicles are boxes with a slight roof tilt and real ground clearance, so
they exercise the same constraint geometry actual cars would. Exposure
follows a zero-mean sine so a robust fusion should land on the exposure-1.0
appearance; lighting falls off along the hall to emulate an entrance-lit
garage.

psnr / ssim image metrics live here too; both evaluation and tests use them.
"""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import (write_depth_png, write_intrinsics, write_rgb_png,
                      write_trajectory)
from .errors import ConfigError
from .osm_ingest import parse_osm, project_to_local
from .projection import (Intrinsics, interpolate_vertex_attribute,
                         render_gbuffer)
from .tsdf_geometry import TriangleMesh, TsdfParams, build_blueprint_mesh

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# scene description

@dataclass
class VehicleSpec:
    """An axis-aligned box vehicle, optionally yawed, parked at (x, y).

    `height` is the roof height above the floor; the body starts at
    `clearance` like a real car, so rays under the body reach the floor far
    behind and depth gaps stay large. The roof is tilted by `top_tilt_deg`
    along the length, keeping it near-horizontal.
    """

    x: float
    y: float
    yaw_deg: float = 0.0
    length: float = 3.6
    width: float = 1.7
    height: float = 1.5
    clearance: float = 0.15
    top_tilt_deg: float = 4.0
    rgb: tuple[int, int, int] = (170, 40, 35)
    first_frame: int = 0
    last_frame: int | None = None  # inclusive; None = present to the end

    def present(self, frame: int) -> bool:
        last = math.inf if self.last_frame is None else self.last_frame
        return self.first_frame <= frame <= last


@dataclass
class SceneSpec:
    name: str = "garage"
    seed: int = 7
    n_frames: int = 120

    # camera
    width: int = 640
    height: int = 360
    fx: float = 320.0
    fy: float = 320.0
    cam_height: float = 1.6
    pitch_deg: float = 15.0  # downward
    lookahead: float = 0.75  # meters along the path

    # blueprint
    hall: tuple[float, float] = (20.0, 10.0)
    wall_thickness: float = 0.2
    wall_height: float = 3.0
    pillar_half: float = 0.2
    pillars: tuple[tuple[float, float], ...] = ((6.0, 3.0), (6.0, 7.0),
                                                (14.0, 3.0), (14.0, 7.0))
    voxel_size: float = 0.1

    # appearance
    floor_rgb: tuple[int, int, int] = (105, 105, 110)
    wall_rgb: tuple[int, int, int] = (150, 150, 145)
    pillar_rgb: tuple[int, int, int] = (160, 120, 70)
    line_rgb: tuple[int, int, int] = (215, 215, 210)
    speckle: float = 6.0  # per-vertex albedo jitter std, 8-bit units

    # lighting: luminance ramps along x (bright entrance, dim far end),
    # exposure is a zero-mean sine over the frame index
    lum_entrance: float = 1.2
    lum_far: float = 0.6
    exposure_amp: float = 0.3
    exposure_period: int = 40

    depth_sigma: float = 0.01  # meters
    vehicles: list[VehicleSpec] = field(default_factory=list)
    waypoints: tuple[tuple[float, float], ...] = ()
    laps: int = 2

    def validate(self) -> None:
        if self.n_frames < 1:
            raise ConfigError("scene needs at least one frame")
        if self.exposure_period < 1:
            raise ConfigError("exposure_period must be >= 1")
        w, h = self.hall
        if w <= 2 * self.wall_thickness or h <= 2 * self.wall_thickness:
            raise ConfigError("hall too small for its wall thickness")
        for v in self.vehicles:
            if not (0 < v.height <= self.wall_height):
                raise ConfigError(
                    f"vehicle at ({v.x}, {v.y}): height {v.height} outside "
                    f"(0, {self.wall_height}]")
            if not (0 <= v.clearance < v.height):
                raise ConfigError("vehicle clearance must sit below its roof")
            r = 0.5 * math.hypot(v.length, v.width)
            if not (r <= v.x <= w - r and r <= v.y <= h - r):
                raise ConfigError(
                    f"vehicle at ({v.x}, {v.y}) extends outside the hall")

    def path_points(self) -> np.ndarray:
        if self.waypoints:
            pts = list(self.waypoints)
        else:
            w, h = self.hall
            ring = [(2.5, 2.3), (w - 2.5, 2.3), (w - 2.5, h - 2.3),
                    (2.5, h - 2.3)]
            pts = []
            for _ in range(max(1, self.laps)):
                pts.extend(ring)
            pts.append(ring[0])
        return np.asarray(pts, dtype=np.float64)

    def exposure(self, frame: int) -> float:
        return 1.0 + self.exposure_amp * math.sin(
            2.0 * math.pi * frame / self.exposure_period)

    def luminance(self, x: np.ndarray) -> np.ndarray:
        w = self.hall[0]
        t = np.clip(np.asarray(x, dtype=np.float64) / w, 0.0, 1.0)
        return self.lum_entrance + (self.lum_far - self.lum_entrance) * t


def default_vehicles(n_frames: int) -> list[VehicleSpec]:
    """Four cars in the center row; each slot is seen both occupied and
    empty (staggered half-sequence schedules)."""
    half = n_frames // 2
    colors = [(170, 40, 35), (40, 70, 160), (220, 220, 225), (45, 45, 50)]
    cars = []
    for k, x in enumerate((4.0, 8.0, 12.0, 16.0)):
        if k % 2 == 0:
            first, last = 0, half - 1
        else:
            first, last = half, n_frames - 1
        cars.append(VehicleSpec(x=x, y=5.0, yaw_deg=90.0, rgb=colors[k],
                                first_frame=first, last_frame=last))
    return cars


def demo_scene(n_frames: int = 120, seed: int = 7, with_vehicles: bool = True,
               **overrides) -> SceneSpec:
    spec = SceneSpec(n_frames=n_frames, seed=seed, **overrides)
    if with_vehicles and not spec.vehicles:
        spec.vehicles = default_vehicles(n_frames)
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# blueprint map

def _parking_line_rects(spec: SceneSpec) -> list[tuple[float, float, float, float]]:
    """Slot separator stripes around the center parking row."""
    rects = []
    y0, y1 = 3.2, 6.8
    for x in (2.7, 5.3, 6.7, 9.3, 10.7, 13.3, 14.7, 17.3):
        rects.append((x - 0.1, y0, x + 0.1, y1))
    rects.append((2.7, y0 - 0.2, 17.3, y0))
    rects.append((2.7, y1, 17.3, y1 + 0.2))
    return rects


def blueprint_xml(spec: SceneSpec) -> str:
    """The scene's map in OSM XML, planar coordinates (lon=x, lat=y)."""
    w, h = spec.hall
    t = spec.wall_thickness
    root = ET.Element("osm", version="0.6", generator="parkingtwin-synth")
    next_id = 1

    def add_loop(points, tags):
        nonlocal next_id
        refs = []
        for x, y in points:
            ET.SubElement(root, "node", id=str(next_id),
                          lat=f"{y!r}", lon=f"{x!r}")
            refs.append(next_id)
            next_id += 1
        way = ET.SubElement(root, "way", id=str(next_id))
        next_id += 1
        for r in refs + [refs[0]]:
            ET.SubElement(way, "nd", ref=str(r))
        for k, v in tags.items():
            ET.SubElement(way, "tag", k=k, v=v)

    add_loop([(0, 0), (w, 0), (w, h), (0, h)], {"building": "yes"})
    add_loop([(t, t), (w - t, t), (w - t, h - t), (t, h - t)],
             {"building": "yes"})
    for px, py in spec.pillars:
        r = spec.pillar_half
        add_loop([(px - r, py - r), (px + r, py - r),
                  (px + r, py + r), (px - r, py + r)], {"barrier": "pillar"})
    for x0, y0, x1, y1 in _parking_line_rects(spec):
        add_loop([(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
                 {"amenity": "parking_space"})
    return ET.tostring(root, encoding="unicode")


def build_scene_geometry(spec: SceneSpec) -> TriangleMesh:
    osm = parse_osm(blueprint_xml(spec))
    osm = project_to_local(osm, mode="planar", origin=(0.0, 0.0))
    params = TsdfParams(voxel_size=spec.voxel_size, height=spec.wall_height)
    mesh, _ = build_blueprint_mesh(osm, params)
    return mesh


# ---------------------------------------------------------------------------
# vehicles

def vehicle_mesh(v: VehicleSpec) -> TriangleMesh:
    """Closed 12-triangle box with outward normals and a tilted roof."""
    hl, hw = 0.5 * v.length, 0.5 * v.width
    slope = math.tan(math.radians(v.top_tilt_deg))
    xs = np.array([-hl, hl, hl, -hl])
    ys = np.array([-hw, -hw, hw, hw])
    bottom = np.stack([xs, ys, np.full(4, v.clearance)], axis=1)
    top = np.stack([xs, ys, v.height + slope * xs], axis=1)
    verts = np.vstack([bottom, top])

    c, s = math.cos(math.radians(v.yaw_deg)), math.sin(math.radians(v.yaw_deg))
    rot = np.array([[c, -s], [s, c]])
    verts[:, :2] = verts[:, :2] @ rot.T + (v.x, v.y)

    faces = np.array([
        [0, 2, 1], [0, 3, 2],          # bottom, facing down
        [4, 5, 6], [4, 6, 7],          # roof
        [0, 1, 5], [0, 5, 4],          # -y side
        [1, 2, 6], [1, 6, 5],          # +x side
        [2, 3, 7], [2, 7, 6],          # +y side
        [3, 0, 4], [3, 4, 7],          # -x side
    ], dtype=np.int64)
    mesh = TriangleMesh(vertices=verts, faces=faces)
    mesh.recompute_normals()
    return mesh


def vehicle_albedo(v: VehicleSpec) -> np.ndarray:
    alb = np.tile(np.asarray(v.rgb, dtype=np.float64), (8, 1))
    alb[4:] = np.clip(alb[4:] + 25.0, 0, 255)  # roof catches more light
    return alb


# ---------------------------------------------------------------------------
# painting and lighting

def paint_blueprint(mesh: TriangleMesh, spec: SceneSpec,
                    rng: np.random.Generator) -> np.ndarray:
    """Per-vertex albedo: walls, pillars, floor, parking-line decals, plus
    a small speckle so surfaces carry real texture."""
    albedo = np.empty((mesh.n_vertices, 3), dtype=np.float64)
    comp = mesh.connected_components()
    for cid in range(comp.max() + 1):
        sel = comp == cid
        pts = mesh.vertices[sel]
        if pts[:, 2].max() <= 1e-6:
            color = spec.floor_rgb
        elif np.ptp(pts[:, 0]) < 2.0 and np.ptp(pts[:, 1]) < 2.0:
            color = spec.pillar_rgb
        else:
            color = spec.wall_rgb
        albedo[sel] = color

    on_floor = np.abs(mesh.vertices[:, 2]) <= 0.5 * spec.voxel_size + 1e-9
    for x0, y0, x1, y1 in _parking_line_rects(spec):
        inside = (on_floor
                  & (mesh.vertices[:, 0] >= x0) & (mesh.vertices[:, 0] <= x1)
                  & (mesh.vertices[:, 1] >= y0) & (mesh.vertices[:, 1] <= y1))
        albedo[inside] = spec.line_rgb

    albedo += rng.normal(0.0, spec.speckle, albedo.shape)
    return np.clip(albedo, 0.0, 255.0)


def expected_vertex_colors(mesh: TriangleMesh, albedo: np.ndarray,
                           spec: SceneSpec) -> np.ndarray:
    """What a perfect fusion should recover at exposure 1.0: albedo times
    the local luminance."""
    lum = spec.luminance(mesh.vertices[:, 0])
    return np.clip(np.rint(albedo * lum[:, None]), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# camera path

def camera_poses(spec: SceneSpec) -> dict[int, np.ndarray]:
    pts = spec.path_points()
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    if total <= 0:
        raise ConfigError("camera path has zero length")

    def point_at(s: float) -> np.ndarray:
        s = min(max(s, 0.0), total)
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(max(i, 0), len(seg) - 1)
        t = (s - cum[i]) / seg_len[i] if seg_len[i] > 0 else 0.0
        return pts[i] + t * seg[i]

    phi = math.radians(spec.pitch_deg)
    poses = {}
    for i in range(spec.n_frames):
        s = total * i / max(spec.n_frames - 1, 1)
        pos = point_at(s)
        ahead = point_at(min(s + spec.lookahead, total))
        d = ahead - pos
        if np.hypot(*d) < 1e-9:
            d = seg[-1]
        fwd_h = np.array([d[0], d[1], 0.0])
        fwd_h /= np.linalg.norm(fwd_h)
        fwd = math.cos(phi) * fwd_h - math.sin(phi) * np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        pose = np.eye(4)
        pose[:3, 0] = right
        pose[:3, 1] = down
        pose[:3, 2] = fwd
        pose[:3, 3] = (pos[0], pos[1], spec.cam_height)
        poses[i] = pose
    return poses


# ---------------------------------------------------------------------------
# rendering

def shade(mesh: TriangleMesh, albedo: np.ndarray, K: Intrinsics,
          pose: np.ndarray, spec: SceneSpec, exposure: float
          ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render (rgb, depth, face_id). Background pixels are black with
    +inf depth."""
    gb = render_gbuffer(mesh, K, pose)
    alb = interpolate_vertex_attribute(mesh, gb, albedo)

    hit = gb.face_id >= 0
    rgb = np.zeros((K.height, K.width, 3), dtype=np.uint8)
    if hit.any():
        us, vs = np.meshgrid(np.arange(K.width), np.arange(K.height))
        d = gb.ref_depth[hit]
        xc = (us[hit] - K.cx) / K.fx * d
        yc = (vs[hit] - K.cy) / K.fy * d
        cam_pts = np.stack([xc, yc, d], axis=1)
        world_x = cam_pts @ pose[:3, :3].T[:, 0] + pose[0, 3]
        lum = spec.luminance(world_x)
        shaded = alb[hit] * (lum * exposure)[:, None]
        rgb[hit] = np.clip(np.rint(shaded), 0, 255).astype(np.uint8)
    return rgb, gb.ref_depth.copy(), gb.face_id


# ---------------------------------------------------------------------------
# dataset generation

def synth_dataset(spec: SceneSpec, out_root: str | Path) -> dict:
    """Write a complete dataset; returns the manifest (also scene.json)."""
    spec.validate()
    out = Path(out_root)
    for sub in ("rgb", "depth", "gt_masks", "gt_rgb"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    (out / "map.osm").write_text(blueprint_xml(spec))

    static = build_scene_geometry(spec)
    albedo_static = paint_blueprint(static, spec, rng)
    gt_colors = expected_vertex_colors(static, albedo_static, spec)
    np.save(out / "gt_colors.npy", gt_colors)

    K = Intrinsics(fx=spec.fx, fy=spec.fy,
                   cx=(spec.width - 1) / 2.0, cy=(spec.height - 1) / 2.0,
                   width=spec.width, height=spec.height)
    write_intrinsics(out / "intrinsics.txt", K)
    poses = camera_poses(spec)
    write_trajectory(out / "trajectory.txt", poses)

    car_meshes = [vehicle_mesh(v) for v in spec.vehicles]
    car_albedos = [vehicle_albedo(v) for v in spec.vehicles]
    n_static_faces = static.n_faces

    mask_px = 0
    for i in range(spec.n_frames):
        active = [k for k, v in enumerate(spec.vehicles) if v.present(i)]
        if active:
            scene = TriangleMesh.concatenate(
                [static] + [car_meshes[k] for k in active])
            albedo = np.vstack([albedo_static] + [car_albedos[k] for k in active])
        else:
            scene, albedo = static, albedo_static

        rgb, depth, face_id = shade(scene, albedo, K, poses[i], spec,
                                    spec.exposure(i))
        gt_mask = face_id >= n_static_faces
        mask_px += int(gt_mask.sum())

        noisy = depth + rng.normal(0.0, spec.depth_sigma, depth.shape)
        name = f"{i:06d}.png"
        write_rgb_png(out / "rgb" / name, rgb)
        write_depth_png(out / "depth" / name, noisy, K.depth_scale)
        write_rgb_png(out / "gt_masks" / name,
                      np.repeat(gt_mask[:, :, None], 3, axis=2).astype(np.uint8) * 255)

        clean_rgb, _, _ = shade(static, albedo_static, K, poses[i], spec, 1.0)
        write_rgb_png(out / "gt_rgb" / name, clean_rgb)

    manifest = {
        "scene": _spec_manifest(spec),
        "n_static_faces": int(n_static_faces),
        "n_static_vertices": int(static.n_vertices),
        "vehicle_pixels": mask_px,
        "frames": spec.n_frames,
    }
    (out / "scene.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _spec_manifest(spec: SceneSpec) -> dict:
    d = asdict(spec)
    d["vehicles"] = [asdict(v) for v in spec.vehicles]
    return d


def read_mask_png(path: str | Path) -> np.ndarray:
    from .dataset import read_rgb_png
    return read_rgb_png(path)[:, :, 0] > 127


# ---------------------------------------------------------------------------
# image metrics

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 255.0,
         cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB, capped for identical images."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * math.log10(data_range ** 2 / mse))


_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5  # 11x11 window at sigma 1.5


def _ssim_channel(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def blur(im):
        return ndimage.gaussian_filter(im, _SSIM_SIGMA, mode="nearest",
                                       truncate=_SSIM_TRUNCATE)

    ux, uy = blur(x), blur(y)
    uxx, uyy, uxy = blur(x * x), blur(y * y), blur(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    cov = uxy - ux * uy
    s = ((2 * ux * uy + c1) * (2 * cov + c2)) / \
        ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = int(_SSIM_TRUNCATE * _SSIM_SIGMA + 0.5)
    return float(s[pad:-pad, pad:-pad].mean())


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5)
    and the standard stabilizing constants; channels averaged."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        return _ssim_channel(x, y, data_range)
    return float(np.mean([_ssim_channel(x[..., c], y[..., c], data_range)
                          for c in range(x.shape[-1])]))
