"""Pinhole camera model, software z-buffer rendering, and visibility tests.

Conventions: camera looks down +z with x right and y down; poses are rigid
camera-to-world 4x4 matrices; pixel centers sit on integer coordinates with
(cx, cy) the principal point; depths are meters along the camera z axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._raster import rasterize_faces
from .errors import ConfigError
from .tsdf_geometry import TriangleMesh

log = logging.getLogger(__name__)

NEAR_PLANE = 0.01  # faces with any vertex closer than this are not drawn


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.001  # meters per raw 16-bit depth unit

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image dimensions must be positive")
        if self.depth_scale <= 0:
            raise ConfigError("depth_scale must be positive")


@dataclass
class CameraFrame:
    """One posed RGB-D observation. depth is float meters, 0/NaN invalid."""

    index: int
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32/float64 meters
    pose: np.ndarray  # (4, 4) camera-to-world
    quality: float = 1.0


@dataclass
class FrameGBuffer:
    """Per-pixel reference render of the static mesh for one camera.

    ref_depth is +inf where no face projects. grad_mag is the magnitude of
    the observed depth gradient in meters per pixel (+inf where the stencil
    touches invalid depth); None when no observed depth was supplied.
    """

    ref_depth: np.ndarray  # (H, W) float64
    face_id: np.ndarray  # (H, W) int64, -1 = background
    bary: np.ndarray  # (H, W, 3) float32 perspective-correct weights
    ref_normal: np.ndarray  # (H, W, 3) float32, 0 where background
    grad_mag: np.ndarray | None = None


def world_to_camera(pose: np.ndarray, points: np.ndarray) -> np.ndarray:
    R = pose[:3, :3]
    t = pose[:3, 3]
    return (np.atleast_2d(points) - t) @ R


def camera_to_world(pose: np.ndarray, points: np.ndarray) -> np.ndarray:
    R = pose[:3, :3]
    t = pose[:3, 3]
    return np.atleast_2d(points) @ R.T + t


def project_points(K: Intrinsics, pose: np.ndarray,
                   points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points. Returns (uv (N,2), z (N,), valid (N,)).

    valid requires positive depth and the pixel inside [0, W-1] x [0, H-1]
    so a bilinear sample at uv always has support. uv/z are NaN-safe only
    where valid.
    """
    cam = world_to_camera(pose, points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
    uv = np.stack([u, v], axis=1)
    valid = (z > 0) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    return uv, z, valid


def project(K: Intrinsics, pose: np.ndarray, point) -> tuple[float, float] | None:
    """Single-point projection; None if behind the camera or off-image."""
    uv, _, valid = project_points(K, pose, np.asarray(point, dtype=float))
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def back_project(K: Intrinsics, pose: np.ndarray, u: float, v: float,
                 depth_m: float) -> np.ndarray:
    """Pixel + depth -> world point (inverse of project up to float error)."""
    x = (u - K.cx) / K.fx * depth_m
    y = (v - K.cy) / K.fy * depth_m
    return camera_to_world(pose, np.array([x, y, depth_m]))[0]


def back_project_heights(K: Intrinsics, pose: np.ndarray,
                         depth: np.ndarray) -> np.ndarray:
    """World z coordinate of every pixel's observed 3D point (NaN invalid).

    Only the z row of the pose is applied, which keeps the per-frame cost at
    three multiplies per pixel.
    """
    h, w = depth.shape
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    xf = (us - K.cx) / K.fx
    yf = (vs - K.cy) / K.fy
    r = pose[2, :3]
    tz = pose[2, 3]
    d = np.where(np.isfinite(depth) & (depth > 0), depth, np.nan)
    return (r[0] * xf[None, :] + r[1] * yf[:, None] + r[2]) * d + tz


def depth_gradient_magnitude(depth: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude in meters per pixel.

    Border pixels use replicated depth. Wherever the 5-point stencil touches
    invalid depth (non-finite or <= 0) the magnitude is +inf, which makes
    downstream consumers treat the pixel as an edge.
    """
    d = np.asarray(depth, dtype=np.float64)
    invalid = ~np.isfinite(d) | (d <= 0)
    filled = np.where(invalid, 0.0, d)
    pad = np.pad(filled, 1, mode="edge")
    gx = (pad[1:-1, 2:] - pad[1:-1, :-2]) / 2.0
    gy = (pad[2:, 1:-1] - pad[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    if invalid.any():
        touched = ndimage.binary_dilation(
            invalid, structure=ndimage.generate_binary_structure(2, 1))
        mag[touched] = np.inf
    return mag


def render_gbuffer(mesh: TriangleMesh, K: Intrinsics, pose: np.ndarray,
                   observed_depth: np.ndarray | None = None) -> FrameGBuffer:
    """Rasterize the mesh into a per-pixel reference buffer.

    All faces are drawn (no backface culling: walls are seen from both
    sides). Faces with a vertex closer than NEAR_PLANE are dropped rather
    than clipped; cameras are assumed to keep a working distance from the
    geometry.
    """
    K.validate()
    cam = world_to_camera(pose, mesh.vertices)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy

    fz = z[mesh.faces]
    valid = (fz > NEAR_PLANE).all(axis=1)
    uv = np.stack([u, v], axis=1)[mesh.faces]  # (F, 3, 2)

    depth = np.full((K.height, K.width), np.inf, dtype=np.float64)
    face_id = np.full((K.height, K.width), -1, dtype=np.int64)
    bary = np.zeros((K.height, K.width, 3), dtype=np.float32)
    rasterize_faces(np.ascontiguousarray(uv, dtype=np.float64),
                    np.ascontiguousarray(fz, dtype=np.float64),
                    valid, K.height, K.width, depth, face_id, bary)

    if mesh.normals is None:
        mesh.recompute_normals()
    normal = np.zeros((K.height, K.width, 3), dtype=np.float32)
    hit = face_id >= 0
    if hit.any():
        fids = face_id[hit]
        vn = mesh.normals[mesh.faces[fids]]  # (P, 3 corners, 3)
        n = np.einsum("pc,pcd->pd", bary[hit].astype(np.float64), vn)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        norm[norm < 1e-12] = 1.0
        normal[hit] = (n / norm).astype(np.float32)

    grad = depth_gradient_magnitude(observed_depth) if observed_depth is not None else None
    return FrameGBuffer(depth, face_id, bary, normal, grad)


def interpolate_vertex_attribute(mesh: TriangleMesh, gbuffer: FrameGBuffer,
                                 values: np.ndarray) -> np.ndarray:
    """Resample a per-vertex attribute onto the G-buffer's pixel grid using
    the stored barycentric weights. Background pixels get zeros.

    values is (V,) or (V, C) float; the result is (H, W) or (H, W, C).
    """
    vals = np.asarray(values, dtype=np.float64)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    h, w = gbuffer.face_id.shape
    out = np.zeros((h, w, vals.shape[1]), dtype=np.float64)
    hit = gbuffer.face_id >= 0
    if hit.any():
        corners = vals[mesh.faces[gbuffer.face_id[hit]]]  # (P, 3, C)
        out[hit] = np.einsum("pc,pcd->pd",
                             gbuffer.bary[hit].astype(np.float64), corners)
    return out[..., 0] if squeeze else out


def visible_vertices(vertices: np.ndarray, gbuffer: FrameGBuffer, K: Intrinsics,
                     pose: np.ndarray, eps_vis: float = 0.05) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Visibility of each vertex against the reference depth.

    A vertex is visible when it projects in-image, the reference depth at
    the nearest pixel is finite, and the projected depth agrees with it
    within eps_vis. Returns (visible (V,), uv (V,2), z (V,)).
    """
    uv, z, in_frame = project_points(K, pose, vertices)
    visible = np.zeros(len(vertices), dtype=bool)
    idx = np.nonzero(in_frame)[0]
    if idx.size:
        px = np.rint(uv[idx, 0]).astype(np.int64)
        py = np.rint(uv[idx, 1]).astype(np.int64)
        ref = gbuffer.ref_depth[py, px]
        ok = np.isfinite(ref) & (np.abs(z[idx] - ref) <= eps_vis)
        visible[idx[ok]] = True
    return visible, uv, z


def vertex_visible(vertex, gbuffer: FrameGBuffer, K: Intrinsics,
                   pose: np.ndarray, eps_vis: float = 0.05) -> bool:
    vis, _, _ = visible_vertices(np.asarray(vertex, dtype=float).reshape(1, 3),
                                 gbuffer, K, pose, eps_vis)
    return bool(vis[0])


def sample_bilinear(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear sample of an (H, W, C) or (H, W) image at float pixel
    coordinates (N, 2). Coordinates are clamped to the valid rectangle."""
    h, w = image.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[:, None] if image.ndim == 3 else (u - u0)
    fv = (v - v0)[:, None] if image.ndim == 3 else (v - v0)
    img = image.astype(np.float64)
    top = img[v0, u0] * (1 - fu) + img[v0, u1] * fu
    bot = img[v1, u0] * (1 - fu) + img[v1, u1] * fu
    return top * (1 - fv) + bot * fv
