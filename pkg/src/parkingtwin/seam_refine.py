"""Seam detection and edge-preserving cleanup on fused vertex colors.

A seam vertex is one whose incident faces disagree strongly about color,
which happens where different frame subsets won (visibility boundaries,
exposure steps). Smoothing is a one-ring bilateral over face colors: the
spatial kernel keeps it local, the range kernel keeps genuine material
edges (large color jumps) intact. Updates are Jacobi style against a frozen
snapshot per pass, so vertex order cannot matter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tsdf_geometry import TriangleMesh

log = logging.getLogger(__name__)


@dataclass
class SeamParams:
    enabled: bool = True
    tau_var: float = 100.0  # seam when color variance exceeds this (strict)
    sigma_spatial: float = 0.1  # meters, distance to face barycenters
    sigma_color: float = 15.0  # 8-bit RGB units
    iterations: int = 1
    z_floor: float = 1e-9  # below this normalizer the vertex keeps its color

    def validate(self) -> None:
        if self.sigma_spatial <= 0 or self.sigma_color <= 0:
            raise ConfigError("seam sigmas must be positive")
        if self.iterations < 0:
            raise ConfigError("seam iterations must be >= 0")


def face_colors(mesh: TriangleMesh, vertex_rgb: np.ndarray,
                unobserved: np.ndarray | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
    """Mean of the three corner colors per face, plus a validity flag.

    Faces touching an unobserved vertex carry fallback color, not evidence,
    so they are excluded from seam statistics.
    """
    rgb = np.asarray(vertex_rgb, dtype=np.float64)
    fc = rgb[mesh.faces].mean(axis=1)
    if unobserved is None:
        valid = np.ones(mesh.n_faces, dtype=bool)
    else:
        valid = ~unobserved[mesh.faces].any(axis=1)
    return fc, valid


def vertex_color_variance(mesh: TriangleMesh, fcolors: np.ndarray,
                          valid_faces: np.ndarray) -> np.ndarray:
    """Mean squared deviation of incident valid face colors per vertex.

    Vertices with fewer than two valid incident faces get 0: one face can
    never disagree with itself.
    """
    offsets, face_idx = mesh.vertex_faces()
    vert_idx = np.repeat(np.arange(mesh.n_vertices),
                         np.diff(offsets).astype(np.int64))
    keep = valid_faces[face_idx]
    vi = vert_idx[keep]
    fi = face_idx[keep]

    n = np.bincount(vi, minlength=mesh.n_vertices).astype(np.float64)
    mean = np.zeros((mesh.n_vertices, 3))
    np.add.at(mean, vi, fcolors[fi])
    safe_n = np.where(n > 0, n, 1.0)
    mean /= safe_n[:, None]

    dev = fcolors[fi] - mean[vi]
    sq = np.einsum("ij,ij->i", dev, dev)
    var = np.zeros(mesh.n_vertices)
    np.add.at(var, vi, sq)
    var /= safe_n
    var[n < 2] = 0.0
    return var


def detect_seams(variance: np.ndarray, params: SeamParams) -> np.ndarray:
    return variance > params.tau_var


def bilateral_smooth(mesh: TriangleMesh, vertex_rgb: np.ndarray,
                     seams: np.ndarray, fcolors: np.ndarray,
                     valid_faces: np.ndarray, params: SeamParams) -> np.ndarray:
    """One Jacobi pass of bilateral smoothing restricted to seam vertices.

    Every quantity is read from the pre-pass snapshot. A vertex whose
    kernel mass falls under z_floor (all neighbors across a hard edge)
    is left untouched.
    """
    params.validate()
    rgb = np.asarray(vertex_rgb, dtype=np.float64)
    out = rgb.copy()
    if not seams.any():
        return out

    offsets, face_idx = mesh.vertex_faces()
    vert_idx = np.repeat(np.arange(mesh.n_vertices),
                         np.diff(offsets).astype(np.int64))
    keep = seams[vert_idx] & valid_faces[face_idx]
    vi = vert_idx[keep]
    fi = face_idx[keep]
    if vi.size == 0:
        return out

    bary = mesh.face_barycenters()
    d2 = np.sum((mesh.vertices[vi] - bary[fi]) ** 2, axis=1)
    dc2 = np.sum((rgb[vi] - fcolors[fi]) ** 2, axis=1)
    w = (np.exp(-d2 / (2.0 * params.sigma_spatial ** 2))
         * np.exp(-dc2 / (2.0 * params.sigma_color ** 2)))

    z = np.zeros(mesh.n_vertices)
    num = np.zeros((mesh.n_vertices, 3))
    np.add.at(z, vi, w)
    np.add.at(num, vi, w[:, None] * fcolors[fi])

    apply = seams & (z >= params.z_floor)
    out[apply] = num[apply] / z[apply, None]
    return out


def refine_seams(mesh: TriangleMesh, vertex_rgb: np.ndarray,
                 unobserved: np.ndarray | None,
                 params: SeamParams) -> tuple[np.ndarray, dict]:
    """Detect-and-smooth passes; returns new colors and seam statistics.

    Each pass recomputes face colors and the seam set from the current
    snapshot, then smooths once. The report carries seam counts before the
    first pass and after the last.
    """
    params.validate()
    rgb = np.asarray(vertex_rgb, dtype=np.float64)
    fc, valid = face_colors(mesh, rgb, unobserved)
    seams = detect_seams(vertex_color_variance(mesh, fc, valid), params)
    initial = int(seams.sum())
    for _ in range(params.iterations):
        if not seams.any():
            break
        rgb = bilateral_smooth(mesh, rgb, seams, fc, valid, params)
        fc, valid = face_colors(mesh, rgb, unobserved)
        seams = detect_seams(vertex_color_variance(mesh, fc, valid), params)
    final = int(seams.sum())

    out = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    report = {"seam_vertices_initial": initial, "seam_vertices_final": final,
              "iterations": params.iterations}
    return out, report
