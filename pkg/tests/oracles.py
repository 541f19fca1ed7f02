"""Independent reference implementations used to cross-check the library.

Everything here deliberately takes a different route than the package code:
scalar math instead of vectorized numpy, per-pixel ray casting instead of a
z-buffer, brute-force search instead of a transform. Agreement between the
two routes is then evidence, not tautology.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# signed distance field

def signed_distance_brute(solid: np.ndarray, voxel: float) -> np.ndarray:
    """Per-cell nearest-opposite-class distance by exhaustive search.

    Distances are sqrt of integer squared cell offsets scaled by voxel,
    negative inside solid cells, matching the library's convention.
    """
    nx, ny = solid.shape
    ii, jj = np.nonzero(solid)
    kk, ll = np.nonzero(~solid)
    out = np.empty((nx, ny), dtype=np.float64)
    if ii.size == 0:
        out.fill(np.inf)
        return out
    if kk.size == 0:
        out.fill(-np.inf)
        return out

    gi, gj = np.mgrid[0:nx, 0:ny]
    flat_i = gi.reshape(-1, 1)
    flat_j = gj.reshape(-1, 1)

    sq_to_solid = ((flat_i - ii[None, :]) ** 2
                   + (flat_j - jj[None, :]) ** 2).min(axis=1)
    sq_to_free = ((flat_i - kk[None, :]) ** 2
                  + (flat_j - ll[None, :]) ** 2).min(axis=1)

    d = np.where(solid.ravel(),
                 -np.sqrt(sq_to_free.astype(np.float64)),
                 np.sqrt(sq_to_solid.astype(np.float64)))
    return d.reshape(nx, ny) * voxel


# ---------------------------------------------------------------------------
# scalar CIELAB (sRGB, D65, white point = matrix row sums)

_M = (
    (0.4124564, 0.3575761, 0.1804375),
    (0.2126729, 0.7151522, 0.0721750),
    (0.0193339, 0.1191920, 0.9503041),
)
_WHITE = tuple(sum(row) for row in _M)
_D = 6.0 / 29.0


def _srgb_to_linear(c: float) -> float:
    return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4


def _linear_to_srgb(c: float) -> float:
    return 12.92 * c if c <= 0.0031308 else 1.055 * c ** (1.0 / 2.4) - 0.055


def _f(t: float) -> float:
    return t ** (1.0 / 3.0) if t > _D ** 3 else t / (3 * _D * _D) + 4.0 / 29.0


def _f_inv(t: float) -> float:
    return t ** 3 if t > _D else 3 * _D * _D * (t - 4.0 / 29.0)


def srgb_to_lab_scalar(r: float, g: float, b: float) -> tuple[float, float, float]:
    """One sRGB triple in [0, 255] -> (L, a, b), all plain Python floats."""
    lin = [_srgb_to_linear(c / 255.0) for c in (r, g, b)]
    xyz = [sum(m * c for m, c in zip(row, lin)) / w
           for row, w in zip(_M, _WHITE)]
    fx, fy, fz = (_f(t) for t in xyz)
    return 116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)


def lab_to_srgb_scalar(L: float, a: float, b: float) -> tuple[int, int, int]:
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    xyz = [_f_inv(t) * w for t, w in zip((fx, fy, fz), _WHITE)]
    inv = np.linalg.inv(np.array(_M))
    lin = inv @ xyz
    out = []
    for c in lin:
        c = max(float(c), 0.0)
        out.append(int(min(max(round(_linear_to_srgb(c) * 255.0), 0), 255)))
    return tuple(out)


# ---------------------------------------------------------------------------
# per-pixel ray casting (Moller-Trumbore)

def cast_pixel(vertices: np.ndarray, faces: np.ndarray, K, pose: np.ndarray,
               u: int, v: int, near: float = 0.01):
    """Nearest intersection of the pixel's view ray with the face set.

    Returns (depth, face_index, barycentric (w_a, w_b, w_c)) or None when
    the ray misses every face. Faces with any vertex at camera depth <= near
    are skipped, mirroring the renderer's near-plane rule. Depth is the
    camera-z of the hit, which for a ray through pixel (u, v) is the ray
    parameter t of the direction ((u-cx)/fx, (v-cy)/fy, 1).
    """
    R = pose[:3, :3]
    t = pose[:3, 3]
    d_cam = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    d_world = R @ d_cam
    origin = t

    cam_z = (vertices - t) @ R[:, 2]
    best = None
    for fi, (a, b, c) in enumerate(faces):
        if cam_z[a] <= near or cam_z[b] <= near or cam_z[c] <= near:
            continue
        va, vb, vc = vertices[a], vertices[b], vertices[c]
        e1 = vb - va
        e2 = vc - va
        p = np.cross(d_world, e2)
        det = float(e1 @ p)
        if det == 0.0:
            continue
        inv_det = 1.0 / det
        s = origin - va
        w1 = float(s @ p) * inv_det
        if w1 < 0.0 or w1 > 1.0:
            continue
        q = np.cross(s, e1)
        w2 = float(d_world @ q) * inv_det
        if w2 < 0.0 or w1 + w2 > 1.0:
            continue
        depth = float(e2 @ q) * inv_det
        if depth <= near:
            continue
        if best is None or depth < best[0]:
            best = (depth, fi, (1.0 - w1 - w2, w1, w2))
    return best


# ---------------------------------------------------------------------------
# SSIM reference (scikit-image, test dependency only)

def ssim_reference(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    from skimage.metrics import structural_similarity

    kwargs = dict(gaussian_weights=True, sigma=1.5,
                  use_sample_covariance=False, data_range=data_range)
    if a.ndim == 3:
        kwargs["channel_axis"] = 2
    return float(structural_similarity(a, b, **kwargs))


# ---------------------------------------------------------------------------
# mesh volume via divergence theorem

def mesh_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    """Signed volume sum of origin tetrahedra; exact for closed meshes with
    outward orientation."""
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def rotation_matrix_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
