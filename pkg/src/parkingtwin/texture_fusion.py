"""Streaming per-vertex color fusion in CIELAB.

Each accepted observation of a vertex contributes chromaticity with a weight
built from viewing angle, distance, frame sharpness, and local depth-gradient
reliability. Luminance uses the same weights raised to gamma_l < 1, which
flattens exposure dominance: a frame with 9x the weight no longer contributes
9x the luminance, only 3x at gamma_l = 0.5. Running sums make the fusion
order-free and O(vertices) in memory regardless of sequence length.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .projection import (CameraFrame, FrameGBuffer, Intrinsics,
                         sample_bilinear, visible_vertices)
from .tsdf_geometry import TriangleMesh

log = logging.getLogger(__name__)

# sRGB <-> XYZ (D65). The white point is taken from the matrix row sums so
# pure white maps to exactly L*=100, a*=b*=0.
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE = _RGB_TO_XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0


@dataclass
class LabColor:
    L: float
    a: float
    b: float


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 255] (any shape ending in 3) -> CIELAB float64."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE
    f = np.where(xyz > _DELTA ** 3,
                 np.cbrt(xyz),
                 xyz / (3 * _DELTA ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """CIELAB -> sRGB uint8 with out-of-gamut values clipped."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f > _DELTA, f ** 3, 3 * _DELTA ** 2 * (f - 4.0 / 29.0))
    lin = (xyz * _WHITE) @ _XYZ_TO_RGB.T
    lin = np.clip(lin, 0.0, None)
    c = np.where(lin <= 0.0031308, 12.92 * lin,
                 1.055 * lin ** (1.0 / 2.4) - 0.055)
    return np.clip(np.rint(c * 255.0), 0, 255).astype(np.uint8)


@dataclass
class FusionParams:
    space: str = "lab"  # 'lab' or 'rgb' (ablation baseline)
    gamma_l: float = 0.5  # luminance weight flattening; 1.0 = plain weights
    eps_vis: float = 0.05  # visibility depth tolerance, meters
    v_ref: float = 500.0  # Laplacian-variance normalizer for frame quality
    theta_full_deg: float = 30.0  # angle weight: 1 below this
    theta_zero_deg: float = 75.0  # and 0 above this
    d0: float = 5.0  # distance weight half-scale, meters
    alpha_q: float = 1.5  # quality weight exponent
    grad_knee: float = 0.5  # m/px where gradient weight starts to fall
    grad_falloff: float = 2.0
    use_gradient_weight: bool = True
    w_eps: float = 1e-12  # below this total weight a vertex is unobserved

    def validate(self) -> None:
        if self.space not in ("lab", "rgb"):
            raise ConfigError("fusion space must be 'lab' or 'rgb'")
        if not 0 < self.gamma_l <= 1:
            raise ConfigError("gamma_l must be in (0, 1]")
        if not 0 <= self.theta_full_deg < self.theta_zero_deg <= 180:
            raise ConfigError("angle knees must satisfy 0 <= full < zero")


def angle_weight(theta_deg, params: FusionParams = FusionParams()):
    """1 for head-on views, raised-cosine rolloff, 0 past grazing."""
    t = np.asarray(theta_deg, dtype=np.float64)
    span = params.theta_zero_deg - params.theta_full_deg
    ramp = 0.5 * (1.0 + np.cos(np.pi * (t - params.theta_full_deg) / span))
    return np.where(t <= params.theta_full_deg, 1.0,
                    np.where(t >= params.theta_zero_deg, 0.0, ramp))


def distance_weight(d, params: FusionParams = FusionParams()):
    d = np.asarray(d, dtype=np.float64)
    return 1.0 / (1.0 + (d / params.d0) ** 2)


def quality_weight(q, params: FusionParams = FusionParams()):
    q = np.clip(np.asarray(q, dtype=np.float64), 0.0, 1.0)
    return q ** params.alpha_q


def gradient_weight(g, params: FusionParams = FusionParams()):
    """1 on smooth depth, Gaussian falloff past the knee, 0 at +inf."""
    g = np.asarray(g, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        fall = np.exp(-params.grad_falloff * (g - params.grad_knee) ** 2)
    return np.where(g < params.grad_knee, 1.0, np.where(np.isinf(g), 0.0, fall))


def combined_weight(theta_deg, d, q, g, params: FusionParams = FusionParams()):
    w = (angle_weight(theta_deg, params) * distance_weight(d, params)
         * quality_weight(q, params))
    if params.use_gradient_weight:
        w = w * gradient_weight(g, params)
    return w


def quality_score(rgb: np.ndarray, v_ref: float = 500.0) -> float:
    """Frame sharpness score in [0, 1]: normalized Laplacian variance times
    the fraction of the 8-bit range covered by the 1st-99th percentile."""
    gray = (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1]
            + 0.114 * rgb[..., 2]).astype(np.float64)
    var = float(ndimage.laplace(gray).var())
    sharp = min(var / v_ref, 1.0)
    p1, p99 = np.percentile(gray, [1.0, 99.0])
    spread = float(p99 - p1) / 255.0
    return float(np.clip(sharp * spread, 0.0, 1.0))


class VertexAccumulator:
    """Per-vertex running sums. Merging two accumulators over disjoint frame
    sets equals accumulating all frames into one; all updates commute."""

    __slots__ = ("sum_wc", "sum_w", "sum_wl", "sum_wg", "count")

    def __init__(self, n_vertices: int):
        self.sum_wc = np.zeros((n_vertices, 3), dtype=np.float64)
        self.sum_w = np.zeros(n_vertices, dtype=np.float64)
        self.sum_wl = np.zeros(n_vertices, dtype=np.float64)
        self.sum_wg = np.zeros(n_vertices, dtype=np.float64)
        self.count = np.zeros(n_vertices, dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return len(self.sum_w)

    @property
    def nbytes(self) -> int:
        return (self.sum_wc.nbytes + self.sum_w.nbytes + self.sum_wl.nbytes
                + self.sum_wg.nbytes + self.count.nbytes)

    def copy(self) -> "VertexAccumulator":
        out = VertexAccumulator(0)
        out.sum_wc = self.sum_wc.copy()
        out.sum_w = self.sum_w.copy()
        out.sum_wl = self.sum_wl.copy()
        out.sum_wg = self.sum_wg.copy()
        out.count = self.count.copy()
        return out

    def merge(self, other: "VertexAccumulator") -> None:
        if other.n_vertices != self.n_vertices:
            raise ConfigError(
                f"accumulator merge: vertex count mismatch "
                f"({self.n_vertices} vs {other.n_vertices})")
        self.sum_wc += other.sum_wc
        self.sum_w += other.sum_w
        self.sum_wl += other.sum_wl
        self.sum_wg += other.sum_wg
        self.count += other.count

    def add_observations(self, idx: np.ndarray, w: np.ndarray,
                         channels: np.ndarray, gamma_l: float,
                         lab_space: bool) -> None:
        """Fold one frame's accepted samples in. idx may repeat."""
        np.add.at(self.sum_wc, idx, w[:, None] * channels)
        np.add.at(self.sum_w, idx, w)
        if lab_space:
            wg = w ** gamma_l
            np.add.at(self.sum_wl, idx, wg * channels[:, 0])
            np.add.at(self.sum_wg, idx, wg)
        np.add.at(self.count, idx, 1)


@dataclass
class FrameObservations:
    """One frame's accepted samples, ready to fold into an accumulator.
    Lets render/filter work run ahead while merges stay ordered."""

    frame_index: int
    idx: np.ndarray
    w: np.ndarray
    channels: np.ndarray

    def apply(self, acc: VertexAccumulator, params: FusionParams) -> None:
        acc.add_observations(self.idx, self.w, self.channels,
                             params.gamma_l, params.space == "lab")


def observe_frame(mesh: TriangleMesh, frame: CameraFrame, gbuffer: FrameGBuffer,
                  exclusion: np.ndarray | None, K: Intrinsics,
                  params: FusionParams) -> FrameObservations:
    """Collect this frame's valid per-vertex color samples.

    A sample is kept when the vertex is visible (projected depth matches the
    reference render within eps_vis), its pixel is not excluded, and the
    combined weight is positive. Colors are bilinearly sampled then taken to
    the fusion space.
    """
    params.validate()
    visible, uv, z = visible_vertices(mesh.vertices, gbuffer, K, frame.pose,
                                      params.eps_vis)
    idx = np.nonzero(visible)[0]
    empty = FrameObservations(frame.index, np.empty(0, np.int64),
                              np.empty(0), np.empty((0, 3)))
    if idx.size == 0:
        return empty

    px = np.rint(uv[idx, 0]).astype(np.int64)
    py = np.rint(uv[idx, 1]).astype(np.int64)
    if exclusion is not None:
        keep = ~exclusion[py, px]
        idx, px, py = idx[keep], px[keep], py[keep]
        if idx.size == 0:
            return empty

    if mesh.normals is None:
        mesh.recompute_normals()
    cam_pos = frame.pose[:3, 3]
    view = cam_pos - mesh.vertices[idx]
    dist = np.linalg.norm(view, axis=1)
    dist = np.maximum(dist, 1e-12)
    cos_t = np.einsum("ij,ij->i", mesh.normals[idx], view / dist[:, None])
    theta = np.degrees(np.arccos(np.clip(cos_t, -1.0, 1.0)))

    if gbuffer.grad_mag is not None:
        g = gbuffer.grad_mag[py, px]
    else:
        g = np.zeros(idx.size)
    w = combined_weight(theta, dist, frame.quality, g, params)

    pos = w > 0
    idx, w = idx[pos], w[pos]
    if idx.size == 0:
        return empty
    rgb = sample_bilinear(frame.rgb, uv[idx])
    channels = rgb_to_lab(rgb) if params.space == "lab" else rgb
    return FrameObservations(frame.index, idx, w, channels)


FALLBACK_LAB = np.array([50.0, 0.0, 0.0])


def finalize_colors(acc: VertexAccumulator, params: FusionParams
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize sums into colors. Unobserved vertices (no samples or total
    weight below w_eps) get flat mid-gray and are flagged.

    Returns (lab (V,3) float64, rgb (V,3) uint8, unobserved (V,) bool).
    """
    observed = (acc.count > 0) & (acc.sum_w > params.w_eps)
    safe_w = np.where(observed, acc.sum_w, 1.0)
    mean_c = acc.sum_wc / safe_w[:, None]

    if params.space == "lab":
        safe_g = np.where(acc.sum_wg > 0, acc.sum_wg, 1.0)
        L = acc.sum_wl / safe_g
        lab = np.stack([L, mean_c[:, 1], mean_c[:, 2]], axis=1)
        lab[~observed] = FALLBACK_LAB
        rgb = lab_to_rgb(lab)
    else:
        rgb_f = np.clip(mean_c, 0.0, 255.0)
        rgb_f[~observed] = lab_to_rgb(FALLBACK_LAB).astype(np.float64)
        rgb = np.clip(np.rint(rgb_f), 0, 255).astype(np.uint8)
        lab = rgb_to_lab(rgb_f)

    return lab, rgb, ~observed
