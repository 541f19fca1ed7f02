"""Per-frame vehicle masking from four geometric constraint fields.

Each field answers one question about a pixel's observed 3D point: does the
local surface face upward like a parked vehicle's roof or hood; does it sit
in the height band vehicles occupy; is the depth locally discontinuous; and
does the observation occlude the blueprint mesh. The vehicle mask is their
logical AND, which keeps the false-positive rate at roughly the fourth power
of any single field's.

The same module also produces the fusion exclusion mask: pixels whose
observation cannot belong to the static structure because something occludes
the mesh there. That is the occlusion-filtering half of the stage; the
four-way AND is the vehicle-detection half.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .projection import CameraFrame, FrameGBuffer, Intrinsics, back_project_heights

log = logging.getLogger(__name__)


@dataclass
class ConstraintThresholds:
    theta_g: float = 20.0  # max tilt of an upward-facing surface, degrees
    h_min: float = 0.5  # meters above ground, inclusive
    h_max: float = 2.5
    tau_edge: float = 1.0  # meters per pixel, strict
    tau_depth: float = 0.3  # meters of occlusion, strict
    z_g: float = 0.0
    normal_source: str = "observed"  # or "mesh"
    closing: bool = False  # optional 3x3 morphological closing of the mask
    occlusion_filtering: bool = True  # extend fusion exclusion by depth test

    def validate(self) -> None:
        if not 0 < self.theta_g < 90:
            raise ConfigError("theta_g must be in (0, 90) degrees")
        if self.h_min > self.h_max:
            raise ConfigError("h_min must not exceed h_max")
        if self.normal_source not in ("observed", "mesh"):
            raise ConfigError("normal_source must be 'observed' or 'mesh'")


@dataclass
class OcclusionMask:
    """Vehicle mask for one frame. mask true implies every constraint grid
    in fields is true at that pixel."""

    frame_index: int
    mask: np.ndarray  # (H, W) bool
    fields: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class FilterResult:
    occlusion: OcclusionMask
    exclusion: np.ndarray  # (H, W) bool, pixels rejected for texture fusion


_SG_DERIV = np.array([-2.0, -1.0, 0.0, 1.0, 2.0]) / 10.0  # least-squares slope
_SG_AVG = np.full(5, 0.2)


def estimate_depth_normals(depth: np.ndarray, K: Intrinsics,
                           pose: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-frame surface normals by 5x5 least-squares plane fit.

    The fit is the separable Savitzky-Golay first derivative of the
    back-projected point map, so it costs six 1D convolutions. Returns
    (normals (H, W, 3) float64, valid (H, W) bool); any window touching
    invalid depth is invalid. Normals are oriented toward the camera.
    """
    h, w = depth.shape
    d = np.asarray(depth, dtype=np.float64)
    invalid = ~np.isfinite(d) | (d <= 0)
    dz = np.where(invalid, 0.0, d)

    us = (np.arange(w) - K.cx) / K.fx
    vs = (np.arange(h) - K.cy) / K.fy
    px = dz * us[None, :]
    py = dz * vs[:, None]
    pts = np.stack([px, py, dz], axis=-1)

    du = np.empty_like(pts)
    dv = np.empty_like(pts)
    for c in range(3):
        tmp = ndimage.correlate1d(pts[..., c], _SG_DERIV, axis=1, mode="nearest")
        du[..., c] = ndimage.correlate1d(tmp, _SG_AVG, axis=0, mode="nearest")
        tmp = ndimage.correlate1d(pts[..., c], _SG_DERIV, axis=0, mode="nearest")
        dv[..., c] = ndimage.correlate1d(tmp, _SG_AVG, axis=1, mode="nearest")

    n = np.cross(du.reshape(-1, 3), dv.reshape(-1, 3)).reshape(h, w, 3)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    norm[norm < 1e-20] = 1.0
    n /= norm

    # Face the camera: flip where n . p_cam > 0.
    flip = np.einsum("hwc,hwc->hw", n, pts) > 0
    n[flip] *= -1.0

    n_world = n @ pose[:3, :3].T

    touched = ndimage.binary_dilation(invalid, structure=np.ones((5, 5), bool))
    valid = ~touched
    return n_world, valid


def normal_field(normals_world: np.ndarray, valid: np.ndarray,
                 thresholds: ConstraintThresholds) -> np.ndarray:
    """True where the surface faces upward within theta_g of vertical."""
    cos_g = math.cos(math.radians(thresholds.theta_g))
    return valid & (normals_world[..., 2] > cos_g)


def height_field(heights: np.ndarray, thresholds: ConstraintThresholds) -> np.ndarray:
    """True where the observed point sits in [h_min, h_max] above ground."""
    h = heights - thresholds.z_g
    return np.isfinite(heights) & (h >= thresholds.h_min) & (h <= thresholds.h_max)


def edge_field(grad_mag: np.ndarray, thresholds: ConstraintThresholds) -> np.ndarray:
    """True where the observed depth gradient exceeds tau_edge (strict).
    +inf from invalid-depth stencils therefore counts as an edge."""
    return grad_mag > thresholds.tau_edge


def depth_consistency_field(ref_depth: np.ndarray, depth: np.ndarray,
                            thresholds: ConstraintThresholds) -> np.ndarray:
    """True where the observation occludes the mesh by more than tau_depth.
    Background pixels (no mesh, ref +inf) and invalid depth are false."""
    valid = np.isfinite(ref_depth) & np.isfinite(depth) & (depth > 0)
    with np.errstate(invalid="ignore"):
        return valid & ((ref_depth - depth) > thresholds.tau_depth)


def fuse_masks(fields: dict[str, np.ndarray],
               thresholds: ConstraintThresholds | None = None) -> np.ndarray:
    """Logical AND of the constraint fields, optional 3x3 closing after."""
    if not fields:
        raise ConfigError("fuse_masks: no constraint fields given")
    shapes = {f.shape for f in fields.values()}
    if len(shapes) != 1:
        raise ConfigError(f"fuse_masks: mismatched grid shapes {sorted(shapes)}")
    out = None
    for grid in fields.values():
        out = grid.copy() if out is None else (out & grid)
    if thresholds is not None and thresholds.closing:
        out = ndimage.binary_closing(out, structure=np.ones((3, 3), bool))
    return out


def compute_filter(frame: CameraFrame, gbuffer: FrameGBuffer, K: Intrinsics,
                   thresholds: ConstraintThresholds,
                   keep_fields: bool = False) -> FilterResult:
    """Run the full per-frame stage: four fields, vehicle mask, exclusion.

    The exclusion mask is the vehicle mask unioned with the bare depth
    consistency field when occlusion_filtering is on, so observations that
    occlude the mesh never reach texture fusion even if the other vehicle
    cues disagree.
    """
    thresholds.validate()
    if gbuffer.grad_mag is None:
        raise ConfigError("gbuffer has no observed-depth gradient")

    if thresholds.normal_source == "observed":
        normals, nvalid = estimate_depth_normals(frame.depth, K, frame.pose)
    else:
        normals = gbuffer.ref_normal.astype(np.float64)
        nvalid = gbuffer.face_id >= 0

    heights = back_project_heights(K, frame.pose, frame.depth)

    fields = {
        "normal": normal_field(normals, nvalid, thresholds),
        "height": height_field(heights, thresholds),
        "edge": edge_field(gbuffer.grad_mag, thresholds),
        "depth": depth_consistency_field(gbuffer.ref_depth, frame.depth, thresholds),
    }
    mask = fuse_masks(fields, thresholds)

    exclusion = mask | fields["depth"] if thresholds.occlusion_filtering else mask

    occ = OcclusionMask(frame.index, mask, fields if keep_fields else {})
    return FilterResult(occ, exclusion)
