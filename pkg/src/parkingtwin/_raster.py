"""JIT triangle rasterization kernel.

Kept in its own module so the numba compile (cached on disk after the first
run) happens on import of the projection stage only.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def rasterize_faces(uv, z, valid, height, width, depth, face_id, bary):
    """Z-buffer fill of projected triangles.

    uv: (F, 3, 2) screen coordinates, z: (F, 3) camera depths, valid: (F,)
    faces to draw. Outputs are preallocated: depth (H, W) float64 init +inf,
    face_id (H, W) int64 init -1, bary (H, W, 3) float32.

    Coverage is inclusive on triangle boundaries; depth ties keep the earlier
    (lower-index) face, so shared edges and coplanar duplicates resolve
    deterministically. Interpolation is perspective-correct: barycentric
    weights are screen-space weights divided by vertex depth, renormalized.
    """
    n_faces = uv.shape[0]
    for f in range(n_faces):
        if not valid[f]:
            continue
        x0, y0 = uv[f, 0, 0], uv[f, 0, 1]
        x1, y1 = uv[f, 1, 0], uv[f, 1, 1]
        x2, y2 = uv[f, 2, 0], uv[f, 2, 1]

        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue

        xmin = int(np.ceil(min(x0, min(x1, x2))))
        xmax = int(np.floor(max(x0, max(x1, x2))))
        ymin = int(np.ceil(min(y0, min(y1, y2))))
        ymax = int(np.floor(max(y0, max(y1, y2))))
        if xmin < 0:
            xmin = 0
        if ymin < 0:
            ymin = 0
        if xmax > width - 1:
            xmax = width - 1
        if ymax > height - 1:
            ymax = height - 1
        if xmin > xmax or ymin > ymax:
            continue

        inv0 = 1.0 / z[f, 0]
        inv1 = 1.0 / z[f, 1]
        inv2 = 1.0 / z[f, 2]
        inv_area = 1.0 / area

        for py in range(ymin, ymax + 1):
            fy = float(py)
            for px in range(xmin, xmax + 1):
                fx = float(px)
                w0 = ((x1 - fx) * (y2 - fy) - (y1 - fy) * (x2 - fx)) * inv_area
                if w0 < 0.0:
                    continue
                w1 = ((x2 - fx) * (y0 - fy) - (y2 - fy) * (x0 - fx)) * inv_area
                if w1 < 0.0:
                    continue
                w2 = 1.0 - w0 - w1
                if w2 < 0.0:
                    continue
                inv_z = w0 * inv0 + w1 * inv1 + w2 * inv2
                pz = 1.0 / inv_z
                if pz < depth[py, px]:
                    depth[py, px] = pz
                    face_id[py, px] = f
                    b0 = w0 * inv0 * pz
                    b1 = w1 * inv1 * pz
                    bary[py, px, 0] = b0
                    bary[py, px, 1] = b1
                    bary[py, px, 2] = 1.0 - b0 - b1
