"""Blueprint geometry: 2D occupancy -> signed distance field -> extruded
TSDF -> triangle mesh.

The parking structure is treated as a vertical prism world: walls and pillars
are solid through the slab [z_ground, z_ground + height], capped by one free
voxel layer below and above so every extracted component is watertight. The
floor is built the same way as a thin solid slab whose top face lies at
z_ground, so the mesh has ground vertices to texture.

Sign convention: negative inside solid, positive in free space, zero on the
surface. Distances are truncated to +-tau before extraction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._mc_tables import EDGE_TABLE, TRI_TABLE
from .errors import ConfigError, MeshError
from .osm_ingest import OsmMap

log = logging.getLogger(__name__)


@dataclass
class TsdfParams:
    voxel_size: float = 0.1
    height: float = 3.0
    tau: float | None = None  # None -> 3 * voxel_size
    z_ground: float = 0.0
    wall_thickness: float = 0.2  # band width for centerline walls
    padding: float = 0.5  # free margin around the blueprint, meters
    floor: bool = True
    floor_thickness: float = 0.2

    def resolved_tau(self) -> float:
        return 3.0 * self.voxel_size if self.tau is None else self.tau

    def validate(self) -> None:
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if self.height <= 0:
            raise ConfigError("height must be positive")
        if self.resolved_tau() < self.voxel_size:
            raise ConfigError("tau must be at least one voxel")


@dataclass
class OccupancyGrid:
    """2D solid mask. Cell (i, j) center sits at origin + (i+0.5, j+0.5)*voxel
    with i indexing x and j indexing y."""

    solid: np.ndarray  # (nx, ny) bool
    origin: np.ndarray  # (2,) lower-left corner, meters
    voxel_size: float

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.solid.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.voxel_size
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.voxel_size
        return xs, ys


@dataclass
class TsdfVolume:
    """Truncated signed distance samples on a voxel-center lattice.

    values[i, j, k] is the clamped signed distance at
    origin + (i, j, k) * voxel_size; origin is the center of voxel (0,0,0).
    """

    values: np.ndarray  # (nx, ny, nz) float64
    origin: np.ndarray  # (3,)
    voxel_size: float
    tau: float


def _fill_crossings(points: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                    counts: np.ndarray) -> None:
    """Add per-cell edge-crossing counts for one polygon (ray toward -x)."""
    n = len(points)
    for k in range(n):
        x0, y0 = points[k]
        x1, y1 = points[(k + 1) % n]
        if y0 == y1:
            continue
        lo, hi = (y0, y1) if y0 < y1 else (y1, y0)
        rows = np.nonzero((ys >= lo) & (ys < hi))[0]
        if rows.size == 0:
            continue
        x_int = x0 + (ys[rows] - y0) * (x1 - x0) / (y1 - y0)
        counts[:, rows] += xs[:, None] > x_int[None, :]


def _fill_polygon(points: np.ndarray, xs, ys) -> np.ndarray:
    counts = np.zeros((xs.size, ys.size), dtype=np.int64)
    _fill_crossings(points, xs, ys, counts)
    return counts % 2 == 1


def _band_around_polyline(points: np.ndarray, xs, ys, half_width: float) -> np.ndarray:
    """Cells whose center is within half_width of any segment."""
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    out = np.zeros(gx.shape, dtype=bool)
    for a, b in zip(points[:-1], points[1:]):
        d = b - a
        len2 = float(d @ d)
        if len2 == 0:
            t = np.zeros_like(gx)
        else:
            t = np.clip(((gx - a[0]) * d[0] + (gy - a[1]) * d[1]) / len2, 0.0, 1.0)
        px = a[0] + t * d[0]
        py = a[1] + t * d[1]
        out |= (gx - px) ** 2 + (gy - py) ** 2 <= half_width ** 2
    return out


def rasterize_occupancy(osm: OsmMap, params: TsdfParams) -> OccupancyGrid:
    """Mark cells whose center lies inside solid blueprint geometry.

    Closed wall loops are combined with the even-odd rule, so a pair of
    nested loops yields a hollow wall band rather than a filled block.
    Pillar loops are filled individually; open wall ways become bands of
    wall_thickness around the centerline.
    """
    params.validate()
    lo, hi = osm.bounds()
    origin = lo - params.padding
    extent = hi - lo + 2 * params.padding
    nx = max(int(np.ceil(extent[0] / params.voxel_size)), 1)
    ny = max(int(np.ceil(extent[1] / params.voxel_size)), 1)
    # Nudge test points off exact cell-center coordinates: map geometry
    # tends to sit on round values, and a center exactly on a polygon edge
    # makes the parity test grid-alignment dependent (a 1-voxel wall can
    # vanish entirely). The offset is far below voxel scale, so cell
    # classification is otherwise unchanged.
    eps = 1e-6 * params.voxel_size
    xs = origin[0] + (np.arange(nx) + 0.5) * params.voxel_size + eps
    ys = origin[1] + (np.arange(ny) + 0.5) * params.voxel_size + eps

    wall_counts = np.zeros((nx, ny), dtype=np.int64)
    solid = np.zeros((nx, ny), dtype=bool)
    for poly in osm.polygons:
        if poly.category == "wall":
            _fill_crossings(osm.points_of(poly), xs, ys, wall_counts)
        elif poly.category == "pillar":
            solid |= _fill_polygon(osm.points_of(poly), xs, ys)
    solid |= wall_counts % 2 == 1

    half = params.wall_thickness / 2.0
    for line in osm.polylines:
        if line.category == "wall":
            solid |= _band_around_polyline(osm.points_of(line), xs, ys, half)

    return OccupancyGrid(solid, origin, params.voxel_size)


def distance_field_2d(occ: OccupancyGrid) -> np.ndarray:
    """Signed Euclidean distance (meters) from each cell center to the
    nearest cell of the opposite occupancy class. Negative inside solid.

    Exact: distances are sqrt of integer squared cell offsets, scaled.
    All-free grids return +inf everywhere, all-solid -inf.
    """
    solid = occ.solid
    out = np.empty(solid.shape, dtype=np.float64)
    if not solid.any():
        out.fill(np.inf)
        return out
    if solid.all():
        out.fill(-np.inf)
        return out
    dist_to_solid = ndimage.distance_transform_edt(~solid)
    dist_to_free = ndimage.distance_transform_edt(solid)
    out = np.where(solid, -dist_to_free, dist_to_solid)
    return out * occ.voxel_size


def extrude_tsdf(phi_2d: np.ndarray, occ: OccupancyGrid, params: TsdfParams,
                 height: float | None = None,
                 z_ground: float | None = None) -> TsdfVolume:
    """Extend the 2D field vertically into a capped slab volume.

    Slab layers carry clamp(phi_2d, -tau, +tau); one +tau layer below and
    above closes every solid column into a watertight prism. Layer centers
    are staggered half a voxel around [z_ground, z_ground + height] so the
    zero crossing of a fully solid column lands exactly on the slab faces.
    """
    params.validate()
    v = params.voxel_size
    tau = params.resolved_tau()
    height = params.height if height is None else height
    z_ground = params.z_ground if z_ground is None else z_ground

    n_slab = max(int(round(height / v)), 1)
    slab = np.clip(phi_2d, -tau, tau)
    nx, ny = slab.shape
    values = np.full((nx, ny, n_slab + 2), tau, dtype=np.float64)
    values[:, :, 1:-1] = slab[:, :, None]

    origin = np.array([
        occ.origin[0] + 0.5 * v,
        occ.origin[1] + 0.5 * v,
        z_ground - 0.5 * v,
    ])
    return TsdfVolume(values, origin, v, tau)


@dataclass
class TriangleMesh:
    """Indexed triangle mesh with optional per-vertex appearance buffers."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    normals: np.ndarray | None = None  # (V, 3) float64, unit
    colors_rgb: np.ndarray | None = None  # (V, 3) uint8
    colors_lab: np.ndarray | None = None  # (V, 3) float64
    unobserved: np.ndarray | None = None  # (V,) bool
    _vf_cache: tuple[np.ndarray, np.ndarray] | None = field(
        default=None, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def recompute_normals(self) -> None:
        """Area-weighted vertex normals; winding defines the direction."""
        n = np.zeros_like(self.vertices)
        tri = self.vertices[self.faces]
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        for c in range(3):
            np.add.at(n, self.faces[:, c], fn)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        bad = norm[:, 0] < 1e-20
        norm[bad] = 1.0
        n /= norm
        n[bad] = (0.0, 0.0, 1.0)
        self.normals = n

    def edge_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """(unique undirected edges, face count per edge)."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                            self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def is_closed_manifold(self) -> bool:
        if self.n_faces == 0:
            return False
        _, counts = self.edge_counts()
        return bool((counts == 2).all())

    def euler_characteristic(self) -> int:
        edges, _ = self.edge_counts()
        return self.n_vertices - len(edges) + self.n_faces

    def vertex_faces(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR adjacency: faces incident to vertex v are
        indices[offsets[v]:offsets[v+1]]."""
        if self._vf_cache is None:
            flat = self.faces.ravel()
            order = np.argsort(flat, kind="stable")
            face_idx = order // 3
            counts = np.bincount(flat, minlength=self.n_vertices)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            self._vf_cache = (offsets.astype(np.int64), face_idx.astype(np.int64))
        return self._vf_cache

    def face_barycenters(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def connected_components(self) -> np.ndarray:
        """Component label per vertex, via edges."""
        parent = np.arange(self.n_vertices)

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f in self.faces:
            ra, rb, rc = find(f[0]), find(f[1]), find(f[2])
            parent[rb] = ra
            parent[rc] = ra
        roots = np.array([find(i) for i in range(self.n_vertices)])
        _, labels = np.unique(roots, return_inverse=True)
        return labels

    @staticmethod
    def concatenate(meshes: list["TriangleMesh"]) -> "TriangleMesh":
        verts, faces, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + off)
            off += m.n_vertices
        out = TriangleMesh(np.concatenate(verts), np.concatenate(faces))
        out.recompute_normals()
        return out


# Local edge index -> (base corner offset, axis). The base corner is the low
# end of the edge so shared edges interpolate identically in every cell.
_EDGE_BASE = np.array([
    (0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 0),
    (0, 0, 1), (1, 0, 1), (0, 1, 1), (0, 0, 1),
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
], dtype=np.int64)
_EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2], dtype=np.int64)


def marching_cubes(volume: TsdfVolume) -> TriangleMesh:
    """Extract the zero level set with the classic 256-case tables.

    Vertices are deduplicated through canonical global edge keys, so the
    result is watertight wherever the field is well-behaved. Faces are wound
    so normals point from solid (negative) toward free space (positive).
    """
    vals = volume.values
    # Exact zeros would put vertices on lattice corners and degenerate
    # triangles; nudge them to the free side.
    vals = np.where(vals == 0.0, 1e-12, vals)
    inside = vals < 0.0

    nx, ny, nz = vals.shape
    if min(nx, ny, nz) < 2:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint8)
    for bit, (dx, dy, dz) in enumerate([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                                        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]):
        case |= (inside[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz]
                 .astype(np.uint8) << bit)

    active = np.argwhere((case != 0) & (case != 255))

    edge_key_to_vertex: dict[int, int] = {}
    positions: list[tuple[float, float, float]] = []
    tris: list[tuple[int, int, int]] = []
    stride_axis = 3
    stride_z = nz * stride_axis
    stride_y = ny * stride_z

    ox, oy, oz = volume.origin
    v = volume.voxel_size

    for cx, cy, cz in active:
        c = case[cx, cy, cz]
        edge_mask = int(EDGE_TABLE[c])
        local_vertex = [-1] * 12
        for e in range(12):
            if not edge_mask & (1 << e):
                continue
            bx = cx + _EDGE_BASE[e, 0]
            by = cy + _EDGE_BASE[e, 1]
            bz = cz + _EDGE_BASE[e, 2]
            axis = _EDGE_AXIS[e]
            key = (bx * stride_y + by * stride_z + bz * stride_axis) + axis
            idx = edge_key_to_vertex.get(key)
            if idx is None:
                va = vals[bx, by, bz]
                if axis == 0:
                    vb = vals[bx + 1, by, bz]
                elif axis == 1:
                    vb = vals[bx, by + 1, bz]
                else:
                    vb = vals[bx, by, bz + 1]
                t = va / (va - vb)
                px = ox + (bx + (t if axis == 0 else 0.0)) * v
                py = oy + (by + (t if axis == 1 else 0.0)) * v
                pz = oz + (bz + (t if axis == 2 else 0.0)) * v
                idx = len(positions)
                positions.append((px, py, pz))
                edge_key_to_vertex[key] = idx
            local_vertex[e] = idx
        row = TRI_TABLE[c]
        for k in range(0, 16, 3):
            if row[k] < 0:
                break
            # Table winding faces the negative side; swap to point normals
            # toward positive (free space).
            tris.append((local_vertex[row[k]],
                         local_vertex[row[k + 2]],
                         local_vertex[row[k + 1]]))

    mesh = TriangleMesh(
        np.array(positions, dtype=np.float64).reshape(-1, 3),
        np.array(tris, dtype=np.int64).reshape(-1, 3),
    )
    mesh.recompute_normals()
    return mesh


def build_blueprint_mesh(osm: OsmMap, params: TsdfParams) -> tuple[TriangleMesh, dict]:
    """Full geometry stage: walls/pillars prism mesh plus optional floor slab.

    Returns the merged mesh and a report with watertightness and coverage.
    """
    occ = rasterize_occupancy(osm, params)
    phi = distance_field_2d(occ)
    vol = extrude_tsdf(phi, occ, params)
    walls = marching_cubes(vol)

    meshes = [walls]
    if params.floor:
        lo, hi = osm.bounds()
        xs, ys = occ.cell_centers()
        rect = ((xs[:, None] >= lo[0]) & (xs[:, None] <= hi[0])
                & (ys[None, :] >= lo[1]) & (ys[None, :] <= hi[1]))
        floor_occ = OccupancyGrid(rect, occ.origin, occ.voxel_size)
        floor_phi = distance_field_2d(floor_occ)
        thickness = max(params.floor_thickness, 2 * params.voxel_size)
        floor_vol = extrude_tsdf(floor_phi, floor_occ, params,
                                 height=thickness,
                                 z_ground=params.z_ground - thickness)
        meshes.append(marching_cubes(floor_vol))

    mesh = TriangleMesh.concatenate(meshes) if len(meshes) > 1 else walls

    area_solid = float(occ.solid.sum()) * params.voxel_size ** 2
    report = {
        "vertices": mesh.n_vertices,
        "faces": mesh.n_faces,
        "watertight": mesh.is_closed_manifold(),
        "solid_area_m2": area_solid,
        "grid_shape": list(occ.solid.shape),
        "voxel_size": params.voxel_size,
    }
    return mesh, report


# ---------------------------------------------------------------------------
# Mesh file I/O. PLY is binary little-endian with double precision positions
# so export -> import is bit-exact; OBJ is the `v x y z r g b` text extension.
# ---------------------------------------------------------------------------

def write_ply(mesh: TriangleMesh, path) -> None:
    v = np.asarray(mesh.vertices, dtype="<f8")
    n = mesh.normals
    if n is None:
        mesh.recompute_normals()
        n = mesh.normals
    n = np.asarray(n, dtype="<f8")
    if mesh.colors_rgb is None:
        rgb = np.full((len(v), 3), 200, dtype=np.uint8)
    else:
        rgb = np.asarray(mesh.colors_rgb, dtype=np.uint8)
    f = np.asarray(mesh.faces, dtype="<i4")

    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(v)}",
        "property double x", "property double y", "property double z",
        "property double nx", "property double ny", "property double nz",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {len(f)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]) + "\n"

    vertex_dt = np.dtype([("xyz", "<f8", 3), ("n", "<f8", 3), ("rgb", "u1", 3)])
    vbuf = np.empty(len(v), dtype=vertex_dt)
    vbuf["xyz"] = v
    vbuf["n"] = n
    vbuf["rgb"] = rgb

    face_dt = np.dtype([("cnt", "u1"), ("idx", "<i4", 3)])
    fbuf = np.empty(len(f), dtype=face_dt)
    fbuf["cnt"] = 3
    fbuf["idx"] = f

    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vbuf.tobytes())
        fh.write(fbuf.tobytes())


def read_ply(path) -> TriangleMesh:
    """Read the subset written by write_ply (binary LE, list uchar int)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", "replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    if "format binary_little_endian 1.0" not in header:
        raise MeshError(f"{path}: only binary little-endian PLY is supported")

    n_vert = n_face = 0
    vertex_props: list[tuple[str, str]] = []
    current = None
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vertex_props.append((parts[1], parts[2]))

    type_map = {"double": "<f8", "float": "<f4", "uchar": "u1", "uint8": "u1"}
    try:
        fields = [(name, type_map[t]) for t, name in vertex_props]
    except KeyError as exc:
        raise MeshError(f"{path}: unsupported vertex property type {exc}") from exc
    vdt = np.dtype(fields)
    need = n_vert * vdt.itemsize
    if len(body) < need:
        raise MeshError(f"{path}: truncated vertex data")
    vbuf = np.frombuffer(body[:need], dtype=vdt)
    body = body[need:]

    names = [n for _, n in vertex_props]
    for axis in "xyz":
        if axis not in names:
            raise MeshError(f"{path}: missing vertex property {axis}")
    verts = np.stack([vbuf[a].astype(np.float64) for a in "xyz"], axis=1)
    normals = None
    if all(a in names for a in ("nx", "ny", "nz")):
        normals = np.stack([vbuf[a].astype(np.float64)
                            for a in ("nx", "ny", "nz")], axis=1)
    colors = None
    if all(a in names for a in ("red", "green", "blue")):
        colors = np.stack([vbuf[a] for a in ("red", "green", "blue")], axis=1)
        colors = colors.astype(np.uint8)

    face_dt = np.dtype([("cnt", "u1"), ("idx", "<i4", 3)])
    need = n_face * face_dt.itemsize
    if len(body) < need:
        raise MeshError(f"{path}: truncated face data")
    fbuf = np.frombuffer(body[:need], dtype=face_dt)
    if n_face and not (fbuf["cnt"] == 3).all():
        raise MeshError(f"{path}: non-triangle face present")
    faces = fbuf["idx"].astype(np.int64)

    return TriangleMesh(verts, faces, normals=normals, colors_rgb=colors)


def write_obj(mesh: TriangleMesh, path) -> None:
    if mesh.colors_rgb is None:
        rgb = np.full((mesh.n_vertices, 3), 200, dtype=np.uint8)
    else:
        rgb = mesh.colors_rgb
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# parkingtwin mesh\n")
        for (x, y, z), (r, g, b) in zip(mesh.vertices, rgb / 255.0):
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g} {r:.9g} {g:.9g} {b:.9g}\n")
        for a, b_, c in mesh.faces + 1:
            fh.write(f"f {a} {b_} {c}\n")


def read_obj(path) -> TriangleMesh:
    verts, colors, faces = [], [], []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vals = [float(p) for p in parts[1:]]
                verts.append(vals[:3])
                if len(vals) >= 6:
                    colors.append(vals[3:6])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
    if not verts:
        raise MeshError(f"{path}: no vertices")
    mesh = TriangleMesh(np.array(verts, dtype=np.float64),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))
    if colors and len(colors) == len(verts):
        mesh.colors_rgb = np.clip(np.round(np.array(colors) * 255.0),
                                  0, 255).astype(np.uint8)
    return mesh
