"""Blueprint ingest: OSM XML subset -> classified 2D polygons in a local
metric frame, plus dominant-direction alignment so walls end up axis-aligned.

Only the v0.6 node/way/tag subset is understood. Relations, versions, and
changesets are ignored. Coordinates are either geodetic (lat/lon degrees,
projected equirectangularly) or already-planar meters stored in the same
attributes; a config flag picks the convention, nothing is auto-detected.
"""

from __future__ import annotations

import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MapParseError, MapStructureError

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6378137.0

# Tag precedence for classifying a way. First hit wins.
_CATEGORY_RULES = (
    ("wall", lambda t: "building" in t or "wall" in t),
    ("pillar", lambda t: t.get("barrier") == "pillar" or t.get("indoor") == "column"),
    ("parking_area", lambda t: t.get("amenity") == "parking_space"),
    ("road", lambda t: "highway" in t),
)

SOLID_CATEGORIES = frozenset({"wall", "pillar"})


def classify_tags(tags: dict) -> str | None:
    for name, rule in _CATEGORY_RULES:
        if rule(tags):
            return name
    return None


@dataclass
class Way:
    way_id: int
    node_ids: list[int]
    tags: dict[str, str]


@dataclass
class MapPolygon:
    """Closed loop; node_ids excludes the repeated terminal reference."""

    way_id: int
    category: str
    node_ids: list[int]


@dataclass
class MapPolyline:
    """Open classified way, e.g. a wall centerline to be buffered later."""

    way_id: int
    category: str
    node_ids: list[int]


@dataclass
class MapFrame:
    """Where the coordinates currently live.

    mode: 'raw' straight from the file, 'local' after projection.
    rotation_rad accumulates alignment rotation; transform is the composed
    4x4 taking pre-alignment local points to the current frame, so camera
    poses can be carried along.
    """

    mode: str = "raw"
    origin: tuple[float, float] | None = None
    rotation_rad: float = 0.0
    transform: np.ndarray = field(default_factory=lambda: np.eye(4))

    def se3(self) -> np.ndarray:
        return self.transform.copy()


@dataclass
class OsmMap:
    nodes: dict[int, np.ndarray]
    ways: list[Way]
    polygons: list[MapPolygon]
    polylines: list[MapPolyline]
    frame: MapFrame
    ignored_ways: int = 0

    def points_of(self, item: MapPolygon | MapPolyline) -> np.ndarray:
        return np.array([self.nodes[i] for i in item.node_ids], dtype=float)

    def solid_polygons(self) -> list[MapPolygon]:
        return [p for p in self.polygons if p.category in SOLID_CATEGORIES]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """(min_xy, max_xy) over nodes referenced by classified geometry."""
        pts = self._classified_points()
        if len(pts) == 0:
            raise MapStructureError("map has no classified geometry")
        pts = np.concatenate(pts)
        return pts.min(axis=0), pts.max(axis=0)

    def _classified_points(self) -> list[np.ndarray]:
        return [self.points_of(p) for p in self.polygons + self.polylines]


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, p) -> bool:
    return (
        min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
        and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])
    )


def _segments_cross(a, b, c, d) -> bool:
    """True for proper crossings and for collinear/endpoint touches."""
    o1, o2 = _orient(a, b, c), _orient(a, b, d)
    o3, o4 = _orient(c, d, a), _orient(c, d, b)
    if ((o1 > 0) != (o2 > 0)) and ((o3 > 0) != (o4 > 0)) and 0 not in (o1, o2, o3, o4):
        return True
    if o1 == 0 and _on_segment(a, b, c):
        return True
    if o2 == 0 and _on_segment(a, b, d):
        return True
    if o3 == 0 and _on_segment(c, d, a):
        return True
    if o4 == 0 and _on_segment(c, d, b):
        return True
    return False


def _check_simple_polygon(points: np.ndarray, way_id: int) -> None:
    n = len(points)
    segs = [(points[i], points[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            # Consecutive segments share one endpoint by construction.
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(*segs[i], *segs[j]):
                raise MapStructureError(
                    f"way {way_id}: polygon self-intersects "
                    f"(segments {i} and {j})"
                )


def parse_osm(document: str | bytes) -> OsmMap:
    """Parse an OSM XML document into an OsmMap in the raw coordinate frame.

    Closed classified ways become polygons (validated simple, >= 3 distinct
    vertices); open classified ways are kept as polylines. Unclassified ways
    are retained verbatim but take no part in geometry.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        line, col = exc.position if exc.position else (None, None)
        raise MapParseError(f"malformed OSM XML: {exc.msg.split(':')[0]}",
                            line=line, column=col) from exc

    nodes: dict[int, np.ndarray] = {}
    for el in root.iter("node"):
        try:
            nid = int(el.attrib["id"])
            lat = float(el.attrib["lat"])
            lon = float(el.attrib["lon"])
        except (KeyError, ValueError) as exc:
            raise MapStructureError(f"node missing id/lat/lon: {el.attrib}") from exc
        nodes[nid] = np.array([lon, lat], dtype=float)

    ways: list[Way] = []
    polygons: list[MapPolygon] = []
    polylines: list[MapPolyline] = []
    ignored = 0

    for el in root.iter("way"):
        try:
            wid = int(el.attrib["id"])
        except (KeyError, ValueError) as exc:
            raise MapStructureError(f"way missing id: {el.attrib}") from exc
        refs = []
        for nd in el.iter("nd"):
            ref = int(nd.attrib["ref"])
            if ref not in nodes:
                raise MapStructureError(f"way {wid} references missing node {ref}")
            refs.append(ref)
        tags = {t.attrib["k"]: t.attrib.get("v", "") for t in el.iter("tag")}
        ways.append(Way(wid, refs, tags))

        category = classify_tags(tags)
        if category is None:
            if tags:
                ignored += 1
            continue

        closed = len(refs) >= 2 and refs[0] == refs[-1]
        loop = refs[:-1] if closed else refs
        if closed:
            distinct = {tuple(nodes[r]) for r in loop}
            if len(distinct) < 3:
                raise MapStructureError(
                    f"way {wid}: closed way has fewer than 3 distinct vertices"
                )
            points = np.array([nodes[r] for r in loop], dtype=float)
            _check_simple_polygon(points, wid)
            polygons.append(MapPolygon(wid, category, loop))
        else:
            if len(refs) < 2:
                raise MapStructureError(f"way {wid}: open way with < 2 nodes")
            polylines.append(MapPolyline(wid, category, refs))

    return OsmMap(nodes, ways, polygons, polylines, MapFrame(mode="raw"),
                  ignored_ways=ignored)


def serialize_osm(osm: OsmMap) -> str:
    """Inverse of parse_osm for the retained subset (nodes, ways, tags).

    Coordinates are written back into lat/lon attributes in whatever frame
    the map currently holds, so parse(serialize(m)) reproduces m's geometry.
    """
    out = ['<?xml version="1.0" encoding="UTF-8"?>', '<osm version="0.6">']
    for nid in sorted(osm.nodes):
        x, y = osm.nodes[nid]
        out.append(f'  <node id="{nid}" lat="{float(y)!r}" lon="{float(x)!r}"/>')
    for way in osm.ways:
        out.append(f'  <way id="{way.way_id}">')
        for ref in way.node_ids:
            out.append(f'    <nd ref="{ref}"/>')
        for k, v in way.tags.items():
            out.append(f'    <tag k="{k}" v="{v}"/>')
        out.append("  </way>")
    out.append("</osm>")
    return "\n".join(out) + "\n"


def project_to_local(osm: OsmMap, mode: str,
                     origin: tuple[float, float] | None = None) -> OsmMap:
    """Bring raw coordinates into a local metric frame.

    mode 'geodetic': equirectangular about the origin (lat0, lon0), meters;
    x = R * dlon * cos(lat0), y = R * dlat. mode 'planar': coordinates are
    already meters, origin (x0, y0) is subtracted. Default origin is the
    node bounding-box center.
    """
    if osm.frame.mode != "raw":
        raise ConfigError("project_to_local: map is already in a local frame")
    if not osm.nodes:
        raise MapStructureError("map has no nodes")

    coords = np.array(list(osm.nodes.values()))
    if mode == "geodetic":
        lon, lat = coords[:, 0], coords[:, 1]
        if np.abs(lat).max() > 90.0 or np.abs(lon).max() > 180.0:
            raise ConfigError(
                "geodetic mode but coordinates exceed +-90/+-180 degrees; "
                "did you mean coordinate_mode=planar?"
            )
        if origin is None:
            origin = (
                float((lat.min() + lat.max()) / 2),
                float((lon.min() + lon.max()) / 2),
            )
        lat0, lon0 = origin
        scale = EARTH_RADIUS_M * math.pi / 180.0
        cos0 = math.cos(math.radians(lat0))
        new_nodes = {
            nid: np.array([(xy[0] - lon0) * scale * cos0,
                           (xy[1] - lat0) * scale])
            for nid, xy in osm.nodes.items()
        }
    elif mode == "planar":
        if origin is None:
            origin = (0.0, 0.0)
        ox, oy = origin
        new_nodes = {nid: np.array([xy[0] - ox, xy[1] - oy])
                     for nid, xy in osm.nodes.items()}
    else:
        raise ConfigError(f"unknown coordinate mode {mode!r}")

    frame = MapFrame(mode="local", origin=origin)
    return OsmMap(new_nodes, osm.ways, osm.polygons, osm.polylines, frame,
                  osm.ignored_ways)


def _edge_list(osm: OsmMap) -> np.ndarray:
    """(E, 4) array of x0, y0, x1, y1 over all classified geometry edges."""
    edges = []
    for poly in osm.polygons:
        pts = osm.points_of(poly)
        edges.append(np.concatenate([pts, np.roll(pts, -1, axis=0)], axis=1))
    for line in osm.polylines:
        pts = osm.points_of(line)
        edges.append(np.concatenate([pts[:-1], pts[1:]], axis=1))
    if not edges:
        raise MapStructureError("map has no classified edges")
    return np.concatenate(edges)


def dominant_angle(osm: OsmMap, bin_width_deg: float = 1.0) -> float:
    """Strongest edge direction folded into [0, 90) degrees.

    Edge directions are binned modulo 90 with bins centered on multiples of
    bin_width_deg and weighted by edge length, so perpendicular wall families
    reinforce one bin. Ties break toward the lower bin center.
    """
    if not 0 < bin_width_deg <= 90:
        raise ConfigError("bin_width_deg must be in (0, 90]")
    edges = _edge_list(osm)
    dx = edges[:, 2] - edges[:, 0]
    dy = edges[:, 3] - edges[:, 1]
    length = np.hypot(dx, dy)
    keep = length > 0
    if not keep.any():
        raise MapStructureError("all classified edges are degenerate")
    theta = np.degrees(np.arctan2(dy[keep], dx[keep])) % 90.0

    n_bins = int(round(90.0 / bin_width_deg))
    idx = np.round(theta / bin_width_deg).astype(int) % n_bins
    hist = np.bincount(idx, weights=length[keep], minlength=n_bins)
    return float(np.argmax(hist) * bin_width_deg)


def align_axes(osm: OsmMap, angle_deg: float) -> OsmMap:
    """Rotate the map by -angle_deg about the centroid of classified nodes.

    After align_axes(m, dominant_angle(m)) the dominant wall direction lies
    along +x. The rotation and pivot are recorded in the frame so poses can
    be brought along with frame.se3().
    """
    if osm.frame.mode != "local":
        raise ConfigError("align_axes requires a local metric frame")
    used = set()
    for item in osm.polygons + osm.polylines:
        used.update(item.node_ids)
    if not used:
        raise MapStructureError("map has no classified geometry")
    pivot = np.mean([osm.nodes[n] for n in sorted(used)], axis=0)

    rot = math.radians(-angle_deg)
    c, s = math.cos(rot), math.sin(rot)
    R = np.array([[c, -s], [s, c]])
    new_nodes = {nid: R @ (xy - pivot) + pivot for nid, xy in osm.nodes.items()}

    step = np.eye(4)
    step[:2, :2] = R
    step[:2, 3] = pivot - R @ pivot
    frame = MapFrame(
        mode="local",
        origin=osm.frame.origin,
        rotation_rad=osm.frame.rotation_rad + rot,
        transform=step @ osm.frame.transform,
    )
    return OsmMap(new_nodes, osm.ways, osm.polygons, osm.polylines, frame,
                  osm.ignored_ways)
