"""Blueprint parsing, projection, and axis alignment."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parkingtwin.errors import ConfigError, MapParseError, MapStructureError
from parkingtwin.osm_ingest import (EARTH_RADIUS_M, align_axes, classify_tags,
                                    dominant_angle, parse_osm,
                                    project_to_local, serialize_osm)


def _doc(nodes, ways):
    """nodes: {id: (lon, lat)}, ways: [(id, [refs], {tags})]."""
    parts = ['<?xml version="1.0"?><osm version="0.6">']
    for nid, (lon, lat) in nodes.items():
        parts.append(f'<node id="{nid}" lat="{lat}" lon="{lon}"/>')
    for wid, refs, tags in ways:
        parts.append(f'<way id="{wid}">')
        parts.extend(f'<nd ref="{r}"/>' for r in refs)
        parts.extend(f'<tag k="{k}" v="{v}"/>' for k, v in tags.items())
        parts.append("</way>")
    parts.append("</osm>")
    return "".join(parts)


_SQUARE = {1: (0.0, 0.0), 2: (4.0, 0.0), 3: (4.0, 4.0), 4: (0.0, 4.0)}


def test_parse_classifies_ways_by_tag_precedence():
    doc = _doc(
        _SQUARE,
        [
            (10, [1, 2, 3, 4, 1], {"building": "yes"}),
            (11, [1, 2, 3, 4, 1], {"barrier": "pillar"}),
            (12, [1, 2, 3, 4, 1], {"indoor": "column"}),
            (13, [1, 2, 3, 4, 1], {"amenity": "parking_space"}),
            (14, [1, 2], {"highway": "service"}),
            (15, [1, 2, 3], {"name": "ignored"}),
        ],
    )
    osm = parse_osm(doc)
    cats = {p.way_id: p.category for p in osm.polygons}
    assert cats == {10: "wall", 11: "pillar", 12: "pillar", 13: "parking_area"}
    assert [(l.way_id, l.category) for l in osm.polylines] == [(14, "road")]
    assert osm.ignored_ways == 1
    assert len(osm.ways) == 6  # unclassified ways are retained


def test_classify_tags_first_match_wins():
    assert classify_tags({"building": "yes", "highway": "x"}) == "wall"
    assert classify_tags({}) is None


def test_closed_way_drops_repeated_terminal_node():
    osm = parse_osm(_doc(_SQUARE, [(10, [1, 2, 3, 4, 1], {"building": "y"})]))
    assert osm.polygons[0].node_ids == [1, 2, 3, 4]
    pts = osm.points_of(osm.polygons[0])
    assert pts.shape == (4, 2)


def test_parse_rejects_malformed_xml_with_position():
    with pytest.raises(MapParseError) as exc:
        parse_osm("<osm><node id='1' lat='0' lon='0'")
    assert exc.value.line is not None


def test_parse_rejects_missing_node_reference():
    doc = _doc(_SQUARE, [(10, [1, 2, 99, 4, 1], {"building": "y"})])
    with pytest.raises(MapStructureError, match="missing node 99"):
        parse_osm(doc)


def test_parse_rejects_self_intersecting_polygon():
    bowtie = {1: (0.0, 0.0), 2: (2.0, 2.0), 3: (2.0, 0.0), 4: (0.0, 2.0)}
    doc = _doc(bowtie, [(10, [1, 2, 3, 4, 1], {"building": "y"})])
    with pytest.raises(MapStructureError, match="self-intersects"):
        parse_osm(doc)


def test_parse_rejects_degenerate_closed_way():
    doc = _doc({1: (0.0, 0.0), 2: (1.0, 0.0)}, [(10, [1, 2, 1], {"building": "y"})])
    with pytest.raises(MapStructureError, match="fewer than 3"):
        parse_osm(doc)


def test_planar_projection_subtracts_origin():
    osm = parse_osm(_doc(_SQUARE, [(10, [1, 2, 3, 4, 1], {"building": "y"})]))
    local = project_to_local(osm, "planar", origin=(1.0, 2.0))
    np.testing.assert_allclose(local.nodes[1], [-1.0, -2.0])
    np.testing.assert_allclose(local.nodes[3], [3.0, 2.0])
    assert local.frame.mode == "local"
    with pytest.raises(ConfigError, match="already in a local frame"):
        project_to_local(local, "planar")


def test_geodetic_projection_matches_hand_formula():
    lat0, lon0 = 48.0, 11.0
    dlat, dlon = 1e-4, 2e-4
    nodes = {1: (lon0, lat0), 2: (lon0 + dlon, lat0 + dlat),
             3: (lon0 + dlon, lat0), 4: (lon0, lat0 + dlat)}
    osm = parse_osm(_doc(nodes, [(10, [1, 3, 2, 4, 1], {"building": "y"})]))
    local = project_to_local(osm, "geodetic", origin=(lat0, lon0))
    scale = EARTH_RADIUS_M * math.pi / 180.0
    expect_x = dlon * scale * math.cos(math.radians(lat0))
    expect_y = dlat * scale
    # lon - lon0 loses ~5 digits to cancellation at these magnitudes
    np.testing.assert_allclose(local.nodes[1], [0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(local.nodes[2], [expect_x, expect_y], rtol=1e-9)


def test_geodetic_projection_rejects_out_of_range_coordinates():
    osm = parse_osm(_doc({1: (500.0, 0.0), 2: (501.0, 0.0), 3: (500.0, 1.0)},
                         [(10, [1, 2, 3, 1], {"building": "y"})]))
    with pytest.raises(ConfigError, match="planar"):
        project_to_local(osm, "geodetic")


def test_dominant_angle_folds_perpendicular_walls_together():
    # L-shaped wall: long edges at 25 degrees and 115 degrees.
    ang = math.radians(25.0)
    c, s = math.cos(ang), math.sin(ang)
    pts = np.array([[0, 0], [10, 0], [10, 1], [1, 1], [1, 8], [0, 8]], float)
    rot = pts @ np.array([[c, s], [-s, c]])
    nodes = {i + 1: tuple(p) for i, p in enumerate(rot)}
    doc = _doc(nodes, [(10, list(range(1, 7)) + [1], {"building": "y"})])
    osm = project_to_local(parse_osm(doc), "planar")
    assert dominant_angle(osm) == pytest.approx(25.0, abs=0.51)


def test_align_axes_zeroes_dominant_angle_and_records_transform():
    ang = 19.0
    c, s = math.cos(math.radians(ang)), math.sin(math.radians(ang))
    square = np.array([[0, 0], [6, 0], [6, 4], [0, 4]], float)
    rot = square @ np.array([[c, s], [-s, c]]) + np.array([3.0, -2.0])
    nodes = {i + 1: tuple(p) for i, p in enumerate(rot)}
    doc = _doc(nodes, [(10, [1, 2, 3, 4, 1], {"building": "y"})])
    osm = project_to_local(parse_osm(doc), "planar")

    aligned = align_axes(osm, dominant_angle(osm))
    assert dominant_angle(aligned) == pytest.approx(0.0, abs=1e-9)

    # frame.se3() must map pre-alignment points onto the aligned ones
    se3 = aligned.frame.se3()
    for nid, xy in osm.nodes.items():
        p = se3 @ np.array([xy[0], xy[1], 0.0, 1.0])
        np.testing.assert_allclose(p[:2], aligned.nodes[nid], atol=1e-9)


def test_align_axes_requires_local_frame():
    osm = parse_osm(_doc(_SQUARE, [(10, [1, 2, 3, 4, 1], {"building": "y"})]))
    with pytest.raises(ConfigError, match="local"):
        align_axes(osm, 10.0)


def test_serialize_round_trip_preserves_geometry_and_tags():
    doc = _doc(_SQUARE, [(10, [1, 2, 3, 4, 1], {"building": "yes", "name": "hall"})])
    osm = parse_osm(doc)
    again = parse_osm(serialize_osm(osm))
    assert {w.way_id: w.tags for w in again.ways} == {w.way_id: w.tags for w in osm.ways}
    for nid, xy in osm.nodes.items():
        np.testing.assert_array_equal(again.nodes[nid], xy)


def test_bounds_covers_classified_nodes_only():
    nodes = dict(_SQUARE)
    nodes[9] = (100.0, 100.0)  # referenced by an unclassified way only
    doc = _doc(nodes, [(10, [1, 2, 3, 4, 1], {"building": "y"}),
                       (11, [9, 1], {"name": "x"})])
    lo, hi = parse_osm(doc).bounds()
    np.testing.assert_array_equal(lo, [0.0, 0.0])
    np.testing.assert_array_equal(hi, [4.0, 4.0])


@settings(deadline=None, max_examples=40)
@given(angle=st.floats(min_value=0.2, max_value=89.3),
       width=st.floats(min_value=1.0, max_value=30.0))
def test_dominant_angle_recovers_rectangle_rotation(angle, width):
    c, s = math.cos(math.radians(angle)), math.sin(math.radians(angle))
    rect = np.array([[0, 0], [width, 0], [width, 3.0], [0, 3.0]])
    rot = rect @ np.array([[c, s], [-s, c]])
    nodes = {i + 1: tuple(p) for i, p in enumerate(rot)}
    doc = _doc(nodes, [(10, [1, 2, 3, 4, 1], {"building": "y"})])
    osm = project_to_local(parse_osm(doc), "planar")
    got = dominant_angle(osm, bin_width_deg=0.5)
    err = abs(got - angle)
    assert min(err, 90.0 - err) <= 0.5
