"""Occupancy rasterization, signed distance, surface extraction, mesh I/O."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mesh_volume, signed_distance_brute
from parkingtwin.errors import ConfigError
from parkingtwin.osm_ingest import parse_osm, project_to_local
from parkingtwin.tsdf_geometry import (OccupancyGrid, TriangleMesh,
                                       TsdfParams, TsdfVolume,
                                       build_blueprint_mesh,
                                       distance_field_2d, extrude_tsdf,
                                       marching_cubes, rasterize_occupancy,
                                       read_obj, read_ply, write_obj,
                                       write_ply)


def _ring_map(outer=8.0, thickness=0.5):
    """Square wall ring: nested building loops, even-odd fill."""
    t = thickness
    doc = ['<?xml version="1.0"?><osm version="0.6">']
    pts_outer = [(0, 0), (outer, 0), (outer, outer), (0, outer)]
    pts_inner = [(t, t), (outer - t, t), (outer - t, outer - t), (t, outer - t)]
    nid = 1
    for x, y in pts_outer + pts_inner:
        doc.append(f'<node id="{nid}" lat="{y}" lon="{x}"/>')
        nid += 1
    doc.append('<way id="10">' + "".join(f'<nd ref="{r}"/>' for r in [1, 2, 3, 4, 1])
               + '<tag k="building" v="yes"/></way>')
    doc.append('<way id="11">' + "".join(f'<nd ref="{r}"/>' for r in [5, 6, 7, 8, 5])
               + '<tag k="building" v="yes"/></way>')
    doc.append("</osm>")
    return project_to_local(parse_osm("".join(doc)), "planar")


def test_occupancy_even_odd_ring_is_hollow():
    osm = _ring_map(outer=8.0, thickness=0.5)
    occ = rasterize_occupancy(osm, TsdfParams(voxel_size=0.1, padding=0.5))
    xs, ys = occ.cell_centers()
    cx = np.searchsorted(xs, 4.0)
    cy = np.searchsorted(ys, 4.0)
    assert not occ.solid[cx, cy]  # hollow interior
    assert occ.solid[np.searchsorted(xs, 0.25), cy]  # inside the band
    # exact area: 8^2 - 7^2 = 15 m^2 of wall band
    assert occ.solid.sum() * 0.1 ** 2 == pytest.approx(15.0, rel=0.02)


def test_occupancy_survives_grid_aligned_edges():
    # Round map coordinates with voxel 0.2 and padding 0.5 put cell centers
    # exactly on the wall-band edges; the parity test must not drop the band.
    osm = _ring_map(outer=8.0, thickness=0.2)
    occ = rasterize_occupancy(osm, TsdfParams(voxel_size=0.2, padding=0.5))
    area = occ.solid.sum() * 0.2 ** 2
    assert area == pytest.approx(8 ** 2 - 7.6 ** 2, rel=0.05)
    assert area > 0


def test_occupancy_open_wall_way_becomes_band():
    doc = ('<?xml version="1.0"?><osm version="0.6">'
           '<node id="1" lat="0.0" lon="0.0"/><node id="2" lat="0.0" lon="4.0"/>'
           '<way id="9"><nd ref="1"/><nd ref="2"/><tag k="wall" v="yes"/></way>'
           "</osm>")
    osm = project_to_local(parse_osm(doc), "planar")
    occ = rasterize_occupancy(osm, TsdfParams(voxel_size=0.1, wall_thickness=0.4,
                                              padding=1.0))
    # 4 m centerline buffered to 0.4 m, plus rounded cell boundary slack
    area = occ.solid.sum() * 0.1 ** 2
    assert area == pytest.approx(4.0 * 0.4, rel=0.15)


def test_tsdf_params_validation():
    with pytest.raises(ConfigError):
        TsdfParams(voxel_size=0.0).validate()
    with pytest.raises(ConfigError):
        TsdfParams(height=-1.0).validate()
    assert TsdfParams(voxel_size=0.1).resolved_tau() == pytest.approx(0.3)


def test_distance_field_matches_brute_force_exactly():
    rng = np.random.default_rng(3)
    for _ in range(8):
        shape = rng.integers(4, 24, size=2)
        solid = rng.random(shape) < 0.3
        solid[rng.integers(0, shape[0]), rng.integers(0, shape[1])] = True
        solid[rng.integers(0, shape[0]), rng.integers(0, shape[1])] = False
        occ = OccupancyGrid(solid, np.zeros(2), 0.25)
        got = distance_field_2d(occ)
        want = signed_distance_brute(solid, 0.25)
        np.testing.assert_array_equal(got, want)


def test_distance_field_degenerate_grids():
    all_free = OccupancyGrid(np.zeros((4, 4), bool), np.zeros(2), 0.1)
    assert np.isposinf(distance_field_2d(all_free)).all()
    all_solid = OccupancyGrid(np.ones((4, 4), bool), np.zeros(2), 0.1)
    assert np.isneginf(distance_field_2d(all_solid)).all()


def test_extrusion_sign_and_caps():
    solid = np.zeros((9, 9), bool)
    solid[3:6, 3:6] = True
    occ = OccupancyGrid(solid, np.zeros(2), 0.5)
    params = TsdfParams(voxel_size=0.5, height=2.0, z_ground=0.0)
    vol = extrude_tsdf(distance_field_2d(occ), occ, params)

    tau = params.resolved_tau()
    assert vol.values.shape == (9, 9, 6)  # 4 slab layers + 2 caps
    assert (vol.values[:, :, 0] == tau).all()
    assert (vol.values[:, :, -1] == tau).all()
    assert (vol.values[4, 4, 1:-1] < 0).all()  # inside the block
    assert (np.abs(vol.values) <= tau).all()


def _sphere_volume(radius=0.8, voxel=0.1, n=24):
    origin = np.full(3, -(n - 1) / 2.0 * voxel)
    ax = origin[0] + np.arange(n) * voxel
    d = np.sqrt(ax[:, None, None] ** 2 + ax[None, :, None] ** 2
                + ax[None, None, :] ** 2) - radius
    return TsdfVolume(d, origin, voxel, tau=10.0)


def test_marching_cubes_sphere_is_closed_and_accurate():
    radius = 0.8
    mesh = marching_cubes(_sphere_volume(radius))
    assert mesh.is_closed_manifold()
    assert mesh.euler_characteristic() == 2

    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - radius).max() < 0.05  # vertices on the level set

    vol = mesh_volume(mesh.vertices, mesh.faces)
    assert vol == pytest.approx(4.0 / 3.0 * math.pi * radius ** 3, rel=0.02)

    # normals follow the winding outward, toward positive field values
    mesh.recompute_normals()
    outward = np.einsum("ij,ij->i", mesh.normals, mesh.vertices)
    assert (outward > 0).all()


def test_marching_cubes_empty_and_degenerate_volumes():
    full = TsdfVolume(np.ones((4, 4, 4)), np.zeros(3), 0.1, 0.3)
    assert marching_cubes(full).n_faces == 0
    thin = TsdfVolume(np.ones((1, 4, 4)), np.zeros(3), 0.1, 0.3)
    assert thin.values.shape[0] == 1 and marching_cubes(thin).n_faces == 0


def test_mesh_helpers_on_tetrahedron():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    mesh = TriangleMesh(verts, faces)
    edges, counts = mesh.edge_counts()
    assert len(edges) == 6 and (counts == 2).all()
    assert mesh.is_closed_manifold()
    assert mesh.euler_characteristic() == 2
    assert (mesh.connected_components() == 0).all()

    両 = TriangleMesh.concatenate([mesh, mesh])
    assert 両.n_vertices == 8 and 両.n_faces == 8
    assert set(両.connected_components()) == {0, 1}

    offsets, face_idx = mesh.vertex_faces()
    assert offsets[-1] == 12  # 4 faces x 3 corners
    assert sorted(face_idx[offsets[0]:offsets[1]]) == [0, 1, 2]


def test_blueprint_mesh_is_watertight_with_floor():
    osm = _ring_map(outer=6.0, thickness=0.4)
    params = TsdfParams(voxel_size=0.2, height=2.5)
    mesh, report = build_blueprint_mesh(osm, params)
    assert report["watertight"]
    assert mesh.is_closed_manifold()
    # wall ring and floor slab are separate closed components
    labels = mesh.connected_components()
    assert len(set(labels)) == 2
    # floor top face sits exactly at ground level
    floor = labels == labels[np.argmin(mesh.vertices[:, 2])]
    assert mesh.vertices[floor, 2].max() == pytest.approx(0.0, abs=1e-9)
    assert report["solid_area_m2"] == pytest.approx(6 ** 2 - 5.2 ** 2, rel=0.05)


def test_blueprint_mesh_without_floor_is_single_ring():
    osm = _ring_map(outer=6.0, thickness=0.4)
    mesh, _ = build_blueprint_mesh(osm, TsdfParams(voxel_size=0.2, floor=False))
    assert mesh.is_closed_manifold()
    assert set(mesh.connected_components()) == {0}
    # a closed ring prism is a torus: Euler characteristic 0
    assert mesh.euler_characteristic() == 0


def test_ply_round_trip_bit_exact(tmp_path):
    mesh = marching_cubes(_sphere_volume(n=10))
    mesh.colors_rgb = np.random.default_rng(5).integers(
        0, 256, (mesh.n_vertices, 3), dtype=np.uint8)
    path = tmp_path / "m.ply"
    write_ply(mesh, path)
    back = read_ply(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.faces, mesh.faces)
    np.testing.assert_array_equal(back.colors_rgb, mesh.colors_rgb)
    np.testing.assert_allclose(back.normals, mesh.normals, atol=1e-7)


def test_obj_round_trip(tmp_path):
    mesh = marching_cubes(_sphere_volume(n=8))
    mesh.colors_rgb = np.full((mesh.n_vertices, 3), 99, dtype=np.uint8)
    path = tmp_path / "m.obj"
    write_obj(mesh, path)
    back = read_obj(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.faces, mesh.faces)
    np.testing.assert_array_equal(back.colors_rgb, mesh.colors_rgb)


@settings(deadline=None, max_examples=25)
@given(seed=st.integers(0, 10_000))
def test_distance_field_random_grids_property(seed):
    rng = np.random.default_rng(seed)
    shape = rng.integers(2, 16, size=2)
    solid = rng.random(shape) < rng.uniform(0.1, 0.9)
    occ = OccupancyGrid(solid, np.zeros(2), 0.1)
    got = distance_field_2d(occ)
    want = signed_distance_brute(solid, 0.1)
    np.testing.assert_array_equal(got, want)
