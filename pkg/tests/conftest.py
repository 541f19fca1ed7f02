"""Shared fixtures: a small synthetic dataset reused across test modules and
the collector that prints one line per acceptance criterion at the end of the
run (pytest captures stdout of passing tests, a terminal-summary hook does
not get captured)."""

from __future__ import annotations

import numpy as np
import pytest

from parkingtwin.synthbench import demo_scene, synth_dataset
from parkingtwin.tsdf_geometry import TriangleMesh

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_scene_spec():
    """24 frames at 320x180, coarse voxels: cheap but exercises every stage.

    Frame count is a whole number of exposure periods (mean exposure 1.0)
    and each lap covers 1.5 periods so a wall patch is seen at opposing
    exposure phases.
    """
    return demo_scene(n_frames=24, seed=11, width=320, height=180,
                      fx=160.0, fy=160.0, voxel_size=0.2,
                      exposure_period=8)


@pytest.fixture(scope="session")
def small_dataset(small_scene_spec, tmp_path_factory):
    root = tmp_path_factory.mktemp("ds_small")
    synth_dataset(small_scene_spec, root)
    return root


def make_grid_mesh(n_cells: int, spacing: float) -> TriangleMesh:
    """Planar triangulated (n+1)^2 vertex grid in the z=0 plane."""
    n = n_cells + 1
    ys, xs = np.mgrid[0:n, 0:n]
    verts = np.stack([xs.ravel() * spacing, ys.ravel() * spacing,
                      np.zeros(n * n)], axis=1)
    cells = np.arange(n_cells)
    a = (cells[:, None] * n + cells[None, :]).ravel()
    faces = np.empty((2 * len(a), 3), dtype=np.int64)
    faces[0::2] = np.stack([a, a + 1, a + n + 1], axis=1)
    faces[1::2] = np.stack([a, a + n + 1, a + n], axis=1)
    return TriangleMesh(vertices=verts, faces=faces)
