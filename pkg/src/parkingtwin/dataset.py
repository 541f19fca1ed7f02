"""Dataset directory I/O: images, intrinsics, trajectories, frame streaming.

Layout expected under a dataset root:

    map.osm          blueprint
    intrinsics.txt   `fx= fy= cx= cy= width= height= depth_scale=`
    trajectory.txt   one line per frame: index tx ty tz qx qy qz qw
    rgb/000123.png   8-bit color
    depth/000123.png 16-bit grayscale, meters = raw * depth_scale

Poses are camera-to-world with the quaternion scalar last. Structural
problems (missing files, index sets that disagree, malformed trajectory
lines) fail at startup; per-frame decode problems skip that frame with a
warning so a long capture with a few bad images still reconstructs.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError
from .projection import CameraFrame, Intrinsics

log = logging.getLogger(__name__)

FRAME_NAME = "{:06d}.png"


# ---------------------------------------------------------------------------
# images

def write_rgb_png(path: str | Path, rgb: np.ndarray) -> None:
    arr = np.ascontiguousarray(rgb, dtype=np.uint8)
    Image.fromarray(arr, mode="RGB").save(str(path))


def read_rgb_png(path: str | Path) -> np.ndarray:
    with Image.open(str(path)) as im:
        out = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return out


def write_depth_png(path: str | Path, depth_m: np.ndarray,
                    depth_scale: float = 0.001) -> None:
    """Store metric depth as 16-bit PNG. Non-finite or non-positive depth
    maps to raw 0, the invalid sentinel."""
    d = np.asarray(depth_m, dtype=np.float64)
    raw = np.rint(d / depth_scale)
    raw[~np.isfinite(d) | (d <= 0)] = 0
    raw = np.clip(raw, 0, 65535).astype(np.uint16)
    Image.fromarray(raw, mode="I;16").save(str(path))


def read_depth_png(path: str | Path, depth_scale: float = 0.001) -> np.ndarray:
    """Metric depth in meters; raw 0 decodes to 0.0 (invalid)."""
    with Image.open(str(path)) as im:
        raw = np.asarray(im, dtype=np.uint16)
    if raw.ndim != 2:
        raise DatasetError(f"{path}: depth PNG must be single-channel")
    return raw.astype(np.float64) * depth_scale


# ---------------------------------------------------------------------------
# intrinsics

_REQUIRED_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def write_intrinsics(path: str | Path, K: Intrinsics) -> None:
    text = (f"fx={float(K.fx)!r} fy={float(K.fy)!r} "
            f"cx={float(K.cx)!r} cy={float(K.cy)!r}\n"
            f"width={int(K.width)} height={int(K.height)} "
            f"depth_scale={float(K.depth_scale)!r}\n")
    Path(path).write_text(text)


def read_intrinsics(path: str | Path) -> Intrinsics:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read intrinsics file {path}: {exc}") from exc
    values: dict[str, float] = {}
    for token in text.split():
        if token.startswith("#"):
            continue
        m = re.fullmatch(r"([A-Za-z_]+)=([-+0-9.eE]+)", token)
        if m is None:
            raise DatasetError(f"{path}: malformed intrinsics token {token!r}")
        values[m.group(1)] = float(m.group(2))
    missing = [k for k in _REQUIRED_KEYS if k not in values]
    if missing:
        raise DatasetError(f"{path}: missing intrinsics keys {missing}")
    K = Intrinsics(fx=values["fx"], fy=values["fy"],
                   cx=values["cx"], cy=values["cy"],
                   width=int(values["width"]), height=int(values["height"]),
                   depth_scale=values.get("depth_scale", 0.001))
    K.validate()
    return K


# ---------------------------------------------------------------------------
# poses

def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) to a 3x3 rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64)
    n = math.sqrt(x * x + y * y + z * z + w * w)
    if n < 1e-12:
        raise DatasetError("zero-norm quaternion")
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """3x3 rotation to quaternion (x, y, z, w), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0)) * 2
        q = np.empty(3)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        w = (R[k, j] - R[j, k]) / s
        x, y, z = q
    quat = np.array([x, y, z, w])
    if quat[3] < 0:
        quat = -quat
    return quat / np.linalg.norm(quat)


def pose_from_parts(t: np.ndarray, q: np.ndarray) -> np.ndarray:
    pose = np.eye(4)
    pose[:3, :3] = quat_to_rot(q)
    pose[:3, 3] = np.asarray(t, dtype=np.float64)
    return pose


def write_trajectory(path: str | Path, poses: dict[int, np.ndarray]) -> None:
    lines = []
    for idx in sorted(poses):
        pose = poses[idx]
        q = rot_to_quat(pose[:3, :3])
        t = pose[:3, 3]
        fields = [repr(float(x)) for x in (*t, *q)]
        lines.append(f"{idx} " + " ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: str | Path) -> dict[int, np.ndarray]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read trajectory file {path}: {exc}") from exc
    poses: dict[int, np.ndarray] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetError(
                f"{path}:{lineno}: expected 8 fields "
                f"(index tx ty tz qx qy qz qw), got {len(parts)}")
        try:
            idx = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
        if not all(math.isfinite(v) for v in vals):
            raise DatasetError(f"{path}:{lineno}: non-finite pose value")
        if idx in poses:
            raise DatasetError(f"{path}:{lineno}: duplicate frame index {idx}")
        try:
            poses[idx] = pose_from_parts(np.array(vals[:3]), np.array(vals[3:]))
        except DatasetError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return poses


# ---------------------------------------------------------------------------
# dataset streaming

@dataclass
class Dataset:
    root: Path
    intrinsics: Intrinsics
    poses: dict[int, np.ndarray]
    frame_indices: list[int]
    skipped: list[int] = field(default_factory=list)

    @property
    def map_path(self) -> Path:
        return self.root / "map.osm"

    def frame_paths(self, index: int) -> tuple[Path, Path]:
        name = FRAME_NAME.format(index)
        return self.root / "rgb" / name, self.root / "depth" / name

    def iter_frames(self) -> Iterator[CameraFrame]:
        """Yield decodable frames in ascending index order.

        Frames whose rgb or depth image fails to decode (or whose shape
        disagrees with the intrinsics) are recorded in `skipped` and logged,
        never raised: one bad file must not kill a long reconstruction.
        """
        K = self.intrinsics
        for idx in self.frame_indices:
            rgb_path, depth_path = self.frame_paths(idx)
            try:
                rgb = read_rgb_png(rgb_path)
                depth = read_depth_png(depth_path, K.depth_scale)
            except (OSError, UnidentifiedImageError, DatasetError,
                    ValueError) as exc:
                log.warning("frame %d skipped: %s", idx, exc)
                self.skipped.append(idx)
                continue
            if rgb.shape[:2] != (K.height, K.width) or depth.shape != (K.height, K.width):
                log.warning("frame %d skipped: image size %s/%s does not match "
                            "intrinsics %dx%d", idx, rgb.shape[:2], depth.shape,
                            K.width, K.height)
                self.skipped.append(idx)
                continue
            yield CameraFrame(index=idx, rgb=rgb, depth=depth,
                              pose=self.poses[idx])


def load_dataset(root: str | Path) -> Dataset:
    """Open a dataset directory, validating structure up front.

    Missing mandatory files and rgb/trajectory index mismatches are startup
    errors; per-frame image decoding is deferred to iter_frames.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    for required in ("rgb", "depth"):
        if not (root / required).is_dir():
            raise DatasetError(f"{root}: missing {required}/ directory")
    traj_path = root / "trajectory.txt"
    intr_path = root / "intrinsics.txt"
    for f in (traj_path, intr_path):
        if not f.is_file():
            raise DatasetError(f"{root}: missing {f.name}")

    K = read_intrinsics(intr_path)
    poses = read_trajectory(traj_path)

    rgb_indices = set()
    for p in (root / "rgb").glob("*.png"):
        try:
            rgb_indices.add(int(p.stem))
        except ValueError:
            log.warning("ignoring non-numeric rgb file %s", p.name)

    pose_indices = set(poses)
    if rgb_indices != pose_indices:
        only_rgb = sorted(rgb_indices - pose_indices)[:10]
        only_traj = sorted(pose_indices - rgb_indices)[:10]
        raise DatasetError(
            f"{root}: rgb/ and trajectory.txt index sets disagree "
            f"(rgb-only: {only_rgb}, trajectory-only: {only_traj})")

    indices = sorted(rgb_indices)
    skipped = []
    # depth missing for an rgb frame is a skip, not a startup failure
    usable = []
    for idx in indices:
        if (root / "depth" / FRAME_NAME.format(idx)).is_file():
            usable.append(idx)
        else:
            log.warning("frame %d skipped: no depth image", idx)
            skipped.append(idx)
    if not usable:
        log.warning("%s: no usable frames", root)
    return Dataset(root=root, intrinsics=K, poses=poses,
                   frame_indices=usable, skipped=skipped)
