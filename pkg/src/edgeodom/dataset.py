"""TUM RGBD sequence ingestion and trajectory file I/O.

Sequences follow the standard on-disk layout (rgb.txt, depth.txt,
groundtruth.txt, rgb/, depth/). Depth PNGs are 16-bit with a 1/5000 scale to
meters; a stored value of 0 means missing depth. Trajectories use the
"timestamp tx ty tz qx qy qz qw" line format.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose

log = logging.getLogger(__name__)

DEPTH_SCALE = 5000.0
ASSOCIATION_TOLERANCE = 0.02  # seconds


class DatasetError(RuntimeError):
    pass


class TrajectoryParseError(ValueError):
    pass


@dataclass(frozen=True)
class RgbdRecord:
    timestamp: float
    gray: np.ndarray   # (H, W) uint8
    depth: np.ndarray  # (H, W) meters; 0 = missing


@dataclass(frozen=True)
class TrajectoryEntry:
    timestamp: float
    translation: np.ndarray  # (3,) meters
    quaternion: np.ndarray   # (4,) (qx, qy, qz, qw), unit norm

    def pose(self) -> Pose:
        R = Rotation.from_quat(self.quaternion).as_matrix()
        return Pose(R, self.translation)

    @staticmethod
    def from_pose(timestamp: float, pose: Pose) -> "TrajectoryEntry":
        q = Rotation.from_matrix(pose.R).as_quat()
        if q[3] < 0:
            q = -q
        return TrajectoryEntry(timestamp, pose.t.copy(), q)


def _read_index(path: Path):
    """Parse a 'timestamp filename' index file, skipping '#' comments."""
    if not path.exists():
        raise DatasetError(f"missing index file: {path}")
    entries = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        entries.append((float(parts[0]), parts[1]))
    entries.sort(key=lambda e: e[0])
    return entries


def associate(rgb_times, depth_times, tolerance=ASSOCIATION_TOLERANCE):
    """Mutual-nearest timestamp association within a tolerance.

    Returns index pairs (i_rgb, i_depth); deterministic for fixed inputs.
    """
    rgb_times = np.asarray(rgb_times)
    depth_times = np.asarray(depth_times)
    if len(rgb_times) == 0 or len(depth_times) == 0:
        return []
    pairs = []
    for i, tr in enumerate(rgb_times):
        j = int(np.argmin(np.abs(depth_times - tr)))
        if abs(depth_times[j] - tr) > tolerance:
            continue
        # symmetric check: tr must be the nearest rgb time to depth[j]
        i_back = int(np.argmin(np.abs(rgb_times - depth_times[j])))
        if i_back == i:
            pairs.append((i, j))
    return pairs


def load_sequence(directory):
    """Stream associated RGBD records from a TUM sequence directory.

    RGB/depth pairs are associated by mutual-nearest timestamp within 0.02 s;
    unmatched entries are dropped (their count is logged). Yields records in
    timestamp order.
    """
    directory = Path(directory)
    rgb_index = _read_index(directory / "rgb.txt")
    depth_index = _read_index(directory / "depth.txt")
    pairs = associate([e[0] for e in rgb_index], [e[0] for e in depth_index])
    dropped = len(rgb_index) - len(pairs)
    if dropped:
        log.info("dropped %d unassociated rgb entries", dropped)
    for i, j in pairs:
        ts, rgb_file = rgb_index[i]
        _, depth_file = depth_index[j]
        rgb = cv2.imread(str(directory / rgb_file), cv2.IMREAD_UNCHANGED)
        depth_raw = cv2.imread(str(directory / depth_file), cv2.IMREAD_UNCHANGED)
        if rgb is None or depth_raw is None:
            log.warning("unreadable image pair at t=%.6f; skipped", ts)
            continue
        if rgb.ndim == 3:
            gray = cv2.cvtColor(rgb, cv2.COLOR_BGR2GRAY)
        else:
            gray = rgb
        depth = depth_raw.astype(float) / DEPTH_SCALE
        yield RgbdRecord(timestamp=ts, gray=gray, depth=depth)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def write_trajectory(entries, path):
    """Write TUM-format trajectory lines, timestamps at 6 decimals."""
    lines = []
    for e in entries:
        fields = [f"{e.timestamp:.6f}"]
        fields += [_fmt(v) for v in e.translation]
        fields += [_fmt(v) for v in e.quaternion]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path):
    """Parse a TUM-format trajectory file."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TrajectoryParseError(
                f"{path}:{lineno}: expected 8 fields, got {len(parts)}"
            )
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise TrajectoryParseError(f"{path}:{lineno}: {exc}") from exc
        q = np.array(vals[4:8])
        norm = np.linalg.norm(q)
        if norm == 0:
            raise TrajectoryParseError(f"{path}:{lineno}: zero quaternion")
        entries.append(
            TrajectoryEntry(
                timestamp=vals[0],
                translation=np.array(vals[1:4]),
                quaternion=q / norm,
            )
        )
    return entries
