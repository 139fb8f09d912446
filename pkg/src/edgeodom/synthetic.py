"""Synthetic wireframe scenes with exact geometry for end-to-end testing.

Scenes are sets of 3D line segments rendered as anti-aliased dark ridges on a
bright background, together with a depth image (valid in a band around each
segment), the analytic edge mask, and exact per-edge depths. Deterministic
functions of their parameters; fixtures are generator parameters, not images.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .dataset import DEPTH_SCALE, TrajectoryEntry, write_trajectory
from .geometry import CameraIntrinsics, Pose, so3_exp

BACKGROUND = 200.0
FOREGROUND = 40.0
RIDGE_SIGMA = 0.8    # pixels; soft step so Canny gradients are well defined
DEPTH_BAND = 3.0     # pixels around the centerline carrying segment depth
MIN_Z = 0.1          # near-plane clip, meters


class EmptyFrameError(RuntimeError):
    """No scene geometry is visible from the requested pose."""


@dataclass(frozen=True)
class SyntheticScene:
    """3D line segments in the world frame, (M, 2, 3) meters."""

    segments: np.ndarray
    background: float = BACKGROUND
    foreground: float = FOREGROUND


@dataclass(frozen=True)
class RenderedFrame:
    gray: np.ndarray           # (H, W) uint8
    depth: np.ndarray          # (H, W) meters; 0 = missing
    analytic_mask: np.ndarray  # (H, W) bool, exact centerline pixels
    analytic_depth: np.ndarray  # (H, W) meters at centerline pixels, else 0


def wire_box(center, size) -> np.ndarray:
    """The 12 edges of an axis-aligned box, as (12, 2, 3) segments."""
    c = np.asarray(center, dtype=float)
    s = np.asarray(size, dtype=float) / 2.0
    corners = np.array(
        [
            c + s * np.array([sx, sy, sz])
            for sx in (-1, 1)
            for sy in (-1, 1)
            for sz in (-1, 1)
        ]
    )
    edges = []
    for i in range(8):
        for j in range(i + 1, 8):
            if np.sum(np.abs(corners[i] - corners[j]) > 1e-9) == 1:
                edges.append([corners[i], corners[j]])
    return np.array(edges)


def grid_wall(center, width, height, nx, ny) -> np.ndarray:
    """A lattice of segments on a plane facing -z, (nx+ny+2, 2, 3)."""
    c = np.asarray(center, dtype=float)
    segs = []
    for i in range(nx + 1):
        x = c[0] - width / 2 + i * width / nx
        segs.append(
            [[x, c[1] - height / 2, c[2]], [x, c[1] + height / 2, c[2]]]
        )
    for j in range(ny + 1):
        y = c[1] - height / 2 + j * height / ny
        segs.append([[c[0] - width / 2, y, c[2]], [c[0] + width / 2, y, c[2]]])
    return np.array(segs)


def rotate_segments(segments, rotvec, center) -> np.ndarray:
    """Rotate segments about `center` by the axis-angle vector `rotvec`.

    Slanting geometry this way avoids image-axis-aligned lines, whose
    detected pixels all share one sub-pixel phase and would bias alignment.
    """
    R = so3_exp(np.asarray(rotvec, dtype=float))
    c = np.asarray(center, dtype=float)
    return (np.asarray(segments, dtype=float) - c) @ R.T + c


def default_scene(seed: int = 0) -> SyntheticScene:
    """A slanted box wireframe in front of a lattice wall; moderately edge-rich."""
    rng = np.random.default_rng(seed)
    segs = [
        rotate_segments(
            wire_box([0.0, 0.0, 2.2], [1.0, 0.8, 0.6]), [0.15, 0.25, 0.2], [0.0, 0.0, 2.2]
        )
    ]
    segs.append(
        rotate_segments(
            grid_wall([0.0, 0.0, 3.2], 3.2, 2.4, 6, 5), [0.05, 0.1, 0.18], [0.0, 0.0, 3.2]
        )
    )
    # A few random slanted rods for gradient-direction variety.
    for _ in range(8):
        a = rng.uniform([-1.2, -0.9, 1.8], [1.2, 0.9, 3.0])
        b = a + rng.uniform(-0.8, 0.8, size=3)
        b[2] = np.clip(b[2], 1.6, 3.1)
        segs.append(np.array([[a, b]]))
    return SyntheticScene(segments=np.concatenate(segs, axis=0))


def rich_scene(seed: int = 0) -> SyntheticScene:
    """A dense lattice scene producing thousands of candidate edges."""
    segs = [
        rotate_segments(
            wire_box([0.0, 0.0, 2.2], [1.0, 0.8, 0.6]), [0.15, 0.25, 0.2], [0.0, 0.0, 2.2]
        ),
        rotate_segments(
            grid_wall([0.0, 0.0, 3.2], 3.6, 2.8, 14, 11), [0.05, 0.1, 0.18], [0.0, 0.0, 3.2]
        ),
    ]
    rng = np.random.default_rng(seed)
    for _ in range(14):
        a = rng.uniform([-1.4, -1.0, 1.7], [1.4, 1.0, 3.0])
        b = a + rng.uniform(-0.9, 0.9, size=3)
        b[2] = np.clip(b[2], 1.5, 3.1)
        segs.append(np.array([[a, b]]))
    return SyntheticScene(segments=np.concatenate(segs, axis=0))


def sparse_scene(seed: int = 0) -> SyntheticScene:
    """A low-edge scene (single slanted box), cabinet-like."""
    return SyntheticScene(
        segments=rotate_segments(
            wire_box([0.0, 0.0, 2.2], [1.2, 0.9, 0.7]), [0.2, 0.3, 0.15], [0.0, 0.0, 2.2]
        )
    )


def cube_scene() -> SyntheticScene:
    """A close slanted cube with two supporting boxes; strong parallax.

    Near geometry at full resolution gives sub-millimeter pose sensitivity
    per pixel, which the accuracy checks on small motions rely on.
    """
    segs = [
        rotate_segments(
            wire_box([0.0, 0.0, 1.2], [0.8, 0.8, 0.8]), [0.2, 0.3, 0.25], [0.0, 0.0, 1.2]
        ),
        rotate_segments(
            wire_box([-0.55, 0.35, 1.8], [0.5, 0.5, 0.5]), [0.3, 0.1, 0.25], [-0.55, 0.35, 1.8]
        ),
        rotate_segments(
            wire_box([0.6, -0.35, 2.0], [0.6, 0.4, 0.5]), [0.12, 0.35, 0.1], [0.6, -0.35, 2.0]
        ),
    ]
    return SyntheticScene(segments=np.concatenate(segs, axis=0))


def default_intrinsics(width: int = 320, height: int = 240) -> CameraIntrinsics:
    f = 262.5 * width / 320.0
    return CameraIntrinsics(f, f, width / 2.0 - 0.5, height / 2.0 - 0.5, width, height)


def _clip_segment(A, B, zmin=MIN_Z):
    """Clip a camera-frame segment to z >= zmin; None if fully behind."""
    za, zb = A[2], B[2]
    if za < zmin and zb < zmin:
        return None
    if za >= zmin and zb >= zmin:
        return A, B
    t = (zmin - za) / (zb - za)
    P = A + t * (B - A)
    return (P, B) if za < zmin else (A, P)


def render_frame(
    scene: SyntheticScene, pose_wc: Pose, intr: CameraIntrinsics
) -> RenderedFrame:
    """Rasterize the scene from a camera pose (camera-to-world transform).

    Ridge intensity uses a Gaussian cross-section of sigma RIDGE_SIGMA so
    Canny finds clean flanks within a pixel of the centerline. Depth is
    perspective-correct along each segment and valid in a DEPTH_BAND-pixel
    band; elsewhere it is 0 (missing).
    """
    h, w = intr.height, intr.width
    T_cw = pose_wc.inverse()
    ridge = np.zeros((h, w))
    depth = np.full((h, w), np.inf)
    analytic_mask = np.zeros((h, w), dtype=bool)
    analytic_depth = np.zeros((h, w))
    any_visible = False
    for seg in scene.segments:
        clipped = _clip_segment(T_cw.apply(seg[0]), T_cw.apply(seg[1]))
        if clipped is None:
            continue
        A, B = clipped
        a2 = np.array([intr.fx * A[0] / A[2] + intr.cx, intr.fy * A[1] / A[2] + intr.cy])
        b2 = np.array([intr.fx * B[0] / B[2] + intr.cx, intr.fy * B[1] / B[2] + intr.cy])
        lo = np.floor(np.minimum(a2, b2) - DEPTH_BAND - 1).astype(int)
        hi = np.ceil(np.maximum(a2, b2) + DEPTH_BAND + 1).astype(int)
        x0, y0 = np.maximum(lo, 0)
        x1 = min(hi[0], w - 1)
        y1 = min(hi[1], h - 1)
        if x1 < x0 or y1 < y0:
            continue
        any_visible = True
        ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        P = np.stack([xs, ys], axis=-1).astype(float)
        d = b2 - a2
        L2 = float(d @ d)
        if L2 < 1e-12:
            t = np.zeros(P.shape[:2])
        else:
            t = np.clip(((P - a2) @ d) / L2, 0.0, 1.0)
        closest = a2 + t[..., None] * d
        dist = np.linalg.norm(P - closest, axis=-1)
        # Perspective-correct depth: 1/z is linear in image space.
        inv_z = (1.0 - t) / A[2] + t / B[2]
        z = 1.0 / inv_z
        patch = np.exp(-(dist**2) / (2.0 * RIDGE_SIGMA**2))
        sub = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        ridge[sub] = np.maximum(ridge[sub], patch)
        band = dist < DEPTH_BAND
        depth_patch = depth[sub]
        depth[sub] = np.where(band & (z < depth_patch), z, depth_patch)
        center = dist < 0.5
        closer = z < np.where(analytic_depth[sub] > 0, analytic_depth[sub], np.inf)
        take = center & closer
        analytic_mask[sub] |= center
        analytic_depth[sub] = np.where(take, z, analytic_depth[sub])
    if not any_visible:
        raise EmptyFrameError("no scene geometry in view")
    gray = np.clip(
        np.round(scene.background - (scene.background - scene.foreground) * ridge),
        0,
        255,
    ).astype(np.uint8)
    depth[np.isinf(depth)] = 0.0
    return RenderedFrame(
        gray=gray, depth=depth, analytic_mask=analytic_mask, analytic_depth=analytic_depth
    )


def _look_at(position, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose with +z toward `target` (image y along `up`)."""
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(np.asarray(up, dtype=float), fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return Pose(R, position)


def generate_trajectory(
    kind: str,
    length: int,
    step: float = 0.01,
    radius: float = 2.2,
    center=(0.0, 0.0, 2.2),
) -> list:
    """Exact camera-to-world pose sequences: static, line, or orbit.

    `step` is meters per frame (arc length for orbits). An orbit whose total
    arc equals the full circumference closes exactly.
    """
    center = np.asarray(center, dtype=float)
    poses = []
    if kind == "static":
        poses = [Pose.identity() for _ in range(length)]
    elif kind == "line":
        for i in range(length):
            poses.append(Pose(np.eye(3), np.array([i * step, 0.0, 0.0])))
    elif kind == "orbit":
        for i in range(length):
            theta = i * step / radius
            pos = center + radius * np.array([np.sin(theta), 0.0, -np.cos(theta)])
            poses.append(_look_at(pos, center))
    else:
        raise ValueError(f"unknown trajectory kind: {kind}")
    return poses


def materialize_tum(
    scene: SyntheticScene,
    poses,
    intr: CameraIntrinsics,
    out_dir,
    fps: float = 30.0,
):
    """Write a rendered sequence in the TUM on-disk layout."""
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines, depth_lines, gt_entries = [], [], []
    for i, pose in enumerate(poses):
        ts = i / fps
        frame = render_frame(scene, pose, intr)
        name = f"{ts:.6f}.png"
        cv2.imwrite(str(out / "rgb" / name), cv2.cvtColor(frame.gray, cv2.COLOR_GRAY2BGR))
        depth16 = np.clip(np.round(frame.depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)
        cv2.imwrite(str(out / "depth" / name), depth16)
        rgb_lines.append(f"{ts:.6f} rgb/{name}")
        depth_lines.append(f"{ts:.6f} depth/{name}")
        gt_entries.append(TrajectoryEntry.from_pose(ts, pose))
    (out / "rgb.txt").write_text("# timestamp filename\n" + "\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text("# timestamp filename\n" + "\n".join(depth_lines) + "\n")
    write_trajectory(gt_entries, out / "groundtruth.txt")
    return out
