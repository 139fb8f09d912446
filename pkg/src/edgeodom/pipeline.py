"""End-to-end odometry: preprocessing, tracking, selection, local mapping.

The system consumes RGBD records and produces a per-frame trajectory,
refined keyframe poses, and per-frame diagnostics. The reference execution
mode is single-threaded (mapping runs synchronously after each keyframe
insertion and is bit-deterministic); a concurrent mode runs local mapping on
a separate thread fed by an ordered keyframe queue.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .dataset import TrajectoryEntry
from .geometry import CameraIntrinsics, Pose
from .mapping import (
    Keyframe,
    SlidingWindow,
    activate_edges,
    choose_marginalization_victim,
    marginalize_keyframe,
    window_optimize,
)
from .selection import cull_edges, select_edges
from .tracking import (
    EdgeSet,
    PreprocessedFrame,
    TrackingLostError,
    extract_edges,
    keyframe_decision,
    preprocess_frame,
    track_frame,
)

log = logging.getLogger(__name__)

DIAGNOSTICS_SCHEMA_VERSION = 1
DIAGNOSTICS_COLUMNS = (
    "timestamp",
    "frame",
    "kf_id",
    "is_keyframe",
    "inliers",
    "tracked_edges",
    "mean_residual",
    "iters_l2",
    "iters_l1",
    "iters_l0",
    "preprocess_ms",
    "track_ms",
    "select_ms",
    "map_ms",
)


class TrackingFailure(RuntimeError):
    def __init__(self, timestamp: float, message: str):
        super().__init__(f"tracking lost at t={timestamp:.6f}: {message}")
        self.timestamp = timestamp


@dataclass
class FrameRecord:
    timestamp: float
    kf_id: int
    rel_pose: Pose  # keyframe camera -> frame camera


class OdometrySystem:
    """Stateful odometry front end plus sliding-window back end."""

    def __init__(self, intr: CameraIntrinsics, config: RunConfig | None = None):
        self.intr = intr
        self.config = config or RunConfig()
        self.window = SlidingWindow(capacity=self.config.window_size)
        self.records: list[FrameRecord] = []
        self.diagnostics: list[dict] = []
        self.kf_poses: dict[int, Pose] = {}   # kf_id -> latest refined pose_cw
        self.kf_refined: dict[int, bool] = {}
        self.kf_timestamps: dict[int, float] = {}
        self._ref_kf: Keyframe | None = None
        self._ref_edges: EdgeSet | None = None
        self._next_kf_id = 0
        self._frame_index = 0
        self._velocity = Pose.identity()        # frame(t-1) -> frame(t) estimate
        self._rel_to_kf = Pose.identity()       # keyframe -> last frame
        self._avg_correspondences = 0.0
        self._lock = threading.Lock()
        self._queue: queue.Queue | None = None
        self._mapper: threading.Thread | None = None
        if not self.config.single_thread:
            self._queue = queue.Queue()
            self._mapper = threading.Thread(target=self._mapping_loop, daemon=True)
            self._mapper.start()

    # -- mapping back end --------------------------------------------------

    def _map_insert(self, kf: Keyframe):
        self.window.insert(kf)
        activate_edges(kf, self.window, self.intr)
        window_optimize(
            self.window,
            self.intr,
            iterations=self.config.window_iterations,
            huber_delta=self.config.tracking.huber_delta,
        )
        victim = choose_marginalization_victim(self.window)
        if victim is not None:
            marginalize_keyframe(self.window, victim, self.intr)
        with self._lock:
            for w_kf in self.window.keyframes:
                self.kf_poses[w_kf.kf_id] = w_kf.pose_cw
                self.kf_refined[w_kf.kf_id] = True

    def _mapping_loop(self):
        while True:
            kf = self._queue.get()
            if kf is None:
                return
            try:
                self._map_insert(kf)
            except Exception:
                log.exception("mapping failed for keyframe %d", kf.kf_id)

    def _submit_keyframe(self, kf: Keyframe):
        if self.config.use_mapping:
            if self._queue is None:
                self._map_insert(kf)
            else:
                self._queue.put(kf)
        else:
            with self._lock:
                self.kf_poses[kf.kf_id] = kf.pose_cw
                self.kf_refined[kf.kf_id] = False

    # -- front end ---------------------------------------------------------

    def _keyframe_edges(self, frame: PreprocessedFrame, prior: Pose):
        candidates = extract_edges(frame)
        if self.config.use_selection:
            return select_edges(
                candidates, frame.pyramid[0], prior, self.intr, self.config.selection
            )
        idx = cull_edges(candidates, self.config.selection.canny_high)
        return candidates.take(idx)

    def _make_keyframe(self, frame: PreprocessedFrame, pose_cw: Pose, prior: Pose):
        edges = self._keyframe_edges(frame, prior)
        kf = Keyframe(
            kf_id=self._next_kf_id,
            timestamp=frame.timestamp,
            pose_cw=pose_cw,
            edges=edges,
            pyramid=frame.pyramid,
            edge_map=frame.edge_map,
        )
        self._next_kf_id += 1
        with self._lock:
            self.kf_poses[kf.kf_id] = pose_cw
            self.kf_refined[kf.kf_id] = False
            self.kf_timestamps[kf.kf_id] = frame.timestamp
        self._ref_kf = kf
        self._rel_to_kf = Pose.identity()
        return kf

    def process(self, timestamp: float, gray: np.ndarray, depth: np.ndarray) -> dict:
        """Ingest one frame; returns the diagnostics row for it."""
        diag = {c: 0 for c in DIAGNOSTICS_COLUMNS}
        diag["timestamp"] = timestamp
        diag["frame"] = self._frame_index
        t0 = time.perf_counter()
        frame = preprocess_frame(gray, depth, timestamp, self.config.tracking)
        diag["preprocess_ms"] = 1000.0 * (time.perf_counter() - t0)

        if self._ref_kf is None:
            t1 = time.perf_counter()
            kf = self._make_keyframe(frame, Pose.identity(), Pose.identity())
            diag["select_ms"] = 1000.0 * (time.perf_counter() - t1)
            t2 = time.perf_counter()
            self._submit_keyframe(kf)
            diag["map_ms"] = 1000.0 * (time.perf_counter() - t2)
            diag["is_keyframe"] = 1
            diag["kf_id"] = kf.kf_id
            diag["tracked_edges"] = len(kf.edges)
            self.records.append(FrameRecord(timestamp, kf.kf_id, Pose.identity()))
            self._avg_correspondences = float(len(kf.edges))
            self._frame_index += 1
            self.diagnostics.append(diag)
            return diag

        kf = self._ref_kf
        prior = self._velocity @ self._rel_to_kf
        t1 = time.perf_counter()
        try:
            result = track_frame(kf.edges, frame, prior, self.intr, self.config.tracking)
        except TrackingLostError:
            try:
                result = track_frame(
                    kf.edges, frame, Pose.identity(), self.intr, self.config.tracking
                )
            except TrackingLostError as exc:
                raise TrackingFailure(timestamp, str(exc)) from exc
        diag["track_ms"] = 1000.0 * (time.perf_counter() - t1)

        rel = result.relative_pose
        # The tracked pose inherits the prior's rotation-matrix rounding
        # error, and this composition feeds it back through the next prior;
        # without re-projection onto SO(3) the defect doubles every frame.
        self._velocity = (rel @ self._rel_to_kf.inverse()).renormalized()
        self._rel_to_kf = rel
        self.records.append(FrameRecord(timestamp, kf.kf_id, rel))
        # Age edges that stayed inliers (approximated by all selected edges
        # when the frame converged).
        if result.converged:
            kf.edges = replace(kf.edges, age=kf.edges.age + 1)
        n = len(self.records)
        self._avg_correspondences += (result.inlier_count - self._avg_correspondences) / n

        diag["kf_id"] = kf.kf_id
        diag["inliers"] = result.inlier_count
        diag["tracked_edges"] = len(kf.edges)
        diag["mean_residual"] = result.mean_residual
        for lvl, it in zip((2, 1, 0), result.iterations_per_level):
            diag[f"iters_l{lvl}"] = it

        elapsed = timestamp - kf.timestamp
        if keyframe_decision(
            result, elapsed, self._avg_correspondences, self.config.tracking
        ):
            with self._lock:
                ref_pose_cw = self.kf_poses[kf.kf_id]
            pose_cw = rel @ ref_pose_cw
            t1 = time.perf_counter()
            new_kf = self._make_keyframe(frame, pose_cw, self._velocity)
            diag["select_ms"] = 1000.0 * (time.perf_counter() - t1)
            t2 = time.perf_counter()
            self._submit_keyframe(new_kf)
            diag["map_ms"] = 1000.0 * (time.perf_counter() - t2)
            diag["is_keyframe"] = 1
        self._frame_index += 1
        self.diagnostics.append(diag)
        return diag

    def finish(self):
        """Drain the mapping queue (concurrent mode)."""
        if self._queue is not None:
            self._queue.put(None)
            self._mapper.join()
            self._queue = None

    # -- outputs -----------------------------------------------------------

    def trajectory(self) -> list:
        """Per-frame trajectory composed with the final keyframe poses."""
        entries = []
        with self._lock:
            poses = dict(self.kf_poses)
        for rec in self.records:
            pose_cw = rec.rel_pose @ poses[rec.kf_id]
            entries.append(TrajectoryEntry.from_pose(rec.timestamp, pose_cw.inverse()))
        return entries

    def keyframe_trajectory(self) -> list:
        with self._lock:
            poses = dict(self.kf_poses)
            stamps = dict(self.kf_timestamps)
        return [
            TrajectoryEntry.from_pose(stamps[kid], poses[kid].inverse())
            for kid in sorted(poses)
        ]


def run_sequence(records, intr: CameraIntrinsics, config: RunConfig) -> OdometrySystem:
    """Run the full system over an iterable of RgbdRecords."""
    system = OdometrySystem(intr, config)
    for rec in records:
        system.process(rec.timestamp, rec.gray, rec.depth)
    system.finish()
    return system


def write_diagnostics(diagnostics, path):
    lines = [f"# schema_version={DIAGNOSTICS_SCHEMA_VERSION}"]
    lines.append(",".join(DIAGNOSTICS_COLUMNS))
    for row in diagnostics:
        lines.append(
            ",".join(
                f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c])
                for c in DIAGNOSTICS_COLUMNS
            )
        )
    from pathlib import Path

    Path(path).write_text("\n".join(lines) + "\n")
