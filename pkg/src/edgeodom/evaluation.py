"""Trajectory accuracy (translational ATE RMSE) and timing summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ASSOCIATION_TOLERANCE, associate
from .geometry import Pose


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AteReport:
    rmse: float
    mean: float
    median: float
    max: float
    matched: int
    alignment: Pose
    per_pose_error: np.ndarray

    def __str__(self):
        return (
            f"ATE over {self.matched} matched poses\n"
            f"  rmse   {self.rmse:.6f} m\n"
            f"  mean   {self.mean:.6f} m\n"
            f"  median {self.median:.6f} m\n"
            f"  max    {self.max:.6f} m"
        )


def _horn_alignment(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping src points onto dst (Horn).

    Falls back to translation-only when the point set is degenerate.
    """
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    S = (dst - mu_d).T @ (src - mu_s)
    if np.linalg.matrix_rank(S) == 0:
        return Pose(np.eye(3), mu_d - mu_s)
    U, _, Vt = np.linalg.svd(S)
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    t = mu_d - R @ mu_s
    return Pose(R, t)


def compute_ate(estimated, ground_truth, tolerance=ASSOCIATION_TOLERANCE) -> AteReport:
    """Translational ATE after optimal SE(3) alignment of the trajectories.

    Poses are associated by timestamp within `tolerance` seconds; the
    estimated trajectory is aligned onto the ground truth with the
    orthogonal-Procrustes closed form before computing errors.
    """
    pairs = associate(
        [e.timestamp for e in estimated],
        [g.timestamp for g in ground_truth],
        tolerance,
    )
    if len(pairs) < 2:
        raise EvaluationError(f"only {len(pairs)} associable pose pairs")
    est = np.array([estimated[i].translation for i, _ in pairs])
    gt = np.array([ground_truth[j].translation for _, j in pairs])
    T = _horn_alignment(est, gt)
    aligned = T.apply(est)
    err = np.linalg.norm(aligned - gt, axis=1)
    return AteReport(
        rmse=float(np.sqrt(np.mean(err**2))),
        mean=float(np.mean(err)),
        median=float(np.median(err)),
        max=float(np.max(err)),
        matched=len(pairs),
        alignment=T,
        per_pose_error=err,
    )


def timing_summary(diagnostics) -> dict:
    """Per-stage mean/median/p95 milliseconds and overall frame rate.

    `diagnostics` is an iterable of per-frame records carrying stage timings
    in milliseconds under keys like 'preprocess_ms', 'track_ms', 'select_ms',
    'map_ms'.
    """
    records = list(diagnostics)
    if not records:
        raise EvaluationError("empty diagnostics stream")
    stages = ("preprocess", "track", "select", "map")
    out = {}
    totals = np.zeros(len(records))
    for stage in stages:
        key = f"{stage}_ms"
        vals = np.array([float(r.get(key, 0.0)) for r in records])
        totals += vals
        out[stage] = {
            "mean_ms": float(vals.mean()),
            "median_ms": float(np.median(vals)),
            "p95_ms": float(np.percentile(vals, 95)),
        }
    out["total"] = {
        "mean_ms": float(totals.mean()),
        "median_ms": float(np.median(totals)),
        "p95_ms": float(np.percentile(totals, 95)),
        "hz": float(1000.0 / totals.mean()) if totals.mean() > 0 else float("inf"),
    }
    return out
