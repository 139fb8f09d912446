"""Frame-to-keyframe motion estimation over distance-field residuals.

Each frame is tracked against the latest keyframe by coarse-to-fine
Gauss-Newton on the distance-field pyramid with Huber weighting, per-level
residual thresholds, and a gradient-direction consistency filter for outlier
rejection. A keyframe decision combines optical-flow magnitude, correspondence
count, and elapsed time.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import CameraIntrinsics, Pose, level_to_full, warp, warp_jacobian
from .image_pipeline import (
    DistanceField,
    DistanceFieldPyramid,
    EdgeMap,
    PYRAMID_LEVELS,
    canny_detect,
    build_pyramid,
    distance_transform,
    field_lookup,
)


class TrackingLostError(RuntimeError):
    """Raised when motion estimation cannot proceed for a frame."""


@dataclass(frozen=True)
class EdgeSet:
    """A batch of edge pixels with per-edge attributes (struct of arrays)."""

    pix: np.ndarray        # (N, 2) pixel coordinates (x, y), full resolution
    inv_depth: np.ndarray  # (N,) 1/meters, positive
    grad_dir: np.ndarray   # (N, 2) unit gradient directions
    grad_mag: np.ndarray   # (N,) Sobel gradient magnitudes
    age: np.ndarray        # (N,) frames successfully tracked

    def __len__(self):
        return len(self.pix)

    def take(self, idx) -> "EdgeSet":
        return EdgeSet(
            pix=self.pix[idx],
            inv_depth=self.inv_depth[idx],
            grad_dir=self.grad_dir[idx],
            grad_mag=self.grad_mag[idx],
            age=self.age[idx],
        )

    def with_age(self, age: np.ndarray) -> "EdgeSet":
        return replace(self, age=age)


@dataclass(frozen=True)
class PreprocessedFrame:
    """Everything tracking needs from one RGBD frame."""

    timestamp: float
    gray: np.ndarray
    depth: np.ndarray          # meters; 0 = missing
    edge_map: EdgeMap
    pyramid: DistanceFieldPyramid


@dataclass
class TrackingConfig:
    residual_thresholds: tuple = (2.5, 5.0, 10.0)  # per level 0/1/2, pixels
    gradient_margin: float = 0.6                   # inner-product margin eta
    huber_delta: float = 1.0                       # pixels
    max_iterations: int = 20                       # per level
    convergence_eps: float = 1e-6                  # on |dxi|
    keyframe_w1: float = 1.0 / 12.0                # per flow pixel
    keyframe_w2: float = 1.0 / 12.0
    keyframe_corr_ratio: float = 0.3
    keyframe_max_interval: float = 1.0             # seconds
    canny_low: float = 40.0
    canny_high: float = 100.0
    min_correspondences: int = 6

    def __post_init__(self):
        if not (0 < self.gradient_margin <= 1):
            raise ValueError("gradient margin must be in (0, 1]")
        if any(t <= 0 for t in self.residual_thresholds):
            raise ValueError("residual thresholds must be positive")


@dataclass(frozen=True)
class TrackingResult:
    relative_pose: Pose
    covariance: np.ndarray | None
    inlier_count: int
    mean_residual: float
    converged: bool
    flow_rms: float = 0.0
    flow_rms_no_rotation: float = 0.0
    iterations_per_level: tuple = ()
    costs: tuple = ()          # accepted mean weighted costs, in order


@dataclass(frozen=True)
class Correspondences:
    """Per-edge alignment data for one pose hypothesis."""

    index: np.ndarray      # (M,) indices into the reference edge set
    residual: np.ndarray   # (M,) interpolated distances, pixels
    jac: np.ndarray        # (M, 6) residual Jacobian rows
    weight: np.ndarray     # (M,) Huber weights
    nearest: np.ndarray    # (M, 2) nearest-edge coordinates, level-local

    def __len__(self):
        return len(self.index)


def preprocess_frame(
    gray: np.ndarray, depth: np.ndarray, timestamp: float, config: TrackingConfig
) -> PreprocessedFrame:
    """Run edge detection and build the distance-field pyramid for a frame."""
    edge_map = canny_detect(gray, low=config.canny_low, high=config.canny_high)
    field0 = distance_transform(edge_map)
    pyramid = build_pyramid(field0)
    return PreprocessedFrame(
        timestamp=timestamp,
        gray=np.asarray(gray),
        depth=np.asarray(depth, dtype=float),
        edge_map=edge_map,
        pyramid=pyramid,
    )


def extract_edges(frame: PreprocessedFrame) -> EdgeSet:
    """All Canny edges of a frame that carry depth, as candidates.

    Depth is taken at the edge's integer coordinate without interpolation;
    edges sit on depth discontinuities where interpolation is unreliable.
    """
    pix = frame.edge_map.edge_pixels()
    xs, ys = pix[:, 0], pix[:, 1]
    d = frame.depth[ys, xs]
    keep = d > 0
    pix = pix[keep].astype(float)
    xs, ys = xs[keep], ys[keep]
    return EdgeSet(
        pix=pix,
        inv_depth=1.0 / frame.depth[ys, xs],
        grad_dir=frame.edge_map.grad_dir[ys, xs],
        grad_mag=frame.edge_map.grad_mag[ys, xs],
        age=np.zeros(len(pix), dtype=int),
    )


def huber_weights(residual: np.ndarray, delta: float) -> np.ndarray:
    """w(r) = 1 for |r| <= delta, delta/|r| beyond."""
    a = np.abs(residual)
    with np.errstate(divide="ignore"):
        w = np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-12))
    return w


def compute_residuals(
    edges: EdgeSet,
    pose: Pose,
    fld: DistanceField,
    intr: CameraIntrinsics,
    level: int = 0,
    huber_delta: float = 1.0,
) -> Correspondences:
    """Residuals, Jacobian rows, and weights for one pose hypothesis.

    Edges warping out of view are excluded. Raises TrackingLostError when no
    edge remains in view.
    """
    if len(edges) == 0:
        raise TrackingLostError("no edges to track")
    intr_l = intr.at_level(level)
    pix_w, valid = warp(edges.pix, edges.inv_depth, pose, intr, intr_l)
    dist, grad, nearest, in_field = field_lookup(fld, pix_w)
    valid = valid & in_field
    if not valid.any():
        raise TrackingLostError("all edges out of view")
    idx = np.nonzero(valid)[0]
    Jw = warp_jacobian(edges.pix[idx], edges.inv_depth[idx], pose, intr, intr_l)
    jac = np.einsum("ni,nij->nj", grad[idx], Jw)
    r = dist[idx]
    return Correspondences(
        index=idx,
        residual=r,
        jac=jac,
        weight=huber_weights(r, huber_delta),
        nearest=nearest[idx],
    )


def reject_outliers(
    corr: Correspondences,
    level: int,
    config: TrackingConfig,
    ref_edges: EdgeSet,
    cur_edge_map: EdgeMap,
) -> Correspondences:
    """Drop large residuals and gradient-inconsistent correspondences.

    The reference edge's gradient direction is compared against the current
    frame's gradient at the matched nearest-edge coordinate; pairs with inner
    product below the margin are outliers.
    """
    keep = np.abs(corr.residual) <= config.residual_thresholds[level]
    nearest_full = level_to_full(corr.nearest, level)
    h, w = cur_edge_map.shape
    nx = np.clip(np.round(nearest_full[:, 0]).astype(int), 0, w - 1)
    ny = np.clip(np.round(nearest_full[:, 1]).astype(int), 0, h - 1)
    cur_dir = cur_edge_map.grad_dir[ny, nx]
    ref_dir = ref_edges.grad_dir[corr.index]
    inner = np.einsum("ni,ni->n", ref_dir, cur_dir)
    keep &= inner >= config.gradient_margin
    return Correspondences(
        index=corr.index[keep],
        residual=corr.residual[keep],
        jac=corr.jac[keep],
        weight=corr.weight[keep],
        nearest=corr.nearest[keep],
    )


def _weighted_cost(corr: Correspondences) -> float:
    """Mean Huber-weighted squared residual."""
    return float(np.mean(corr.weight * corr.residual**2))


def _evaluate(edges, pose, fld, cur_edge_map, intr, level, config):
    corr = compute_residuals(edges, pose, fld, intr, level, config.huber_delta)
    corr = reject_outliers(corr, level, config, edges, cur_edge_map)
    return corr


def gauss_newton_level(
    edges: EdgeSet,
    init_pose: Pose,
    fld: DistanceField,
    cur_edge_map: EdgeMap,
    intr: CameraIntrinsics,
    config: TrackingConfig,
    level: int,
):
    """Huber-weighted Gauss-Newton at one pyramid level.

    Iterates dxi = -(J'WJ + mu I)^-1 J'Wr with left-multiplicative updates and
    step halving when the weighted cost increases (up to 5 halvings). Returns
    (pose, covariance, stats dict).
    """
    mu = 1e-8
    pose = init_pose
    corr = _evaluate(edges, pose, fld, cur_edge_map, intr, level, config)
    if len(corr) < config.min_correspondences:
        raise TrackingLostError(f"only {len(corr)} correspondences at level {level}")
    cost = _weighted_cost(corr)
    costs = [cost]
    converged = False
    iters = 0
    H = None
    for iters in range(1, config.max_iterations + 1):
        W = corr.weight
        H = corr.jac.T @ (corr.jac * W[:, None])
        g = corr.jac.T @ (W * corr.residual)
        try:
            dxi = -np.linalg.solve(H + mu * np.eye(6), g)
        except np.linalg.LinAlgError as exc:
            raise TrackingLostError("singular normal equations") from exc
        if np.linalg.norm(dxi) < config.convergence_eps:
            converged = True
            break
        accepted = False
        step = 1.0
        for _ in range(6):  # full step plus up to 5 halvings
            cand_pose = Pose.exp(step * dxi) @ pose
            try:
                cand = _evaluate(edges, cand_pose, fld, cur_edge_map, intr, level, config)
            except TrackingLostError:
                step *= 0.5
                continue
            if len(cand) < config.min_correspondences:
                step *= 0.5
                continue
            cand_cost = _weighted_cost(cand)
            if cand_cost <= cost + 1e-12:
                pose, corr, cost = cand_pose, cand, cand_cost
                costs.append(cost)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # Cost cannot be reduced further; return best-so-far unconverged.
            break
        if np.linalg.norm(step * dxi) < config.convergence_eps:
            converged = True
            break
    W = corr.weight
    H = corr.jac.T @ (corr.jac * W[:, None])
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = None
    stats = {
        "iterations": iters,
        "cost": cost,
        "costs": costs,
        "inliers": len(corr),
        "converged": converged,
        "correspondences": corr,
    }
    return pose, cov, stats


def _flow_stats(edges, corr, pose, intr):
    """RMS edge flow, and RMS flow with rotation removed (translation only)."""
    idx = corr.index
    pix = edges.pix[idx]
    rho = edges.inv_depth[idx]
    warped, valid = warp(pix, rho, pose, intr, intr)
    flow = np.linalg.norm(warped[valid] - pix[valid], axis=1)
    t_only = Pose(np.eye(3), pose.t)
    warped_t, valid_t = warp(pix, rho, t_only, intr, intr)
    flow_t = np.linalg.norm(warped_t[valid_t] - pix[valid_t], axis=1)
    rms = float(np.sqrt(np.mean(flow**2))) if flow.size else 0.0
    rms_t = float(np.sqrt(np.mean(flow_t**2))) if flow_t.size else 0.0
    return rms, rms_t


def track_frame(
    keyframe_edges: EdgeSet,
    frame: PreprocessedFrame,
    prior: Pose,
    intr: CameraIntrinsics,
    config: TrackingConfig,
) -> TrackingResult:
    """Coarse-to-fine tracking of a frame against keyframe edges.

    Runs Gauss-Newton from the coarsest pyramid level down to level 0, each
    level initialized from the previous one; the coarsest level starts from
    the motion prior.
    """
    pose = prior
    cov = None
    iters = []
    costs = []
    last_stats = None
    for level in range(PYRAMID_LEVELS - 1, -1, -1):
        fld = frame.pyramid[level]
        if not fld.has_edges:
            raise TrackingLostError("current frame has no edges")
        pose, cov, stats = gauss_newton_level(
            keyframe_edges, pose, fld, frame.edge_map, intr, config, level
        )
        iters.append(stats["iterations"])
        costs.extend(stats["costs"])
        last_stats = stats
    flow_rms, flow_rms_t = _flow_stats(
        keyframe_edges, last_stats["correspondences"], pose, intr
    )
    return TrackingResult(
        relative_pose=pose,
        covariance=cov,
        inlier_count=last_stats["inliers"],
        mean_residual=float(np.mean(np.abs(last_stats["correspondences"].residual))),
        converged=last_stats["converged"],
        flow_rms=flow_rms,
        flow_rms_no_rotation=flow_rms_t,
        iterations_per_level=tuple(iters),
        costs=tuple(costs),
    )


def keyframe_decision(
    result: TrackingResult,
    elapsed: float,
    avg_correspondences: float,
    config: TrackingConfig,
) -> bool:
    """Create a keyframe on large flow, correspondence drop, or timeout."""
    t = result.flow_rms
    t_prime = result.flow_rms_no_rotation
    if config.keyframe_w1 * t + config.keyframe_w2 * t_prime > 1.0:
        return True
    if avg_correspondences > 0 and (
        result.inlier_count < config.keyframe_corr_ratio * avg_correspondences
    ):
        return True
    if elapsed >= config.keyframe_max_interval:
        return True
    return False
