"""Informative edge subset selection for new keyframes.

Candidate edges are culled (depth, gradient magnitude), checked for
visibility under the motion prior, partitioned by an imaginary image grid,
and then one edge per partition is picked greedily to maximize the
probability-weighted log-determinant of the accumulated 6x6 Hessian, keeping
the total number of gain evaluations linear in the candidate count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, warp, warp_jacobian
from .image_pipeline import DistanceField, field_lookup
from .tracking import EdgeSet


class SelectionImpossibleError(RuntimeError):
    """Raised when culling leaves no candidate edge."""


@dataclass
class SelectionConfig:
    k: int = 600              # target number of selected edges
    lam: float = 1e-3         # diagonal regularizer for logdet stability
    seed: int = 0             # partition visiting order
    canny_high: float = 100.0  # sigmoid midpoint for re-observation

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")


@dataclass(frozen=True)
class Partition:
    """One grid cell's worth of candidate edges."""

    cell: int
    members: np.ndarray       # sorted candidate indices
    hessians: np.ndarray      # (m, 6, 6) per-member rank-1 blocks
    probabilities: np.ndarray  # (m,) re-observation probabilities


def cull_edges(edges: EdgeSet, high: float) -> np.ndarray:
    """Indices of edges with valid depth and gradient magnitude >= high."""
    keep = (edges.inv_depth > 0) & (edges.grad_mag >= high)
    idx = np.nonzero(keep)[0]
    if len(idx) == 0:
        raise SelectionImpossibleError("no edge survived culling")
    return idx


def edge_hessians(
    edges: EdgeSet, fld: DistanceField, intr: CameraIntrinsics
) -> np.ndarray:
    """Per-edge 6x6 Hessian blocks H(e) = j^T j at identity (self-frame) pose.

    Edges with degenerate distance-field gradient contribute a zero block.
    """
    pose = Pose.identity()
    _, grad, _, valid = field_lookup(fld, edges.pix)
    Jw = warp_jacobian(edges.pix, edges.inv_depth, pose, intr)
    rows = np.einsum("ni,nij->nj", grad, Jw)
    rows[~valid] = 0.0
    return np.einsum("ni,nj->nij", rows, rows)


def reobservation_probability(grad_mag: np.ndarray, a: float) -> np.ndarray:
    """Sigmoid re-observation likelihood 1 / (1 + exp(a - m))."""
    m = np.asarray(grad_mag, dtype=float)
    return 1.0 / (1.0 + np.exp(np.clip(a - m, -500, 500)))


def visibility_check(
    edges: EdgeSet, prior: Pose, intr: CameraIntrinsics
) -> np.ndarray:
    """True where the edge warps strictly inside the image under the prior."""
    _, valid = warp(edges.pix, edges.inv_depth, prior, intr, intr)
    return valid


def build_partitions(
    edges: EdgeSet,
    hessians: np.ndarray,
    probabilities: np.ndarray,
    width: int,
    height: int,
    k: int,
) -> list[Partition]:
    """Group candidates by an imaginary grid of approximately k cells.

    Cell side = round(sqrt(W*H/k)); empty cells produce no partition, so the
    effective selection budget is the number of nonempty cells when the scene
    offers fewer than k of them.
    """
    side = max(1, int(round(np.sqrt(width * height / k))))
    ncols = (width + side - 1) // side
    cx = (edges.pix[:, 0] // side).astype(int)
    cy = (edges.pix[:, 1] // side).astype(int)
    cells = cy * ncols + cx
    partitions = []
    for cell in np.unique(cells):
        members = np.nonzero(cells == cell)[0]
        partitions.append(
            Partition(
                cell=int(cell),
                members=members,
                hessians=hessians[members],
                probabilities=probabilities[members],
            )
        )
    return partitions


def _logdet(M: np.ndarray) -> np.ndarray:
    """Log-determinant of stacked symmetric positive definite matrices."""
    sign, val = np.linalg.slogdet(M)
    return np.where(sign > 0, val, -np.inf)


def stochastic_partition_greedy(
    partitions: list[Partition],
    config: SelectionConfig,
    visible: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    stats: dict | None = None,
) -> np.ndarray:
    """Pick one edge per partition maximizing the weighted logdet gain.

    Visits partitions in seeded-random order. Within a partition the winner is
    argmax over visible members e of p_e * logdet(H(S) + H(e) + lambda I);
    ties break toward the lowest candidate index. The accumulated H(S) is
    updated incrementally, so each candidate's gain is evaluated exactly once.

    Returns sorted candidate indices of the selected set.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(partitions))
    H_sum = np.zeros((6, 6))
    lamI = config.lam * np.eye(6)
    selected = []
    evals = 0
    for pi in order:
        if len(selected) >= config.k:
            break
        part = partitions[pi]
        members = part.members
        mask = np.ones(len(members), dtype=bool)
        if visible is not None:
            mask = visible[members]
        if not mask.any():
            continue  # every candidate invisible: skip the partition
        cand_H = part.hessians[mask]
        cand_p = part.probabilities[mask]
        gains = cand_p * _logdet(H_sum[None] + cand_H + lamI)
        evals += len(gains)
        best = int(np.argmax(gains))  # first max = lowest index (members sorted)
        winner = members[mask][best]
        selected.append(int(winner))
        H_sum = H_sum + cand_H[best]
    if stats is not None:
        stats["gain_evaluations"] = evals
        stats["hessian_sum"] = H_sum
    return np.sort(np.array(selected, dtype=int))


def stochastic_greedy_baseline(
    hessians: np.ndarray,
    probabilities: np.ndarray,
    k: int,
    config: SelectionConfig,
    sample_size: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Subset-sampling stochastic greedy (comparison mode, no partitions).

    Each round samples `sample_size` remaining candidates and adds the one
    with the best weighted logdet gain.
    """
    n = len(hessians)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if sample_size is None:
        sample_size = max(1, int(np.ceil(n / k * np.log(10))))
    lamI = config.lam * np.eye(6)
    remaining = np.arange(n)
    H_sum = np.zeros((6, 6))
    selected = []
    for _ in range(min(k, n)):
        m = min(sample_size, len(remaining))
        sample = rng.choice(remaining, size=m, replace=False)
        sample.sort()
        gains = probabilities[sample] * _logdet(H_sum[None] + hessians[sample] + lamI)
        best = sample[int(np.argmax(gains))]
        selected.append(int(best))
        H_sum = H_sum + hessians[best]
        remaining = remaining[remaining != best]
    return np.sort(np.array(selected, dtype=int))


@dataclass(frozen=True)
class SelectionDebug:
    """Per-candidate record for selection inspection dumps."""

    pix: np.ndarray
    grad_mag: np.ndarray
    probability: np.ndarray
    selected: np.ndarray  # bool


def select_edges(
    candidates: EdgeSet,
    fld: DistanceField,
    prior: Pose,
    intr: CameraIntrinsics,
    config: SelectionConfig,
    return_debug: bool = False,
):
    """Full selection pipeline: cull, visibility, partitions, greedy.

    Returns the selected EdgeSet (and a SelectionDebug when requested).
    """
    culled_idx = cull_edges(candidates, config.canny_high)
    culled = candidates.take(culled_idx)
    visible = visibility_check(culled, prior, intr)
    hessians = edge_hessians(culled, fld, intr)
    probs = reobservation_probability(culled.grad_mag, config.canny_high)
    partitions = build_partitions(
        culled, hessians, probs, intr.width, intr.height, config.k
    )
    picked = stochastic_partition_greedy(partitions, config, visible=visible)
    selected = culled.take(picked)
    if not return_debug:
        return selected
    sel_mask = np.zeros(len(culled), dtype=bool)
    sel_mask[picked] = True
    debug = SelectionDebug(
        pix=culled.pix,
        grad_mag=culled.grad_mag,
        probability=probs,
        selected=sel_mask,
    )
    return selected, debug
