"""Sliding-window refinement of keyframe poses and edge inverse depths.

New keyframes activate reliable edges of older window members, a joint
Gauss-Newton pass refines all window poses and active inverse depths (depths
eliminated by Schur complement each iteration), and departing keyframes are
folded into a quadratic marginalization prior over the surviving poses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pose,
    backproject,
    in_bounds,
    point_jacobian_wrt_twist,
    project,
    projection_jacobian,
)
from .image_pipeline import DistanceFieldPyramid, EdgeMap, field_lookup
from .tracking import EdgeSet, huber_weights

log = logging.getLogger(__name__)

# Edge activation states.
CANDIDATE = 0
ACTIVE = 1
MARGINALIZED = 2

ACTIVATION_CELL = 20          # pixels
ACTIVATION_MAX_ANGLE = 30.0   # degrees


@dataclass
class Keyframe:
    """Window node: pose, selected edges, distance-field pyramid.

    `pose_cw` maps world points into this camera's frame; the camera-to-world
    transform used for trajectory output is its inverse.
    """

    kf_id: int
    timestamp: float
    pose_cw: Pose
    edges: EdgeSet
    pyramid: DistanceFieldPyramid
    edge_map: EdgeMap
    state: np.ndarray = field(default=None)
    # Inverse depths as measured by the depth sensor at construction; the
    # window optimizer treats them as direct measurements of the depth
    # variables, not merely as an initialization.
    rho_meas: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = np.full(len(self.edges), CANDIDATE, dtype=np.int8)
        if self.rho_meas is None:
            self.rho_meas = np.asarray(self.edges.inv_depth, dtype=float).copy()

    @property
    def pose_wc(self) -> Pose:
        return self.pose_cw.inverse()

    def active_indices(self) -> np.ndarray:
        return np.nonzero(self.state == ACTIVE)[0]


@dataclass
class MarginalizationPrior:
    """Quadratic prior 0.5 e'He + b'e over pose offsets e from `ref_poses`.

    Offsets are left-multiplicative twists: e_i = log(T_cw_i o ref_i^-1).
    """

    kf_ids: list
    H: np.ndarray
    b: np.ndarray
    ref_poses: list

    def offsets(self, poses: dict) -> np.ndarray:
        parts = [
            (poses[kid] @ ref.inverse()).log()
            for kid, ref in zip(self.kf_ids, self.ref_poses)
        ]
        return np.concatenate(parts) if parts else np.zeros(0)

    def cost(self, poses: dict) -> float:
        e = self.offsets(poses)
        return float(0.5 * e @ self.H @ e + self.b @ e)


@dataclass
class SlidingWindow:
    capacity: int = 7
    keyframes: list = field(default_factory=list)
    prior: MarginalizationPrior | None = None

    def __post_init__(self):
        if not (5 <= self.capacity <= 7):
            raise ValueError("window capacity must be in [5, 7]")

    def __len__(self):
        return len(self.keyframes)

    def insert(self, kf: Keyframe):
        self.keyframes.append(kf)

    def by_id(self, kf_id: int) -> Keyframe:
        for kf in self.keyframes:
            if kf.kf_id == kf_id:
                return kf
        raise KeyError(kf_id)


def _reproject(host: Keyframe, idx: np.ndarray, target: Keyframe, intr):
    """Project host edges `idx` into the target keyframe (level 0).

    Returns (pixels, camera points in target frame, valid mask).
    """
    P = backproject(host.edges.pix[idx], host.edges.inv_depth[idx], intr)
    T = target.pose_cw @ host.pose_cw.inverse()
    X = T.apply(P)
    pix, valid = project(X, intr)
    valid = valid & in_bounds(pix, intr)
    return pix, X, P, T, valid


def activate_edges(new_kf: Keyframe, window: SlidingWindow, intr: CameraIntrinsics):
    """Activate at most one reliable candidate edge per 20x20 cell.

    Candidates from older keyframes are reprojected into the new keyframe;
    those with residual at most the median of all reprojected residuals and a
    gradient direction within 30 degrees of the matched edge's direction
    compete per cell, oldest track winning.

    Returns a list of (kf_id, edge_index) pairs that were activated.
    """
    fld = new_kf.pyramid[0]
    cand = []  # (kf, edge_idx, residual, angle_ok, age, cell)
    cos_lim = np.cos(np.deg2rad(ACTIVATION_MAX_ANGLE))
    ncols = (intr.width + ACTIVATION_CELL - 1) // ACTIVATION_CELL
    for kf in window.keyframes:
        if kf.kf_id == new_kf.kf_id:
            continue
        idx = np.nonzero(kf.state == CANDIDATE)[0]
        if len(idx) == 0:
            continue
        pix, _, _, _, valid = _reproject(kf, idx, new_kf, intr)
        if not valid.any():
            continue
        idx = idx[valid]
        pix = pix[valid]
        dist, _, nearest, ok = field_lookup(fld, pix)
        idx, pix, dist, nearest = idx[ok], pix[ok], dist[ok], nearest[ok]
        if len(idx) == 0:
            continue
        h, w = new_kf.edge_map.shape
        nx = np.clip(np.round(nearest[:, 0]).astype(int), 0, w - 1)
        ny = np.clip(np.round(nearest[:, 1]).astype(int), 0, h - 1)
        inner = np.einsum(
            "ni,ni->n", kf.edges.grad_dir[idx], new_kf.edge_map.grad_dir[ny, nx]
        )
        cells = (pix[:, 1] // ACTIVATION_CELL).astype(int) * ncols + (
            pix[:, 0] // ACTIVATION_CELL
        ).astype(int)
        for j in range(len(idx)):
            cand.append(
                (
                    kf,
                    int(idx[j]),
                    float(dist[j]),
                    inner[j] >= cos_lim,
                    int(kf.edges.age[idx[j]]),
                    int(cells[j]),
                )
            )
    if not cand:
        return []
    median_res = float(np.median([c[2] for c in cand]))
    winners = {}
    for kf, eidx, res, angle_ok, age, cell in cand:
        if res > median_res or not angle_ok:
            continue
        prev = winners.get(cell)
        if prev is None or age > prev[2]:
            winners[cell] = (kf, eidx, age)
    activated = []
    for kf, eidx, _ in winners.values():
        kf.state[eidx] = ACTIVE
        activated.append((kf.kf_id, eidx))
    return activated


# Gating for window residual terms, mirroring the tracker's outlier
# rejection: nearest-edge associations further than this (level-0 pixels) or
# with inconsistent gradient directions are wrong-contour matches and would
# otherwise dominate the joint optimization.
WINDOW_MAX_RESIDUAL = 2.5
WINDOW_DIRECTION_MARGIN = 0.6

# Weight of the quadratic term tying each active inverse depth to its sensor
# measurement (units: 1/(inverse-depth)^2, i.e. an information value). The
# depth image is a direct observation of the depth variables; without this
# term the unsigned-distance terms slowly random-walk well-initialized depths
# through occasional wrong nearest-edge associations.
DEPTH_PRIOR_WEIGHT = 100.0


def _residual_terms(window: SlidingWindow, intr: CameraIntrinsics, huber_delta: float):
    """Linearized window residuals at the current estimate.

    Yields dicts with host/target window positions, depth variable index,
    residual, weight, and Jacobian rows w.r.t. (host twist, target twist,
    inverse depth). Associations beyond WINDOW_MAX_RESIDUAL or with a
    gradient direction disagreeing with the matched edge are dropped.
    """
    kfs = window.keyframes
    depth_vars = []  # (kf position, edge index)
    depth_key = {}
    for wi, kf in enumerate(kfs):
        for eidx in kf.active_indices():
            depth_key[(wi, int(eidx))] = len(depth_vars)
            depth_vars.append((wi, int(eidx)))
    terms = []
    for wi, host in enumerate(kfs):
        idx = host.active_indices()
        if len(idx) == 0:
            continue
        rho = host.edges.inv_depth[idx]
        for wj, target in enumerate(kfs):
            if wj == wi:
                continue
            pix, X, P, T, valid = _reproject(host, idx, target, intr)
            if not valid.any():
                continue
            fld = target.pyramid[0]
            dist, grad, nearest, ok = field_lookup(fld, pix)
            ok = ok & (dist <= WINDOW_MAX_RESIDUAL)
            h_img, w_img = target.edge_map.shape
            nx = np.clip(np.round(nearest[:, 0]).astype(int), 0, w_img - 1)
            ny = np.clip(np.round(nearest[:, 1]).astype(int), 0, h_img - 1)
            inner = np.einsum(
                "ni,ni->n", host.edges.grad_dir[idx], target.edge_map.grad_dir[ny, nx]
            )
            # Anti-aliased intensity ridges yield two nearby contours with
            # opposite gradient signs; a signed margin would keep only one
            # side and bias the retained residual subset, so compare the
            # alignment magnitude instead.
            ok = ok & (np.abs(inner) >= WINDOW_DIRECTION_MARGIN)
            valid = valid & ok
            if not valid.any():
                continue
            sel = np.nonzero(valid)[0]
            Jproj = projection_jacobian(X[sel], intr)          # (m, 2, 3)
            dr_dX = np.einsum("ni,nij->nj", grad[sel], Jproj)  # (m, 3)
            Jt = np.einsum(
                "ni,nij->nj", dr_dX, point_jacobian_wrt_twist(X[sel])
            )  # target pose
            Jp_host = point_jacobian_wrt_twist(P[sel])
            Jh = -np.einsum("ni,ij,njk->nk", dr_dX, T.R, Jp_host)
            dX_drho = -(T.R @ P[sel].T).T / rho[sel][:, None]
            Jrho = np.einsum("ni,ni->n", dr_dX, dX_drho)
            r = dist[sel]
            w = huber_weights(r, huber_delta)
            for m, e in enumerate(sel):
                terms.append(
                    {
                        "host": wi,
                        "target": wj,
                        "depth": depth_key[(wi, int(idx[e]))],
                        "r": float(r[m]),
                        "w": float(w[m]),
                        "J_host": Jh[m],
                        "J_target": Jt[m],
                        "J_rho": float(Jrho[m]),
                    }
                )
    return terms, depth_vars


def _assemble(terms, n_poses, n_depths):
    """Stack linearized terms into normal equations (H, g)."""
    np_dim = 6 * n_poses
    H = np.zeros((np_dim + n_depths, np_dim + n_depths))
    g = np.zeros(np_dim + n_depths)
    for t in terms:
        rows = [
            (slice(6 * t["host"], 6 * t["host"] + 6), t["J_host"]),
            (slice(6 * t["target"], 6 * t["target"] + 6), t["J_target"]),
            (slice(np_dim + t["depth"], np_dim + t["depth"] + 1), np.array([t["J_rho"]])),
        ]
        w, r = t["w"], t["r"]
        for si, Ji in rows:
            g[si] += w * r * Ji
            for sj, Jj in rows:
                H[si, sj] += w * np.outer(Ji, Jj)
    return H, g


def _window_cost(window, intr, huber_delta):
    terms, _ = _residual_terms(window, intr, huber_delta)
    cost = sum(t["w"] * t["r"] ** 2 for t in terms)
    for kf in window.keyframes:
        idx = kf.active_indices()
        dev = kf.edges.inv_depth[idx] - kf.rho_meas[idx]
        cost += DEPTH_PRIOR_WEIGHT * float(dev @ dev)
    if window.prior is not None:
        poses = {kf.kf_id: kf.pose_cw for kf in window.keyframes}
        cost += window.prior.cost(poses)
    return cost, terms


def window_optimize(
    window: SlidingWindow,
    intr: CameraIntrinsics,
    iterations: int = 6,
    huber_delta: float = 1.0,
    use_schur: bool = True,
) -> dict:
    """Jointly refine window poses and active inverse depths.

    Inverse-depth variables are scalar and independent given the poses, so
    they are eliminated by Schur complement each iteration (a dense solve of
    the full system is available for verification via use_schur=False). The
    oldest keyframe's pose is always held fixed to pin the gauge. Accepted
    iterations never increase the weighted cost.
    """
    kfs = window.keyframes
    n = len(kfs)
    if n < 2:
        return {"iterations": 0, "costs": []}
    costs = []
    cost, terms = _window_cost(window, intr, huber_delta)
    costs.append(cost)
    # Adaptive diagonal damping: large steps along weakly observed inverse
    # depths run into the kinks of the unsigned distance field, so rejected
    # steps escalate the damping (bending the direction toward gradient
    # descent) instead of merely shrinking the same bad direction.
    lam = 1e-6
    for _ in range(iterations):
        terms, depth_vars = _residual_terms(window, intr, huber_delta)
        nd = len(depth_vars)
        if nd == 0:
            break
        np_dim = 6 * n
        H, g = _assemble(terms, n, nd)
        for dv, (dwi, eidx) in enumerate(depth_vars):
            kf = kfs[dwi]
            e_rho = kf.edges.inv_depth[eidx] - kf.rho_meas[eidx]
            H[np_dim + dv, np_dim + dv] += DEPTH_PRIOR_WEIGHT
            g[np_dim + dv] += DEPTH_PRIOR_WEIGHT * e_rho
        if window.prior is not None:
            poses = {kf.kf_id: kf.pose_cw for kf in kfs}
            e = window.prior.offsets(poses)
            pos = {kf.kf_id: wi for wi, kf in enumerate(kfs)}
            pidx = np.concatenate(
                [np.arange(6 * pos[kid], 6 * pos[kid] + 6) for kid in window.prior.kf_ids]
            )
            H[np.ix_(pidx, pidx)] += window.prior.H
            g[pidx] += window.prior.b + window.prior.H @ e
        # Gauge: hold the oldest keyframe fixed. The marginalization prior is
        # often too weak to pin the window's global placement (the folded
        # terms mostly involved the departed keyframe), and the unsigned
        # distance objective has near-flat valleys along which an unpinned
        # window slowly random-walks.
        fixed = slice(0, 6)
        H[fixed, :] = 0.0
        H[:, fixed] = 0.0
        H[fixed, fixed] = np.eye(6)
        g[fixed] = 0.0
        diag_scale = np.maximum(np.diag(H), 1e-9)
        saved = [(kf.pose_cw, kf.edges.inv_depth.copy()) for kf in kfs]
        accepted = False
        dp = dd = None
        for _ in range(10):
            Hreg = H + np.diag(lam * diag_scale) + 1e-8 * np.eye(np_dim + nd)
            try:
                if use_schur:
                    Hpp = Hreg[:np_dim, :np_dim]
                    Hpd = Hreg[:np_dim, np_dim:]
                    hdd = np.diag(Hreg)[np_dim:]
                    gp, gd = g[:np_dim], g[np_dim:]
                    inv_hdd = 1.0 / hdd
                    Hs = Hpp - (Hpd * inv_hdd) @ Hpd.T
                    gs = gp - Hpd @ (inv_hdd * gd)
                    dp = np.linalg.solve(Hs, -gs)
                    dd = -(gd + Hpd.T @ dp) * inv_hdd
                else:
                    delta = np.linalg.solve(Hreg, -g)
                    dp, dd = delta[:np_dim], delta[np_dim:]
            except np.linalg.LinAlgError:
                log.warning("window normal system singular; keeping previous state")
                break
            for wi, kf in enumerate(kfs):
                kf.pose_cw = Pose.exp(dp[6 * wi : 6 * wi + 6]) @ saved[wi][0]
                rho = saved[wi][1].copy()
                for dv, (dwi, eidx) in enumerate(depth_vars):
                    if dwi == wi:
                        rho[eidx] = max(rho[eidx] + dd[dv], 1e-4)
                kf.edges = replace(kf.edges, inv_depth=rho)
            new_cost, _ = _window_cost(window, intr, huber_delta)
            if new_cost <= cost + 1e-12:
                cost = new_cost
                costs.append(cost)
                accepted = True
                lam = max(lam / 3.0, 1e-8)
                break
            lam *= 10.0
        if not accepted:
            for wi, kf in enumerate(kfs):
                kf.pose_cw = saved[wi][0]
                kf.edges = replace(kf.edges, inv_depth=saved[wi][1])
            break
        if dp is not None and np.linalg.norm(np.concatenate([dp, dd])) < 1e-10:
            break
    return {"iterations": len(costs) - 1, "costs": costs}


def choose_marginalization_victim(window: SlidingWindow):
    """Victim keyframe id, or None while the window is under capacity.

    The latest two keyframes are exempt; among the rest the score combines
    distance to the newest keyframe and lack of edge visibility in the other
    window members, equally weighted.
    """
    kfs = window.keyframes
    if len(kfs) < window.capacity:
        return None
    candidates = kfs[:-2]
    if not candidates:
        return None
    newest = kfs[-1]
    dists = np.array(
        [np.linalg.norm(kf.pose_wc.t - newest.pose_wc.t) for kf in candidates]
    )
    max_d = dists.max()
    norm_d = dists / max_d if max_d > 0 else np.zeros_like(dists)
    vis = np.array([_visible_fraction(kf, window) for kf in candidates])
    scores = 0.5 * norm_d + 0.5 * (1.0 - vis)
    return candidates[int(np.argmax(scores))].kf_id


def _visible_fraction(kf: Keyframe, window: SlidingWindow, intr=None) -> float:
    """Mean fraction of kf's live edges projecting into other window members."""
    others = [o for o in window.keyframes if o.kf_id != kf.kf_id]
    live = np.nonzero(kf.state != MARGINALIZED)[0]
    if not others or len(live) == 0:
        return 0.0
    intr = intr if intr is not None else _intrinsics_guess(kf)
    fracs = []
    for o in others:
        _, _, _, _, valid = _reproject(kf, live, o, intr)
        fracs.append(valid.mean())
    return float(np.mean(fracs))


def _intrinsics_guess(kf: Keyframe) -> CameraIntrinsics:
    # Visibility scoring only needs a plausible frustum; derive from the
    # pyramid when no intrinsics were recorded.
    h, w = kf.pyramid[0].shape
    f = 0.8 * w
    return CameraIntrinsics(f, f, w / 2.0, h / 2.0, w, h)


def schur_marginalize(H: np.ndarray, b: np.ndarray, keep, drop, clamp: bool = True):
    """Marginalize `drop` variables from the quadratic 0.5 x'Hx + b'x.

    Returns (H_red, b_red) over the kept variables, preserving the minimizer.
    An indefinite result is clamped to PSD (eigenvalues floored at 0) with a
    diagnostic warning.
    """
    keep = np.asarray(keep, dtype=int)
    drop = np.asarray(drop, dtype=int)
    Hkk = H[np.ix_(keep, keep)]
    Hkd = H[np.ix_(keep, drop)]
    Hdd = H[np.ix_(drop, drop)]
    bk = b[keep]
    bd = b[drop]
    Hdd_inv = np.linalg.pinv(Hdd, hermitian=True)
    H_red = Hkk - Hkd @ Hdd_inv @ Hkd.T
    b_red = bk - Hkd @ Hdd_inv @ bd
    H_red = 0.5 * (H_red + H_red.T)
    if clamp:
        vals, vecs = np.linalg.eigh(H_red)
        if vals.min() < -1e-9:
            log.warning("indefinite Schur complement clamped (min eig %.3e)", vals.min())
        if vals.min() < 0:
            vals = np.maximum(vals, 0.0)
            H_red = vecs @ np.diag(vals) @ vecs.T
            H_red = 0.5 * (H_red + H_red.T)
    return H_red, b_red


def marginalize_keyframe(window: SlidingWindow, victim_id: int, intr: CameraIntrinsics,
                         huber_delta: float = 1.0):
    """Fold the victim keyframe into the marginalization prior and drop it.

    The victim's active edges and active edges unobserved in the last two
    keyframes are marginalized first (Schur complement onto the pose blocks),
    then the victim's pose block. Residual terms linking only surviving
    variables are left untouched; terms tying the victim's pose to surviving
    depths are dropped to keep the prior over poses only.
    """
    kfs = window.keyframes
    vi = next(i for i, kf in enumerate(kfs) if kf.kf_id == victim_id)
    victim = kfs[vi]
    n = len(kfs)
    last_two = {kf.kf_id for kf in kfs[-2:] if kf.kf_id != victim_id}

    terms, depth_vars = _residual_terms(window, intr, huber_delta)

    # Depth variables to marginalize: hosted in the victim, or unobserved in
    # the last two keyframes.
    observed_in_last = set()
    for t in terms:
        if kfs[t["target"]].kf_id in last_two:
            observed_in_last.add(t["depth"])
    drop_depths = set()
    for dv, (wi, eidx) in enumerate(depth_vars):
        if kfs[wi].kf_id == victim_id or dv not in observed_in_last:
            drop_depths.add(dv)

    np_dim = 6 * n
    # Terms touching the victim pose but a surviving depth are dropped
    # entirely rather than marginalized, keeping the prior over poses only.
    involved = [t for t in terms if t["depth"] in drop_depths]
    H, g = _assemble(involved, n, len(depth_vars))
    if window.prior is not None:
        poses = {kf.kf_id: kf.pose_cw for kf in kfs}
        e = window.prior.offsets(poses)
        pos = {kf.kf_id: wi for wi, kf in enumerate(kfs)}
        pidx = np.concatenate(
            [np.arange(6 * pos[kid], 6 * pos[kid] + 6) for kid in window.prior.kf_ids]
        )
        H[np.ix_(pidx, pidx)] += window.prior.H
        g[pidx] += window.prior.b + window.prior.H @ e

    drop = sorted(np_dim + dv for dv in drop_depths)
    drop += list(range(6 * vi, 6 * vi + 6))
    # Surviving depth columns are excluded from the prior; the involved terms
    # all reference dropped depths, so those columns are zero anyway.
    keep = [i for i in range(np_dim) if not (6 * vi <= i < 6 * vi + 6)]
    H_red, b_red = schur_marginalize(H, g, keep, drop)
    # Unsigned distance residuals never reach zero (quantization leaves a
    # floor of a fraction of a pixel), so the marginalized terms' gradient is
    # systematically nonzero even at the window optimum. Folding that linear
    # term into the prior injects a permanent pull that drags the surviving
    # poses a little further with every marginalization. Keep only the
    # curvature, anchoring the survivors at the linearization point.
    b_red = np.zeros_like(b_red)

    surviving = [kf for i, kf in enumerate(kfs) if i != vi]
    window.prior = MarginalizationPrior(
        kf_ids=[kf.kf_id for kf in surviving],
        H=H_red,
        b=b_red,
        ref_poses=[kf.pose_cw for kf in surviving],
    )
    # Mark marginalized depths on their hosts.
    for dv in drop_depths:
        wi, eidx = depth_vars[dv]
        kfs[wi].state[eidx] = MARGINALIZED
    victim.state[victim.state == ACTIVE] = MARGINALIZED
    window.keyframes = surviving
    return window.prior
