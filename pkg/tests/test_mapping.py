import copy

import numpy as np
import pytest

from edgeodom.geometry import CameraIntrinsics, Pose
from edgeodom.image_pipeline import EdgeMap, build_pyramid, distance_transform
from edgeodom.mapping import (
    ACTIVE,
    CANDIDATE,
    MARGINALIZED,
    Keyframe,
    SlidingWindow,
    activate_edges,
    choose_marginalization_victim,
    marginalize_keyframe,
    schur_marginalize,
    window_optimize,
)
from edgeodom.selection import SelectionConfig, select_edges
from edgeodom.synthetic import (
    default_intrinsics,
    default_scene,
    generate_trajectory,
    render_frame,
)
from edgeodom.tracking import EdgeSet, TrackingConfig, extract_edges, preprocess_frame


SMALL_INTR = default_intrinsics(320, 240)


def make_keyframe(kf_id, ts, pose_wc, scene, k=200):
    tcfg = TrackingConfig()
    f = render_frame(scene, pose_wc, SMALL_INTR)
    frame = preprocess_frame(f.gray, f.depth, ts, tcfg)
    edges = extract_edges(frame)
    sel = select_edges(
        edges, frame.pyramid[0], Pose.identity(), SMALL_INTR, SelectionConfig(k=k)
    )
    return Keyframe(
        kf_id=kf_id,
        timestamp=ts,
        pose_cw=pose_wc.inverse(),
        edges=sel,
        pyramid=frame.pyramid,
        edge_map=frame.edge_map,
    )


def build_window(n_kfs, capacity=5, step=0.03, scene=None):
    scene = scene if scene is not None else default_scene()
    window = SlidingWindow(capacity=capacity)
    poses = generate_trajectory("line", n_kfs, step=step)
    for i, pose in enumerate(poses):
        kf = make_keyframe(i, i * 0.2, pose, scene)
        window.insert(kf)
        activate_edges(kf, window, SMALL_INTR)
    return window


@pytest.fixture(scope="module")
def window3():
    return build_window(3)


class TestActivation:
    def _toy_pair(self, host_edges):
        """Host keyframe observing a vertical edge line seen by a new keyframe."""
        intr = CameraIntrinsics(80.0, 80.0, 39.5, 39.5, 80, 80)
        mask = np.zeros((80, 80), dtype=bool)
        mask[:, 40] = True
        gd = np.zeros((80, 80, 2))
        gd[:, 40] = (1.0, 0.0)
        em = EdgeMap(mask=mask, grad_dir=gd, grad_mag=np.where(mask, 200.0, 0.0))
        pyr = build_pyramid(distance_transform(mask))
        host = Keyframe(0, 0.0, Pose.identity(), host_edges, pyr, em)
        new = Keyframe(
            1,
            0.2,
            Pose.identity(),
            EdgeSet(
                pix=np.zeros((0, 2)),
                inv_depth=np.zeros(0),
                grad_dir=np.zeros((0, 2)),
                grad_mag=np.zeros(0),
                age=np.zeros(0, dtype=int),
            ),
            pyr,
            em,
        )
        w = SlidingWindow(capacity=5)
        w.insert(host)
        w.insert(new)
        return host, new, w, intr

    def _edges(self, pix, dirs, ages):
        n = len(pix)
        return EdgeSet(
            pix=np.asarray(pix, dtype=float),
            inv_depth=np.ones(n),
            grad_dir=np.asarray(dirs, dtype=float),
            grad_mag=np.full(n, 200.0),
            age=np.asarray(ages, dtype=int),
        )

    def test_oldest_wins_cell(self):
        # two consistent candidates in one 20x20 cell: the longer track wins
        edges = self._edges(
            [[40.0, 30.0], [40.0, 35.0]], [[1, 0], [1, 0]], [2, 5]
        )
        host, new, w, intr = self._toy_pair(edges)
        activated = activate_edges(new, w, intr)
        assert activated == [(0, 1)]
        assert host.state[1] == ACTIVE
        assert host.state[0] == CANDIDATE

    def test_angle_limit(self):
        ok = np.deg2rad(29.0)
        bad = np.deg2rad(31.0)
        edges = self._edges(
            [[40.0, 10.0], [40.0, 50.0]],
            [[np.cos(ok), np.sin(ok)], [np.cos(bad), np.sin(bad)]],
            [1, 1],
        )
        host, new, w, intr = self._toy_pair(edges)
        activate_edges(new, w, intr)
        assert host.state[0] == ACTIVE
        assert host.state[1] == CANDIDATE

    def test_median_residual_filter(self):
        # candidates far from the new keyframe's edges exceed the median
        edges = self._edges(
            [[40.0, 10.0], [40.0, 30.0], [60.0, 50.0], [20.0, 55.0]],
            [[1, 0]] * 4,
            [1, 1, 1, 1],
        )
        host, new, w, intr = self._toy_pair(edges)
        activate_edges(new, w, intr)
        assert host.state[0] == ACTIVE
        assert host.state[1] == ACTIVE
        assert host.state[2] == CANDIDATE
        assert host.state[3] == CANDIDATE

    def test_one_per_cell_on_scene(self, window3):
        from edgeodom.mapping import ACTIVATION_CELL

        ncols = (SMALL_INTR.width + ACTIVATION_CELL - 1) // ACTIVATION_CELL
        for kf in window3.keyframes:
            idx = kf.active_indices()
            # active edges of one host occupy distinct host-frame cells only
            # approximately (activation cells live in the new keyframe), so
            # just check that activation actually happened
            assert len(idx) > 0 or kf is window3.keyframes[-1]
        del ncols


class TestWindowOptimize:
    def test_fixed_point_at_truth(self):
        # ground-truth poses are already within the quantization noise floor
        # of the distance fields, so refinement must stay in a small ball
        window = build_window(3)
        before = [kf.pose_cw for kf in window.keyframes]
        stats = window_optimize(window, SMALL_INTR, iterations=3)
        for kf, prev in zip(window.keyframes, before):
            delta = (kf.pose_cw @ prev.inverse()).log()
            assert np.linalg.norm(delta) < 5e-3
        assert stats["costs"][-1] <= stats["costs"][0] + 1e-12

    def test_costs_nonincreasing(self):
        window = build_window(4)
        # perturb the second keyframe pose so there is something to do
        kf = window.keyframes[1]
        kf.pose_cw = Pose.exp([0.004, -0.003, 0.002, 0.001, 0.002, -0.001]) @ kf.pose_cw
        stats = window_optimize(window, SMALL_INTR, iterations=6)
        assert (np.diff(stats["costs"]) <= 1e-12).all()

    def test_recovers_pose_perturbation(self):
        window = build_window(3)
        kf = window.keyframes[1]
        true_pose = kf.pose_cw
        perturb = np.array([0.005, 0.0, -0.004, 0.0, 0.002, 0.0])
        kf.pose_cw = Pose.exp(perturb) @ true_pose
        window_optimize(window, SMALL_INTR, iterations=20)
        err = (kf.pose_cw @ true_pose.inverse()).log()
        assert np.linalg.norm(err) < 0.5 * np.linalg.norm(perturb)

    def test_depth_perturbation_reduced(self, rng):
        # perturb a subset of one keyframe's inverse depths; the correct
        # majority anchors the poses, so the bad depths must move back
        import dataclasses

        window = build_window(3, step=0.1)
        kf = window.keyframes[0]
        idx = kf.active_indices()
        assert len(idx) > 0
        sub = rng.choice(idx, min(15, len(idx)), replace=False)
        true_rho = kf.edges.inv_depth.copy()
        rho = true_rho.copy()
        rho[sub] *= 1.25
        kf.edges = dataclasses.replace(kf.edges, inv_depth=rho)
        window_optimize(window, SMALL_INTR, iterations=10)
        err_before = np.abs(rho[sub] - true_rho[sub])
        err_after = np.abs(kf.edges.inv_depth[sub] - true_rho[sub])
        assert err_after.mean() < 0.8 * err_before.mean()

    def test_schur_matches_dense(self):
        w1 = build_window(3)
        # trim to a 20-edge instance so both solve paths stay well within
        # linear-algebra roundoff of each other
        total = 0
        for kf in w1.keyframes:
            for eidx in kf.active_indices():
                total += 1
                if total > 20:
                    kf.state[eidx] = CANDIDATE
        w2 = copy.deepcopy(w1)
        kf1 = w1.keyframes[1]
        kf1.pose_cw = Pose.exp([0.003, 0.001, -0.002, 0.001, 0.0, 0.002]) @ kf1.pose_cw
        kf2 = w2.keyframes[1]
        kf2.pose_cw = Pose.exp([0.003, 0.001, -0.002, 0.001, 0.0, 0.002]) @ kf2.pose_cw
        window_optimize(w1, SMALL_INTR, iterations=1, use_schur=True)
        window_optimize(w2, SMALL_INTR, iterations=1, use_schur=False)
        for a, b in zip(w1.keyframes, w2.keyframes):
            assert np.abs((a.pose_cw @ b.pose_cw.inverse()).log()).max() < 1e-8
            assert np.abs(a.edges.inv_depth - b.edges.inv_depth).max() < 1e-8

    def test_single_keyframe_noop(self):
        window = SlidingWindow(capacity=5)
        window.insert(make_keyframe(0, 0.0, Pose.identity(), default_scene()))
        stats = window_optimize(window, SMALL_INTR)
        assert stats["iterations"] == 0


def exact_two_kf_window():
    """Two keyframes with hand-built exact geometry and one active edge.

    The host edge at pixel (32, 32), depth 2, reprojects into the second
    keyframe (baseline 0.1 m along x) exactly onto the column-27 edge line:
    x' = 100 * (0 - 0.1) / 2 + 32 = 27. Residuals are therefore exactly zero
    at ground truth, and the reprojection is linear in inverse depth.
    """
    intr = CameraIntrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)

    def line_kf(kf_id, col, edges, pose_cw):
        mask = np.zeros((64, 64), dtype=bool)
        mask[:, col] = True
        gd = np.zeros((64, 64, 2))
        gd[:, col] = (1.0, 0.0)
        em = EdgeMap(mask=mask, grad_dir=gd, grad_mag=np.where(mask, 200.0, 0.0))
        return Keyframe(kf_id, 0.2 * kf_id, pose_cw, edges, build_pyramid(distance_transform(mask)), em)

    host_edges = EdgeSet(
        pix=np.array([[32.0, 32.0]]),
        inv_depth=np.array([0.5]),
        grad_dir=np.array([[1.0, 0.0]]),
        grad_mag=np.array([200.0]),
        age=np.array([1]),
    )
    no_edges = EdgeSet(
        pix=np.zeros((0, 2)),
        inv_depth=np.zeros(0),
        grad_dir=np.zeros((0, 2)),
        grad_mag=np.zeros(0),
        age=np.zeros(0, dtype=int),
    )
    kf0 = line_kf(0, 32, host_edges, Pose.identity())
    kf1 = line_kf(1, 27, no_edges, Pose(np.eye(3), np.array([-0.1, 0.0, 0.0])))
    kf0.state[0] = ACTIVE
    window = SlidingWindow(capacity=5)
    window.insert(kf0)
    window.insert(kf1)
    return window, intr


class TestExactGeometry:
    def test_zero_residual_fixed_point(self):
        from edgeodom.mapping import _residual_terms

        window, intr = exact_two_kf_window()
        terms, _ = _residual_terms(window, intr, 1.0)
        assert len(terms) == 1
        assert abs(terms[0]["r"]) < 1e-12
        before = [kf.pose_cw for kf in window.keyframes]
        rho_before = window.keyframes[0].edges.inv_depth.copy()
        window_optimize(window, intr, iterations=4)
        for kf, prev in zip(window.keyframes, before):
            assert np.linalg.norm((kf.pose_cw @ prev.inverse()).log()) < 1e-8
        assert np.abs(window.keyframes[0].edges.inv_depth - rho_before).max() < 1e-8

    def test_depth_perturbation_recovered_exactly(self):
        import dataclasses

        from edgeodom.mapping import MarginalizationPrior

        window, intr = exact_two_kf_window()
        kf0 = window.keyframes[0]
        true_rho = float(kf0.edges.inv_depth[0])
        kf0.edges = dataclasses.replace(
            kf0.edges, inv_depth=np.array([true_rho * 1.1])
        )
        # pin the poses with a strong prior so the scalar depth is the only
        # effective unknown; with one residual and a free pose the split
        # between pose and depth would be arbitrary
        window.prior = MarginalizationPrior(
            kf_ids=[0, 1],
            H=1e9 * np.eye(12),
            b=np.zeros(12),
            ref_poses=[kf.pose_cw for kf in window.keyframes],
        )
        window_optimize(window, intr, iterations=6)
        rel = abs(kf0.edges.inv_depth[0] - true_rho) / true_rho
        assert rel < 1e-4


class TestVictimChoice:
    def test_none_under_capacity(self):
        window = build_window(3, capacity=5)
        assert choose_marginalization_victim(window) is None

    def test_latest_two_exempt(self):
        window = build_window(5, capacity=5)
        victim = choose_marginalization_victim(window)
        assert victim is not None
        last_two = {kf.kf_id for kf in window.keyframes[-2:]}
        assert victim not in last_two

    def test_far_keyframe_preferred(self):
        scene = default_scene()
        window = SlidingWindow(capacity=5)
        poses = generate_trajectory("line", 4, step=0.02)
        # keyframe 0 sits far off to the side
        far = Pose(np.eye(3), np.array([1.2, 0.0, 0.0]))
        for i, pose in enumerate([far] + poses[:4]):
            kf = make_keyframe(i, i * 0.2, pose, scene)
            window.insert(kf)
            activate_edges(kf, window, SMALL_INTR)
        assert choose_marginalization_victim(window) == 0


class TestSchurMarginalize:
    def test_two_by_two_hand_oracle(self):
        H = np.array([[2.0, 1.0], [1.0, 3.0]])
        b = np.array([1.0, 2.0])
        H_red, b_red = schur_marginalize(H, b, keep=[0], drop=[1])
        assert H_red[0, 0] == pytest.approx(2.0 - 1.0 / 3.0)
        assert b_red[0] == pytest.approx(1.0 - 2.0 / 3.0)

    def test_minimizer_preserved(self, rng):
        # independent oracle: the reduced system's solution must equal the
        # kept coordinates of the full system's solution
        for _ in range(30):
            A = rng.normal(size=(12, 12))
            H = A @ A.T + 0.1 * np.eye(12)
            b = rng.normal(size=12)
            x_full = np.linalg.solve(H, -b)
            keep = list(range(0, 7))
            drop = list(range(7, 12))
            H_red, b_red = schur_marginalize(H, b, keep, drop)
            x_red = np.linalg.solve(H_red, -b_red)
            assert np.allclose(x_red, x_full[:7], atol=1e-8)

    def test_psd_through_chain(self, rng):
        A = rng.normal(size=(16, 30))
        H = A @ A.T
        b = rng.normal(size=16)
        for _ in range(10):
            n = H.shape[0]
            if n <= 2:
                break
            keep = list(range(n - 1))
            H, b = schur_marginalize(H, b, keep, [n - 1])
            assert np.linalg.eigvalsh(H).min() >= -1e-9

    def test_indefinite_clamped(self):
        H = np.diag([1.0, -0.5])
        b = np.zeros(2)
        H_red, _ = schur_marginalize(H, b, keep=[0, 1], drop=[])
        assert np.linalg.eigvalsh(H_red).min() >= 0.0

    def test_singular_block_uses_pseudoinverse(self):
        H = np.zeros((3, 3))
        H[0, 0] = 2.0
        b = np.array([1.0, 0.0, 0.0])
        H_red, b_red = schur_marginalize(H, b, keep=[0], drop=[1, 2])
        assert H_red[0, 0] == pytest.approx(2.0)
        assert b_red[0] == pytest.approx(1.0)


class TestMarginalizeKeyframe:
    def test_window_shrinks_and_prior_set(self):
        window = build_window(5, capacity=5)
        window_optimize(window, SMALL_INTR, iterations=2)
        victim = choose_marginalization_victim(window)
        assert victim is not None
        vic_kf = window.by_id(victim)
        prior = marginalize_keyframe(window, victim, SMALL_INTR)
        assert len(window) == 4
        assert victim not in [kf.kf_id for kf in window.keyframes]
        assert prior.kf_ids == [kf.kf_id for kf in window.keyframes]
        assert prior.H.shape == (24, 24)
        assert np.linalg.eigvalsh(prior.H).min() >= -1e-9
        assert (vic_kf.state != ACTIVE).all()

    def test_prior_zero_cost_at_reference(self):
        window = build_window(5, capacity=5)
        window_optimize(window, SMALL_INTR, iterations=2)
        victim = choose_marginalization_victim(window)
        prior = marginalize_keyframe(window, victim, SMALL_INTR)
        poses = {kf.kf_id: kf.pose_cw for kf in window.keyframes}
        # at the linearization point the quadratic term vanishes; only the
        # (generally nonzero) gradient part remains, and offsets are zero
        assert np.linalg.norm(prior.offsets(poses)) < 1e-12
        assert prior.cost(poses) == pytest.approx(0.0, abs=1e-12)

    def test_optimization_continues_after_marginalization(self):
        window = build_window(5, capacity=5)
        window_optimize(window, SMALL_INTR, iterations=2)
        victim = choose_marginalization_victim(window)
        marginalize_keyframe(window, victim, SMALL_INTR)
        stats = window_optimize(window, SMALL_INTR, iterations=3)
        assert (np.diff(stats["costs"]) <= 1e-12).all()


class TestWindowValidation:
    def test_capacity_bounds(self):
        with pytest.raises(ValueError):
            SlidingWindow(capacity=4)
        with pytest.raises(ValueError):
            SlidingWindow(capacity=8)
        SlidingWindow(capacity=5)
        SlidingWindow(capacity=7)
