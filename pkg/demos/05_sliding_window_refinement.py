"""Sliding-window refinement and Schur-complement marginalization.

Builds a small window of keyframes from rendered frames, perturbs one pose,
and lets the joint optimizer (poses + active inverse depths, depths
eliminated by Schur complement) pull it back. Then marginalizes a keyframe
and shows the resulting quadratic prior.
"""

import numpy as np

from edgeodom.geometry import Pose
from edgeodom.mapping import (
    Keyframe,
    SlidingWindow,
    activate_edges,
    marginalize_keyframe,
    schur_marginalize,
    window_optimize,
)
from edgeodom.selection import SelectionConfig, select_edges
from edgeodom.synthetic import default_intrinsics, default_scene, generate_trajectory, render_frame
from edgeodom.tracking import TrackingConfig, extract_edges, preprocess_frame

intr = default_intrinsics(320, 240)
scene = default_scene()
poses = generate_trajectory("line", 3, step=0.03)

window = SlidingWindow(capacity=5)
for i, p in enumerate(poses):
    frame = render_frame(scene, p, intr)
    pre = preprocess_frame(frame.gray, frame.depth, i / 30.0, TrackingConfig())
    edges = select_edges(
        extract_edges(pre), pre.pyramid[0], Pose.identity(), intr,
        SelectionConfig(k=200),
    )
    kf = Keyframe(
        kf_id=i,
        timestamp=i / 30.0,
        pose_cw=p.inverse(),
        edges=edges,
        pyramid=pre.pyramid,
        edge_map=pre.edge_map,
    )
    window.insert(kf)
    activate_edges(kf, window, intr)

active = sum(len(kf.active_indices()) for kf in window.keyframes)
print(f"window of {len(window)} keyframes, {active} active edges")

# Perturb the second keyframe pose and refine the whole window.
kf = window.keyframes[1]
true_pose = kf.pose_cw
perturb = np.array([0.005, 0.0, -0.004, 0.0, 0.002, 0.0])
kf.pose_cw = Pose.exp(perturb) @ true_pose
stats = window_optimize(window, intr, iterations=20)
err = np.linalg.norm((kf.pose_cw @ true_pose.inverse()).log())
print(f"pose error: {np.linalg.norm(perturb):.4f} before, {err:.4f} after "
      f"({stats['iterations']} accepted iterations, cost "
      f"{stats['costs'][0]:.1f} -> {stats['costs'][-1]:.1f})")

# Marginalize the oldest keyframe: its constraints fold into a quadratic
# prior over the remaining poses instead of being discarded.
marginalize_keyframe(window, window.keyframes[0].kf_id, intr)
prior = window.prior
print(f"after marginalization: {len(window)} keyframes, prior over "
      f"{len(prior.kf_ids)} poses, min prior eigenvalue "
      f"{np.linalg.eigvalsh(prior.H).min():.2e}")

# The same machinery on a toy quadratic: the reduced system keeps the exact
# minimizer of the surviving variables.
rng = np.random.default_rng(0)
A = rng.normal(size=(6, 6))
H = A @ A.T + 0.5 * np.eye(6)
b = rng.normal(size=6)
x_full = np.linalg.solve(H, -b)
H_red, b_red = schur_marginalize(H, b, keep=[0, 1, 2], drop=[3, 4, 5])
x_red = np.linalg.solve(H_red, -b_red)
print("toy system minimizer preserved:", np.abs(x_red - x_full[:3]).max() < 1e-12)
