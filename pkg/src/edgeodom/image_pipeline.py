"""Frame preprocessing: Canny edges, distance fields, and the field pyramid.

Each incoming RGBD frame is converted into an edge map (mask + per-pixel
gradient direction/magnitude), an exact Euclidean distance field that also
retains the coordinate of the nearest edge pixel, and a three-level pyramid
of such fields where coarser levels are produced by bilinear downsampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# Distances are capped when stored; residuals beyond the cap carry no useful
# gradient and the cap bounds the field's dynamic range.
DEFAULT_DISTANCE_CAP = 30.0
PYRAMID_LEVELS = 3

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
_SOBEL_Y = _SOBEL_X.T


class NoEdgesError(RuntimeError):
    """Raised when a frame yields no edges and cannot be tracked against."""


@dataclass(frozen=True)
class EdgeMap:
    """Binary edge mask with per-pixel gradient direction and magnitude."""

    mask: np.ndarray       # (H, W) bool
    grad_dir: np.ndarray   # (H, W, 2) unit vectors (x, y); zero where flat
    grad_mag: np.ndarray   # (H, W) float

    @property
    def shape(self):
        return self.mask.shape

    def edge_pixels(self) -> np.ndarray:
        """Edge coordinates as (N, 2) array of (x, y)."""
        ys, xs = np.nonzero(self.mask)
        return np.stack([xs, ys], axis=1)


@dataclass(frozen=True)
class DistanceField:
    """Euclidean distance to the nearest edge plus the attaining coordinate."""

    distance: np.ndarray  # (H, W) float, capped
    nearest: np.ndarray   # (H, W, 2) float, (x, y) of the nearest edge pixel
    has_edges: bool = True

    @property
    def shape(self):
        return self.distance.shape


@dataclass(frozen=True)
class DistanceFieldPyramid:
    """Exactly three DistanceField levels, level 0 at full resolution."""

    levels: tuple

    def __post_init__(self):
        if len(self.levels) != PYRAMID_LEVELS:
            raise ValueError(f"expected {PYRAMID_LEVELS} levels")

    def __getitem__(self, level: int) -> DistanceField:
        return self.levels[level]


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """24-bit RGB to 8-bit gray via luminance weights 0.299/0.587/0.114."""
    rgb = np.asarray(rgb, dtype=float)
    gray = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.round(gray), 0, 255).astype(np.uint8)


def image_gradients(img: np.ndarray):
    """3x3 Sobel gradients (gx, gy, magnitude) of a grayscale image."""
    img = np.asarray(img, dtype=float)
    gx = ndimage.convolve(img, _SOBEL_X[::-1, ::-1], mode="nearest")
    gy = ndimage.convolve(img, _SOBEL_Y[::-1, ::-1], mode="nearest")
    mag = np.hypot(gx, gy)
    return gx, gy, mag


def _nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Non-maximum suppression along the quantized gradient direction.

    Keeps a pixel when its magnitude beats the neighbor in the positive
    gradient direction strictly and the negative-direction neighbor weakly,
    so plateau ties produce a single one-pixel-wide response.
    """
    h, w = mag.shape
    angle = np.arctan2(gy, gx)  # (-pi, pi]
    # Quantize to 4 directions: 0, 45, 90, 135 degrees.
    sector = np.round(angle / (np.pi / 4.0)).astype(int) % 4
    offs = {
        0: (1, 0),   # horizontal gradient -> compare left/right
        1: (1, 1),   # diagonal
        2: (0, 1),   # vertical gradient -> compare up/down
        3: (-1, 1),
    }
    keep = np.zeros_like(mag, dtype=bool)
    padded = np.pad(mag, 1, mode="constant")
    ys, xs = np.mgrid[0:h, 0:w]
    for s, (dx, dy) in offs.items():
        sel = sector == s
        n_pos = padded[ys[sel] + 1 + dy, xs[sel] + 1 + dx]
        n_neg = padded[ys[sel] + 1 - dy, xs[sel] + 1 - dx]
        m = mag[sel]
        keep[ys[sel], xs[sel]] = (m > n_pos) & (m >= n_neg)
    keep &= mag > 0
    return keep


def canny_detect(
    img: np.ndarray,
    low: float = 40.0,
    high: float = 100.0,
    gaussian_sigma: float = 0.0,
) -> EdgeMap:
    """Canny edge detection: Sobel, NMS, and hysteresis thresholding.

    Thresholds apply to raw 3x3 Sobel magnitudes of the (optionally smoothed)
    [0, 255] image. A uniform image yields an empty edge map.
    """
    if not (0 < low < high):
        raise ValueError("thresholds must satisfy 0 < low < high")
    img = np.asarray(img, dtype=float)
    if gaussian_sigma > 0:
        img = ndimage.gaussian_filter(img, gaussian_sigma, mode="nearest")
    gx, gy, mag = image_gradients(img)
    thin = _nms(mag, gx, gy)
    weak = thin & (mag >= low)
    strong = thin & (mag >= high)
    # Hysteresis: keep weak components connected (8-neighborhood) to a strong
    # pixel.
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n:
        strong_labels = np.unique(labels[strong])
        strong_labels = strong_labels[strong_labels > 0]
        keep_label = np.zeros(n + 1, dtype=bool)
        keep_label[strong_labels] = True
        mask = keep_label[labels]
    else:
        mask = np.zeros_like(weak)
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.where(mag > 0, mag, 1.0)
        grad_dir = np.stack([gx / norm, gy / norm], axis=-1)
    grad_dir[mag == 0] = 0.0
    return EdgeMap(mask=mask, grad_dir=grad_dir, grad_mag=mag)


def distance_transform(
    edges: EdgeMap | np.ndarray, cap: float = DEFAULT_DISTANCE_CAP
) -> DistanceField:
    """Exact Euclidean distance transform retaining nearest-edge coordinates.

    An empty edge mask produces a sentinel field (has_edges=False) with the
    cap everywhere; callers treat such frames as untrackable.
    """
    mask = edges.mask if isinstance(edges, EdgeMap) else np.asarray(edges, dtype=bool)
    h, w = mask.shape
    if not mask.any():
        nearest = np.full((h, w, 2), -1.0)
        return DistanceField(
            distance=np.full((h, w), cap), nearest=nearest, has_edges=False
        )
    dist, (iy, ix) = ndimage.distance_transform_edt(~mask, return_indices=True)
    nearest = np.stack([ix, iy], axis=-1).astype(float)
    return DistanceField(distance=np.minimum(dist, cap), nearest=nearest)


def _bilinear(arr: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sample of a 2D array at float coordinates (clamped)."""
    h, w = arr.shape
    x = np.clip(x, 0.0, w - 1.0 - 1e-9)
    y = np.clip(y, 0.0, h - 1.0 - 1e-9)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = x - x0
    wy = y - y0
    v00 = arr[y0, x0]
    v10 = arr[y0, x1]
    v01 = arr[y1, x0]
    v11 = arr[y1, x1]
    return (
        v00 * (1 - wx) * (1 - wy)
        + v10 * wx * (1 - wy)
        + v01 * (1 - wx) * wy
        + v11 * wx * wy
    )


def build_pyramid(field: DistanceField) -> DistanceFieldPyramid:
    """Three-level pyramid by bilinear downsampling of the level-0 field.

    Coarse pixel (x, y) samples the finer level at (2x + 0.5, 2y + 0.5)
    (pixel-center alignment); distances are rescaled by 0.5 per level so they
    remain in level-local pixels, and nearest-edge coordinates are mapped into
    level-local coordinates.
    """
    levels = [field]
    for _ in range(PYRAMID_LEVELS - 1):
        fine = levels[-1]
        h, w = fine.shape
        ch, cw = (h + 1) // 2, (w + 1) // 2
        ys, xs = np.mgrid[0:ch, 0:cw]
        fx = 2.0 * xs + 0.5
        fy = 2.0 * ys + 0.5
        dist = 0.5 * _bilinear(fine.distance, fx, fy)
        # Nearest coordinates come from the nearest fine pixel, mapped to
        # coarse coordinates.
        nx = fine.nearest[..., 0][
            np.clip(np.round(fy).astype(int), 0, h - 1),
            np.clip(np.round(fx).astype(int), 0, w - 1),
        ]
        ny = fine.nearest[..., 1][
            np.clip(np.round(fy).astype(int), 0, h - 1),
            np.clip(np.round(fx).astype(int), 0, w - 1),
        ]
        nearest = np.stack([(nx - 0.5) / 2.0, (ny - 0.5) / 2.0], axis=-1)
        levels.append(
            DistanceField(distance=dist, nearest=nearest, has_edges=fine.has_edges)
        )
    return DistanceFieldPyramid(levels=tuple(levels))


def field_lookup(field: DistanceField, pts: np.ndarray):
    """Interpolated distance, distance gradient, and nearest-edge coordinate.

    Returns (distance, gradient (N, 2), nearest (N, 2), valid). Points must
    lie strictly inside a 1-pixel border margin; others are flagged invalid.
    The gradient is the analytic derivative of the bilinear surface at the
    query point.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    h, w = field.shape
    x, y = pts[..., 0], pts[..., 1]
    with np.errstate(invalid="ignore"):
        valid = (x > 1.0) & (x < w - 2.0) & (y > 1.0) & (y < h - 2.0)
    valid &= np.isfinite(x) & np.isfinite(y)
    xs = np.where(valid, x, 1.5)
    ys = np.where(valid, y, 1.5)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    wx = xs - x0
    wy = ys - y0
    D = field.distance
    v00 = D[y0, x0]
    v10 = D[y0, x0 + 1]
    v01 = D[y0 + 1, x0]
    v11 = D[y0 + 1, x0 + 1]
    dist = (
        v00 * (1 - wx) * (1 - wy)
        + v10 * wx * (1 - wy)
        + v01 * (1 - wx) * wy
        + v11 * wx * wy
    )
    gx = (v10 - v00) * (1 - wy) + (v11 - v01) * wy
    gy = (v01 - v00) * (1 - wx) + (v11 - v10) * wx
    grad = np.stack([gx, gy], axis=-1)
    xi = np.clip(np.round(xs).astype(int), 0, w - 1)
    yi = np.clip(np.round(ys).astype(int), 0, h - 1)
    nearest = field.nearest[yi, xi]
    return dist, grad, nearest, valid
