"""Corner-jitter homography augmentation for the thermal image of a pair."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .feature_mining import bilinear_gather
from .geometry import BoundingBox, clip

_INFINITY_EPS = 1e-12


@dataclass(frozen=True)
class CornerJitter:
    alpha: float
    shifts: np.ndarray  # (4, 2) as (t_x, t_y) per corner
    seed: int
    index: int | None = None


@dataclass(frozen=True)
class HomographyMatrix:
    matrix: np.ndarray
    src: np.ndarray | None = None
    dst: np.ndarray | None = None

    def inverse(self) -> "HomographyMatrix":
        inv = np.linalg.inv(self.matrix)
        return HomographyMatrix(inv / inv[2, 2], self.dst, self.src)

    def __matmul__(self, other: "HomographyMatrix") -> "HomographyMatrix":
        m = self.matrix @ other.matrix
        return HomographyMatrix(m / m[2, 2])


def jitter_rng(seed: int, index: int | None = None) -> np.random.Generator:
    """Generator for one image: derived from ``(seed, index)``, schedule independent."""
    key = () if index is None else (int(index),)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def sample_jitter(alpha: float, seed: int, index: int | None = None) -> CornerJitter:
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    shifts = jitter_rng(seed, index).uniform(-alpha, alpha, size=(4, 2))
    if alpha == 0:
        shifts = np.zeros((4, 2))
    return CornerJitter(float(alpha), shifts, int(seed), index)


def image_corners(width: float, height: float) -> np.ndarray:
    return np.array([[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]])


def _check_general_position(pts: np.ndarray, name: str):
    scale = max(1.0, float(np.abs(pts).max()))
    for a, b, c in combinations(range(4), 3):
        u, v = pts[b] - pts[a], pts[c] - pts[a]
        if abs(u[0] * v[1] - u[1] * v[0]) <= 1e-12 * scale * scale:
            raise ValueError(f"degenerate corner configuration ({name} points {a},{b},{c} collinear)")


def _normalizer(pts: np.ndarray) -> np.ndarray:
    mean = pts.mean(axis=0)
    dist = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / dist
    return np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])


def solve_homography(src, dst) -> HomographyMatrix:
    """Four-point direct linear transform with the bottom-right entry fixed to 1.

    Points are conditioned by similarity normalization before solving the
    8 x 8 system.
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    _check_general_position(src, "source")
    _check_general_position(dst, "target")
    shift = dst - src
    if np.all(shift == shift[0]):
        # pure translation has a closed form; keeps warp_box bit-exact for it
        m = translation_homography(*shift[0]).matrix
        return HomographyMatrix(m, src, dst)
    ts, td = _normalizer(src), _normalizer(dst)
    ps = (ts @ np.c_[src, np.ones(4)].T).T[:, :2]
    pd = (td @ np.c_[dst, np.ones(4)].T).T[:, :2]
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for n, ((x, y), (u, v)) in enumerate(zip(ps, pd)):
        a[2 * n] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * n + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * n], rhs[2 * n + 1] = u, v
    try:
        h = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        raise ValueError("degenerate corner configuration") from None
    m = np.linalg.inv(td) @ np.append(h, 1.0).reshape(3, 3) @ ts
    if abs(m[2, 2]) < _INFINITY_EPS:
        raise ValueError("degenerate corner configuration")
    return HomographyMatrix(m / m[2, 2], src, dst)


def jitter_homography(width: float, height: float, jitter: CornerJitter) -> HomographyMatrix:
    src = image_corners(width, height)
    t = jitter.shifts
    if np.all(t == t[0]):
        return HomographyMatrix(translation_homography(*t[0]).matrix, src, src + t)
    return solve_homography(src, src + t)


def translation_homography(dx: float, dy: float) -> HomographyMatrix:
    return HomographyMatrix(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]))


def _as_matrix(h) -> np.ndarray:
    return h.matrix if isinstance(h, HomographyMatrix) else np.asarray(h, dtype=np.float64)


def project_points(h, pts) -> np.ndarray:
    m = _as_matrix(h)
    pts = np.asarray(pts, dtype=np.float64)
    u = m[0, 0] * pts[..., 0] + m[0, 1] * pts[..., 1] + m[0, 2]
    v = m[1, 0] * pts[..., 0] + m[1, 1] * pts[..., 1] + m[1, 2]
    wz = m[2, 0] * pts[..., 0] + m[2, 1] * pts[..., 1] + m[2, 2]
    if np.any(np.abs(wz) <= _INFINITY_EPS):
        raise ValueError("point at infinity")
    return np.stack([u / wz, v / wz], axis=-1)


def project(h, p) -> tuple[float, float]:
    x, y = project_points(h, np.asarray(p, dtype=np.float64))
    return (float(x), float(y))


def warp_image(img, h) -> np.ndarray:
    """Inverse-mapping bilinear warp of ``img[..., H, W]``; uncovered pixels are zero."""
    m = _as_matrix(h)
    if abs(np.linalg.det(m)) < 1e-12:
        raise ValueError("singular homography")
    img = np.asarray(img, dtype=np.float64)
    hgt, wid = img.shape[-2:]
    inv = np.linalg.inv(m)
    ys, xs = np.mgrid[0:hgt, 0:wid].astype(np.float64)
    src = project_points(inv, np.stack([xs, ys], axis=-1))
    return bilinear_gather(img, src[..., 0], src[..., 1])


def warp_box(b: BoundingBox, h) -> BoundingBox:
    """Axis-aligned hull of the four projected corners."""
    m = _as_matrix(h)
    if abs(np.linalg.det(m)) < 1e-12:
        raise ValueError("singular homography")
    corners = np.array([[b.x1, b.y1], [b.x2, b.y1], [b.x2, b.y2], [b.x1, b.y2]])
    p = project_points(m, corners)
    return BoundingBox(float(p[:, 0].min()), float(p[:, 1].min()),
                       float(p[:, 0].max()), float(p[:, 1].max()))


def warp_boxes(boxes, h, width: float, height: float) -> list[BoundingBox | None]:
    """Warp, then clip to the frame; boxes pushed fully outside become ``None``."""
    return [clip(warp_box(b, h), width, height) for b in boxes]


def augment(img, boxes, alpha: float, seed: int, index: int | None = None):
    """Jitter the frame corners, warp ``img`` and its boxes.

    Returns ``(warped, boxes, homography)`` with dropped boxes as ``None``.
    """
    img = np.asarray(img, dtype=np.float64)
    hgt, wid = img.shape[-2:]
    lam = jitter_homography(wid, hgt, sample_jitter(alpha, seed, index))
    return warp_image(img, lam), warp_boxes(boxes, lam, wid, hgt), lam
