"""Keypoint matching and robust homography alignment of mixed/transmission pairs."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from dereflect.errors import (
    AlignmentError,
    DimensionError,
    InsufficientFeaturesError,
    ValidationError,
)
from dereflect.images import to_gray

RATIO_THRESHOLD = 0.75
INLIER_TOL = 2.0
MAX_ITERS = 2000
MIN_MATCHES = 4


@dataclass(frozen=True)
class KeypointMatch:
    src: tuple[float, float]  # (x, y) in the mixed image
    dst: tuple[float, float]  # (x, y) in the transmission image
    descriptor_distance: float


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValidationError(f"homography must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) <= 1e-10 or m[2, 2] == 0:
            raise ValidationError("homography is singular")
        object.__setattr__(self, "matrix", m / m[2, 2])

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return apply_homography(self.matrix, pts)


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    homog = np.hstack([pts, np.ones((len(pts), 1))]) @ h.T
    return homog[:, :2] / homog[:, 2:3]


def _to_u8_gray(img: np.ndarray) -> np.ndarray:
    gray = to_gray(img) if img.ndim == 3 else img
    return np.rint(np.clip(gray, 0, 1) * 255).astype(np.uint8)


def detect_and_match(
    mixed: np.ndarray,
    transmission: np.ndarray,
    ratio_threshold: float = RATIO_THRESHOLD,
) -> list[KeypointMatch]:
    """SIFT keypoints matched with Lowe's ratio test, sorted by descriptor distance."""
    for name, img in (("mixed", mixed), ("transmission", transmission)):
        if img.shape[0] < 64 or img.shape[1] < 64:
            raise ValidationError(f"{name} must be at least 64x64 for keypoint detection")
    sift = cv2.SIFT_create()
    kp_m, des_m = sift.detectAndCompute(_to_u8_gray(mixed), None)
    kp_t, des_t = sift.detectAndCompute(_to_u8_gray(transmission), None)
    if des_m is None or des_t is None or len(kp_m) < 2 or len(kp_t) < 2:
        raise InsufficientFeaturesError("no usable keypoints")

    matcher = cv2.BFMatcher(cv2.NORM_L2)
    h_m, w_m = mixed.shape[:2]
    h_t, w_t = transmission.shape[:2]
    matches = []
    for pair in matcher.knnMatch(des_m, des_t, k=2):
        if len(pair) < 2:
            continue
        best, second = pair
        if best.distance >= ratio_threshold * second.distance:
            continue
        sx, sy = kp_m[best.queryIdx].pt
        dx, dy = kp_t[best.trainIdx].pt
        if not (0 <= sx <= w_m - 1 and 0 <= sy <= h_m - 1 and 0 <= dx <= w_t - 1 and 0 <= dy <= h_t - 1):
            continue
        matches.append(KeypointMatch((sx, sy), (dx, dy), float(best.distance)))
    matches.sort(key=lambda m: m.descriptor_distance)
    if len(matches) < MIN_MATCHES:
        raise InsufficientFeaturesError(f"only {len(matches)} matches survived the ratio test")
    return matches


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(pts - centroid, axis=1))
    s = np.sqrt(2) / mean_dist if mean_dist > 0 else 1.0
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1]])


def fit_homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalized DLT least-squares fit; returns None for degenerate input."""
    n1, n2 = _normalizer(src), _normalizer(dst)
    s = apply_homography(n1, src)
    d = apply_homography(n2, dst)
    rows = []
    for (x, y), (u, v) in zip(s, d):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] < 1e-12 * sv[0]:
        return None
    h = np.linalg.inv(n2) @ vt[-1].reshape(3, 3) @ n1
    if abs(h[2, 2]) < 1e-15:
        return None
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= 1e-10:
        return None
    return h


def _reprojection_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    homog = np.hstack([src, np.ones((len(src), 1))]) @ h.T
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = homog[:, :2] / homog[:, 2:3]
        err = np.linalg.norm(proj - dst, axis=1)
    err[~np.isfinite(err)] = np.inf
    # points mapped through the line at infinity are never inliers
    err[homog[:, 2] <= 0] = np.inf
    return err


def _collinear(pts: np.ndarray) -> bool:
    for i in range(4):
        a, b, c = np.delete(pts, i, axis=0)
        if abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) < 1e-6:
            return True
    return False


def estimate_homography(
    matches: list[KeypointMatch] | np.ndarray,
    rng: np.random.Generator,
    max_iters: int = MAX_ITERS,
    inlier_tol: float = INLIER_TOL,
    confidence: float = 0.999,
) -> tuple[Homography, np.ndarray]:
    """RANSAC over minimal 4-point samples, then a least-squares refit on the consensus set.

    ``matches`` may also be an ``(N, 4)`` array of ``[sx, sy, dx, dy]`` rows.
    Iteration stops early once the adaptive bound for ``confidence`` is met.
    """
    if isinstance(matches, np.ndarray):
        pairs = np.asarray(matches, dtype=np.float64)
    else:
        pairs = np.array([[*m.src, *m.dst] for m in matches], dtype=np.float64).reshape(-1, 4)
    n = len(pairs)
    if n < MIN_MATCHES:
        raise ValidationError(f"need at least {MIN_MATCHES} matches, got {n}")
    src, dst = pairs[:, :2], pairs[:, 2:]

    best_mask = None
    best_key = (-1, np.inf)
    needed = max_iters
    it = 0
    while it < min(max_iters, needed):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        if _collinear(src[idx]) or _collinear(dst[idx]):
            continue
        h = fit_homography_dlt(src[idx], dst[idx])
        if h is None:
            continue
        err = _reprojection_error(h, src, dst)
        mask = err < inlier_tol
        count = int(mask.sum())
        key = (count, float(err[mask].sum()) if count else np.inf)
        if count > best_key[0] or (count == best_key[0] and key[1] < best_key[1]):
            best_key, best_mask = key, mask
            ratio = count / n
            if ratio >= 1.0:
                needed = 0
            elif ratio > 0:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - ratio**4)))

    if best_mask is None or best_key[0] < MIN_MATCHES:
        raise AlignmentError("no homography supported by at least 4 inliers")

    mask = best_mask
    h = None
    # refit on the consensus set until it stops changing
    for _ in range(5):
        refit = fit_homography_dlt(src[mask], dst[mask])
        if refit is None:
            break
        new_mask = _reprojection_error(refit, src, dst) < inlier_tol
        if new_mask.sum() < MIN_MATCHES:
            break
        h = refit
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if h is None:
        raise AlignmentError("least-squares refit on the inlier set is degenerate")
    return Homography(h), mask


def warp_to_reference(
    mixed: np.ndarray, h: Homography | np.ndarray, out_shape: tuple[int, int] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Resample ``mixed`` into the reference frame where ``h`` maps mixed -> reference.

    Returns the warped image and a boolean validity mask marking output pixels
    whose source location lies inside ``mixed``.
    """
    matrix = h.matrix if isinstance(h, Homography) else Homography(np.asarray(h)).matrix
    out_h, out_w = out_shape if out_shape is not None else mixed.shape[:2]
    inv = np.linalg.inv(matrix)
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    src = inv @ pts
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = src[0] / src[2]
        sy = src[1] / src[2]
    # snap coordinates that differ from an integer only by round-off
    for coord in (sx, sy):
        near = np.abs(coord - np.rint(coord)) < 1e-9
        coord[near] = np.rint(coord[near])

    in_h, in_w = mixed.shape[:2]
    valid = np.isfinite(sx) & np.isfinite(sy) & (src[2] > 0)
    valid &= (sx >= 0) & (sx <= in_w - 1) & (sy >= 0) & (sy <= in_h - 1)
    sx = np.where(valid, sx, 0.0)
    sy = np.where(valid, sy, 0.0)
    x0 = np.minimum(np.floor(sx).astype(np.int64), in_w - 1)
    y0 = np.minimum(np.floor(sy).astype(np.int64), in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    fx = (sx - x0)[:, None]
    fy = (sy - y0)[:, None]

    flat = mixed.reshape(in_h * in_w, -1)
    top = flat[y0 * in_w + x0] * (1 - fx) + flat[y0 * in_w + x1] * fx
    bottom = flat[y1 * in_w + x0] * (1 - fx) + flat[y1 * in_w + x1] * fx
    out = top * (1 - fy) + bottom * fy
    out[~valid] = 0.0
    out = out.reshape(out_h, out_w, *mixed.shape[2:])
    return out, valid.reshape(out_h, out_w)


def corner_shift(h: Homography, shape: tuple[int, int]) -> float:
    """Mean displacement of the four image corners under ``h``."""
    rows, cols = shape[:2]
    corners = np.array([[0, 0], [cols - 1, 0], [cols - 1, rows - 1], [0, rows - 1]], dtype=np.float64)
    return float(np.mean(np.linalg.norm(h.apply(corners) - corners, axis=1)))


@dataclass
class AlignmentReport:
    n_matches: int
    n_inliers: int
    corner_shift_px: float


def align_pair(
    mixed: np.ndarray,
    transmission: np.ndarray,
    rng: np.random.Generator,
    ratio_threshold: float = RATIO_THRESHOLD,
    max_iters: int = MAX_ITERS,
    inlier_tol: float = INLIER_TOL,
) -> tuple[np.ndarray, np.ndarray, Homography, AlignmentReport]:
    if mixed.ndim != transmission.ndim:
        raise DimensionError("mixed and transmission must have the same number of channels")
    matches = detect_and_match(mixed, transmission, ratio_threshold)
    h, mask = estimate_homography(matches, rng, max_iters=max_iters, inlier_tol=inlier_tol)
    warped, valid = warp_to_reference(mixed, h, transmission.shape[:2])
    report = AlignmentReport(len(matches), int(mask.sum()), corner_shift(h, mixed.shape[:2]))
    return warped, valid, h, report
