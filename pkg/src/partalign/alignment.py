"""Feature-map alignment: cosine matching, RANSAC transform fitting, and
inverse warping onto a destination canvas.

Coordinates are (row, col) pairs in grid-cell units, with cell (0, 0)
centered at coordinate (0, 0).  A fitted transform maps source coordinates
onto the destination grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .tensors import ensure_feature_map

DEGENERACY_EPS = 1e-9

TRANSFORM_FAMILIES = ("affine", "translation", "homography", "none")


class Match(NamedTuple):
    dst: tuple[int, int]
    src: tuple[int, int]
    score: float


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix mapping homogeneous (row, col) source points to destination."""

    theta: np.ndarray

    def __post_init__(self) -> None:
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (2, 3):
            raise ValueError(f"theta must be 2x3, got {theta.shape}")
        if not np.isfinite(theta).all():
            raise ValueError("theta contains non-finite entries")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def translation(cls, d_row: float, d_col: float) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, d_row], [0.0, 1.0, d_col]]))

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.theta[:, :2]))

    def is_degenerate(self) -> bool:
        return abs(self.determinant) <= DEGENERACY_EPS

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.theta[:, :2].T + self.theta[:, 2]

    def inverse(self) -> "AffineTransform":
        if self.is_degenerate():
            raise ValueError("degenerate transform: linear block not invertible")
        inv = np.linalg.inv(self.theta[:, :2])
        return AffineTransform(np.hstack([inv, -inv @ self.theta[:, 2:3]]))


@dataclass(frozen=True)
class Homography:
    """3x3 projective matrix on (row, col) coordinates, normalized so m[2,2]=1."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"matrix must be 3x3, got {m.shape}")
        if not np.isfinite(m).all() or abs(m[2, 2]) <= DEGENERACY_EPS:
            raise ValueError("invalid homography matrix")
        object.__setattr__(self, "matrix", m / m[2, 2])

    def is_degenerate(self) -> bool:
        return abs(np.linalg.det(self.matrix)) <= DEGENERACY_EPS

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        hom = np.hstack([pts, np.ones((len(pts), 1))]) @ self.matrix.T
        with np.errstate(divide="ignore", invalid="ignore"):
            out = hom[:, :2] / hom[:, 2:3]
        # A point on the projective horizon has no finite image; mark it so
        # downstream bounds checks treat it as out of canvas.
        out[~np.isfinite(out).all(axis=1)] = np.inf
        return out

    def inverse(self) -> "Homography":
        if self.is_degenerate():
            raise ValueError("degenerate homography: not invertible")
        return Homography(np.linalg.inv(self.matrix))


Transform = AffineTransform | Homography


def _cosine_matrix(dst_map: np.ndarray, src_map: np.ndarray) -> np.ndarray:
    c = dst_map.shape[2]
    a = dst_map.reshape(-1, c).astype(np.float64)
    b = src_map.reshape(-1, c).astype(np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    a = a / np.where(na > 0, na, 1.0)
    b = b / np.where(nb > 0, nb, 1.0)
    return a @ b.T


def _matches_from_similarity(
    sim: np.ndarray, threshold: float, dst_w: int, src_w: int
) -> list[Match]:
    dst_flat, src_flat = np.nonzero(sim > threshold)
    return [
        Match(
            dst=(int(d // dst_w), int(d % dst_w)),
            src=(int(s // src_w), int(s % src_w)),
            score=float(sim[d, s]),
        )
        for d, s in zip(dst_flat, src_flat)
    ]


def match_features(
    dst_map: np.ndarray, src_map: np.ndarray, threshold: float
) -> list[Match]:
    """All cell pairs whose feature vectors have cosine similarity > threshold.

    The cosine of a zero vector with anything is defined as 0.  Output order
    is row-major over destination cells, then over source cells.
    """
    dst_map = ensure_feature_map(dst_map, "dst map")
    src_map = ensure_feature_map(src_map, "src map")
    if dst_map.shape[2] != src_map.shape[2]:
        raise ValueError(
            f"channel mismatch: {dst_map.shape[2]} vs {src_map.shape[2]}"
        )
    sim = _cosine_matrix(dst_map, src_map)
    return _matches_from_similarity(sim, threshold, dst_map.shape[1], src_map.shape[1])


def _match_arrays(matches: Sequence[Match]) -> tuple[np.ndarray, np.ndarray]:
    src = np.array([m.src for m in matches], dtype=np.float64)
    dst = np.array([m.dst for m in matches], dtype=np.float64)
    return src, dst


def fit_affine_lstsq(src: np.ndarray, dst: np.ndarray) -> AffineTransform:
    """Least-squares affine fit (SVD-backed) on >= 3 point correspondences."""
    if len(src) < 3:
        raise ValueError("need at least 3 correspondences")
    a = np.hstack([src, np.ones((len(src), 1))])
    sol, *_ = np.linalg.lstsq(a, dst, rcond=None)
    t = AffineTransform(sol.T)
    if t.is_degenerate():
        raise ValueError("degenerate affine fit (collinear correspondences)")
    return t


def _fit_translation(src: np.ndarray, dst: np.ndarray) -> AffineTransform:
    d = (dst - src).mean(axis=0)
    return AffineTransform.translation(d[0], d[1])


def _fit_homography_dlt(src: np.ndarray, dst: np.ndarray) -> Homography | None:
    n = len(src)
    rows = []
    for (r, s), (p, q) in zip(src, dst):
        rows.append([r, s, 1, 0, 0, 0, -p * r, -p * s, -p])
        rows.append([0, 0, 0, r, s, 1, -q * r, -q * s, -q])
    a = np.asarray(rows, dtype=np.float64)
    try:
        _, sv, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    if n == 4 and sv[-2] <= 1e-9 * max(sv[0], 1.0):
        return None  # rank-deficient minimal sample (collinear points)
    m = vt[-1].reshape(3, 3)
    if abs(m[2, 2]) <= DEGENERACY_EPS or abs(np.linalg.det(m)) <= DEGENERACY_EPS:
        return None
    return Homography(m)


class _FamilySpec(NamedTuple):
    sample_size: int
    refit: object  # least-squares refit over inliers -> Transform


def _family_spec(family: str) -> _FamilySpec:
    if family == "affine":
        return _FamilySpec(3, fit_affine_lstsq)
    if family == "translation":
        return _FamilySpec(1, _fit_translation)
    if family == "homography":
        return _FamilySpec(
            4, lambda s, d: _fit_homography_dlt(s, d) or _raise_degenerate()
        )
    raise ValueError(f"unknown transform family: {family!r}")


def _raise_degenerate():
    raise ValueError("degenerate refit (collinear inliers)")


def _candidate_errors_affine(
    src: np.ndarray, dst: np.ndarray, samples: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Solve every sampled triplet at once; returns (errors, candidate_valid)."""
    k = len(samples)
    a = np.concatenate([src[samples], np.ones((k, 3, 1))], axis=2)
    valid = np.abs(np.linalg.det(a)) > DEGENERACY_EPS
    a_safe = np.where(valid[:, None, None], a, np.eye(3))
    sol = np.linalg.solve(a_safe, dst[samples])  # (k, 3, 2)
    linear = sol[:, :2, :].transpose(0, 2, 1)  # (k, 2, 2)
    offset = sol[:, 2, :]  # (k, 2)
    valid &= np.abs(np.linalg.det(linear)) > DEGENERACY_EPS
    pred = np.einsum("kij,nj->kni", linear, src) + offset[:, None, :]
    return np.linalg.norm(pred - dst, axis=2), valid


def _candidate_errors_translation(
    src: np.ndarray, dst: np.ndarray, samples: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    offsets = dst[samples[:, 0]] - src[samples[:, 0]]
    pred = src[None, :, :] + offsets[:, None, :]
    return np.linalg.norm(pred - dst, axis=2), np.ones(len(samples), dtype=bool)


def _candidate_errors_homography(
    src: np.ndarray, dst: np.ndarray, samples: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    k = len(samples)
    s = src[samples]  # (k, 4, 2)
    d = dst[samples]
    a = np.zeros((k, 8, 9))
    r, c = s[:, :, 0], s[:, :, 1]
    p, q = d[:, :, 0], d[:, :, 1]
    a[:, 0::2, 0] = r
    a[:, 0::2, 1] = c
    a[:, 0::2, 2] = 1.0
    a[:, 0::2, 6] = -p * r
    a[:, 0::2, 7] = -p * c
    a[:, 0::2, 8] = -p
    a[:, 1::2, 3] = r
    a[:, 1::2, 4] = c
    a[:, 1::2, 5] = 1.0
    a[:, 1::2, 6] = -q * r
    a[:, 1::2, 7] = -q * c
    a[:, 1::2, 8] = -q
    _, sv, vt = np.linalg.svd(a)
    h = vt[:, -1, :].reshape(k, 3, 3)
    valid = (
        (sv[:, -1] > 1e-7 * np.maximum(sv[:, 0], 1.0))  # full rank: unique solution
        & (np.abs(h[:, 2, 2]) > DEGENERACY_EPS)
        & (np.abs(np.linalg.det(h)) > DEGENERACY_EPS)
    )
    src_h = np.hstack([src, np.ones((len(src), 1))])
    hom = np.einsum("kij,nj->kni", h, src_h)
    with np.errstate(divide="ignore", invalid="ignore"):
        pred = hom[:, :, :2] / hom[:, :, 2:3]
    err = np.linalg.norm(pred - dst, axis=2)
    return np.where(np.isfinite(err), err, np.inf), valid


_CANDIDATE_ERRORS = {
    "affine": _candidate_errors_affine,
    "translation": _candidate_errors_translation,
    "homography": _candidate_errors_homography,
}


def ransac_transform(
    matches: Sequence[Match],
    family: str = "affine",
    iterations: int = 100,
    inlier_tol: float = 1.0,
    rng_seed: int = 0,
) -> tuple[Transform, list[int]]:
    """RANSAC fit of a spatial transform from matched cell pairs.

    Each iteration samples a minimal subset without replacement, solves the
    exact transform, and counts matches whose transformed source lands within
    `inlier_tol` (L2, grid cells) of the destination.  The transform with the
    most inliers wins (ties keep the first found) and is re-fit by least
    squares on its inlier set.  Fully deterministic for a given `rng_seed`;
    the candidate solves are batched but equivalent to the sequential loop.
    """
    spec = _family_spec(family)
    if len(matches) < spec.sample_size:
        raise ValueError(
            f"need at least {spec.sample_size} matches for {family}, got {len(matches)}"
        )
    src, dst = _match_arrays(matches)
    rng = np.random.default_rng(rng_seed)
    samples = np.stack(
        [
            rng.choice(len(matches), size=spec.sample_size, replace=False)
            for _ in range(iterations)
        ]
    )
    errors, valid = _CANDIDATE_ERRORS[family](src, dst, samples)
    counts = np.where(valid, (errors <= inlier_tol).sum(axis=1), -1)
    best = int(np.argmax(counts))  # first occurrence wins ties
    if counts[best] < 0:
        raise ValueError(
            f"all sampled minimal sets were degenerate after {iterations} attempts"
        )
    inlier_idx = np.nonzero(errors[best] <= inlier_tol)[0]
    refit = spec.refit(src[inlier_idx], dst[inlier_idx])
    return refit, [int(i) for i in inlier_idx]


def ransac_affine(
    matches: Sequence[Match],
    iterations: int = 100,
    inlier_tol: float = 1.0,
    rng_seed: int = 0,
) -> tuple[AffineTransform, list[int]]:
    """RANSAC restricted to the affine family (the default pipeline path)."""
    transform, inliers = ransac_transform(
        matches, "affine", iterations, inlier_tol, rng_seed
    )
    assert isinstance(transform, AffineTransform)
    return transform, inliers


class WarpPlan(NamedTuple):
    """Precomputed bilinear gather: flat source indices, weights, validity."""

    indices: np.ndarray  # (dst_h, dst_w, 4) flat indices into the source grid
    weights: np.ndarray  # (dst_h, dst_w, 4) float64, zero where invalid
    valid: np.ndarray  # (dst_h, dst_w) bool
    src_shape: tuple[int, int]


def warp_coefficients(
    transform: Transform, src_h: int, src_w: int, dst_h: int, dst_w: int
) -> WarpPlan:
    """Build the inverse-warp sampling plan for a destination canvas.

    For every destination cell the transform is inverted to a source
    coordinate; cells whose source coordinate falls outside the source grid
    are marked invalid.
    """
    inv = transform.inverse()
    rows, cols = np.meshgrid(
        np.arange(dst_h, dtype=np.float64),
        np.arange(dst_w, dtype=np.float64),
        indexing="ij",
    )
    pts = np.stack([rows.ravel(), cols.ravel()], axis=1)
    src_pts = inv.apply(pts)
    r = src_pts[:, 0]
    s = src_pts[:, 1]
    # Snap tolerance: coordinates a rounding error outside the grid count as
    # on the border rather than invalid.
    eps = 1e-9
    valid = (
        np.isfinite(r)
        & np.isfinite(s)
        & (r >= -eps)
        & (r <= src_h - 1.0 + eps)
        & (s >= -eps)
        & (s <= src_w - 1.0 + eps)
    )
    r = np.clip(np.where(valid, r, 0.0), 0.0, src_h - 1.0)
    s = np.clip(np.where(valid, s, 0.0), 0.0, src_w - 1.0)
    r0 = np.floor(r).astype(np.intp)
    s0 = np.floor(s).astype(np.intp)
    r1 = np.minimum(r0 + 1, src_h - 1)
    s1 = np.minimum(s0 + 1, src_w - 1)
    fr = r - r0
    fs = s - s0
    weights = np.stack(
        [(1 - fr) * (1 - fs), (1 - fr) * fs, fr * (1 - fs), fr * fs], axis=1
    )
    weights *= valid[:, None]
    indices = np.stack(
        [r0 * src_w + s0, r0 * src_w + s1, r1 * src_w + s0, r1 * src_w + s1], axis=1
    )
    return WarpPlan(
        indices=indices.reshape(dst_h, dst_w, 4),
        weights=weights.reshape(dst_h, dst_w, 4),
        valid=valid.reshape(dst_h, dst_w),
        src_shape=(src_h, src_w),
    )


def apply_warp_plan(src_map: np.ndarray, plan: WarpPlan) -> np.ndarray:
    """Gather source values through a warp plan; invalid cells become 0."""
    src_map = ensure_feature_map(src_map, "src map")
    h, w, c = src_map.shape
    if (h, w) != plan.src_shape:
        raise ValueError(f"plan built for {plan.src_shape}, map is {(h, w)}")
    flat = src_map.reshape(-1, c).astype(np.float64)
    gathered = flat[plan.indices.reshape(-1)]  # (H*W*4, c)
    gathered = gathered.reshape(-1, 4, c) * plan.weights.reshape(-1, 4)[:, :, None]
    out = gathered.sum(axis=1).reshape(plan.valid.shape[0], plan.valid.shape[1], c)
    return out.astype(src_map.dtype, copy=False)


def backprop_warp_plan(grad_out: np.ndarray, plan: WarpPlan) -> np.ndarray:
    """Transpose of `apply_warp_plan`: scatter canvas gradients back to the source."""
    dst_h, dst_w, c = grad_out.shape
    src_h, src_w = plan.src_shape
    grad_src = np.zeros((src_h * src_w, c), dtype=np.float64)
    idx = plan.indices.reshape(-1, 4)
    wts = plan.weights.reshape(-1, 4)
    g = grad_out.reshape(-1, c).astype(np.float64)
    for k in range(4):
        np.add.at(grad_src, idx[:, k], g * wts[:, k : k + 1])
    return grad_src.reshape(src_h, src_w, c)


def warp_to_canvas(
    src_map: np.ndarray, transform: Transform, dst_h: int, dst_w: int
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-warp `src_map` onto a ``dst_h x dst_w`` canvas.

    Returns (warped map, validity mask); out-of-canvas cells hold 0 and are
    marked invalid.
    """
    src_map = ensure_feature_map(src_map, "src map")
    if transform.is_degenerate():
        raise ValueError("degenerate transform")
    plan = warp_coefficients(transform, src_map.shape[0], src_map.shape[1], dst_h, dst_w)
    return apply_warp_plan(src_map, plan), plan.valid.copy()


@dataclass
class AlignmentResult:
    """Outcome of aligning one similar image onto the training canvas."""

    transform: Transform
    inlier_count: int
    match_count: int
    plan: WarpPlan
    warped: np.ndarray
    validity: np.ndarray
    fallback: bool = False


def subcell_refit(
    sim: np.ndarray,
    transform: Transform,
    dst_shape: tuple[int, int],
    src_shape: tuple[int, int],
    family: str,
    inlier_tol: float,
) -> Transform | None:
    """Refit using score-weighted sub-cell correspondences.

    Cell-level matches are quantized to whole grid cells, which caps the
    achievable transform precision.  The cosine scores around the predicted
    source cell interpolate the true sub-cell position, so a weighted
    centroid per destination cell recovers correspondences beyond the grid,
    and a final least-squares fit over them sharpens the transform.  Returns
    None when too few cells support the fit.
    """
    h1, w1 = dst_shape
    h2, w2 = src_shape
    try:
        inverse = transform.inverse()
    except ValueError:
        return None
    rows, cols = np.meshgrid(
        np.arange(h1, dtype=np.float64), np.arange(w1, dtype=np.float64), indexing="ij"
    )
    dst_pts = np.stack([rows.ravel(), cols.ravel()], axis=1)
    pred = inverse.apply(dst_pts)
    r0 = np.rint(pred[:, 0]).astype(np.intp)
    s0 = np.rint(pred[:, 1]).astype(np.intp)
    usable = (
        np.isfinite(pred).all(axis=1)
        & (r0 >= 1)
        & (r0 <= h2 - 2)
        & (s0 >= 1)
        & (s0 <= w2 - 2)
    )
    if usable.sum() < _family_spec(family).sample_size:
        return None
    idx = np.nonzero(usable)[0]
    offsets = np.array(
        [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)], dtype=np.intp
    )
    nb_r = r0[idx][:, None] + offsets[:, 0]
    nb_c = s0[idx][:, None] + offsets[:, 1]
    flat = nb_r * w2 + nb_c
    scores = sim[idx[:, None], flat]
    # Local baseline subtraction keeps only the correspondence peak.
    weights = np.maximum(scores - np.median(scores, axis=1, keepdims=True), 0.0)
    mass = weights.sum(axis=1)
    good = mass > 1e-9
    if good.sum() < _family_spec(family).sample_size:
        return None
    centroid_r = (weights * nb_r).sum(axis=1)[good] / mass[good]
    centroid_c = (weights * nb_c).sum(axis=1)[good] / mass[good]
    src_pts = np.stack([centroid_r, centroid_c], axis=1)
    kept_dst = dst_pts[idx][good]
    err = np.linalg.norm(transform.apply(src_pts) - kept_dst, axis=1)
    inl = err <= inlier_tol
    if inl.sum() < _family_spec(family).sample_size:
        return None
    try:
        refit = _family_spec(family).refit(src_pts[inl], kept_dst[inl])
    except ValueError:
        return None
    return None if refit.is_degenerate() else refit


def refine_transform(
    transform: Transform,
    matches: Sequence[Match],
    family: str,
    inlier_tol: float,
    rounds: int = 2,
) -> tuple[Transform, list[int]]:
    """Local optimization: re-select inliers under the fit and refit.

    Grid matches are quantized to whole cells, so a single RANSAC refit
    inherits the selection bias of its minimal sample; one or two
    re-fit rounds over the full inlier set remove most of it.
    """
    spec = _family_spec(family)
    src, dst = _match_arrays(matches)
    inlier_idx = np.arange(len(matches))
    for _ in range(rounds):
        err = np.linalg.norm(transform.apply(src) - dst, axis=1)
        new_idx = np.nonzero(err <= inlier_tol)[0]
        if len(new_idx) < spec.sample_size:
            break
        try:
            refit = spec.refit(src[new_idx], dst[new_idx])
        except ValueError:
            break
        if refit.is_degenerate():
            break
        transform = refit
        inlier_idx = new_idx
    return transform, [int(i) for i in inlier_idx]


def align_pair(
    dst_match_map: np.ndarray,
    src_match_map: np.ndarray,
    src_payload_map: np.ndarray,
    *,
    threshold: float = 0.6,
    family: str = "affine",
    iterations: int = 100,
    inlier_tol: float = 1.0,
    min_inliers: int = 6,
    rng_seed: int = 0,
    refine_rounds: int = 2,
    subcell: bool = True,
) -> AlignmentResult:
    """Match, fit, and warp one source map onto the destination canvas.

    Matching runs on the (max-normalized) match maps; the payload map is what
    gets warped.  After RANSAC the fit is polished on the cell-level inliers
    and then on score-weighted sub-cell correspondences.  If the family is
    "none", or RANSAC fails or finds fewer than `min_inliers` inliers, the
    alignment degrades to the identity transform instead of failing.
    """
    dst_h, dst_w = dst_match_map.shape[:2]
    if family not in TRANSFORM_FAMILIES:
        raise ValueError(f"unknown transform family: {family!r}")

    transform: Transform = AffineTransform.identity()
    inliers: list[int] = []
    matches: list[Match] = []
    fallback = True
    if family != "none":
        if dst_match_map.shape[2] != src_match_map.shape[2]:
            raise ValueError(
                f"channel mismatch: {dst_match_map.shape[2]} vs {src_match_map.shape[2]}"
            )
        h2, w2 = src_match_map.shape[:2]
        sim = _cosine_matrix(dst_match_map, src_match_map)
        matches = _matches_from_similarity(sim, threshold, dst_w, w2)
        spec_size = _family_spec(family).sample_size
        if len(matches) >= max(spec_size, 1):
            try:
                candidate, inlier_idx = ransac_transform(
                    matches, family, iterations, inlier_tol, rng_seed
                )
                if refine_rounds > 0:
                    candidate, inlier_idx = refine_transform(
                        candidate, matches, family, inlier_tol, refine_rounds
                    )
                if subcell:
                    polished = subcell_refit(
                        sim, candidate, (dst_h, dst_w), (h2, w2), family, inlier_tol
                    )
                    if polished is not None:
                        candidate = polished
                if len(inlier_idx) >= min_inliers and not candidate.is_degenerate():
                    transform = candidate
                    inliers = inlier_idx
                    fallback = False
            except ValueError:
                pass

    plan = warp_coefficients(
        transform, src_payload_map.shape[0], src_payload_map.shape[1], dst_h, dst_w
    )
    warped = apply_warp_plan(src_payload_map, plan)
    return AlignmentResult(
        transform=transform,
        inlier_count=len(inliers),
        match_count=len(matches),
        plan=plan,
        warped=warped,
        validity=plan.valid.copy(),
        fallback=fallback,
    )
