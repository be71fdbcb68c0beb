"""Pairwise image similarity from part-response maps.

Two images are compared by resizing their per-location channel distributions
to a common grid and averaging the Jensen-Shannon divergence over locations
(natural log, so every score lies in [0, ln 2]).  Lower means more similar;
retrieval returns the smallest divergences first.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .tensors import ensure_feature_map, resize_bilinear

DEFAULT_COMMON_SIZE = 14

# Floor applied to per-location channel values before renormalization, so the
# divergence integrand never sees a zero.
DISTRIBUTION_FLOOR = 1e-12

_SUM_TOLERANCE = 1e-5


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence between two probability vectors (natural log).

    ``0 * log 0`` terms are taken as 0.  Result is bounded by ln 2, attained
    on disjoint supports.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    if p.size == 0:
        raise ValueError("empty distributions")
    if p.min() < 0 or q.min() < 0:
        raise ValueError("distributions must be non-negative")
    if abs(p.sum() - 1.0) > _SUM_TOLERANCE or abs(q.sum() - 1.0) > _SUM_TOLERANCE:
        raise ValueError("distributions must sum to 1 within 1e-5")
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_pm = np.where(p > 0, p * (np.log(p) - np.log(m)), 0.0).sum()
        kl_qm = np.where(q > 0, q * (np.log(q) - np.log(m)), 0.0).sum()
    return max(0.0, 0.5 * kl_pm + 0.5 * kl_qm)


def location_distributions(fm: np.ndarray, common_size: int) -> np.ndarray:
    """Resize to common_size**2 locations and renormalize each channel vector."""
    resized = resize_bilinear(fm, common_size, common_size).astype(np.float64)
    flat = np.maximum(resized.reshape(-1, resized.shape[2]), DISTRIBUTION_FLOOR)
    return flat / flat.sum(axis=1, keepdims=True)


def mean_location_js(a_dist: np.ndarray, b_dist: np.ndarray) -> float:
    m = 0.5 * (a_dist + b_dist)
    per_loc = 0.5 * (a_dist * (np.log(a_dist) - np.log(m))).sum(axis=1)
    per_loc += 0.5 * (b_dist * (np.log(b_dist) - np.log(m))).sum(axis=1)
    return max(0.0, float(per_loc.mean()))


def map_divergence(
    a: np.ndarray, b: np.ndarray, common_size: int = DEFAULT_COMMON_SIZE
) -> float:
    """Average per-location JS divergence between two response maps.

    Both maps are resized to ``common_size x common_size`` first; each
    location's channel vector is renormalized to sum 1 before comparison.
    """
    a = ensure_feature_map(a, "map a")
    b = ensure_feature_map(b, "map b")
    if a.shape[2] != b.shape[2]:
        raise ValueError(f"channel mismatch: {a.shape[2]} vs {b.shape[2]}")
    return mean_location_js(
        location_distributions(a, common_size), location_distributions(b, common_size)
    )


@dataclass
class SimilarityMatrix:
    """Symmetric divergence matrix over a fixed id list (diagonal is 0)."""

    ids: list[str]
    scores: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.ids)
        if self.scores.shape != (n, n):
            raise ValueError(f"scores shape {self.scores.shape} does not match {n} ids")
        self._index = {image_id: i for i, image_id in enumerate(self.ids)}
        if len(self._index) != n:
            raise ValueError("duplicate ids in similarity matrix")

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def index_of(self, image_id: str) -> int:
        try:
            return self._index[image_id]
        except KeyError:
            raise ValueError(f"unknown image id: {image_id}") from None


def build_similarity_matrix(
    maps: Sequence[np.ndarray],
    ids: Sequence[str] | None = None,
    common_size: int = DEFAULT_COMMON_SIZE,
    threads: int = 1,
) -> SimilarityMatrix:
    """Compute the full pairwise divergence matrix.

    Each unordered pair is evaluated exactly once, so the result is
    symmetric by construction and independent of evaluation order.
    """
    if len(maps) < 2:
        raise ValueError("need at least 2 maps")
    channels = {ensure_feature_map(m).shape[2] for m in maps}
    if len(channels) != 1:
        raise ValueError(f"channel mismatch across maps: {sorted(channels)}")
    if ids is None:
        ids = [str(i) for i in range(len(maps))]
    ids = list(ids)
    if len(ids) != len(maps):
        raise ValueError("ids and maps length mismatch")

    dists = [location_distributions(m, common_size) for m in maps]
    n = len(maps)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    scores = np.zeros((n, n), dtype=np.float64)

    def evaluate(pair: tuple[int, int]) -> float:
        return mean_location_js(dists[pair[0]], dists[pair[1]])

    if threads > 1 and pairs:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(evaluate, pairs))
    else:
        values = [evaluate(p) for p in pairs]
    for (i, j), v in zip(pairs, values):
        scores[i, j] = v
        scores[j, i] = v
    return SimilarityMatrix(ids=ids, scores=scores)


def top_k_pool(
    matrix: SimilarityMatrix,
    query: str,
    k: int,
    candidate_subset: Sequence[str] | None = None,
) -> list[str]:
    """The k candidate ids with smallest divergence to `query`, ascending.

    Ties are broken by lexicographic image id so retrieval is deterministic.
    Returns fewer than k ids when the candidate set is smaller than k.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    qi = matrix.index_of(query)
    if candidate_subset is None:
        candidates = [i for i in matrix.ids if i != query]
    else:
        candidates = list(candidate_subset)
        if query in candidates:
            raise ValueError("candidate subset must exclude the query")
    ranked = sorted(
        candidates, key=lambda cid: (matrix.scores[qi, matrix.index_of(cid)], cid)
    )
    return ranked[:k]


def save_similarity(out_dir: str | os.PathLike, matrix: SimilarityMatrix) -> Path:
    """Cache a similarity matrix: JSON id list + raw little-endian float32 scores."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw_name = "similarity.f32"
    (out / raw_name).write_bytes(
        np.ascontiguousarray(matrix.scores, dtype="<f4").tobytes()
    )
    meta = {"ids": matrix.ids, "matrix_path": raw_name}
    with open(out / "similarity.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out / "similarity.json"


def load_similarity(meta_path: str | os.PathLike) -> SimilarityMatrix:
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        ids = list(meta["ids"])
        raw = (Path(meta_path).parent / meta["matrix_path"]).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"similarity cache not found: {exc.filename}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"similarity cache {meta_path} is malformed: {exc}") from None
    n = len(ids)
    scores = np.frombuffer(raw, dtype="<f4")
    if scores.size != n * n:
        raise DataError(
            f"similarity cache {meta_path}: matrix has {scores.size} values, want {n * n}"
        )
    return SimilarityMatrix(ids=ids, scores=scores.reshape(n, n).astype(np.float64))
