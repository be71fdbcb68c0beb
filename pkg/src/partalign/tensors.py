"""Feature-map container, file I/O, resizing, and normalization.

A feature map is a rank-3 ``numpy`` array of shape ``(height, width,
channels)``.  On disk it is an NPY file, little-endian float32, C-order;
anything else is rejected at load time.  All operations here are pure:
inputs are never mutated.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError

# Channels whose spatial maximum is at or below this are considered dead and
# left untouched by spatial_max_normalize.
DEAD_CHANNEL_EPS = 1e-12

FEATURE_DTYPE = np.dtype("<f4")


def ensure_feature_map(fm: np.ndarray, name: str = "feature map") -> np.ndarray:
    """Validate that `fm` is a finite rank-3 array and return it as ndarray."""
    fm = np.asarray(fm)
    if fm.ndim != 3:
        raise ValueError(f"{name}: non-rank-3 tensor (rank {fm.ndim})")
    if fm.size and not np.isfinite(fm).all():
        raise ValueError(f"{name}: contains non-finite values")
    return fm


def load_feature_map(path: str | os.PathLike) -> np.ndarray:
    """Load a feature file, enforcing the rank-3 little-endian float32 contract.

    Raises DataError for a missing file, a malformed header, a non-rank-3
    tensor, or any dtype other than 32-bit little-endian floats.
    """
    try:
        arr = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise DataError(f"feature file not found: {path}") from None
    except (ValueError, OSError, EOFError) as exc:
        raise DataError(f"malformed feature file {path}: {exc}") from None
    if arr.ndim != 3:
        raise DataError(f"{path}: non-rank-3 tensor (header declares rank {arr.ndim})")
    if arr.dtype != FEATURE_DTYPE:
        raise DataError(
            f"{path}: non-32-bit-real dtype (got {arr.dtype.str}, want {FEATURE_DTYPE.str})"
        )
    return arr


def save_feature_map(path: str | os.PathLike, fm: np.ndarray) -> None:
    """Write `fm` as little-endian float32 NPY at exactly `path`."""
    fm = ensure_feature_map(fm)
    with open(path, "wb") as fh:
        np.save(fh, np.ascontiguousarray(fm, dtype=FEATURE_DTYPE))


def _sample_coords(n_in: int, n_out: int) -> np.ndarray:
    # Align-corners-false: output cell centers mapped into input cell-center
    # coordinates, clamped to the valid range (edge replication).
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(coords, 0.0, n_in - 1.0)


def resize_bilinear(fm: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize each channel independently with bilinear interpolation.

    Uses the align-corners-false convention (sample centers at
    ``(i + 0.5) / n``).  Channel count is preserved; the result has the same
    dtype as the input.
    """
    fm = ensure_feature_map(fm)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"zero-size target: {out_h}x{out_w}")
    h, w, _ = fm.shape
    if (out_h, out_w) == (h, w):
        return fm.copy()

    rows = _sample_coords(h, out_h)
    cols = _sample_coords(w, out_w)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None, None]
    fc = (cols - c0)[None, :, None]

    data = fm.astype(np.float64, copy=False)
    top = data[r0][:, c0] * (1.0 - fc) + data[r0][:, c1] * fc
    bot = data[r1][:, c0] * (1.0 - fc) + data[r1][:, c1] * fc
    out = top * (1.0 - fr) + bot * fr
    return out.astype(fm.dtype, copy=False)


def spatial_max_normalize(fm: np.ndarray, eps: float = DEAD_CHANNEL_EPS) -> np.ndarray:
    """Divide every channel by its spatial maximum.

    Channels whose maximum is <= `eps` are returned unchanged, so dead
    channels never trigger a division by zero.  Input values must be
    non-negative.
    """
    fm = ensure_feature_map(fm)
    if fm.size and float(fm.min()) < 0.0:
        raise ValueError("spatial_max_normalize requires non-negative values")
    peaks = fm.max(axis=(0, 1))
    scale = np.where(peaks > eps, peaks, 1.0)
    return (fm / scale).astype(fm.dtype, copy=False)
