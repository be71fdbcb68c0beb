"""Pseudo ground-truth generation from averaged aligned response maps.

The label map is built by repeatedly taking the global argmax of a working
copy of the mean map, assigning that channel to that cell, and suppressing
what was consumed: the cell's whole channel fiber, optionally the channel in
a square neighbourhood, and the entire channel once it has been assigned
`max_per_channel` times.  The last channel is the background channel and is
never suppressed, which guarantees every cell receives a label.
"""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np

from .tensors import ensure_feature_map

SUPPRESSED = -1.0


def average_aligned(
    maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]
) -> np.ndarray:
    """Per-cell mean over the maps whose validity mask is true at that cell.

    Cells where no map is valid copy the first map's value, so the caller
    can pass the training image's own map first as the fallback.
    """
    if not maps:
        raise ValueError("empty map list")
    if len(maps) != len(masks):
        raise ValueError(f"{len(maps)} maps but {len(masks)} masks")
    first = ensure_feature_map(maps[0])
    h, w, c = first.shape
    stack = np.empty((len(maps), h, w, c), dtype=np.float64)
    mask_stack = np.empty((len(maps), h, w), dtype=np.float64)
    for i, (m, mask) in enumerate(zip(maps, masks)):
        m = ensure_feature_map(m)
        if m.shape != (h, w, c):
            raise ValueError(f"shape mismatch: map {i} is {m.shape}, want {(h, w, c)}")
        mask = np.asarray(mask)
        if mask.shape != (h, w):
            raise ValueError(f"mask {i} has shape {mask.shape}, want {(h, w)}")
        stack[i] = m
        mask_stack[i] = mask.astype(bool)
    counts = mask_stack.sum(axis=0)
    total = (stack * mask_stack[:, :, :, None]).sum(axis=0)
    safe = np.where(counts > 0, counts, 1.0)
    mean = total / safe[:, :, None]
    mean = np.where((counts > 0)[:, :, None], mean, stack[0])
    return mean.astype(first.dtype, copy=False)


def generate_pseudo_gt(
    mean_map: np.ndarray, max_per_channel: int = 3, suppress_radius: int = 0
) -> np.ndarray:
    """Assign a channel label to every cell of the mean map.

    Ties in the argmax are broken by the smallest row-major (h, w, c) linear
    index.  Non-background channels appear at most `max_per_channel` times;
    with `suppress_radius` r > 0 two same-channel labels are always more than
    r cells apart (Chebyshev).
    """
    fm = ensure_feature_map(mean_map)
    h, w, c = fm.shape
    if c < 2:
        raise ValueError("need at least 2 channels (parts + background)")
    if max_per_channel < 1:
        raise ValueError("max_per_channel must be >= 1")
    if suppress_radius < 0:
        raise ValueError("suppress_radius must be >= 0")
    if fm.size and float(fm.min()) < 0.0:
        raise ValueError("mean map must be non-negative")

    work = fm.astype(np.float64).copy()
    labels = np.full((h, w), -1, dtype=np.int64)
    counts = np.zeros(c, dtype=np.int64)
    background = c - 1
    for _ in range(h * w):
        flat = int(np.argmax(work))
        hi, wi, ci = np.unravel_index(flat, work.shape)
        labels[hi, wi] = ci
        work[hi, wi, :] = SUPPRESSED
        if suppress_radius > 0 and ci != background:
            r0 = max(0, hi - suppress_radius)
            r1 = min(h, hi + suppress_radius + 1)
            c0 = max(0, wi - suppress_radius)
            c1 = min(w, wi + suppress_radius + 1)
            work[r0:r1, c0:c1, ci] = SUPPRESSED
        counts[ci] += 1
        if counts[ci] == max_per_channel and ci != background:
            work[:, :, ci] = SUPPRESSED
    return labels


def labels_to_pgm(labels: np.ndarray, path: str | os.PathLike) -> None:
    """Debug dump: write the label map as a binary PGM (channel index = gray)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("labels must be a 2-D integer map")
    maxval = max(1, int(labels.max()))
    if maxval > 255:
        raise ValueError("PGM dump supports at most 256 channels")
    h, w = labels.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(labels.astype(np.uint8).tobytes())
