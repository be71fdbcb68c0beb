"""Inference-time part extraction: peak anchors and non-maximum suppression.

Detections live in image-pixel coordinates; a part-response cell is promoted
to a detection when it is a strict local maximum of its channel.  The last
channel of a response map is the background channel and never produces
detections.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .tensors import ensure_feature_map

Box = tuple[float, float, float, float]


class Detection(NamedTuple):
    channel: int
    x: float
    y: float
    score: float
    box: Box


def _strict_local_maxima(channel: np.ndarray) -> np.ndarray:
    """Boolean mask of cells strictly greater than all 8 neighbours."""
    h, w = channel.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = channel
    center = padded[1:-1, 1:-1]
    mask = np.ones((h, w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            mask &= center > padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
    return mask


def extract_peaks(
    part_map: np.ndarray,
    image_h: int,
    image_w: int,
    score_threshold: float = 0.1,
    box_side: float = 100.0,
) -> list[Detection]:
    """Turn strict local maxima of each non-background channel into detections.

    Cell coordinates are scaled to image pixels at cell centers; every
    detection carries a square box of side `box_side` clipped to the image.
    The returned list is sorted by descending score.
    """
    fm = ensure_feature_map(part_map, "part map")
    if image_h <= 0 or image_w <= 0:
        raise ValueError(f"non-positive image dims: {image_h}x{image_w}")
    if box_side <= 0:
        raise ValueError("box_side must be positive")
    h, w, c = fm.shape
    half = box_side / 2.0
    detections: list[Detection] = []
    for ch in range(c - 1):  # skip the background channel
        channel = fm[:, :, ch].astype(np.float64)
        mask = _strict_local_maxima(channel) & (channel >= score_threshold)
        for i, j in zip(*np.nonzero(mask)):
            x = (j + 0.5) * image_w / w
            y = (i + 0.5) * image_h / h
            box = (
                max(0.0, x - half),
                max(0.0, y - half),
                min(float(image_w), x + half),
                min(float(image_h), y + half),
            )
            detections.append(Detection(ch, x, y, float(channel[i, j]), box))
    detections.sort(key=lambda d: (-d.score, d.channel, d.y, d.x))
    return detections


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    if ax1 >= ax2 or ay1 >= ay2 or bx1 >= bx2 or by1 >= by2:
        raise ValueError(f"degenerate box: {a if ax1 >= ax2 or ay1 >= ay2 else b}")
    ix = min(ax2, bx2) - max(ax1, bx1)
    iy = min(ay2, by2) - max(ay1, by1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def nms(dets: Sequence[Detection], iou_threshold: float = 0.3) -> list[Detection]:
    """Greedy per-channel non-maximum suppression.

    Within each channel, detections are visited by descending score (ties
    keep insertion order) and kept only if their IoU with every previously
    kept detection of the same channel is below the threshold.  Detections
    of different channels never suppress each other.
    """
    by_channel: dict[int, list[Detection]] = {}
    for d in dets:
        by_channel.setdefault(d.channel, []).append(d)
    kept: list[Detection] = []
    for ch in sorted(by_channel):
        ordered = sorted(by_channel[ch], key=lambda d: -d.score)  # stable: ties by insertion
        survivors: list[Detection] = []
        for d in ordered:
            if all(iou(d.box, s.box) < iou_threshold for s in survivors):
                survivors.append(d)
        kept.extend(survivors)
    return kept
