"""Quantitative evaluation: average precision under IoU or center-distance
matching, channel-to-part assignment, and the linear landmark-regression
protocol with normalized error.

AP follows the standard detection protocol: detections are ranked by score
across images, each ground-truth instance can be matched at most once, and
the area under the all-point interpolated precision-recall curve is
reported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .detect import Detection, iou
from .manifest import DatasetManifest, ManifestEntry


class GroundTruth(NamedTuple):
    x: float
    y: float
    box: tuple[float, float, float, float] | None


class ImageSample(NamedTuple):
    """Detections and truths of one image for a single (channel, part) pairing."""

    detections: list[Detection]
    truths: list[GroundTruth]
    scale: float  # normalizer for center-distance matching (max image side)


@dataclass(frozen=True)
class IoUMatch:
    threshold: float = 0.5

    def quality(self, det: Detection, gt: GroundTruth, scale: float) -> float | None:
        if gt.box is None:
            raise ValueError("IoU matching requires ground-truth boxes")
        value = iou(det.box, gt.box)
        return value if value >= self.threshold else None


@dataclass(frozen=True)
class CenterDistanceMatch:
    threshold: float = 0.1

    def quality(self, det: Detection, gt: GroundTruth, scale: float) -> float | None:
        if scale <= 0:
            raise ValueError("center-distance matching requires a positive scale")
        dist = float(np.hypot(det.x - gt.x, det.y - gt.y)) / scale
        return -dist if dist < self.threshold else None  # higher quality = closer


MatchRule = IoUMatch | CenterDistanceMatch


def average_precision(samples: Sequence[ImageSample], rule: MatchRule) -> float:
    """Area under the all-point interpolated precision-recall curve.

    Raises ValueError when there is no ground truth at all (AP undefined);
    callers exclude such parts from the mean and flag them.
    """
    n_gt = sum(len(s.truths) for s in samples)
    if n_gt == 0:
        raise ValueError("AP undefined: no ground-truth instances")

    ranked: list[tuple[float, int, int]] = []  # (-score, image index, det index)
    for si, sample in enumerate(samples):
        for di, det in enumerate(sample.detections):
            ranked.append((-det.score, si, di))
    ranked.sort()

    matched: list[np.ndarray] = [np.zeros(len(s.truths), dtype=bool) for s in samples]
    tp = np.zeros(len(ranked))
    for rank, (_, si, di) in enumerate(ranked):
        sample = samples[si]
        det = sample.detections[di]
        best_q: float | None = None
        best_gt = -1
        for gi, gt in enumerate(sample.truths):
            if matched[si][gi]:
                continue
            q = rule.quality(det, gt, sample.scale)
            if q is not None and (best_q is None or q > best_q):
                best_q = q
                best_gt = gi
        if best_gt >= 0:
            matched[si][best_gt] = True
            tp[rank] = 1.0

    if len(ranked) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # All-point interpolation: running max of precision from the right.
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * interp))


@dataclass
class ChannelPartAssignment:
    """Each part name mapped to its best channel (channels may be reused)."""

    mapping: dict[str, int]
    ap_table: np.ndarray  # (n_channels, n_parts)
    channels: list[int]
    parts: list[str]


def assign_channels(
    ap_table: np.ndarray, channels: Sequence[int], parts: Sequence[str]
) -> ChannelPartAssignment:
    """Give every part the channel with the highest AP (ties: lower channel)."""
    table = np.asarray(ap_table, dtype=np.float64)
    if table.size == 0:
        raise ValueError("empty AP table")
    if table.shape != (len(channels), len(parts)):
        raise ValueError(
            f"AP table shape {table.shape} does not match "
            f"{len(channels)} channels x {len(parts)} parts"
        )
    order = np.argsort(channels)  # ensure ties resolve to the lowest channel id
    mapping = {}
    for pi, part in enumerate(parts):
        col = table[order, pi]
        mapping[part] = int(channels[order[int(np.argmax(col))]])
    return ChannelPartAssignment(
        mapping=mapping, ap_table=table, channels=list(channels), parts=list(parts)
    )


@dataclass
class LandmarkRegressor:
    """Affine map from per-channel peak coordinates to landmark coordinates."""

    coefficients: np.ndarray  # (2*c_o + 1, 2*n_landmarks); last row is the bias

    def predict(self, peak_features: np.ndarray) -> np.ndarray:
        x = np.asarray(peak_features, dtype=np.float64)
        design = np.hstack([x, np.ones((len(x), 1))])
        return design @ self.coefficients


def fit_landmark_regressor(
    peak_features: np.ndarray, landmarks: np.ndarray, ridge: float = 1e-4
) -> LandmarkRegressor:
    """Ridge-damped least squares from peak coordinates to landmarks.

    The bias column is not damped.  Requires an overdetermined system:
    at least one more image than feature columns.
    """
    x = np.asarray(peak_features, dtype=np.float64)
    y = np.asarray(landmarks, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise ValueError("peak_features and landmarks must be matching 2-D arrays")
    n, f = x.shape
    if n < f + 1:
        raise ValueError(f"need at least {f + 1} images to fit {f} features, got {n}")
    design = np.hstack([x, np.ones((n, 1))])
    damping = np.eye(f + 1) * ridge
    damping[f, f] = 0.0
    try:
        coef = np.linalg.solve(design.T @ design + damping, design.T @ y)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"degenerate design matrix: {exc}") from None
    return LandmarkRegressor(coefficients=coef)


def normalized_error(
    pred: np.ndarray, gt: np.ndarray, normalizer: float
) -> float:
    """Mean landmark L2 error divided by the normalizer, in percent."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError("pred and gt must both be (n_landmarks, 2)")
    if normalizer <= 0:
        raise ValueError("normalizer must be positive")
    return float(np.linalg.norm(pred - gt, axis=1).mean() / normalizer * 100.0)


# ---------------------------------------------------------------------------
# Dataset-level evaluation glue
# ---------------------------------------------------------------------------


def _part_names(entries: Sequence[ManifestEntry], use_boxes: bool) -> list[str]:
    names: set[str] = set()
    for e in entries:
        anns = e.part_boxes if use_boxes else e.landmarks
        if anns:
            names.update(a.name for a in anns)
    return sorted(names)


def _truths_for(entry: ManifestEntry, part: str, use_boxes: bool) -> list[GroundTruth]:
    truths = []
    if use_boxes and entry.part_boxes:
        for b in entry.part_boxes:
            if b.name == part:
                truths.append(
                    GroundTruth(
                        x=(b.x1 + b.x2) / 2.0, y=(b.y1 + b.y2) / 2.0, box=(b.x1, b.y1, b.x2, b.y2)
                    )
                )
    elif not use_boxes and entry.landmarks:
        for p in entry.landmarks:
            if p.name == part:
                truths.append(GroundTruth(x=p.x, y=p.y, box=None))
    return truths


def _samples_for(
    entries: Sequence[ManifestEntry],
    detections: dict[str, list[Detection]],
    channel: int,
    part: str,
    use_boxes: bool,
) -> list[ImageSample]:
    samples = []
    for e in entries:
        dets = [d for d in detections.get(e.image_id, []) if d.channel == channel]
        samples.append(
            ImageSample(
                detections=dets,
                truths=_truths_for(e, part, use_boxes),
                scale=float(max(e.image_height, e.image_width)),
            )
        )
    return samples


def split_for_assignment(
    manifest: DatasetManifest,
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Alternate images between the assignment split and the test split."""
    assign = [e for i, e in enumerate(manifest) if i % 2 == 0]
    test = [e for i, e in enumerate(manifest) if i % 2 == 1]
    return assign, test


def evaluate_detections(
    manifest: DatasetManifest,
    detections: dict[str, list[Detection]],
    rule: MatchRule,
) -> dict:
    """Assign channels to parts on the assignment split, score the test split.

    Returns a report dict with the per-part APs, the mean AP, and the
    channel assignment.  Parts with no ground truth on a split are flagged
    and excluded from the mean.
    """
    use_boxes = isinstance(rule, IoUMatch)
    assign_entries, test_entries = split_for_assignment(manifest)
    parts = _part_names(manifest.entries, use_boxes)
    if not parts:
        raise ValueError(
            "manifest has no part annotations of the kind required by the match rule"
        )
    channels = sorted({d.channel for dets in detections.values() for d in dets})
    if not channels:
        channels = [0]

    table = np.zeros((len(channels), len(parts)))
    for ci, ch in enumerate(channels):
        for pi, part in enumerate(parts):
            samples = _samples_for(assign_entries, detections, ch, part, use_boxes)
            try:
                table[ci, pi] = average_precision(samples, rule)
            except ValueError:
                table[ci, pi] = 0.0
    assignment = assign_channels(table, channels, parts)

    per_part: dict[str, float] = {}
    skipped: list[str] = []
    for part in parts:
        ch = assignment.mapping[part]
        samples = _samples_for(test_entries, detections, ch, part, use_boxes)
        try:
            per_part[part] = average_precision(samples, rule)
        except ValueError:
            skipped.append(part)
    mean_ap = float(np.mean([per_part[p] for p in per_part])) if per_part else 0.0
    return {
        "assignment": {p: int(c) for p, c in assignment.mapping.items()},
        "map": mean_ap,
        "per_part_ap": per_part,
        "parts_without_gt": skipped,
        "num_assignment_images": len(assign_entries),
        "num_test_images": len(test_entries),
    }


def peak_feature_matrix(
    entries: Sequence[ManifestEntry],
    detections: dict[str, list[Detection]],
    n_channels: int,
) -> np.ndarray:
    """Per-image peak coordinates (normalized to [0, 1]) for regression.

    Each channel contributes its highest-scoring detection center; channels
    that never fire on an image are NaN and later filled with the
    training-split mean coordinate.
    """
    feats = np.full((len(entries), 2 * n_channels), np.nan)
    for i, e in enumerate(entries):
        best: dict[int, Detection] = {}
        for d in detections.get(e.image_id, []):
            if d.channel not in best or d.score > best[d.channel].score:
                best[d.channel] = d
        for ch, d in best.items():
            if ch < n_channels:
                feats[i, 2 * ch] = d.x / e.image_width
                feats[i, 2 * ch + 1] = d.y / e.image_height
    return feats


def fill_missing_features(
    features: np.ndarray, reference: np.ndarray | None = None
) -> np.ndarray:
    """Replace NaNs with the per-column mean of `reference` (default: itself)."""
    ref = features if reference is None else reference
    finite = np.isfinite(ref)
    counts = finite.sum(axis=0)
    sums = np.where(finite, ref, 0.0).sum(axis=0)
    col_mean = np.where(counts > 0, sums / np.maximum(counts, 1), 0.5)
    out = features.copy()
    idx = np.nonzero(~np.isfinite(out))
    out[idx] = col_mean[idx[1]]
    return out


def evaluate_landmarks(
    manifest: DatasetManifest,
    detections: dict[str, list[Detection]],
    n_channels: int,
    normalizers: dict[str, float],
) -> dict:
    """Fit the landmark regressor on the assignment split, score the test split.

    `normalizers` maps image id to the per-image error normalizer in pixels
    (pupil distance, bounding-box size, or image size depending on protocol).
    """
    assign_entries, test_entries = split_for_assignment(manifest)
    assign_entries = [e for e in assign_entries if e.landmarks]
    test_entries = [e for e in test_entries if e.landmarks]
    if not assign_entries or not test_entries:
        raise ValueError("landmark evaluation requires landmarks on both splits")
    names = sorted({p.name for e in assign_entries for p in e.landmarks})

    def target_matrix(entries: Sequence[ManifestEntry]) -> np.ndarray:
        rows = []
        for e in entries:
            by_name = {p.name: p for p in e.landmarks or ()}
            row = []
            for n in names:
                p = by_name.get(n)
                if p is None:
                    raise ValueError(f"image {e.image_id} is missing landmark {n!r}")
                row.extend([p.x / e.image_width, p.y / e.image_height])
            rows.append(row)
        return np.asarray(rows)

    x_train = peak_feature_matrix(assign_entries, detections, n_channels)
    x_train = fill_missing_features(x_train)
    y_train = target_matrix(assign_entries)
    regressor = fit_landmark_regressor(x_train, y_train)

    x_test = peak_feature_matrix(test_entries, detections, n_channels)
    x_test = fill_missing_features(x_test, reference=x_train)
    pred = regressor.predict(x_test)
    y_test = target_matrix(test_entries)

    per_landmark: dict[str, list[float]] = {n: [] for n in names}
    means = []
    for i, e in enumerate(test_entries):
        scale = np.array([e.image_width, e.image_height], dtype=np.float64)
        p = pred[i].reshape(-1, 2) * scale
        g = y_test[i].reshape(-1, 2) * scale
        norm = normalizers[e.image_id]
        errors = np.linalg.norm(p - g, axis=1) / norm * 100.0
        for n, err in zip(names, errors):
            per_landmark[n].append(float(err))
        means.append(float(errors.mean()))
    return {
        "per_landmark_error": {n: float(np.mean(v)) for n, v in per_landmark.items()},
        "mean_error": float(np.mean(means)),
        "num_fit_images": len(assign_entries),
        "num_test_images": len(test_entries),
    }
