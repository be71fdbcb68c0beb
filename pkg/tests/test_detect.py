import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partalign.detect import Detection, extract_peaks, iou, nms


def brute_force_nms(dets, threshold):
    """O(n^2) reference: same greedy rule, written independently."""
    out = []
    for channel in sorted({d.channel for d in dets}):
        group = [d for d in dets if d.channel == channel]
        group = sorted(group, key=lambda d: -d.score)
        keep = []
        for cand in group:
            ok = True
            for kept in keep:
                if iou(cand.box, kept.box) >= threshold:
                    ok = False
                    break
            if ok:
                keep.append(cand)
        out.extend(keep)
    return out


def random_detections(rng, n, channels=3, span=100.0):
    dets = []
    for _ in range(n):
        x1 = rng.uniform(0, span)
        y1 = rng.uniform(0, span)
        w = rng.uniform(5, 40)
        h = rng.uniform(5, 40)
        dets.append(
            Detection(
                channel=int(rng.integers(0, channels)),
                x=x1 + w / 2,
                y=y1 + h / 2,
                score=float(rng.uniform(0, 1)),
                box=(x1, y1, x1 + w, y1 + h),
            )
        )
    return dets


class TestExtractPeaks:
    def test_single_peak(self):
        fm = np.zeros((5, 5, 2), dtype=np.float32)
        fm[2, 3, 0] = 0.9
        fm[:, :, 1] = 0.05  # background channel, ignored
        dets = extract_peaks(fm, 80, 80, score_threshold=0.1, box_side=20)
        assert len(dets) == 1
        d = dets[0]
        assert d.channel == 0
        assert d.x == pytest.approx((3 + 0.5) * 80 / 5)
        assert d.y == pytest.approx((2 + 0.5) * 80 / 5)
        assert d.box == (d.x - 10, d.y - 10, d.x + 10, d.y + 10)

    def test_constant_channel_has_no_strict_maxima(self):
        fm = np.full((4, 4, 2), 0.5, dtype=np.float32)
        assert extract_peaks(fm, 64, 64) == []

    def test_two_peaks_ordered_by_score(self):
        fm = np.zeros((6, 6, 2), dtype=np.float32)
        fm[1, 1, 0] = 0.7
        fm[4, 4, 0] = 0.9
        dets = extract_peaks(fm, 96, 96, score_threshold=0.5, box_side=10)
        assert [d.score for d in dets] == [pytest.approx(0.9), pytest.approx(0.7)]
        # exhaustive scan oracle
        found = set()
        chan = fm[:, :, 0]
        for i in range(6):
            for j in range(6):
                if chan[i, j] < 0.5:
                    continue
                neighbors = [
                    chan[a, b]
                    for a in range(max(0, i - 1), min(6, i + 2))
                    for b in range(max(0, j - 1), min(6, j + 2))
                    if (a, b) != (i, j)
                ]
                if all(chan[i, j] > v for v in neighbors):
                    found.add((i, j))
        got = {(int(d.y / 16), int(d.x / 16)) for d in dets}
        assert got == found

    def test_threshold_filters(self):
        fm = np.zeros((5, 5, 2), dtype=np.float32)
        fm[2, 2, 0] = 0.05
        assert extract_peaks(fm, 80, 80, score_threshold=0.1) == []
        assert len(extract_peaks(fm, 80, 80, score_threshold=0.01)) == 1

    def test_boxes_clipped_to_image(self):
        fm = np.zeros((4, 4, 2), dtype=np.float32)
        fm[0, 0, 0] = 0.9
        (d,) = extract_peaks(fm, 64, 64, box_side=100)
        assert d.box[0] == 0.0 and d.box[1] == 0.0
        assert d.box[2] <= 64.0 and d.box[3] <= 64.0

    def test_background_channel_ignored(self):
        fm = np.zeros((4, 4, 1), dtype=np.float32)
        fm[2, 2, 0] = 1.0
        assert extract_peaks(fm, 64, 64) == []  # only channel is background

    def test_bad_image_dims(self):
        with pytest.raises(ValueError, match="non-positive"):
            extract_peaks(np.zeros((2, 2, 2), dtype=np.float32), 0, 10)


class TestIou:
    def test_identical(self):
        assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0

    def test_half_overlap(self):
        assert iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(50 / 150)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            iou((0, 0, 0, 10), (0, 0, 10, 10))


class TestNms:
    def test_single_detection(self):
        d = Detection(0, 5, 5, 0.9, (0, 0, 10, 10))
        assert nms([d], 0.3) == [d]

    def test_identical_boxes_keep_best(self):
        a = Detection(0, 5, 5, 0.9, (0, 0, 10, 10))
        b = Detection(0, 5, 5, 0.8, (0, 0, 10, 10))
        assert nms([b, a], 0.3) == [a]

    def test_different_channels_never_suppress(self):
        a = Detection(0, 5, 5, 0.9, (0, 0, 10, 10))
        b = Detection(1, 5, 5, 0.8, (0, 0, 10, 10))
        assert nms([a, b], 0.3) == [a, b]

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            dets = random_detections(rng, 50)
            assert nms(dets, 0.3) == brute_force_nms(dets, 0.3)

    def test_kept_pairs_below_threshold(self):
        rng = np.random.default_rng(1)
        dets = random_detections(rng, 80)
        kept = nms(dets, 0.3)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                if a.channel == b.channel:
                    assert iou(a.box, b.box) < 0.3

    @settings(deadline=None, max_examples=20)
    @given(st.integers(0, 2**31 - 1))
    def test_idempotent_and_subset(self, seed):
        rng = np.random.default_rng(seed)
        dets = random_detections(rng, 30)
        once = nms(dets, 0.3)
        assert nms(once, 0.3) == once
        assert all(d in dets for d in once)

    def test_per_channel_score_ordering_preserved(self):
        rng = np.random.default_rng(2)
        kept = nms(random_detections(rng, 60), 0.3)
        by_channel = {}
        for d in kept:
            by_channel.setdefault(d.channel, []).append(d.score)
        for scores in by_channel.values():
            assert scores == sorted(scores, reverse=True)
