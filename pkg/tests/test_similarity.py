import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partalign.similarity import (
    SimilarityMatrix,
    build_similarity_matrix,
    js_divergence,
    load_similarity,
    map_divergence,
    save_similarity,
    top_k_pool,
)

LN2 = math.log(2.0)


def random_distribution(rng, n):
    p = rng.uniform(0.0, 1.0, size=n) + 1e-9
    return p / p.sum()


def softmax_map(rng, h, w, c):
    logits = rng.standard_normal((h, w, c))
    e = np.exp(logits - logits.max(axis=2, keepdims=True))
    return (e / e.sum(axis=2, keepdims=True)).astype(np.float32)


class TestJsDivergence:
    def test_identical_is_zero(self):
        p = [0.25, 0.25, 0.5]
        assert js_divergence(p, p) == 0.0

    def test_disjoint_support_is_ln2(self):
        assert abs(js_divergence([1.0, 0.0], [0.0, 1.0]) - LN2) < 1e-12

    def test_half_vs_point_mass(self):
        # 0.5*KL(p||m) + 0.5*KL(q||m) with m = (0.75, 0.25), evaluated by hand
        expected = 0.5 * (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)) + 0.5 * (
            math.log(1.0 / 0.75)
        )
        got = js_divergence([0.5, 0.5], [1.0, 0.0])
        assert abs(got - expected) < 1e-12
        assert abs(got - 0.2157615543388356) < 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            js_divergence([1.0], [0.5, 0.5])

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            js_divergence([0.9, 0.3], [0.5, 0.5])

    @settings(deadline=None, max_examples=50)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 16))
    def test_symmetry_exact_and_bounded(self, seed, n):
        rng = np.random.default_rng(seed)
        p = random_distribution(rng, n)
        q = random_distribution(rng, n)
        d_pq = js_divergence(p, q)
        d_qp = js_divergence(q, p)
        assert d_pq == d_qp
        assert 0.0 <= d_pq <= LN2 + 1e-9

    @settings(deadline=None, max_examples=30)
    @given(st.integers(0, 2**31 - 1))
    def test_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        p = random_distribution(rng, 6)
        assert js_divergence(p, p) < 1e-9


class TestMapDivergence:
    def test_identical_maps(self):
        rng = np.random.default_rng(3)
        a = softmax_map(rng, 4, 6, 5)
        assert map_divergence(a, a, common_size=4) < 1e-12

    def test_disjoint_one_hot_maps(self):
        a = np.zeros((3, 3, 2), dtype=np.float32)
        b = np.zeros((3, 3, 2), dtype=np.float32)
        a[:, :, 0] = 1.0
        b[:, :, 1] = 1.0
        assert abs(map_divergence(a, b, common_size=3) - LN2) < 1e-6

    def test_equals_per_location_loop(self):
        rng = np.random.default_rng(4)
        a = softmax_map(rng, 3, 3, 4)
        b = softmax_map(rng, 3, 3, 4)
        got = map_divergence(a, b, common_size=3)
        # loop oracle over locations (same-size maps resize to themselves)
        floor = 1e-12
        vals = []
        for i in range(3):
            for j in range(3):
                p = np.maximum(a[i, j].astype(np.float64), floor)
                q = np.maximum(b[i, j].astype(np.float64), floor)
                vals.append(js_divergence(p / p.sum(), q / q.sum()))
        assert abs(got - np.mean(vals)) < 1e-12

    def test_channel_mismatch(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError, match="channel mismatch"):
            map_divergence(softmax_map(rng, 3, 3, 4), softmax_map(rng, 3, 3, 5))

    def test_different_shapes_compared_on_common_grid(self):
        rng = np.random.default_rng(6)
        a = softmax_map(rng, 4, 4, 3)
        b = softmax_map(rng, 6, 5, 3)
        assert map_divergence(a, b, common_size=4) >= 0.0


class TestSimilarityMatrix:
    def test_two_identical_maps(self):
        rng = np.random.default_rng(7)
        a = softmax_map(rng, 4, 4, 3)
        m = build_similarity_matrix([a, a.copy()], ["x", "y"], common_size=4)
        assert np.array_equal(m.scores, np.zeros((2, 2)))

    def test_symmetry_exact(self):
        rng = np.random.default_rng(8)
        maps = [softmax_map(rng, 4, 4, 3) for _ in range(10)]
        m = build_similarity_matrix(maps, common_size=4)
        assert np.array_equal(m.scores, m.scores.T)
        assert np.array_equal(np.diag(m.scores), np.zeros(10))
        assert m.scores.min() >= 0.0
        assert m.scores.max() <= LN2 + 1e-9

    def test_duplicate_ranks_before_distinct(self):
        rng = np.random.default_rng(9)
        a = softmax_map(rng, 4, 4, 3)
        c = softmax_map(rng, 4, 4, 3)
        m = build_similarity_matrix([a, a.copy(), c], ["a0", "a1", "c"], common_size=4)
        assert m.scores[0, 1] < m.scores[0, 2]

    def test_needs_two_maps(self):
        rng = np.random.default_rng(10)
        with pytest.raises(ValueError, match="at least 2"):
            build_similarity_matrix([softmax_map(rng, 3, 3, 2)])

    def test_threaded_matches_serial(self):
        rng = np.random.default_rng(11)
        maps = [softmax_map(rng, 4, 4, 3) for _ in range(6)]
        serial = build_similarity_matrix(maps, common_size=4, threads=1)
        threaded = build_similarity_matrix(maps, common_size=4, threads=4)
        assert np.array_equal(serial.scores, threaded.scores)

    def test_cache_roundtrip(self, tmp_path):
        rng = np.random.default_rng(12)
        maps = [softmax_map(rng, 4, 4, 3) for _ in range(4)]
        m = build_similarity_matrix(maps, ["a", "b", "c", "d"], common_size=4)
        meta = save_similarity(tmp_path, m)
        back = load_similarity(meta)
        assert back.ids == m.ids
        assert np.allclose(back.scores, m.scores, atol=1e-6)


class TestTopKPool:
    def build(self, ids, scores):
        return SimilarityMatrix(ids=ids, scores=np.asarray(scores, dtype=np.float64))

    def test_returns_exactly_k(self):
        rng = np.random.default_rng(13)
        n = 20
        scores = rng.uniform(0.01, 0.6, size=(n, n))
        scores = (scores + scores.T) / 2
        np.fill_diagonal(scores, 0.0)
        ids = [f"i{j:02d}" for j in range(n)]
        pool = top_k_pool(self.build(ids, scores), "i00", 15)
        assert len(pool) == 15

    def test_small_candidate_set_clamps(self):
        ids = ["a", "b", "c", "d"]
        scores = np.ones((4, 4)) * 0.1
        np.fill_diagonal(scores, 0.0)
        pool = top_k_pool(self.build(ids, scores), "a", 15)
        assert len(pool) == 3

    def test_planted_duplicate_first(self):
        ids = ["q", "dup", "far1", "far2"]
        scores = np.array(
            [
                [0.0, 0.0, 0.3, 0.5],
                [0.0, 0.0, 0.3, 0.5],
                [0.3, 0.3, 0.0, 0.2],
                [0.5, 0.5, 0.2, 0.0],
            ]
        )
        pool = top_k_pool(self.build(ids, scores), "q", 3)
        assert pool[0] == "dup"
        assert pool == ["dup", "far1", "far2"]

    def test_ascending_with_lexicographic_ties(self):
        ids = ["q", "b", "a", "c"]
        scores = np.zeros((4, 4))
        scores[0, 1] = scores[1, 0] = 0.2
        scores[0, 2] = scores[2, 0] = 0.2
        scores[0, 3] = scores[3, 0] = 0.1
        pool = top_k_pool(self.build(ids, scores), "q", 3)
        assert pool == ["c", "a", "b"]

    def test_unknown_query(self):
        ids = ["a", "b"]
        with pytest.raises(ValueError, match="unknown image id"):
            top_k_pool(self.build(ids, np.zeros((2, 2))), "zzz", 1)

    def test_candidates_must_exclude_query(self):
        ids = ["a", "b"]
        with pytest.raises(ValueError, match="exclude"):
            top_k_pool(self.build(ids, np.zeros((2, 2))), "a", 1, ["a", "b"])
