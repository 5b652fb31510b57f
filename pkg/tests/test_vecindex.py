import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curate.embeddings import EmbeddingSet, l2_normalize
from curate.errors import BadNprobe, BadSubspaceCount, DimensionMismatch, InsufficientData
from curate.vecindex import (
    PQCodebook,
    build_ivfpq,
    cosine_similarity,
    ivf_residuals,
    knn_exact,
    pq_decode,
    pq_encode,
    search_ivfpq,
    topk_rows,
    train_coarse,
    train_pq,
)
from oracles import naive_knn, unit_rows


def unit_set(rng, n, d, ids=None):
    return EmbeddingSet.from_array(unit_rows(rng, n, d), ids=ids, normalized=True)


def exact_codebook(resid: np.ndarray, m: int, ks: int) -> PQCodebook:
    """Codebook whose codewords include every residual slice: zero quantization error."""
    n, d = resid.shape
    sub = d // m
    cents = np.full((m, ks, sub), 1e3)
    for s in range(m):
        cents[s, :n] = resid[:, s * sub:(s + 1) * sub]
    return PQCodebook(m, ks, cents)


class TestCosine:
    def test_orthogonal_and_parallel(self):
        assert cosine_similarity([1, 0], [0, 2]) == 0.0
        assert cosine_similarity([1, 1], [3, 3]) == pytest.approx(1.0)


class TestTopk:
    def test_ties_prefer_smaller_id(self):
        scores = np.array([[0.5, 0.9, 0.5, 0.9]])
        ids, vals = topk_rows(scores, np.array([7, 3, 1, 4]), 3)[0]
        assert ids.tolist() == [3, 4, 1]
        np.testing.assert_array_equal(vals, [0.9, 0.9, 0.5])

    def test_k_larger_than_n(self):
        ids, _ = topk_rows(np.array([[0.1, 0.2]]), np.array([0, 1]), 5)[0]
        assert ids.tolist() == [1, 0]


class TestKnnExact:
    def test_matches_double_loop(self, rng):
        base = unit_set(rng, 60, 8, ids=rng.permutation(1000)[:60])
        queries = unit_set(rng, 5, 8)
        for res, (ids, scores) in zip(knn_exact(base, queries, 7), naive_knn(base.data, base.ids, queries.data, 7)):
            assert res.ids.tolist() == ids
            np.testing.assert_allclose(res.scores, scores, atol=1e-6)

    def test_exclude_self(self, rng):
        es = unit_set(rng, 20, 4)
        for qid, res in zip(es.ids, knn_exact(es, es, 3, exclude_self=True)):
            assert qid not in res.ids.tolist()
            assert len(res) == 3

    def test_exact_duplicate_ties_to_smaller_id(self):
        v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        es = EmbeddingSet.from_array(v, ids=[9, 4, 1], normalized=True)
        res = knn_exact(es, EmbeddingSet.from_array([[1.0, 0.0]], normalized=True), 2)[0]
        assert res.ids.tolist() == [4, 9]

    def test_requires_normalized(self, rng):
        raw = EmbeddingSet.from_array(rng.standard_normal((5, 3)))
        with pytest.raises(ValueError):
            knn_exact(raw, raw, 1)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            knn_exact(unit_set(rng, 5, 3), unit_set(rng, 2, 4), 1)

    @given(st.integers(1, 40), st.integers(1, 6), st.integers(1, 10), st.integers(0, 2**32 - 1))
    def test_scores_sorted_descending(self, n, d, k, seed):
        rng = np.random.default_rng(seed)
        es = unit_set(rng, n, d)
        for res in knn_exact(es, es, k):
            assert len(res) == min(k, n)
            assert np.all(np.diff(res.scores) <= 0)


class TestProductQuantizer:
    def test_subspace_divisibility(self, rng):
        with pytest.raises(BadSubspaceCount):
            train_pq(rng.standard_normal((50, 10)), 3, 4)

    def test_insufficient_data(self, rng):
        with pytest.raises(InsufficientData):
            train_pq(rng.standard_normal((10, 8)), 2, 16)

    def test_encode_picks_nearest_codeword(self, rng):
        x = rng.standard_normal((300, 8))
        cb = train_pq(x, 4, 8, seed=1)
        codes = pq_encode(cb, x)
        for s in range(4):
            sub = x[:, 2 * s:2 * s + 2]
            d2 = ((sub[:, None, :] - cb.centroids[s][None]) ** 2).sum(-1)
            np.testing.assert_array_equal(codes[:, s], d2.argmin(1))

    def test_decode_of_exact_codebook_is_lossless(self, rng):
        x = rng.standard_normal((20, 6))
        cb = exact_codebook(x, 3, 32)
        np.testing.assert_array_equal(pq_decode(cb, pq_encode(cb, x)), x)

    def test_training_is_deterministic(self, rng):
        x = rng.standard_normal((200, 8))
        np.testing.assert_array_equal(train_pq(x, 2, 8, seed=3).centroids, train_pq(x, 2, 8, seed=3).centroids)


class TestIVFPQ:
    def test_exact_codebook_full_probe_is_exact(self, rng):
        es = unit_set(rng, 150, 16)
        coarse = train_coarse(es, 8, seed=0)
        _, resid = ivf_residuals(es, coarse)
        index = build_ivfpq(es, 8, exact_codebook(resid, 4, 256), coarse=coarse)
        assert index.ntotal == 150
        queries = unit_set(rng, 10, 16)
        for q, ex in zip(queries.data, knn_exact(es, queries, 10)):
            got = search_ivfpq(index, q, 10, nprobe=8)
            assert sorted(got.ids.tolist()) == sorted(ex.ids.tolist())
            np.testing.assert_allclose(got.scores, ex.scores, atol=1e-6)

    def test_lists_hold_ids_ascending(self, rng):
        es = unit_set(rng, 300, 8, ids=rng.permutation(10_000)[:300])
        index = build_ivfpq(es, 4, m=2, ks=16)
        all_ids = np.concatenate(index.list_ids)
        assert sorted(all_ids.tolist()) == sorted(es.ids.tolist())
        for ids in index.list_ids:
            assert np.all(np.diff(ids) > 0)
        assert len(index.lists) == 4

    def test_nprobe_bounds(self, rng):
        es = unit_set(rng, 100, 8)
        index = build_ivfpq(es, 4, m=2, ks=16)
        for bad in (0, 5):
            with pytest.raises(BadNprobe):
                search_ivfpq(index, es.data[0], 3, bad)

    def test_recall_grows_with_nprobe(self, rng):
        es = unit_set(rng, 2000, 16)
        index = build_ivfpq(es, 16, m=4, ks=64)
        queries = unit_set(rng, 30, 16)
        truth = [set(r.ids.tolist()) for r in knn_exact(es, queries, 10)]

        def recall(nprobe):
            hits = sum(len(t & set(search_ivfpq(index, q, 10, nprobe).ids.tolist())) for q, t in zip(queries.data, truth))
            return hits / (10 * len(truth))

        r = [recall(p) for p in (1, 4, 16)]
        assert r[0] <= r[1] <= r[2]

    def test_build_is_deterministic(self, rng):
        es = l2_normalize(EmbeddingSet.from_array(rng.standard_normal((200, 8))))
        a, b = build_ivfpq(es, 4, m=2, ks=16, seed=5), build_ivfpq(es, 4, m=2, ks=16, seed=5)
        np.testing.assert_array_equal(a.coarse_centroids, b.coarse_centroids)
        for ca, cb in zip(a.list_codes, b.list_codes):
            np.testing.assert_array_equal(ca, cb)
