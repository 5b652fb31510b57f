import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curate.errors import DegenerateLabels, DegenerateVariance, EmptyTrain, LengthMismatch
from curate.probe import (
    PROBE_LRS,
    LabeledFeatures,
    ProbeGrid,
    assignment,
    grid_search,
    knn_classify,
    linear_probe_train,
    nms,
    patch_match,
    pca,
    pca_foreground,
    split_indices,
)
from curate.rng import derive_seed
from curate.synthetic import BlobSpec, make_blobs
from oracles import brute_assignment


def naive_knn_vote(train_x, train_y, q, k):
    t = train_x / np.linalg.norm(train_x, axis=1, keepdims=True)
    out = []
    for row in q / np.linalg.norm(q, axis=1, keepdims=True):
        sims = [(-float(row @ t[i]), i) for i in range(len(t))]
        top = sorted(sims)[:k]
        votes = {}
        for s, i in top:
            c, w = votes.get(train_y[i], (0, 0.0))
            votes[train_y[i]] = (c + 1, w - s)
        out.append(min(votes, key=lambda lab: (-votes[lab][0], -votes[lab][1], lab)))
    return np.array(out)


class TestKnn:
    def test_k1_exact_match(self, rng):
        x = rng.standard_normal((20, 5))
        y = rng.integers(0, 3, 20)
        assert knn_classify(LabeledFeatures(x, y), x[7:8], k=1)[0] == y[7]

    def test_matches_naive_vote(self, rng):
        x, q = rng.standard_normal((60, 4)), rng.standard_normal((25, 4))
        y = rng.integers(0, 4, 60)
        np.testing.assert_array_equal(knn_classify(LabeledFeatures(x, y), q, 7), naive_knn_vote(x, y, q, 7))

    def test_symmetric_tie_is_deterministic(self):
        x = np.array([[1.0, 0.0], [-1.0, 0.0]])
        pred = knn_classify(LabeledFeatures(x, [1, 0]), [[0.0, 1.0]], k=2)
        assert pred.tolist() == [0]

    def test_blobs(self):
        es, y = make_blobs(BlobSpec(), seed=0)
        train = LabeledFeatures(es.data[:150], y[:150])
        assert np.mean(knn_classify(train, es.data[150:], 5) == y[150:]) == 1.0

    def test_empty(self):
        with pytest.raises(EmptyTrain):
            knn_classify(LabeledFeatures(np.zeros((0, 2)), []), [[1.0, 0.0]])


class TestLinearProbe:
    def separable(self, rng, n=200):
        x = rng.standard_normal((n, 2))
        y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
        x += np.where(y[:, None] == 1, 0.3, -0.3) * np.array([1.0, 0.5])
        return LabeledFeatures(x, y)

    def test_separable_reaches_full_accuracy(self, rng):
        data = self.separable(rng)
        res = linear_probe_train(data.take(slice(0, 160)), data.take(slice(160, None)), 1.0, 2000, batch_size=64)
        assert res.accuracy == 1.0

    def test_zero_lr_predicts_majority(self, rng):
        x = rng.standard_normal((50, 3))
        y = np.array([0] * 35 + [1] * 15)
        data = LabeledFeatures(x, y)
        res = linear_probe_train(data, data, 0.0, 10)
        assert not res.model.weights.any()
        assert res.accuracy == pytest.approx(0.7)

    def test_loss_decreases(self, rng):
        data = self.separable(rng)
        res = linear_probe_train(data, data, 0.5, 500, log_every=100)
        assert res.loss_history[-1] < res.loss_history[0]

    def test_single_class(self, rng):
        data = LabeledFeatures(rng.standard_normal((5, 2)), [0] * 5)
        with pytest.raises(DegenerateLabels):
            linear_probe_train(data, data, 0.1, 10)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            LabeledFeatures(np.ones((3, 2)), [0, 1])


class TestGrid:
    def test_default_learning_rates(self):
        assert len(PROBE_LRS) == 13
        assert PROBE_LRS[0] == 0.0001 and PROBE_LRS[-1] == 0.5

    def test_single_cell(self, rng):
        x = rng.standard_normal((40, 2))
        y = (x[:, 0] > 0).astype(int)
        res = grid_search(ProbeGrid({"only": x}, [0.1]), y, iters=20)
        assert (res.view, res.lr, res.n_trained) == ("only", 0.1, 1)

    def test_best_is_max_of_independent_reruns(self, rng):
        x = rng.standard_normal((80, 3))
        y = (x[:, 0] + 0.2 * rng.standard_normal(80) > 0).astype(int)
        views = {"a": x, "b": x[:, ::-1] * 0.1}
        lrs = [0.001, 0.1, 1.0]
        res = grid_search(ProbeGrid(views, lrs), y, iters=50, seed=3)
        tr, va = split_indices(80, 0.2, derive_seed(3, "probe/split"))
        rerun = []
        for name, feats in views.items():
            data = LabeledFeatures(feats, y, 2)
            for lr in lrs:
                cell = linear_probe_train(data.take(tr), data.take(va), lr, 50, seed=derive_seed(3, f"probe/{name}/{lr}"))
                rerun.append(cell.accuracy)
        assert [a for _, _, a in res.cells] == rerun
        assert res.accuracy == max(rerun)

    def test_split_is_partition(self):
        tr, va = split_indices(50, 0.2, 1)
        assert len(va) == 10
        assert sorted(np.concatenate([tr, va]).tolist()) == list(range(50))


class TestPCA:
    def test_rank_one(self, rng):
        d = rng.standard_normal(6)
        x = rng.standard_normal(20)[:, None] * d
        res = pca(x, 2)
        assert res.explained_variance_ratio[0] == pytest.approx(1.0)

    @pytest.mark.parametrize("shape", [(40, 6), (5, 30)])
    def test_orthonormal_and_reconstruction(self, rng, shape):
        x = rng.standard_normal(shape)
        res = pca(x)
        n = len(res.components)
        np.testing.assert_allclose(res.components @ res.components.T, np.eye(n), atol=1e-8)
        np.testing.assert_allclose(res.scores @ res.components + res.mean, x, atol=1e-6)

    def test_gram_path_matches_covariance_path(self, rng):
        x = rng.standard_normal((8, 50))
        small = pca(x, 3)
        cov = np.cov(x.T, bias=True)
        evals, evecs = np.linalg.eigh(cov)
        top = evecs[:, ::-1][:, :3].T
        for got, ref in zip(small.components, top):
            assert abs(got @ ref) == pytest.approx(1.0, abs=1e-8)

    def test_sign_convention(self, rng):
        res = pca(rng.standard_normal((30, 5)))
        for c in res.components:
            assert c[np.argmax(np.abs(c))] > 0

    def test_planted_foreground(self, rng):
        axis = np.zeros(16)
        axis[3] = 1.0
        fg = rng.standard_normal((40, 16)) * 0.1 + 2 * axis
        bg = rng.standard_normal((60, 16)) * 0.1 - 2 * axis
        res = pca_foreground(np.concatenate([fg, bg]))
        assert abs(res.components[0] @ axis) > 0.99
        assert res.foreground[:40].all() and not res.foreground[40:].any()

    def test_constant_rows(self):
        with pytest.raises(DegenerateVariance):
            pca(np.ones((5, 3)))


class TestMatching:
    def test_identity(self, rng):
        f = rng.standard_normal((6, 4))
        coords = rng.standard_normal((6, 2))
        ms = patch_match(f, coords, f, coords, 0.0)
        assert sorted((a, b) for a, b, _ in ms.matches) == [(i, i) for i in range(6)]
        assert ms.total_cost == 0.0

    def test_three_by_three(self):
        cost = np.array([[1, 2, 3], [2, 4, 6], [3, 6, 9]], float)
        r, c = assignment(cost)
        assert cost[r, c].sum() == brute_assignment(cost) == 10.0

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_rectangular_matches_brute_force(self, n, m, seed):
        cost = np.random.default_rng(seed).random((n, m))
        r, c = assignment(cost)
        assert len(r) == min(n, m)
        assert cost[r, c].sum() == pytest.approx(brute_assignment(cost), abs=1e-12)

    def test_nms_limits(self, rng):
        coords = rng.random((5, 2))
        matches = [(i, i, float(i)) for i in range(5)]
        assert len(nms(matches, coords, coords, 0.0)) == 5
        assert nms(matches, coords, coords, np.inf) == [(0, 0, 0.0)]

    def test_nms_radius_is_strict(self):
        coords = np.array([[0.0, 0.0], [1.0, 0.0]])
        matches = [(0, 0, 0.1), (1, 1, 0.2)]
        assert len(nms(matches, coords, coords, 1.0)) == 2
        assert len(nms(matches, coords, coords, 1.0 + 1e-9)) == 1
