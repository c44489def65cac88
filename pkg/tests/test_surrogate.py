import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from klacmes.distribution import GaussianParams, whiten
from klacmes.surrogate import (
    Archive,
    EvaluatedSample,
    RankSVMSurrogate,
    SurrogateHyperParams,
    SurrogateModel,
    SurrogateTrainingError,
    TrainingSet,
    drift_error,
    kernel,
    pairwise_loss_sum,
    predict,
    select_training_set,
    train,
)


def brute_force_drift(scores, values):
    """Ordered-pair double loop, written independently of the vectorized version."""
    m = len(values)
    total = 0.0
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            if values[i] == values[j] or scores[i] == scores[j]:
                total += 0.5
            elif (values[i] < values[j]) != (scores[i] > scores[j]):
                total += 1.0
    return total / (m * (m - 1))


def random_dist(rng, n):
    a = rng.standard_normal((n, n))
    return GaussianParams(rng.standard_normal(n), float(rng.uniform(0.5, 2)), a @ a.T + np.eye(n))


def fixed_score_model(scores_by_row, dim=1):
    """A model whose scores on points ``[[0], [1], ...]`` are given numbers.

    Built directly from duals on a tiny kernel width so that each support
    point only sees itself.  Chain coefficients sum to zero, so the scores
    are centred first; a common shift changes no ranking.
    """
    scores = np.asarray(scores_by_row, dtype=float)
    scores = scores - scores.mean()
    m = scores.shape[0]
    support = np.arange(m, dtype=float)[:, None] * np.ones((1, dim)) * 100.0
    # coef_i = d_i - d_{i-1}, so the duals are partial sums of the scores
    duals = np.cumsum(scores)[:-1]
    model = SurrogateModel(support, duals, GaussianParams.isotropic(np.zeros(dim)), 1e-3, 0.0,
                           np.full(m - 1, np.inf))
    return model, support


class TestArchiveAndSelection:
    def test_archive_grows_and_indexes(self):
        arch = Archive(2)
        arch.extend(np.zeros((100, 2)), np.arange(100.0))
        arch.extend(np.ones((3, 2)), [1.0, 2.0, 3.0])
        assert len(arch) == 103
        assert list(arch.indices[-3:]) == [101, 102, 103]

    def test_whole_archive_when_size_is_q(self):
        rng = np.random.default_rng(0)
        samples = [EvaluatedSample(rng.standard_normal(3), float(v), i + 1)
                   for i, v in enumerate(rng.permutation(5))]
        ts = select_training_set(samples, GaussianParams.isotropic(np.zeros(3)), 5)
        assert ts.q == 5
        assert sorted(ts.indices) == [1, 2, 3, 4, 5]
        assert np.all(np.diff(ts.values) >= 0)

    def test_euclidean_neighbours_for_identity(self):
        rng = np.random.default_rng(1)
        pts = rng.standard_normal((30, 2))
        arch = Archive(2)
        arch.extend(pts, rng.standard_normal(30))
        ts = select_training_set(arch, GaussianParams.isotropic(np.zeros(2)), 10)
        nearest = np.argsort(np.linalg.norm(pts, axis=1))[:10] + 1
        assert set(ts.indices) == set(nearest)

    def test_anisotropic_metric(self):
        arch = Archive(2)
        arch.extend([[0.0, 2.0], [10.0, 0.0], [0.0, 0.0]], [1.0, 2.0, 3.0])
        dist = GaussianParams(np.zeros(2), 1.0, np.diag([100.0, 1.0]))
        ts = select_training_set(arch, dist, 2)
        assert set(ts.indices) == {2, 3}

    def test_value_ties_break_by_eval_index(self):
        ts = TrainingSet.from_arrays(np.eye(3), [1.0, 1.0, 0.0], [7, 3, 5],
                                     GaussianParams.isotropic(np.zeros(3)))
        assert list(ts.indices) == [5, 3, 7]

    def test_errors(self):
        arch = Archive(2)
        arch.extend(np.zeros((3, 2)), [1.0, 2.0, 3.0])
        dist = GaussianParams.isotropic(np.zeros(2))
        with pytest.raises(ValueError):
            select_training_set(arch, dist, 4)
        with pytest.raises(ValueError):
            select_training_set(arch, dist, 1)
        with pytest.raises(ValueError):
            TrainingSet(np.eye(2), np.array([2.0, 1.0]), np.array([1, 2]), dist)


class TestKernel:
    def test_self_similarity(self):
        x = np.array([0.3, -1.0])
        assert kernel(x, x, GaussianParams.isotropic(np.zeros(2)), 0.7) == 1.0

    def test_hand_value(self):
        dist = GaussianParams.isotropic(np.zeros(2))
        assert kernel([math.sqrt(2), 0.0], [0.0, 0.0], dist, 1.0) == pytest.approx(math.exp(-1),
                                                                                  abs=1e-15)

    def test_width_must_be_positive(self):
        with pytest.raises(ValueError):
            kernel([0.0], [1.0], GaussianParams.isotropic(np.zeros(1)), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6), s=st.floats(0.1, 10))
    def test_whitening_consistency_and_rotation_invariance(self, seed, n, s):
        rng = np.random.default_rng(seed)
        dist = random_dist(rng, n)
        a, b = rng.standard_normal((2, n)) * 2
        wa, wb = whiten(dist, a), whiten(dist, b)
        expected = math.exp(-float((wa - wb) @ (wa - wb)) / (2 * s * s))
        assert kernel(a, b, dist, s) == pytest.approx(expected, abs=1e-12)
        assert kernel(a, b, dist, s) == pytest.approx(kernel(b, a, dist, s), abs=1e-15)
        R = np.linalg.qr(rng.standard_normal((n, n)))[0]
        rotated = GaussianParams(R @ dist.mean, dist.sigma, R @ dist.cov @ R.T)
        assert kernel(R @ a, R @ b, rotated, s) == pytest.approx(kernel(a, b, dist, s), abs=1e-12)


def monotone_set(q=20):
    x = np.arange(1.0, q + 1)[:, None]
    return TrainingSet.from_arrays(x, x[:, 0], np.arange(1, q + 1),
                                   GaussianParams.isotropic(np.zeros(1)))


class TestTrain:
    def test_two_points(self):
        ts = TrainingSet.from_arrays([[0.0, 1.0], [2.0, 0.0]], [5.0, 1.0], [1, 2],
                                     GaussianParams.isotropic(np.zeros(2)))
        model = train(ts, SurrogateHyperParams(q=2, width=1.0, cost_base=10.0))
        assert model.train_misrank == 0.0
        assert predict(model, [2.0, 0.0]) > predict(model, [0.0, 1.0])

    def test_monotone_one_dimensional(self):
        model = train(monotone_set(), SurrogateHyperParams(q=20, width=5.0, cost_base=1e3))
        assert model.train_misrank == 0.0
        scores = model.scores(np.arange(1.0, 21)[:, None])
        assert np.all(np.diff(scores) < 0)
        assert predict(model, [1.0]) > predict(model, [20.0])

    def test_zero_cost_gives_constant_model(self):
        model = train(monotone_set(), SurrogateHyperParams(q=20, width=5.0, cost_base=0.0))
        assert np.all(model.duals == 0)
        assert np.all(model.scores(np.linspace(-3, 30, 11)[:, None]) == 0)
        assert model.train_misrank == 0.5

    def test_identical_points_fail(self):
        ts = TrainingSet.from_arrays(np.ones((4, 2)), [1.0, 2.0, 3.0, 4.0], [1, 2, 3, 4],
                                     GaussianParams.isotropic(np.zeros(2)))
        with pytest.raises(SurrogateTrainingError):
            train(ts, SurrogateHyperParams(q=4, width=1.0, cost_base=1.0))

    def test_costs_grow_towards_the_best_pair(self):
        hp = SurrogateHyperParams(q=5, width=1.0, cost_base=2.0, cost_growth=1.5)
        assert np.allclose(hp.costs(), [2.0 * 1.5**3, 2.0 * 1.5**2, 2.0 * 1.5, 2.0])

    @pytest.mark.parametrize("kwargs", [dict(q=1), dict(width=0.0), dict(cost_base=-1.0),
                                        dict(relaxation=2.0)])
    def test_hyper_validation(self, kwargs):
        base = dict(q=4, width=1.0, cost_base=1.0)
        with pytest.raises(ValueError):
            SurrogateHyperParams(**{**base, **kwargs})

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), q=st.integers(2, 40), n=st.integers(1, 5),
           cost=st.floats(0.0, 1e4))
    def test_duals_feasible_and_dist_frozen(self, seed, q, n, cost):
        rng = np.random.default_rng(seed)
        dist = random_dist(rng, n)
        X = rng.standard_normal((q, n))
        ts = TrainingSet.from_arrays(X, rng.standard_normal(q), np.arange(q), dist)
        hp = SurrogateHyperParams(q=q, width=float(rng.uniform(0.2, 3)), cost_base=cost)
        model = train(ts, hp)
        assert np.all(model.duals >= 0)
        assert np.all(model.duals <= hp.costs(q) + 1e-12)
        assert model.frozen_dist is dist
        assert 0 <= model.train_misrank <= 1

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((15, 3))
        f = np.sum(X**2, axis=1)
        dist = GaussianParams.isotropic(np.zeros(3))
        hp = SurrogateHyperParams(q=15, width=1.0, cost_base=100.0)
        m1 = train(TrainingSet.from_arrays(X, f, np.arange(15), dist), hp)
        m2 = train(TrainingSet.from_arrays(X, np.exp(f) ** 3, np.arange(15), dist), hp)
        assert np.array_equal(m1.duals, m2.duals)
        test = rng.standard_normal((10, 3))
        tf = np.sum(test**2, axis=1)
        assert drift_error(m1, (test, tf)) == drift_error(m2, (test, tf**4))

    def test_rotation_invariance_of_predictions(self):
        rng = np.random.default_rng(3)
        dist = random_dist(rng, 3)
        X = rng.standard_normal((12, 3))
        f = rng.standard_normal(12)
        hp = SurrogateHyperParams(q=12, width=1.5, cost_base=50.0)
        model = train(TrainingSet.from_arrays(X, f, np.arange(12), dist), hp)
        R = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        rdist = GaussianParams(R @ dist.mean, dist.sigma, R @ dist.cov @ R.T)
        rmodel = train(TrainingSet.from_arrays(X @ R.T, f, np.arange(12), rdist), hp)
        x = rng.standard_normal((5, 3))
        assert np.allclose(rmodel.scores(x @ R.T), model.scores(x), atol=1e-10)


class TestDriftError:
    def test_perfect_and_reversed(self):
        values = np.arange(6.0)
        model, support = fixed_score_model(-values)
        assert drift_error(model, (support, values)) == 0.0
        assert drift_error(model, (support, -values)) == 1.0

    def test_all_ties(self):
        model, support = fixed_score_model(np.arange(5.0))
        assert drift_error(model, (support, np.zeros(5))) == 0.5

    def test_random_scorer_near_half(self):
        rng = np.random.default_rng(4)
        scores = rng.standard_normal(100)
        values = rng.permutation(100).astype(float)
        assert abs(pairwise_loss_sum(scores, values) / (100 * 99) - 0.5) < 0.1

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for case in range(50):
            m = int(rng.integers(2, 12))
            if case % 5 == 0:
                values = np.zeros(m)
            else:
                values = rng.integers(0, 4, m).astype(float)
            scores = rng.integers(-2, 3, m).astype(float)
            if case % 7 == 0:
                scores = -values
            model, support = fixed_score_model(scores)
            got = drift_error(model, (support, values))
            model_scores = model.scores(support)
            assert np.allclose(model_scores, scores - scores.mean(), atol=1e-12)
            assert got == brute_force_drift(model_scores, values)

    def test_accepts_evaluated_samples(self):
        model, support = fixed_score_model([2.0, 1.0, 0.0])
        samples = [EvaluatedSample(p, float(v), i) for i, (p, v) in enumerate(zip(support, [0, 1, 2]))]
        assert drift_error(model, samples) == 0.0

    def test_needs_two_points(self):
        model, support = fixed_score_model([1.0, 0.0])
        with pytest.raises(ValueError):
            drift_error(model, (support[:1], [0.0]))

    @given(scores=st.lists(st.integers(-3, 3), min_size=2, max_size=9),
           data=st.data())
    def test_symmetric_pair_counting(self, scores, data):
        values = data.draw(st.lists(st.integers(-3, 3), min_size=len(scores), max_size=len(scores)))
        m = len(scores)
        unordered = []
        for i, j in itertools.combinations(range(m), 2):
            unordered.append(brute_force_drift([scores[i], scores[j]], [values[i], values[j]]))
        total = pairwise_loss_sum(scores, values) / (m * (m - 1))
        assert total == pytest.approx(np.mean(unordered), abs=1e-12)


class TestEstimator:
    def test_fit_predict_score(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((40, 3))
        y = np.sum(X**2, axis=1)
        est = RankSVMSurrogate(width=1.5, cost_base=100.0).fit(X, y)
        Xt = rng.standard_normal((30, 3))
        assert est.predict(Xt).shape == (30,)
        assert est.score(Xt, np.sum(Xt**2, axis=1)) > 0.8
        assert clone(est).get_params() == est.get_params()

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            RankSVMSurrogate().predict(np.zeros((1, 2)))
