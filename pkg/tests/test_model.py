import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from milr import (
    Bag,
    BagDataset,
    Coefficients,
    accuracy,
    auc,
    bag_prob,
    bag_probs,
    deviance,
    instance_prob,
    log_likelihood,
    predict_bag,
    softmax_bag_score,
    softmax_scores,
)

from conftest import brute_force_auc, make_dataset


def _bag_with_probs(probs, label=1):
    """Single-feature bag whose instance probabilities under ``_unit`` are ``probs``."""
    return Bag("b", label, logit(np.asarray(probs, dtype=float)).reshape(-1, 1))


_unit = Coefficients(0.0, [1.0])


class TestInstanceProb:
    def test_zero_predictor(self):
        assert instance_prob(Coefficients.zeros(3), np.array([4.0, -2.0, 9.0])) == 0.5

    def test_scalar_value(self):
        c = Coefficients(-2.0, [1.0, -1.0, 0.0])
        assert instance_prob(c, np.array([1.0, 1.0, 0.0])) == pytest.approx(0.11920292202211755, rel=1e-12)

    def test_no_underflow_at_minus_1000(self):
        v = instance_prob(Coefficients(-1000.0, [0.0]), np.array([0.0]))
        assert v == 0.0 or v > 0  # expit saturates smoothly, never negative or NaN
        assert instance_prob(Coefficients(-700.0, [0.0]), np.array([0.0])) > 0
        assert instance_prob(Coefficients(1000.0, [0.0]), np.array([0.0])) == 1.0


class TestBagProb:
    def test_two_instances(self):
        assert bag_prob(_unit, _bag_with_probs([0.1, 0.2])) == pytest.approx(0.28, abs=1e-12)

    def test_single_instance(self):
        assert bag_prob(_unit, _bag_with_probs([0.37])) == pytest.approx(0.37, abs=1e-12)

    def test_symmetric(self):
        assert bag_prob(_unit, _bag_with_probs([0.5, 0.5, 0.5])) == pytest.approx(0.875, abs=1e-12)

    def test_large_bag_stays_in_unit_interval(self):
        b = _bag_with_probs(np.full(5000, 1e-6))
        v = bag_prob(_unit, b)
        assert v == pytest.approx(-math.expm1(5000 * math.log1p(-1e-6)), rel=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=8), st.integers(0, 7), st.floats(0.0, 0.2))
    def test_monotone_in_each_instance(self, probs, j, bump):
        j = j % len(probs)
        raised = list(probs)
        raised[j] = min(0.999, raised[j] + bump)
        assert bag_prob(_unit, _bag_with_probs(raised)) >= bag_prob(_unit, _bag_with_probs(probs)) - 1e-12


class TestLikelihood:
    def test_single_positive_bag(self):
        ds = BagDataset((_bag_with_probs([0.5], 1),))
        assert log_likelihood(_unit, ds) == pytest.approx(math.log(0.5))
        assert deviance(_unit, ds) == pytest.approx(1.3862943611198906)

    def test_single_negative_bag(self):
        ds = BagDataset((_bag_with_probs([0.28], 0),))
        assert log_likelihood(_unit, ds) == pytest.approx(math.log(0.72), rel=1e-12)

    def test_additivity(self):
        b = _bag_with_probs([0.2, 0.7], 1)
        one = BagDataset((b,))
        two = BagDataset((b, Bag("c", 1, b.features)))
        assert deviance(_unit, two) == pytest.approx(2 * deviance(_unit, one), rel=1e-14)

    def test_perfect_fit_deviance_near_zero(self):
        bags = (Bag("p", 1, [[1.0], [0.2]]), Bag("n", 0, [[-1.0], [-2.0]]))
        ds = BagDataset(bags)
        assert deviance(Coefficients(0.0, [60.0]), ds) == pytest.approx(0.0, abs=1e-9)

    def test_minus_infinity_only_for_impossible_label(self):
        ds = BagDataset((Bag("p", 1, [[-1.0]]),))
        assert log_likelihood(Coefficients(0.0, [1e6]), ds) == -math.inf

    def test_singletons_reduce_to_logistic(self, rng):
        X = rng.standard_normal((50, 3))
        y = rng.integers(0, 2, 50)
        ds = BagDataset(tuple(Bag(str(i), int(y[i]), X[i:i + 1]) for i in range(50)))
        c = Coefficients(0.2, [0.5, -1.0, 0.3])
        eta = 0.2 + X @ c.beta
        ll = np.sum(y * eta - np.log1p(np.exp(eta)))
        assert log_likelihood(c, ds) == pytest.approx(ll, rel=1e-12)

    def test_vectorised_bag_probs_match(self, small_ds):
        c = Coefficients(-0.5, [0.3, -0.2, 0.1, 0.0])
        np.testing.assert_allclose(bag_probs(c, small_ds), [bag_prob(c, b) for b in small_ds.bags], rtol=1e-12)


class TestPredict:
    def test_threshold_is_inclusive(self):
        assert predict_bag(_unit, _bag_with_probs([0.5])) == 1
        assert predict_bag(_unit, _bag_with_probs([0.4999])) == 0

    def test_zero_coefficients_single_instance(self):
        assert predict_bag(Coefficients.zeros(2), Bag("a", 0, [[3.0, 1.0]])) == 1

    @pytest.mark.parametrize("t", [0.0, 1.0, 1.5])
    def test_threshold_must_be_open_interval(self, t):
        with pytest.raises(ValueError):
            predict_bag(_unit, _bag_with_probs([0.5]), threshold=t)


class TestMetrics:
    def test_auc_cases(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0
        assert auc([0.5, 0.5], [1, 0]) == 0.5
        assert auc([0.2, 0.8, 0.6], [1, 0, 1]) == 0.0

    def test_auc_single_class(self):
        with pytest.raises(ValueError, match="AUC undefined"):
            auc([0.1, 0.2], [1, 1])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=40))
    def test_auc_matches_all_pairs(self, pairs):
        scores = [s / 6 for s, _ in pairs]
        labels = [y for _, y in pairs]
        if len(set(labels)) < 2:
            return
        assert abs(auc(scores, labels) - brute_force_auc(scores, labels)) <= 1e-12

    def test_accuracy(self):
        assert accuracy([1, 0], [1, 0]) == 1.0
        assert accuracy([1, 1], [1, 0]) == 0.5
        with pytest.raises(ValueError):
            accuracy([], [])


class TestSoftmax:
    def test_alpha_zero_is_mean(self):
        assert softmax_bag_score(_unit, _bag_with_probs([0.2, 0.4]), 0.0) == pytest.approx(0.3)

    def test_large_alpha_tends_to_max(self):
        assert softmax_bag_score(_unit, _bag_with_probs([0.2, 0.9]), 200.0) == pytest.approx(0.9, abs=1e-6)

    def test_symmetric(self):
        assert softmax_bag_score(_unit, _bag_with_probs([0.5, 0.5]), 3.0) == pytest.approx(0.5)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            softmax_bag_score(_unit, _bag_with_probs([0.5]), -1.0)

    def test_vectorised(self, small_ds):
        c = Coefficients(-0.5, [0.3, -0.2, 0.1, 0.0])
        np.testing.assert_allclose(
            softmax_scores(c, small_ds, 3.0),
            [softmax_bag_score(c, b, 3.0) for b in small_ds.bags],
            rtol=1e-12,
        )

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=10), st.floats(0.01, 20.0))
    def test_ordering_chain(self, probs, alpha):
        b = _bag_with_probs(probs)
        p = np.asarray(probs)
        geo = math.exp(np.mean(np.log(p)))
        s0 = softmax_bag_score(_unit, b, 0.0)
        sa = softmax_bag_score(_unit, b, alpha)
        tol = 1e-9
        assert geo <= s0 + tol
        assert s0 <= sa + tol
        assert sa <= p.max() + tol
        assert p.max() <= bag_prob(_unit, b) + tol


def test_coefficients_reject_non_finite():
    with pytest.raises(ValueError):
        Coefficients(np.nan, [0.0])
    with pytest.raises(ValueError):
        Coefficients(0.0, [np.inf])


def test_coefficients_json_round_trip(rng):
    c = Coefficients(rng.standard_normal(), rng.standard_normal(5))
    assert Coefficients.from_dict(c.to_dict()) == c
