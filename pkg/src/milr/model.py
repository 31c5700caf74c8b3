"""Instance and bag probabilities, observed-data likelihood, and metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .dataset import Bag, BagDataset


@dataclass(frozen=True, eq=False)
class Coefficients:
    """Intercept plus slope vector."""

    intercept: float
    beta: np.ndarray

    def __post_init__(self):
        b = np.array(self.beta, dtype=np.float64).reshape(-1)
        if not (np.isfinite(self.intercept) and np.all(np.isfinite(b))):
            raise ValueError("coefficients must be finite")
        b.setflags(write=False)
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "beta", b)

    @classmethod
    def zeros(cls, p: int, intercept: float = 0.0) -> Coefficients:
        return cls(intercept, np.zeros(p))

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(X) @ self.beta

    def nonzero(self) -> np.ndarray:
        return np.flatnonzero(self.beta)

    def to_dict(self) -> dict:
        # float repr round-trips exactly (17 significant digits at most)
        return {"intercept": self.intercept, "beta": [float(v) for v in self.beta]}

    @classmethod
    def from_dict(cls, d: dict) -> Coefficients:
        return cls(d["intercept"], np.asarray(d["beta"], dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, Coefficients):
            return NotImplemented
        return self.intercept == other.intercept and np.array_equal(self.beta, other.beta)

    def __repr__(self):
        return f"Coefficients(intercept={self.intercept:.6g}, beta={np.array2string(self.beta, precision=4)})"


@dataclass(frozen=True)
class Metrics:
    acc: float
    auc: float

    def to_dict(self) -> dict:
        return {"acc": self.acc, "auc": self.auc}


def instance_prob(coef: Coefficients, x) -> float | np.ndarray:
    """Logistic instance probability; ``x`` may be one row or a matrix."""
    return expit(coef.linear_predictor(x))


def _log_q(coef: Coefficients, ds: BagDataset) -> np.ndarray:
    """Per-bag ``sum_j log(1 - p_ij)``."""
    eta = coef.linear_predictor(ds.X)
    return np.bincount(ds.bag_index, weights=log_expit(-eta), minlength=ds.n)


def _log1mexp(a: np.ndarray) -> np.ndarray:
    """``log(1 - exp(a))`` for ``a <= 0``, accurate at both ends."""
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    small = a > -np.log(2.0)
    with np.errstate(divide="ignore"):
        out[small] = np.log(-np.expm1(a[small]))
    out[~small] = np.log1p(-np.exp(a[~small]))
    return out


def bag_prob(coef: Coefficients, bag: Bag) -> float:
    """``1 - prod_j (1 - p_ij)`` computed through the log of the product."""
    log_q = np.sum(log_expit(-coef.linear_predictor(bag.features)))
    return float(-np.expm1(log_q))


def bag_probs(coef: Coefficients, ds: BagDataset) -> np.ndarray:
    return -np.expm1(_log_q(coef, ds))


def log_likelihood(coef: Coefficients, ds: BagDataset) -> float:
    """Bag-level Bernoulli log-likelihood under the noisy-or bag probability."""
    log_q = _log_q(coef, ds)
    z = ds.labels
    # log pi for positive bags, log(1 - pi) = log_q for negative bags
    ll_pos = _log1mexp(log_q[z == 1]).sum()
    ll_neg = log_q[z == 0].sum()
    return float(ll_pos + ll_neg)


def deviance(coef: Coefficients, ds: BagDataset) -> float:
    return -2.0 * log_likelihood(coef, ds)


def predict_bag(coef: Coefficients, bag: Bag, threshold: float = 0.5) -> int:
    """1 if the bag probability is at least ``threshold`` (non-strict)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return int(bag_prob(coef, bag) >= threshold)


def predict(coef: Coefficients, ds: BagDataset, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (bag_probs(coef, ds) >= threshold).astype(np.int64)


def auc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic.

    Ties between a positive and a negative score count one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need at least one positive and one negative label")
    ranks = rankdata(s)  # midranks resolve ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(predictions, labels) -> float:
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    if pred.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if pred.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(np.mean(pred == y))


def _softmax_mean(p: np.ndarray, alpha: float) -> float:
    a = alpha * p
    wts = np.exp(a - a.max())
    return float(wts @ p / wts.sum())


def softmax_bag_score(coef: Coefficients, bag: Bag, alpha: float) -> float:
    """Softmax-weighted mean of the bag's instance probabilities."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return _softmax_mean(instance_prob(coef, bag.features), alpha)


def softmax_scores(coef: Coefficients, ds: BagDataset, alpha: float) -> np.ndarray:
    """:func:`softmax_bag_score` for every bag, vectorised."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    p = expit(coef.linear_predictor(ds.X))
    a = alpha * p
    # per-bag max keeps exp() bounded; alpha * p lies in [0, alpha] anyway
    amax = np.maximum.reduceat(a, ds.offsets[:-1])
    wts = np.exp(a - amax[ds.bag_index])
    num = np.bincount(ds.bag_index, weights=wts * p, minlength=ds.n)
    den = np.bincount(ds.bag_index, weights=wts, minlength=ds.n)
    return num / den
