"""Comparison fitters: label-copying logistic regression and softmax-link MILR."""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.special import expit, log_expit

from .dataset import BagDataset
from .em import FitConfig, FitError, FitResult
from .model import Coefficients, deviance

logger = logging.getLogger(__name__)

SOFTMAX_ALPHAS = (0.0, 3.0)

# bag scores are kept this far from 0 and 1 inside the softmax likelihood
_SCORE_CLIP = 1e-12


def fit_naive(ds: BagDataset, cfg: FitConfig | None = None, max_iter: int = 100) -> FitResult:
    """Ordinary logistic regression with every instance given its bag's label.

    Newton-Raphson (IRLS) on the instance-level likelihood. Stops when the
    largest step is below ``cfg.tol``; on separated data the iteration cap
    is hit and ``converged`` stays False.
    """
    cfg = cfg or FitConfig()
    X1 = np.column_stack([np.ones(ds.N), ds.X])
    y = ds.instance_labels
    theta = np.zeros(ds.p + 1)
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X1 @ theta
        mu = expit(eta)
        trace.append(float(-np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta))))
        W = mu * (1.0 - mu)
        H = X1.T @ (X1 * W[:, None])
        g = X1.T @ (y - mu)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        theta = theta + step
        if not np.all(np.isfinite(theta)):
            raise FitError(f"non-finite IRLS iterate at step {it}")
        if np.max(np.abs(step)) < cfg.tol:
            converged = True
            break
    if not converged:
        logger.warning("IRLS hit %d iterations without converging (separation?)", max_iter)
    coef = Coefficients(theta[0], theta[1:])
    return FitResult(coef, 0.0, it, converged, deviance(coef, ds), trace)


def _softmax_parts(eta: np.ndarray, ds: BagDataset, alpha: float):
    p = expit(eta)
    a = alpha * p
    amax = np.maximum.reduceat(a, ds.offsets[:-1])
    e = np.exp(a - amax[ds.bag_index])
    den = np.bincount(ds.bag_index, weights=e, minlength=ds.n)
    s = e / den[ds.bag_index]  # softmax weight of each instance within its bag
    S = np.bincount(ds.bag_index, weights=s * p, minlength=ds.n)
    return p, s, S


def _softmax_value(eta, ds, alpha) -> float:
    _, _, S = _softmax_parts(eta, ds, alpha)
    Sc = np.clip(S, _SCORE_CLIP, 1.0 - _SCORE_CLIP)
    z = ds.labels
    return float(np.sum(z * np.log(Sc) + (1 - z) * np.log1p(-Sc)))


def _softmax_eta_grad(eta, ds, alpha):
    """Log-likelihood and its gradient with respect to each linear predictor."""
    p, s, S = _softmax_parts(eta, ds, alpha)
    z = ds.labels
    inside = (S > _SCORE_CLIP) & (S < 1.0 - _SCORE_CLIP)
    Sc = np.clip(S, _SCORE_CLIP, 1.0 - _SCORE_CLIP)
    value = float(np.sum(z * np.log(Sc) + (1 - z) * np.log1p(-Sc)))
    # dl/dS_i, zero where the clip is active
    dS = np.where(inside, z / Sc - (1 - z) / (1.0 - Sc), 0.0)
    # S_i = sum_j s_j p_j with s = softmax(alpha p), so
    # dS_i/dp_j = s_j (1 + alpha (p_j - S_i)); dp_j/deta_j = p_j (1 - p_j)
    d_eta = dS[ds.bag_index] * s * (1.0 + alpha * (p - S[ds.bag_index])) * p * (1.0 - p)
    return value, d_eta


def _to_coef_grad(d_eta, ds):
    return np.concatenate([[d_eta.sum()], ds.X.T @ d_eta])


def softmax_loglik(coef: Coefficients, ds: BagDataset, alpha: float) -> float:
    """Bag log-likelihood with the bag probability modelled by the softmax score."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return _softmax_value(coef.linear_predictor(ds.X), ds, alpha)


def softmax_loglik_grad(coef: Coefficients, ds: BagDataset, alpha: float) -> np.ndarray:
    """Analytic gradient of :func:`softmax_loglik` in (intercept, slopes) order."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    _, d_eta = _softmax_eta_grad(coef.linear_predictor(ds.X), ds, alpha)
    return _to_coef_grad(d_eta, ds)


def fit_softmax_milr(
    ds: BagDataset,
    alpha: float,
    cfg: FitConfig | None = None,
    max_iter: int = 1000,
) -> FitResult:
    """Maximize :func:`softmax_loglik` by gradient ascent with backtracking.

    Trial steps use the Barzilai-Borwein length and are halved until the
    Armijo condition holds, so accepted steps never lower the objective.
    Stops when the gradient max-norm drops below ``cfg.tol`` or after
    ``max_iter`` accepted steps. Unpenalized.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    cfg = cfg or FitConfig()
    X = ds.X
    theta = np.zeros(ds.p + 1)
    eta = np.zeros(ds.N)
    value, d_eta = _softmax_eta_grad(eta, ds, alpha)
    grad = _to_coef_grad(d_eta, ds)
    trace = [value]
    step = 1.0 / max(ds.N, 1)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(grad)))
        if not math.isfinite(gnorm):
            raise FitError(f"non-finite gradient at iteration {it}")
        if gnorm < cfg.tol:
            converged = True
            it -= 1
            break
        gg = float(grad @ grad)
        # the step direction in linear-predictor space, so trials cost O(N)
        d_dir = grad[0] + X @ grad[1:]
        t = step
        for _ in range(60):
            cval = _softmax_value(eta + t * d_dir, ds, alpha)
            if cval >= value + 1e-4 * t * gg:
                break
            t *= 0.5
        else:
            # no ascent along the gradient at machine precision
            converged = gnorm < 1e3 * cfg.tol
            break
        theta = theta + t * grad
        eta = eta + t * d_dir
        value, d_eta = _softmax_eta_grad(eta, ds, alpha)
        new_grad = _to_coef_grad(d_eta, ds)
        y_vec = new_grad - grad
        sy = t * float(grad @ y_vec)
        # BB step for ascent: s.s / -(s.y) when curvature is negative
        step = t * t * gg / -sy if sy < 0 else 2.0 * t
        grad = new_grad
        trace.append(value)
    coef = Coefficients(theta[0], theta[1:])
    return FitResult(coef, 0.0, it, converged, deviance(coef, ds), trace)
