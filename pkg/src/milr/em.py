"""EM fitting of multiple-instance logistic regression, with an L1 penalty.

Each EM iteration computes the posterior mean of every latent instance label
given its bag label (E-step), replaces the expected complete-data
log-likelihood by its second-order expansion around the current estimate,
and takes coordinate-descent sweeps with soft-thresholding on that weighted
least-squares surrogate (M-step). The intercept is never penalized.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from . import _kernels
from .dataset import Bag, BagDataset
from .model import Coefficients, _log1mexp, deviance

logger = logging.getLogger(__name__)


class FitError(RuntimeError):
    """The fit produced a non-finite objective or coefficients."""


@dataclass(frozen=True)
class FitConfig:
    """Iteration limits and numerical constants of :func:`fit_milr`.

    ``clip`` is the probability clip: fitted instance probabilities above
    ``1 - clip`` (below ``clip``) are set to 1 (0) and their weight to ``clip``.
    ``max_cd_sweeps`` coordinate sweeps are taken per M-step.
    """

    max_em_iter: int = 500
    tol: float = 1e-6
    clip: float = 1e-5
    max_cd_sweeps: int = 1

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.clip < 0.5:
            raise ValueError("clip must lie in (0, 0.5)")
        if self.max_em_iter < 1 or self.max_cd_sweeps < 1:
            raise ValueError("iteration limits must be at least 1")

    def to_dict(self) -> dict:
        return {
            "max_em_iter": self.max_em_iter,
            "tol": self.tol,
            "clip": self.clip,
            "max_cd_sweeps": self.max_cd_sweeps,
        }


@dataclass
class FitResult:
    coef: Coefficients
    lam: float
    iterations: int
    converged: bool
    deviance: float
    objective_trace: list[float] = field(default_factory=list)
    ascent_violations: int = 0
    error: str | None = None

    @property
    def n_nonzero(self) -> int:
        return int(np.count_nonzero(self.coef.beta))

    def to_dict(self) -> dict:
        return {
            "coef": self.coef.to_dict(),
            "lambda": self.lam,
            "iterations": self.iterations,
            "converged": self.converged,
            "deviance": self.deviance,
            "objective_trace": [float(v) for v in self.objective_trace],
            "ascent_violations": self.ascent_violations,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> FitResult:
        return cls(
            coef=Coefficients.from_dict(d["coef"]),
            lam=d["lambda"],
            iterations=d["iterations"],
            converged=d["converged"],
            deviance=d["deviance"],
            objective_trace=list(d.get("objective_trace", [])),
            ascent_violations=d.get("ascent_violations", 0),
            error=d.get("error"),
        )


@dataclass
class LambdaPath:
    """Fits along a descending penalty grid, each warm-started from the last."""

    lambdas: np.ndarray
    fits: list[FitResult]

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if len(self.lambdas) != len(self.fits):
            raise ValueError("one fit per lambda required")

    def coef_matrix(self) -> np.ndarray:
        """K x p array of slopes, for plotting coefficient paths."""
        return np.array([f.coef.beta for f in self.fits])

    def to_dict(self) -> dict:
        return {
            "lambdas": self.lambdas.tolist(),
            "fits": [f.to_dict() for f in self.fits],
            "warm_start": "each fit starts from the previous fit's coefficients",
        }

    @classmethod
    def from_dict(cls, d: dict) -> LambdaPath:
        return cls(np.asarray(d["lambdas"]), [FitResult.from_dict(f) for f in d["fits"]])


def _posterior_mean(eta: np.ndarray, ds: BagDataset) -> np.ndarray:
    """``E[Y_ij | Z_i = z_i]`` for every instance, given linear predictors."""
    log_q = np.bincount(ds.bag_index, weights=log_expit(-eta), minlength=ds.n)
    # log(1 - prod_l q_il); when every p underflows the bag total is exactly 0
    # and the ratio's limit is the normalized p's, handled through logsumexp
    log_pi = _log1mexp(log_q)
    pos = ds.labels == 1
    log_pi[~pos] = 0.0
    dead = pos & ~np.isfinite(log_pi)
    if dead.any():
        lp = log_expit(eta)
        for i in np.flatnonzero(dead):
            lo, hi = ds.offsets[i], ds.offsets[i + 1]
            log_pi[i] = logsumexp(lp[lo:hi])
    g = np.exp(log_expit(eta) - log_pi[ds.bag_index])
    np.minimum(g, 1.0, out=g)
    return g * ds.instance_labels


def gamma(coef: Coefficients, bag: Bag) -> np.ndarray:
    """Posterior mean of each latent instance label given the bag label.

    For a positive bag this is ``p_ij / (1 - prod_l (1 - p_il))``; a negative
    bag has all-negative instances, so the result is zero.
    """
    single = BagDataset((bag,))
    return _posterior_mean(coef.linear_predictor(bag.features), single)


def _working(eta: np.ndarray, ds: BagDataset, clip: float):
    """Clipped instance probabilities, weights and working residual ``u - eta``."""
    zg = _posterior_mean(eta, ds)
    p = expit(eta)
    hi = p > 1.0 - clip
    lo = p < clip
    p[hi] = 1.0
    p[lo] = 0.0
    w = p * (1.0 - p)
    w[hi | lo] = clip
    return p, w, (zg - p) / w


def working_quantities(coef: Coefficients, ds: BagDataset, cfg: FitConfig | None = None):
    """Working response ``u`` and weight ``w`` of the quadratic surrogate at ``coef``.

    ``w = p q`` and ``u = eta + (z gamma - p) / (p q)``, after the clipping
    rule of :class:`FitConfig` has been applied to ``p`` and ``w``.
    """
    cfg = cfg or FitConfig()
    eta = coef.linear_predictor(ds.X)
    _, w, r = _working(eta, ds, cfg.clip)
    return eta + r, w


def soft_threshold_update(S_k: float, lam: float, denom: float) -> float:
    """Coordinate minimizer of ``denom/2 b^2 - S_k b + lam |b|``."""
    if not denom > 0:
        raise ValueError(f"non-positive curvature {denom!r}: degenerate column")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return float(_kernels.soft_threshold(float(S_k), float(lam), float(denom)))


def q_function(coef: Coefficients, coef_t: Coefficients, ds: BagDataset) -> float:
    """Expected complete-data log-likelihood at ``coef`` with posteriors from ``coef_t``."""
    zg = _posterior_mean(coef_t.linear_predictor(ds.X), ds)
    eta = coef.linear_predictor(ds.X)
    return float(np.sum(zg * eta + log_expit(-eta)))


def q_gradient(coef: Coefficients, coef_t: Coefficients, ds: BagDataset) -> np.ndarray:
    """Gradient of :func:`q_function` in (intercept, slopes) order."""
    zg = _posterior_mean(coef_t.linear_predictor(ds.X), ds)
    resid = zg - expit(coef.linear_predictor(ds.X))
    return np.concatenate([[resid.sum()], ds.X.T @ resid])


def _objective(eta: np.ndarray, ds: BagDataset, beta: np.ndarray, lam: float) -> float:
    log_q = np.bincount(ds.bag_index, weights=log_expit(-eta), minlength=ds.n)
    z = ds.labels
    ll = _log1mexp(log_q[z == 1]).sum() + log_q[z == 0].sum()
    return float(-ll + lam * np.abs(beta).sum())


def default_init(ds: BagDataset, cfg: FitConfig) -> Coefficients:
    """Zero slopes; intercept at the logit of the positive-bag fraction."""
    pbar = min(max(float(ds.labels.mean()), cfg.clip), 1.0 - cfg.clip)
    return Coefficients.zeros(ds.p, math.log(pbar / (1.0 - pbar)))


def fit_milr(
    ds: BagDataset,
    lam: float = 0.0,
    cfg: FitConfig | None = None,
    init: Coefficients | None = None,
) -> FitResult:
    """Fit the multiple-instance logistic model, optionally L1-penalized.

    Parameters
    ----------
    ds : BagDataset
        Training bags, normally standardized with :func:`standardize`.
    lam : float
        Penalty weight on ``sum_k |beta_k|``; the objective minimized is
        ``-loglik + lam * ||beta||_1`` with ``loglik`` on the bag scale.
    cfg : FitConfig, optional
    init : Coefficients, optional
        Starting point; defaults to :func:`default_init`.

    Returns
    -------
    FitResult
        ``converged`` is set when a full coordinate sweep changed no
        coefficient by more than ``cfg.tol``.

    Notes
    -----
    After a full sweep, later sweeps visit only the nonzero slopes until
    they settle, then a full sweep checks the rest. Convergence is only ever
    declared on a full sweep, so the fixed points are those of plain
    cyclic coordinate descent.
    """
    cfg = cfg or FitConfig()
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if not ds.standardized:
        warnings.warn("fitting unstandardized features", stacklevel=2)
    start = init if init is not None else default_init(ds, cfg)
    if start.p != ds.p:
        raise ValueError(f"init has {start.p} slopes, data has {ds.p} features")

    X = ds.X
    all_coords = np.arange(ds.p, dtype=np.int64)
    beta0 = start.intercept
    beta = start.beta.copy()
    eta = beta0 + X @ beta
    trace = [_objective(eta, ds, beta, lam)]
    if not math.isfinite(trace[0]):
        raise FitError(f"non-finite objective {trace[0]} at the starting point")

    full = True
    converged = False
    violations = 0
    it = 0
    while it < cfg.max_em_iter:
        it += 1
        _, w, r = _working(eta, ds, cfg.clip)
        coords = all_coords if full else np.flatnonzero(beta)
        old0, old = beta0, beta.copy()
        for _ in range(cfg.max_cd_sweeps):
            beta0, change = _kernels.cd_sweep(X, w, r, beta0, beta, lam, coords)
            if change < cfg.tol:
                break
        change = max(abs(beta0 - old0), float(np.max(np.abs(beta - old), initial=0.0)))
        if not (math.isfinite(beta0) and np.all(np.isfinite(beta))):
            raise FitError(f"non-finite coefficients at EM iteration {it}")
        nz = np.flatnonzero(beta)
        eta = beta0 + X[:, nz] @ beta[nz]
        obj = _objective(eta, ds, beta, lam)
        if not math.isfinite(obj):
            raise FitError(f"non-finite objective {obj} at EM iteration {it}")
        if obj > trace[-1] + 1e-9 * max(1.0, abs(trace[-1])):
            violations += 1
            logger.debug("objective rose at iteration %d: %.12g -> %.12g", it, trace[-1], obj)
        trace.append(obj)
        if full:
            if change < cfg.tol:
                converged = True
                break
            full = False
        elif change < cfg.tol:
            full = True

    coef = Coefficients(beta0, beta)
    return FitResult(
        coef=coef,
        lam=float(lam),
        iterations=it,
        converged=converged,
        deviance=deviance(coef, ds),
        objective_trace=trace,
        ascent_violations=violations,
    )


def lambda_max(ds: BagDataset) -> float:
    """Smallest penalty that keeps every slope at zero from a zero-slope start.

    ``sqrt(sum_i (m_i - 1)) * sqrt(sum_i m_i^(1 - 2 z_i))``, valid for
    columns standardized to sum of squares ``N - n``. When every bag is a
    singleton that expression is zero; the ordinary logistic-lasso bound
    ``max_k |sum x_k (z - mean z)|`` is returned instead.
    """
    if not ds.standardized:
        warnings.warn("lambda_max assumes standardized features", stacklevel=2)
    m = ds.sizes.astype(np.float64)
    z = ds.labels
    first = float(np.sum(m - 1.0))
    if first == 0.0:
        warnings.warn("all bags have one instance; using the logistic-lasso bound", stacklevel=2)
        zc = ds.instance_labels - ds.instance_labels.mean()
        return float(np.max(np.abs(ds.X.T @ zc)))
    return math.sqrt(first) * math.sqrt(float(np.sum(m ** (1.0 - 2.0 * z))))


def lambda_grid(lam_max: float, eps: float = 0.001, K: int = 20) -> np.ndarray:
    """``K`` log-spaced penalties from ``lam_max`` down to ``eps * lam_max``."""
    if not lam_max > 0:
        raise ValueError("lambda_max must be positive")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if K < 2:
        raise ValueError("grid needs at least two values")
    grid = np.geomspace(lam_max, eps * lam_max, K)
    grid[0] = lam_max
    grid[-1] = eps * lam_max
    return grid


def fit_path(
    ds: BagDataset,
    grid,
    cfg: FitConfig | None = None,
    init: Coefficients | None = None,
) -> LambdaPath:
    """Fit every penalty in ``grid`` (descending), warm-starting each from the last.

    A failed fit is recorded with ``error`` set and the warm-start chain
    continues from the last successful solution.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a non-empty 1-D sequence")
    if np.any(np.diff(grid) >= 0):
        raise ValueError("grid must be strictly descending")
    cfg = cfg or FitConfig()
    current = init if init is not None else default_init(ds, cfg)
    fits = []
    for lam in grid:
        try:
            res = fit_milr(ds, lam, cfg, init=current)
        except FitError as exc:
            logger.warning("fit failed at lambda=%g: %s", lam, exc)
            res = FitResult(current, float(lam), 0, False, float("nan"), error=str(exc))
        else:
            current = res.coef
        fits.append(res)
    return LambdaPath(grid, fits)


@dataclass(frozen=True)
class KKTReport:
    max_violation: float
    scores: np.ndarray
    curvature: np.ndarray

    def ok(self, tol: float) -> bool:
        return self.max_violation <= tol


def kkt_check(coef: Coefficients, ds: BagDataset, lam: float, cfg: FitConfig | None = None) -> KKTReport:
    """Subgradient optimality of ``coef`` for the surrogate built at ``coef``.

    With ``S_k`` the partial score and ``d_k = sum w x_k^2``: zero slopes
    need ``|S_k| <= lam`` and nonzero slopes need
    ``S_k - lam sign(b_k) - b_k d_k = 0``. The intercept must zero the
    weighted working residual. Returns the worst violation.
    """
    cfg = cfg or FitConfig()
    eta = coef.linear_predictor(ds.X)
    _, w, r = _working(eta, ds, cfg.clip)
    b = np.array(coef.beta)
    S, d = _kernels.coordinate_scores(ds.X, w, r, b)
    viol = np.where(
        b == 0.0,
        np.maximum(np.abs(S) - lam, 0.0),
        np.abs(S - lam * np.sign(b) - b * d),
    )
    worst = max(float(np.max(viol, initial=0.0)), abs(float(w @ r)))
    return KKTReport(worst, S, d)
