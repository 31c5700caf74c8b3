"""Synthetic bag data and the replication experiments built on it.

Seeds: replicate ``r`` of an experiment run with seed ``s`` draws from
``numpy.random.SeedSequence([s, r, attempt])``; ``attempt`` increases only
when a draw has every bag labelled alike and is regenerated. Fold splits
inside replicate ``r`` use ``SeedSequence([s, r, FOLD_STREAM])``. Results
therefore do not depend on how replicates are spread over processes.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from ._parallel import pmap
from .baselines import fit_naive, fit_softmax_milr
from .dataset import Bag, BagDataset, standardize, stratified_kfold
from .em import FitConfig, fit_milr, fit_path, lambda_grid, lambda_max
from .model import Coefficients, accuracy, auc, bag_probs
from .selection import fold_fits, report_from_fold_fits, select_lambda_bic

logger = logging.getLogger(__name__)

FOLD_STREAM = 7_919
MAX_ATTEMPTS = 1000

# Sparse surrogate for the coefficients of schemes D-F: 9 of 166 slopes
# (about 5%) drawn once with numpy.random.default_rng(166), positions via
# choice(166, 9, replace=False) and values from {-2,-1,-0.5,0.5,1,2}.
SURROGATE_POSITIONS = (8, 27, 38, 52, 65, 68, 113, 114, 146)
SURROGATE_VALUES = (-0.5, -2.0, 2.0, 2.0, -0.5, -0.5, 2.0, -0.5, -0.5)
# intercepts put the positive-bag rate near MUSK1's 0.51 (m ~ 5) and
# MUSK2's 0.38 (m ~ 65); Monte Carlo gives 0.51 and 0.40
SURROGATE_INTERCEPT_MUSK1 = -5.0
SURROGATE_INTERCEPT_MUSK2 = -11.0


def surrogate_beta(p: int = 166) -> np.ndarray:
    beta = np.zeros(p)
    beta[list(SURROGATE_POSITIONS)] = SURROGATE_VALUES
    return beta


@dataclass(frozen=True)
class SimScheme:
    """One data-generating design.

    ``bag_size`` is ``("fixed", m)`` or ``("poisson_plus_one", rate)``.
    ``coef`` is ``("explicit", intercept, slopes)`` or
    ``("sparse_random", intercept, values)``; the latter places ``values``
    at random slope positions, fresh for every replicate.
    """

    name: str
    n: int
    p: int
    bag_size: tuple
    coef: tuple
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")
        kind, val = self.bag_size
        if kind not in ("fixed", "poisson_plus_one"):
            raise ValueError(f"unknown bag size rule {kind!r}")
        if kind == "fixed" and val < 1:
            raise ValueError("fixed bag size must be at least 1")
        if self.coef[0] not in ("explicit", "sparse_random"):
            raise ValueError(f"unknown coefficient rule {self.coef[0]!r}")
        if len(self.coef[2]) > self.p:
            raise ValueError("more coefficients than predictors")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "p": self.p,
            "bag_size": list(self.bag_size),
            "coef": [self.coef[0], self.coef[1], [float(v) for v in self.coef[2]]],
            "seed": self.seed,
        }


SCHEMES = {
    "TABLE1": SimScheme("TABLE1", 100, 3, ("fixed", 3), ("explicit", -2.0, (1.0, -1.0, 0.0))),
    "A": SimScheme("A", 100, 100, ("fixed", 3), ("sparse_random", -2.0, (-2.0, -1.0, 1.0, 2.0, 0.5))),
    "D": SimScheme("D", 100, 166, ("fixed", 5),
                   ("explicit", SURROGATE_INTERCEPT_MUSK1, tuple(surrogate_beta()))),
    "E": SimScheme("E", 100, 166, ("poisson_plus_one", 4.0),
                   ("explicit", SURROGATE_INTERCEPT_MUSK1, tuple(surrogate_beta()))),
    "F": SimScheme("F", 100, 166, ("poisson_plus_one", 64.0),
                   ("explicit", SURROGATE_INTERCEPT_MUSK2, tuple(surrogate_beta()))),
}


def get_scheme(name: str, seed: int = 0) -> SimScheme:
    try:
        base = SCHEMES[name.upper()]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}") from None
    return replace(base, seed=seed)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _draw(scheme: SimScheme, rng: np.random.Generator):
    kind, val = scheme.bag_size
    if kind == "fixed":
        sizes = np.full(scheme.n, int(val))
    else:
        sizes = rng.poisson(val, size=scheme.n) + 1
    rule, intercept, values = scheme.coef
    beta = np.zeros(scheme.p)
    if rule == "explicit":
        beta[: len(values)] = values
    else:
        beta[rng.choice(scheme.p, size=len(values), replace=False)] = values
    coef = Coefficients(intercept, beta)
    X = rng.standard_normal((int(sizes.sum()), scheme.p))
    y = rng.random(X.shape[0]) < expit(coef.linear_predictor(X))
    off = np.concatenate([[0], np.cumsum(sizes)])
    bags = tuple(
        Bag(f"b{i}", int(y[off[i]:off[i + 1]].any()), X[off[i]:off[i + 1]], y[off[i]:off[i + 1]])
        for i in range(scheme.n)
    )
    return BagDataset(bags), coef


def gen_replicate(scheme: SimScheme, replicate: int) -> tuple[BagDataset, Coefficients, int]:
    """Like :func:`gen_dataset`, also returning how many draws were discarded."""
    for attempt in range(MAX_ATTEMPTS):
        ds, coef = _draw(scheme, _rng(scheme.seed, replicate, attempt))
        if 0 < ds.labels.sum() < ds.n:
            if attempt:
                logger.info("replicate %d regenerated %d time(s)", replicate, attempt)
            return ds, coef, attempt
    raise RuntimeError(f"scheme {scheme.name}: {MAX_ATTEMPTS} draws all had one bag label")


def gen_dataset(scheme: SimScheme, replicate_seed: int) -> tuple[BagDataset, Coefficients]:
    """Draw replicate ``replicate_seed`` of ``scheme``: data and true coefficients.

    Covariates are iid standard normal, latent instance labels are Bernoulli
    with logistic probability, and a bag is positive iff any instance is.
    """
    ds, coef, _ = gen_replicate(scheme, replicate_seed)
    return ds, coef


def _fold_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence([seed, replicate, FOLD_STREAM]).generate_state(1)[0])


def _quiet(fn, *args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kw)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# estimation: naive vs EM on the three-covariate design


@dataclass
class EstimationResult:
    truth: np.ndarray
    estimates: dict[str, np.ndarray]  # method -> B x (p + 1), NaN rows excluded
    n_failed: dict[str, int]
    regenerations: int = 0

    def summary(self, method: str) -> dict[str, np.ndarray]:
        est = self.estimates[method]
        ok = est[np.all(np.isfinite(est), axis=1)]
        sd = ok.std(axis=0, ddof=1) if len(ok) > 1 else np.full(est.shape[1], np.nan)
        return {"mean": ok.mean(axis=0), "sd": sd, "se": sd / math.sqrt(max(len(ok), 1)), "n": len(ok)}

    def to_csv(self) -> str:
        names = ["beta0"] + [f"beta{k}" for k in range(1, len(self.truth))]
        rows = []
        for method in self.estimates:
            s = self.summary(method)
            for k, name in enumerate(names):
                rows.append([method, name, float(self.truth[k]), float(s["mean"][k]),
                             float(s["se"][k]), float(s["sd"][k]), s["n"], self.n_failed[method]])
        return _csv(["method", "coefficient", "truth", "mean", "se_of_mean", "sd", "n_used", "n_failed"], rows)


def _estimation_replicate(args):
    scheme, r, cfg = args
    ds, coef, regen = gen_replicate(scheme, r)
    sds, stats = _quiet(standardize, ds)
    out = {}
    fit = fit_milr(sds, 0.0, cfg)
    if fit.converged:
        b0, b = stats.to_raw_scale(fit.coef.intercept, fit.coef.beta)
        out["MILR"] = np.concatenate([[b0], b])
    else:
        out["MILR"] = None
    nv = _quiet(fit_naive, ds, cfg)
    out["Naive"] = np.concatenate([[nv.coef.intercept], nv.coef.beta]) if nv.converged else None
    return np.concatenate([[coef.intercept], coef.beta]), out, regen


def run_estimation_experiment(
    B: int = 100,
    seed: int = 0,
    cfg: FitConfig | None = None,
    jobs: int = 1,
    scheme: SimScheme | None = None,
) -> EstimationResult:
    """Naive and unpenalized EM estimates over ``B`` replicates of the three-covariate design.

    EM fits are done on standardized columns and mapped back to raw units.
    Non-converged replicates are dropped and counted.
    """
    if B < 2:
        raise ValueError("need at least two replicates")
    scheme = scheme or get_scheme("TABLE1", seed)
    cfg = cfg or FitConfig()
    res = pmap(_estimation_replicate, [(scheme, r, cfg) for r in range(B)], jobs)
    truth = res[0][0]
    width = len(truth)
    est, failed = {}, {}
    for method in ("Naive", "MILR"):
        rows = [o[method] if o[method] is not None else np.full(width, np.nan) for _, o, _ in res]
        est[method] = np.vstack(rows)
        failed[method] = sum(o[method] is None for _, o, _ in res)
    return EstimationResult(truth, est, failed, sum(g for *_, g in res))


# ---------------------------------------------------------------------------
# variable selection on scheme A


@dataclass(frozen=True)
class SelectionRates:
    tp: float
    fp: float
    tn: float
    fn: float


@dataclass
class SelectionResult:
    rates: SelectionRates
    per_replicate: list[dict] = field(default_factory=list)
    regenerations: int = 0

    def to_csv(self) -> str:
        r = self.rates
        return _csv(["model", "true_positive", "false_positive", "true_negative", "false_negative"],
                    [["A", r.tp, r.fp, r.tn, r.fn]])

    def replicates_csv(self) -> str:
        keys = ["replicate", "lambda", "lambda_max", "tp", "fp", "tn", "fn", "n_selected"]
        return _csv(keys, [[d[k] for k in keys] for d in self.per_replicate])


def selection_rates(selected: np.ndarray, active: np.ndarray) -> SelectionRates:
    """Rates of (selected & active), (selected & inactive) etc. within each group."""
    selected = np.asarray(selected, dtype=bool)
    active = np.asarray(active, dtype=bool)
    tp = float(np.mean(selected[active])) if active.any() else float("nan")
    fp = float(np.mean(selected[~active])) if (~active).any() else float("nan")
    return SelectionRates(tp, fp, 1.0 - fp, 1.0 - tp)


def _selection_replicate(args):
    scheme, r, selector, k, K, eps, ratio, cfg = args
    ds, coef, regen = gen_replicate(scheme, r)
    sds, _ = _quiet(standardize, ds)
    lmax = lambda_max(sds)
    if ratio is not None:
        lam = ratio * lmax
        fit = fit_milr(sds, lam, cfg)
    else:
        grid = lambda_grid(lmax, eps, K)
        path = fit_path(sds, grid, cfg)
        if selector == "bic":
            lam = select_lambda_bic(path, sds)
        else:
            folds = stratified_kfold(ds, k, _fold_seed(scheme.seed, r))
            report = _quiet(report_from_fold_fits, grid, fold_fits(ds, folds, grid, cfg), folds)
            lam = report.chosen_lambda
        fit = path.fits[int(np.flatnonzero(grid == lam)[0])]
    rates = selection_rates(fit.coef.beta != 0, coef.beta != 0)
    return {
        "replicate": r, "lambda": float(lam), "lambda_max": float(lmax),
        "tp": rates.tp, "fp": rates.fp, "tn": rates.tn, "fn": rates.fn,
        "n_selected": int(np.count_nonzero(fit.coef.beta)), "regenerations": regen,
    }


def run_selection_experiment(
    B: int = 50,
    seed: int = 0,
    selector: str = "cv",
    *,
    k: int = 10,
    K: int = 20,
    eps: float = 0.001,
    fixed_lambda_ratio: float | None = None,
    cfg: FitConfig | None = None,
    jobs: int = 1,
    scheme: SimScheme | None = None,
) -> SelectionResult:
    """Variable-selection rates of the penalized EM fit on scheme A.

    A slope counts as selected iff its estimate is nonzero at the chosen
    penalty. ``fixed_lambda_ratio`` skips selection and fits at that
    fraction of ``lambda_max``.
    """
    if B < 1:
        raise ValueError("need at least one replicate")
    if selector not in ("cv", "bic"):
        raise ValueError("selector must be 'cv' or 'bic'")
    scheme = scheme or get_scheme("A", seed)
    cfg = cfg or FitConfig()
    args = [(scheme, r, selector, k, K, eps, fixed_lambda_ratio, cfg) for r in range(B)]
    rows = pmap(_selection_replicate, args, jobs)
    mean = {key: float(np.mean([d[key] for d in rows])) for key in ("tp", "fp", "tn", "fn")}
    return SelectionResult(SelectionRates(**mean), rows, sum(d["regenerations"] for d in rows))


# ---------------------------------------------------------------------------
# prediction comparison on schemes D-F

METHODS = ("MILR-LASSO(BIC)", "MILR-LASSO(10-fold CV)", "MILR-s(3)", "MILR-s(0)")


@dataclass
class ComparisonResult:
    scheme: str
    acc: dict[str, np.ndarray]
    auc: dict[str, np.ndarray]
    failures: dict[str, int]
    regenerations: int = 0

    def summary(self) -> list[tuple[str, float, float, float, float]]:
        out = []
        for m in self.acc:
            a, u = self.acc[m], self.auc[m]
            a, u = a[np.isfinite(a)], u[np.isfinite(u)]

            def se(v):
                return float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else float("nan")

            out.append((m, float(a.mean()), se(a), float(u.mean()), se(u)))
        return out

    def to_csv(self) -> str:
        return _csv(
            ["scheme", "method", "acc", "acc_se", "auc", "auc_se", "n_failed"],
            [[self.scheme, m, a, sa, u, su, self.failures[m]] for m, a, sa, u, su in self.summary()],
        )


def _comparison_replicate(args):
    scheme, r, k, K, eps, cfg, nested = args
    ds, _, regen = gen_replicate(scheme, r)
    z = ds.labels
    folds = stratified_kfold(ds, k, _fold_seed(scheme.seed, r))
    grid = _quiet(lambda: lambda_grid(lambda_max(standardize(ds)[0]), eps, K))
    fits = fold_fits(ds, folds, grid, cfg)
    scores = {m: np.full(ds.n, np.nan) for m in METHODS}

    if nested:
        cv_lams = []
        for ff in fits:
            inner_train = ds.subset(ff.train_index)
            inner_folds = stratified_kfold(inner_train, k, _fold_seed(scheme.seed, r) + 1 + ff.fold)
            inner = fold_fits(inner_train, inner_folds, grid, cfg)
            cv_lams.append(_quiet(report_from_fold_fits, grid, inner, inner_folds).chosen_lambda)
    else:
        lam_cv = _quiet(report_from_fold_fits, grid, fits, folds).chosen_lambda
        cv_lams = [lam_cv] * len(fits)

    for ff, lam_cv in zip(fits, cv_lams):
        lam_bic = select_lambda_bic(ff.path, ff.train)
        for method, lam in (("MILR-LASSO(BIC)", lam_bic), ("MILR-LASSO(10-fold CV)", lam_cv)):
            fit = ff.path.fits[int(np.flatnonzero(grid == lam)[0])]
            scores[method][ff.test_index] = bag_probs(fit.coef, ff.test)
        for alpha, method in ((3.0, "MILR-s(3)"), (0.0, "MILR-s(0)")):
            try:
                sm = fit_softmax_milr(ff.train, alpha, cfg)
            except Exception as exc:  # recorded, the replicate continues
                logger.warning("softmax fit failed (alpha=%g): %s", alpha, exc)
                continue
            scores[method][ff.test_index] = bag_probs(sm.coef, ff.test)

    accs, aucs = {}, {}
    for m, s in scores.items():
        if np.all(np.isfinite(s)):
            accs[m] = accuracy((s >= 0.5).astype(int), z)
            aucs[m] = auc(s, z)
        else:
            accs[m] = aucs[m] = float("nan")
    return accs, aucs, regen


def run_comparison_experiment(
    scheme: str | SimScheme,
    B: int = 20,
    seed: int = 0,
    *,
    k: int = 10,
    K: int = 20,
    eps: float = 0.001,
    nested_cv: bool = False,
    cfg: FitConfig | None = None,
    jobs: int = 1,
) -> ComparisonResult:
    """Cross-validated ACC and AUC of the penalized EM fit against softmax-link fits.

    Each replicate is split into ``k`` stratified folds; every method is
    trained on k-1 folds and scores the held-out bags. The penalized fit
    picks its penalty by BIC on the training folds, or by the held-out
    deviance of the outer folds (``nested_cv=True`` runs an inner k-fold CV
    on each training set instead, at about k times the cost). Each
    fitted coefficient vector, whatever link produced it, scores a bag by
    ``1 - prod_j (1 - p_ij)``, and the bag is called positive when that is
    at least 0.5. ACC and AUC use the pooled held-out scores of a replicate.
    """
    if isinstance(scheme, str):
        scheme = get_scheme(scheme, seed)
    if scheme.name not in ("D", "E", "F"):
        logger.info("comparison run on non-standard scheme %s", scheme.name)
    cfg = cfg or FitConfig()
    res = pmap(_comparison_replicate, [(scheme, r, k, K, eps, cfg, nested_cv) for r in range(B)], jobs)
    acc = {m: np.array([a[m] for a, _, _ in res]) for m in METHODS}
    au = {m: np.array([u[m] for _, u, _ in res]) for m in METHODS}
    failures = {m: int(np.sum(~np.isfinite(acc[m]))) for m in METHODS}
    return ComparisonResult(scheme.name, acc, au, failures, sum(g for *_, g in res))
