"""Choosing the penalty: K-fold cross-validated deviance and BIC."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from ._parallel import pmap
from .dataset import BagDataset, FoldAssignment, StandardizationStats, standardize, stratified_kfold
from .em import FitConfig, FitResult, LambdaPath, fit_path, lambda_grid, lambda_max
from .model import deviance

logger = logging.getLogger(__name__)


@dataclass
class CVReport:
    lambdas: np.ndarray
    mean_deviance: np.ndarray
    se_deviance: np.ndarray
    fold_deviances: np.ndarray  # k x K, NaN marks a failed cell
    chosen_lambda: float
    folds: FoldAssignment | None = field(default=None, repr=False)

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.fold_deviances), axis=0)

    @property
    def chosen_index(self) -> int:
        return int(np.flatnonzero(self.lambdas == self.chosen_lambda)[0])

    @property
    def boundary_minimum(self) -> bool:
        """The chosen penalty is the smallest valid one on the grid."""
        ok = np.flatnonzero(self.valid)
        return bool(ok.size and self.chosen_index == ok[-1] and ok.size > 1)

    def one_se_band(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean_deviance - self.se_deviance, self.mean_deviance + self.se_deviance

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not math.isfinite(v) else float(v) for v in np.ravel(a)]

        return {
            "lambdas": self.lambdas.tolist(),
            "mean_deviance": clean(self.mean_deviance),
            "se_deviance": clean(self.se_deviance),
            "fold_deviances": [clean(row) for row in self.fold_deviances],
            "chosen_lambda": self.chosen_lambda,
            "boundary_minimum": self.boundary_minimum,
            "folds": None if self.folds is None else json.loads(self.folds.to_json()),
        }

    def to_csv(self) -> str:
        """``lambda,mean_deviance,se_deviance`` rows for plotting the CV curve."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "mean_deviance", "se_deviance"])
        for lam, m, s in zip(self.lambdas, self.mean_deviance, self.se_deviance):
            w.writerow([repr(float(lam)), repr(float(m)), repr(float(s))])
        return buf.getvalue()


@dataclass
class FoldFit:
    """One training fold: its standardization, path, and the held-out bags."""

    fold: int
    train_index: np.ndarray
    test_index: np.ndarray
    stats: StandardizationStats
    train: BagDataset
    test: BagDataset
    path: LambdaPath

    def held_out_deviance(self) -> np.ndarray:
        return np.array([
            float("nan") if f.error is not None else deviance(f.coef, self.test)
            for f in self.path.fits
        ])


def _standardize_quiet(ds: BagDataset):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return standardize(ds)


def _fit_fold(args) -> FoldFit:
    ds, folds, fold, grid, cfg = args
    train_idx, test_idx = folds.split(fold)
    train, stats = _standardize_quiet(ds.subset(train_idx))
    test = stats.apply(ds.subset(test_idx))
    return FoldFit(fold, train_idx, test_idx, stats, train, test, fit_path(train, grid, cfg))


def fold_fits(
    ds: BagDataset,
    folds: FoldAssignment,
    grid,
    cfg: FitConfig | None = None,
    jobs: int = 1,
) -> list[FoldFit]:
    """Fit the penalty path on every training fold.

    Each training fold is standardized on its own and the held-out fold is
    transformed with the training statistics. Folds run in parallel; the
    path within a fold is sequential because of warm starts.
    """
    cfg = cfg or FitConfig()
    grid = np.asarray(grid, dtype=np.float64)
    return pmap(_fit_fold, [(ds, folds, j, grid, cfg) for j in range(folds.k)], jobs)


def default_grid(ds: BagDataset, eps: float = 0.001, K: int = 20) -> np.ndarray:
    """Penalty grid from the ``lambda_max`` of the standardized full data."""
    sds, _ = _standardize_quiet(ds)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return lambda_grid(lambda_max(sds), eps, K)


def report_from_fold_fits(lambdas, fits: list[FoldFit], folds: FoldAssignment | None = None) -> CVReport:
    lambdas = np.asarray(lambdas, dtype=np.float64)
    dev = np.vstack([f.held_out_deviance() for f in fits])
    k = dev.shape[0]
    valid = np.all(np.isfinite(dev), axis=0)
    mean = np.full(len(lambdas), np.nan)
    se = np.full(len(lambdas), np.nan)
    mean[valid] = dev[:, valid].mean(axis=0)
    se[valid] = dev[:, valid].std(axis=0, ddof=1) / math.sqrt(k) if k > 1 else 0.0
    if not valid.all():
        warnings.warn(
            f"{int((~valid).sum())} penalties excluded: a fold fit failed", stacklevel=2
        )
    report = CVReport(lambdas, mean, se, dev, float("nan"), folds)
    report.chosen_lambda = select_lambda_cv(report)
    return report


def cross_validate(
    ds: BagDataset,
    grid=None,
    k: int = 10,
    seed: int = 0,
    cfg: FitConfig | None = None,
    *,
    eps: float = 0.001,
    K: int = 20,
    jobs: int = 1,
) -> CVReport:
    """K-fold cross-validated held-out deviance along a penalty grid.

    One stratified fold assignment is drawn from ``seed`` and shared by all
    penalties. The held-out deviance of a fold is summed over its bags.
    """
    if grid is None:
        grid = default_grid(ds, eps, K)
    folds = stratified_kfold(ds, k, seed)
    fits = fold_fits(ds, folds, grid, cfg, jobs)
    return report_from_fold_fits(grid, fits, folds)


def _argmin_largest(values: np.ndarray) -> int:
    # penalties are descending, so the first minimum is the largest penalty
    return int(np.nanargmin(values))


def select_lambda_cv(report: CVReport) -> float:
    """Penalty with the smallest mean held-out deviance; ties go to the larger one."""
    mean = np.where(report.valid, report.mean_deviance, np.nan)
    if not np.any(np.isfinite(mean)):
        raise ValueError("no penalty has a complete set of fold deviances")
    i = _argmin_largest(mean)
    ok = np.flatnonzero(np.isfinite(mean))
    if ok.size > 1 and i == ok[-1]:
        logger.info("boundary minimum: CV deviance still falling at the smallest penalty")
    return float(report.lambdas[i])


def bic(fit: FitResult, ds: BagDataset) -> float:
    """``deviance + df log(n)``, df counting the intercept and nonzero slopes, n in bags."""
    df = 1 + fit.n_nonzero
    return fit.deviance + df * math.log(ds.n)


def select_lambda_bic(path: LambdaPath, ds: BagDataset) -> float:
    scores = np.array([bic(f, ds) if f.error is None else np.nan for f in path.fits])
    if not np.any(np.isfinite(scores)):
        raise ValueError("every fit on the path failed")
    return float(path.lambdas[_argmin_largest(scores)])
