import itertools
import warnings

import numpy as np
import pytest
from scipy.special import expit

from milr import Bag, BagDataset, standardize


def make_dataset(rng, n=30, p=3, sizes=(1, 4), coef=None, intercept=-1.0):
    """Random bags with logistic latent labels; ``sizes`` is an inclusive range."""
    lo, hi = sizes
    m = rng.integers(lo, hi + 1, size=n)
    beta = rng.standard_normal(p) if coef is None else np.asarray(coef, dtype=float)
    bags = []
    for i in range(n):
        x = rng.standard_normal((m[i], p))
        y = rng.random(m[i]) < expit(intercept + x @ beta)
        bags.append(Bag(f"b{i}", int(y.any()), x, y))
    # keep both classes present
    if all(b.label == bags[0].label for b in bags):
        b = bags[0]
        bags[0] = Bag(b.id, 1 - b.label, b.features)
    return BagDataset(tuple(bags))


def std(ds):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return standardize(ds)[0]


def brute_force_posterior(p):
    """P(Y_j = 1 | at least one Y = 1) by summing over all label vectors."""
    p = np.asarray(p, dtype=float)
    m = len(p)
    num = np.zeros(m)
    total = 0.0
    for y in itertools.product((0, 1), repeat=m):
        if not any(y):
            continue
        y = np.array(y)
        pr = float(np.prod(np.where(y == 1, p, 1 - p)))
        total += pr
        num += pr * y
    return num / total


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    tot = 0.0
    for a in pos:
        for b in neg:
            tot += 1.0 if a > b else 0.5 if a == b else 0.0
    return tot / (len(pos) * len(neg))


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


@pytest.fixture
def small_ds(rng):
    return make_dataset(rng, n=40, p=4, sizes=(1, 5), coef=[1.5, -1.0, 0.0, 0.5])


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Print and keep one PASS/FAIL line per acceptance criterion."""

    def record(number: int, ok, detail: str) -> None:
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2}: {status}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
