import numpy as np
import pytest

from pseudoweight import CohortSample, CovariateMatrix, DesignInfo, SurveySample


def make_matrix(*cols, names=None):
    """Covariate matrix with an intercept prepended to the given columns."""
    cols = [np.asarray(c, dtype=np.float64) for c in cols]
    n = cols[0].size if cols else 1
    if names is None:
        names = [f"x{i + 1}" for i in range(len(cols))]
    return CovariateMatrix(np.column_stack([np.ones(n)] + cols),
                           ("(intercept)", *names))


def intercept_only(n):
    return CovariateMatrix(np.ones((n, 1)), ("(intercept)",))


def make_cohort(X, y=None, rng=None):
    if y is None and rng is not None:
        y = rng.normal(size=X.n)
    return CohortSample(X=X, y=y)


def make_survey(X, d, design=None):
    return SurveySample(X=X, d=np.asarray(d, dtype=np.float64),
                        design=design or DesignInfo("poisson"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
