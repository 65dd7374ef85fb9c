"""Shared sample, fit, and result types.

All containers are frozen dataclasses holding read-only numpy arrays, so they
can be shared freely across parallel workers (jackknife replicates, Monte
Carlo replicates) without copying.

CSV schema: a header row is required.  The reserved column names are
``__weight`` (survey base weight), ``__stratum``, ``__psu`` and ``__outcome``;
every other column is treated as a covariate.  An intercept column of ones is
prepended automatically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

RESERVED_COLUMNS = ("__weight", "__stratum", "__psu", "__outcome")

DESIGN_KINDS = ("poisson", "stratified-wr-psu", "srs")

METHODS = ("IPSW", "IPSW.S", "KW", "KW.W", "KW.S")


class DataError(ValueError):
    """Raised when an input container violates its invariants."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class CovariateMatrix:
    """Design matrix with an explicit all-ones intercept in column 0."""

    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise DataError("covariate matrix must be 2-dimensional")
        n, k = vals.shape
        if n < 1 or k < 1:
            raise DataError("covariate matrix must have at least one row and column")
        if len(self.names) != k:
            raise DataError(f"{len(self.names)} names for {k} columns")
        bad = np.argwhere(~np.isfinite(vals))
        if bad.size:
            r, c = bad[0]
            raise DataError(f"non-finite value at row {r}, column {self.names[c]!r}")
        if not np.all(vals[:, 0] == 1.0):
            raise DataError("column 0 must be the all-ones intercept")
        object.__setattr__(self, "values", _freeze(vals))
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @staticmethod
    def from_columns(columns: dict[str, np.ndarray]) -> "CovariateMatrix":
        """Build a matrix from named columns, prepending the intercept."""
        names = ["(intercept)"] + list(columns)
        cols = [np.ones(len(next(iter(columns.values()))))]
        cols += [np.asarray(v, dtype=np.float64) for v in columns.values()]
        return CovariateMatrix(np.column_stack(cols), tuple(names))


@dataclass(frozen=True)
class DesignInfo:
    """Survey design identifiers used by the design-variance estimators."""

    kind: str
    stratum: Optional[np.ndarray] = None
    psu: Optional[np.ndarray] = None
    srs_fpc: float = 0.0

    def __post_init__(self):
        if self.kind not in DESIGN_KINDS:
            raise DataError(f"unknown design kind {self.kind!r}; expected one of {DESIGN_KINDS}")
        if self.kind == "stratified-wr-psu":
            if self.stratum is None or self.psu is None:
                raise DataError("stratified-wr-psu design requires stratum and psu ids")
            stratum = _freeze(np.asarray(self.stratum, dtype=np.int64))
            psu = _freeze(np.asarray(self.psu, dtype=np.int64))
            if stratum.shape != psu.shape:
                raise DataError("stratum and psu id vectors must have equal length")
            # each PSU id must live in exactly one stratum
            owners: dict[int, int] = {}
            for s, p in zip(stratum, psu):
                if owners.setdefault(int(p), int(s)) != int(s):
                    raise DataError(f"psu {int(p)} appears in more than one stratum")
            for s in np.unique(stratum):
                if np.unique(psu[stratum == s]).size < 2:
                    raise DataError(
                        f"stratum {int(s)} has a single PSU; collapse strata before variance estimation"
                    )
            object.__setattr__(self, "stratum", stratum)
            object.__setattr__(self, "psu", psu)


@dataclass(frozen=True)
class CohortSample:
    """Nonprobability cohort: covariates, optional outcomes, no design weights.

    The cohort's implicit weights are the estimand, so there is deliberately
    no weight field here.
    """

    X: CovariateMatrix
    y: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.y is not None:
            y = np.asarray(self.y, dtype=np.float64)
            if y.shape != (self.X.n,):
                raise DataError(f"outcome length {y.shape[0]} != {self.X.n} cohort rows")
            if not np.all(np.isfinite(y)):
                raise DataError("non-finite outcome value")
            object.__setattr__(self, "y", _freeze(y))
        ids = np.arange(self.X.n) if self.ids is None else np.asarray(self.ids)
        if ids.shape != (self.X.n,):
            raise DataError("ids length must match the covariate rows")
        object.__setattr__(self, "ids", _freeze(ids))

    @property
    def n(self) -> int:
        return self.X.n


@dataclass(frozen=True)
class SurveySample:
    """Reference probability sample with base weights and design identifiers."""

    X: CovariateMatrix
    d: np.ndarray
    design: DesignInfo = field(default_factory=lambda: DesignInfo("srs"))
    y: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if d.shape != (self.X.n,):
            raise DataError(f"weight length {d.shape[0]} != {self.X.n} survey rows")
        bad = np.argwhere(~(np.isfinite(d) & (d > 0)))
        if bad.size:
            raise DataError(f"nonpositive weight at row {int(bad[0][0])}")
        if self.design.stratum is not None and self.design.stratum.shape != (self.X.n,):
            raise DataError("design id vectors must match the survey rows")
        object.__setattr__(self, "d", _freeze(d))
        if self.y is not None:
            y = np.asarray(self.y, dtype=np.float64)
            if y.shape != (self.X.n,):
                raise DataError("survey outcome length mismatch")
            object.__setattr__(self, "y", _freeze(y))
        ids = np.arange(self.X.n) if self.ids is None else np.asarray(self.ids)
        object.__setattr__(self, "ids", _freeze(ids))

    @property
    def n(self) -> int:
        return self.X.n


@dataclass(frozen=True)
class PropensityFit:
    """Result of a logistic propensity fit on the combined cohort/survey sample."""

    beta: np.ndarray
    scale_a: float
    weighted: bool
    p_cohort: np.ndarray
    p_survey: np.ndarray
    q_cohort: np.ndarray
    q_survey: np.ndarray
    converged: bool
    iterations: int
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("beta", "p_cohort", "p_survey", "q_cohort", "q_survey"):
            object.__setattr__(self, name, _freeze(np.asarray(getattr(self, name), dtype=np.float64)))


@dataclass(frozen=True)
class PseudoWeightSet:
    """Pseudo-weights for the cohort, with kernel metadata and the weight Jacobian."""

    method: str
    w: np.ndarray
    kernel: Optional[str] = None
    bandwidth: Optional[float] = None
    jac: Optional[np.ndarray] = None
    n_fallback: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise DataError(f"unknown method {self.method!r}; expected one of {METHODS}")
        w = np.asarray(self.w, dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise DataError("non-finite pseudo-weight")
        if np.any(w < 0):
            raise DataError("negative pseudo-weight")
        object.__setattr__(self, "w", _freeze(w))
        if self.jac is not None:
            object.__setattr__(self, "jac", _freeze(np.asarray(self.jac, dtype=np.float64)))


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with analytic and replication variances."""

    method: str
    mu_hat: float
    var_tl: float
    ci_lo: float
    ci_hi: float
    var_jk: Optional[float] = None
    n_effective: float = float("nan")
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mu_hat": self.mu_hat,
            "var_tl": self.var_tl,
            "var_jk": self.var_jk,
            "ci": [self.ci_lo, self.ci_hi],
            "n_effective": self.n_effective,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    violations: tuple[str, ...] = ()


def validate_inputs(cohort: CohortSample, survey: SurveySample) -> ValidationResult:
    """Check that a cohort/survey pair can be fitted together.

    Idempotent and side-effect free; container-level invariants (finiteness,
    positive weights, intercepts) are already enforced at construction.
    """
    violations: list[str] = []
    if cohort.X.k != survey.X.k:
        violations.append(
            f"dimension mismatch: cohort has {cohort.X.k} columns, survey has {survey.X.k}"
        )
    elif cohort.X.names != survey.X.names:
        violations.append(
            f"column names differ: {list(cohort.X.names)} vs {list(survey.X.names)}"
        )
    return ValidationResult(not violations, tuple(violations))


def expand_categorical(values: np.ndarray, name: str) -> dict[str, np.ndarray]:
    """Dummy-code a categorical column, dropping the lowest level as reference."""
    values = np.asarray(values)
    levels = np.unique(values)
    if levels.size < 2:
        raise DataError(f"categorical column {name!r} has a single level")
    return {f"{name}={lvl}": (values == lvl).astype(np.float64) for lvl in levels[1:]}


def _build_matrix(df: pd.DataFrame, covariate_cols: Optional[Sequence[str]],
                  categorical_cols: Sequence[str]) -> CovariateMatrix:
    if covariate_cols is None:
        covariate_cols = [c for c in df.columns if c not in RESERVED_COLUMNS]
    columns: dict[str, np.ndarray] = {}
    for c in covariate_cols:
        if c not in df.columns:
            raise DataError(f"covariate column {c!r} not found")
        if df[c].isna().any():
            raise DataError(f"missing value in column {c!r} (imputation is not supported)")
        if c in categorical_cols:
            columns.update(expand_categorical(df[c].to_numpy(), c))
        else:
            columns[c] = df[c].to_numpy(dtype=np.float64)
    return CovariateMatrix.from_columns(columns)


def load_cohort_csv(path, covariate_cols: Optional[Sequence[str]] = None,
                    categorical_cols: Sequence[str] = ()) -> CohortSample:
    df = pd.read_csv(path)
    X = _build_matrix(df, covariate_cols, categorical_cols)
    y = df["__outcome"].to_numpy(dtype=np.float64) if "__outcome" in df.columns else None
    return CohortSample(X=X, y=y)


def load_survey_csv(path, covariate_cols: Optional[Sequence[str]] = None,
                    categorical_cols: Sequence[str] = (),
                    design_kind: Optional[str] = None) -> SurveySample:
    df = pd.read_csv(path)
    if "__weight" not in df.columns:
        raise DataError("survey CSV is missing the required '__weight' column")
    X = _build_matrix(df, covariate_cols, categorical_cols)
    has_design = "__stratum" in df.columns and "__psu" in df.columns
    if design_kind is None:
        design_kind = "stratified-wr-psu" if has_design else "poisson"
    if design_kind == "stratified-wr-psu":
        if not has_design:
            raise DataError("stratified design requires '__stratum' and '__psu' columns")
        design = DesignInfo(design_kind,
                            df["__stratum"].to_numpy(dtype=np.int64),
                            df["__psu"].to_numpy(dtype=np.int64))
    else:
        design = DesignInfo(design_kind)
    y = df["__outcome"].to_numpy(dtype=np.float64) if "__outcome" in df.columns else None
    return SurveySample(X=X, d=df["__weight"].to_numpy(dtype=np.float64), design=design, y=y)
