"""Point estimation and variance estimation for pseudo-weighted means.

The analytic variance is a plug-in linearization with two terms: a cohort
participation term over the cohort and a design term from the survey score
total.  Population sums are replaced by their design-consistent sample
analogues (cohort sums carry the implicit weight 1/pi, survey sums carry the
fit weights); the mapping is a reconstruction and is documented as such.
The replication alternative is a delete-a-group jackknife that refits the
propensity model in every replicate, so the variability of the score
estimation is captured.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data_model import CohortSample, DesignInfo, EstimateReport, PropensityFit, PseudoWeightSet, SurveySample
from .propensity import FitConfig, participation_rates
from .pseudo_weights import KernelSpec, compute_pseudoweights

log = logging.getLogger(__name__)

Z_95 = 1.96  # fixed normal critical value for the 95% interval


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TLComponents:
    """Pieces of the linearized variance, kept for diagnostics."""

    b_hat: np.ndarray
    A_hat: np.ndarray
    D_hat: np.ndarray
    term1: float
    term2: float


@dataclass(frozen=True)
class SEADiagnostic:
    r2_func: float
    threshold: float
    compatible: bool
    degenerate: bool
    q: np.ndarray
    q_tilde: np.ndarray


def hajek_mean(w: np.ndarray, y: np.ndarray) -> float:
    """Ratio-form weighted mean sum(w y) / sum(w)."""
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if w.shape != y.shape:
        raise ValueError("weight and outcome lengths differ")
    total = w.sum()
    if total <= 0:
        raise EstimationError("total weight must be positive")
    return float(w @ y / total)


def confidence_interval(mu_hat: float, variance: float) -> tuple[float, float]:
    """95% normal interval with half-width 1.96 * sqrt(variance)."""
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    half = Z_95 * np.sqrt(variance)
    return mu_hat - half, mu_hat + half


def design_variance(z: np.ndarray, design: DesignInfo,
                    base_weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Design-based variance of the survey total of per-unit scores z_j.

    * poisson: sum (1 - pi_j) z z' with pi_j = 1 / d_j from the base weights;
    * stratified-wr-psu: with-replacement PSU-total estimator per stratum;
    * srs: n (1 - f) times the sample covariance of z.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n, k = z.shape
    if design.kind == "poisson":
        if base_weights is None:
            raise ValueError("poisson design variance needs the base weights")
        d = np.asarray(base_weights, dtype=np.float64)
        fac = 1.0 - 1.0 / d
        return (z.T * fac) @ z
    if design.kind == "srs":
        if n < 2:
            return np.zeros((k, k))
        zc = z - z.mean(axis=0)
        return n * (1.0 - design.srs_fpc) * (zc.T @ zc) / (n - 1)
    # stratified-wr-psu
    v = np.zeros((k, k))
    for s in np.unique(design.stratum):
        in_s = design.stratum == s
        psus = np.unique(design.psu[in_s])
        m_h = psus.size
        if m_h < 2:
            raise EstimationError(
                f"stratum {int(s)} has one PSU; collapse strata before variance estimation")
        totals = np.vstack([z[in_s & (design.psu == p)].sum(axis=0) for p in psus])
        dev = totals - totals.mean(axis=0)
        v += (m_h / (m_h - 1.0)) * (dev.T @ dev)
    return v


def _fit_omega(fit: PropensityFit, survey: SurveySample) -> np.ndarray:
    """Survey weight vector that entered the fit's estimating equations."""
    if not fit.weighted:
        return np.ones(survey.n)
    if fit.scale_a != 1.0:
        return fit.scale_a * survey.d
    return survey.d


def tl_variance(method: str, cohort: CohortSample, survey: SurveySample,
                fit: PropensityFit, weights: PseudoWeightSet, mu_hat: float,
                y: Optional[np.ndarray] = None) -> tuple[float, TLComponents]:
    """Plug-in linearized variance of the pseudo-weighted mean.

    For the original KW method (unweighted fit) the fit provides no
    participation rates; they are recovered from the pseudo-weights as
    min(1, 1/w).
    """
    if weights.method != method:
        raise ValueError(f"weight set is for {weights.method}, not {method}")
    if weights.jac is None:
        raise ValueError("weight Jacobian required for the linearized variance")
    if y is None:
        y = cohort.y
    if y is None:
        raise ValueError("cohort outcomes required")

    Xc = cohort.X.values
    Xs = survey.X.values
    w = weights.w
    omega = _fit_omega(fit, survey)
    p_c = fit.p_cohort
    p_s = fit.p_survey

    if fit.weighted:
        pi = participation_rates(fit, cohort.X)
    else:
        with np.errstate(divide="ignore"):
            pi = np.where(w > 0, np.minimum(1.0, 1.0 / np.where(w > 0, w, 1.0)), 1.0)

    n_hat = w.sum()
    resid = y - mu_hat

    A_hat = (Xs.T * (omega * p_s)) @ Xs
    try:
        b_hat = np.linalg.solve(A_hat, weights.jac.T @ resid)
    except np.linalg.LinAlgError:
        raise EstimationError("singular propensity information matrix") from None

    lin = w * resid + (1.0 - p_c) * (Xc @ b_hat)
    term1 = float(((1.0 - pi) * lin**2).sum() / n_hat**2)

    z = (omega * p_s)[:, None] * Xs
    D_hat = design_variance(z, survey.design, survey.d) / n_hat**2
    term2 = float(b_hat @ D_hat @ b_hat)

    var = term1 + term2
    if var < 0:
        log.warning("linearized variance %.3e floored at 0 (round-off)", var)
        var = 0.0
    return var, TLComponents(b_hat=b_hat, A_hat=A_hat, D_hat=D_hat, term1=term1, term2=term2)


def assign_jackknife_groups(cohort: CohortSample, survey: SurveySample, n_groups: int,
                            seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Delete-a-group labels for cohort and survey units.

    Survey units follow their design PSUs when the design provides them
    (PSUs assigned to groups round-robin in sorted order); otherwise both
    samples get seeded random near-equal groups.
    """
    if n_groups < 2:
        raise ValueError("need at least 2 jackknife groups")
    rng = np.random.default_rng(seed)

    def random_groups(n):
        g = np.arange(n) % n_groups
        return rng.permutation(g)

    cohort_g = random_groups(cohort.n)
    if survey.design.kind == "stratified-wr-psu":
        psus = np.unique(survey.design.psu)
        psu_group = {int(p): i % n_groups for i, p in enumerate(psus)}
        survey_g = np.array([psu_group[int(p)] for p in survey.design.psu])
    else:
        survey_g = random_groups(survey.n)
    return cohort_g, survey_g


def jackknife_variance(method: str, cohort: CohortSample, survey: SurveySample,
                       n_groups: int, cfg: Optional[FitConfig] = None,
                       kernel: KernelSpec = KernelSpec(), seed: int = 0,
                       mu_hat: Optional[float] = None) -> float:
    """Delete-a-group jackknife with a full refit in every replicate.

    Retained survey weights are upweighted by G/(G-1); the variance is
    ((G-1)/G) * sum_g (mu_g - mu_hat)^2.  Replicates whose fit fails are
    dropped if they are fewer than 5% of the groups.
    """
    if cohort.y is None:
        raise ValueError("cohort outcomes required")
    if mu_hat is None:
        _, ws = compute_pseudoweights(method, cohort, survey, cfg=cfg, kernel=kernel)
        mu_hat = hajek_mean(ws.w, cohort.y)

    cohort_g, survey_g = assign_jackknife_groups(cohort, survey, n_groups, seed)
    reps = []
    failures = 0
    upweight = n_groups / (n_groups - 1.0)
    for g in range(n_groups):
        keep_c = cohort_g != g
        keep_s = survey_g != g
        try:
            sub_c = CohortSample(X=_subset_matrix(cohort, keep_c), y=cohort.y[keep_c])
            sub_s = SurveySample(X=_subset_matrix(survey, keep_s),
                                 d=survey.d[keep_s] * upweight,
                                 design=_subset_design(survey.design, keep_s))
            _, ws = compute_pseudoweights(method, sub_c, sub_s, cfg=cfg, kernel=kernel,
                                          need_jacobian=False)
            reps.append(hajek_mean(ws.w, sub_c.y))
        except Exception as exc:  # noqa: BLE001 - replicate failures are data-driven
            failures += 1
            log.warning("jackknife replicate %d failed: %s", g, exc)
    if failures:
        if failures / n_groups >= 0.05:
            raise EstimationError(f"{failures}/{n_groups} jackknife replicates failed")
    g_eff = len(reps)
    reps = np.asarray(reps)
    return float((g_eff - 1.0) / g_eff * ((reps - mu_hat) ** 2).sum())


def _subset_matrix(sample, keep):
    from .data_model import CovariateMatrix
    return CovariateMatrix(sample.X.values[keep], sample.X.names)


def _subset_design(design: DesignInfo, keep) -> DesignInfo:
    if design.kind != "stratified-wr-psu":
        return design
    return DesignInfo(design.kind, design.stratum[keep], design.psu[keep])


def sea_diagnostic(q_weighted: np.ndarray, q_unweighted: np.ndarray,
                   n_bins: int = 20, threshold: float = 0.95) -> SEADiagnostic:
    """Functional-dependence check between the two matching scores.

    Bins the weighted-fit score q into equal-count quantile bins and compares
    the pooled within-bin variance of the unweighted-fit score q_tilde to its
    total variance.  R2 near 1 means q_tilde is (nearly) a deterministic
    function of q, in which case matching on q_tilde is compatible with
    matching on q.
    """
    q = np.asarray(q_weighted, dtype=np.float64)
    qt = np.asarray(q_unweighted, dtype=np.float64)
    if q.shape != qt.shape:
        raise ValueError("score vectors must have equal length")
    total_var = qt.var()
    if total_var == 0:
        return SEADiagnostic(1.0, threshold, True, True, q, qt)
    order = np.argsort(q, kind="stable")
    bins = np.array_split(order, n_bins)
    within = sum(((qt[b] - qt[b].mean()) ** 2).sum() for b in bins if b.size)
    r2 = 1.0 - (within / q.size) / total_var
    return SEADiagnostic(float(r2), threshold, bool(r2 >= threshold), False, q, qt)


def kish_effective_n(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(w.sum() ** 2 / (w**2).sum())


def estimate_mean(method: str, cohort: CohortSample, survey: SurveySample,
                  cfg: Optional[FitConfig] = None, kernel: KernelSpec = KernelSpec(),
                  jk_groups: Optional[int] = None, seed: int = 0) -> EstimateReport:
    """End-to-end estimate: weights, Hajek mean, TL (and optional JK) variance, CI."""
    if cohort.y is None:
        raise ValueError("cohort outcomes required for estimation")
    fit, weights = compute_pseudoweights(method, cohort, survey, cfg=cfg, kernel=kernel)
    mu = hajek_mean(weights.w, cohort.y)
    var_tl, _ = tl_variance(method, cohort, survey, fit, weights, mu)
    var_jk = None
    if jk_groups:
        var_jk = jackknife_variance(method, cohort, survey, jk_groups, cfg=cfg,
                                    kernel=kernel, seed=seed, mu_hat=mu)
    lo, hi = confidence_interval(mu, var_tl)
    return EstimateReport(method=method, mu_hat=mu, var_tl=var_tl, var_jk=var_jk,
                          ci_lo=lo, ci_hi=hi, n_effective=kish_effective_n(weights.w),
                          warnings=fit.warnings)
