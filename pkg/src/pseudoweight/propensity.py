"""Logistic propensity fitting on the combined cohort/survey sample.

The fit maximizes the survey-weighted pseudo log-likelihood

    l(beta) = sum_cohort log p_i + sum_survey omega_j log(1 - p_j)

with p = expit(beta'x), by Newton-Raphson with step-halving.  The survey
weight vector omega is all-ones (``unweighted`` mode, used by the original
kernel-matching method), the base weights d (``weighted``), or the base
weights rescaled to sum to the survey sample size (``scaled``).

Step-halving rather than plain IRLS: base weights can span two to three
orders of magnitude, and an unguarded Newton step can overshoot badly.
Convergence is measured on the score (not coefficient movement) because the
linearized variance assumes the score is numerically zero at the estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data_model import CohortSample, CovariateMatrix, PropensityFit, SurveySample, validate_inputs

log = logging.getLogger(__name__)

FIT_MODES = ("unweighted", "weighted", "scaled")

SEPARATION_Q = 30.0  # |linear score| beyond this at convergence flags separation


class FitError(RuntimeError):
    """Raised when the propensity fit cannot be computed at all."""


class CollinearityError(FitError):
    """Singular Hessian: the named columns are (near-)collinear."""

    def __init__(self, columns):
        self.columns = tuple(columns)
        super().__init__(f"singular Hessian; near-collinear columns: {list(columns)}")


@dataclass(frozen=True)
class FitConfig:
    survey_weight_mode: str = "weighted"
    max_iterations: int = 50
    score_tolerance: float = 1e-10
    step_halving_max: int = 20
    p_clip: float = 1e-8

    def __post_init__(self):
        if self.survey_weight_mode not in FIT_MODES:
            raise ValueError(f"survey_weight_mode must be one of {FIT_MODES}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.score_tolerance <= 0 or self.p_clip <= 0:
            raise ValueError("tolerances must be positive")


def scale_weights(d: np.ndarray) -> tuple[np.ndarray, float]:
    """Rescale survey weights to sum to the sample size.

    Returns (scaled weights, scaling factor a = n_s / sum(d)).
    """
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        raise ValueError("empty weight vector")
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise ValueError("weights must be positive and finite")
    a = d.size / d.sum()
    return a * d, a


def _clip(p: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(p, eps, 1.0 - eps)


def _loglik(Xc, Xs, omega, beta, eps):
    pc = _clip(expit(Xc @ beta), eps)
    ps = _clip(expit(Xs @ beta), eps)
    return np.log(pc).sum() + omega @ np.log1p(-ps)


def _score(Xc, Xs, omega, beta, eps):
    pc = _clip(expit(Xc @ beta), eps)
    ps = _clip(expit(Xs @ beta), eps)
    return Xc.T @ (1.0 - pc) - Xs.T @ (omega * ps)


def _hessian(Xc, Xs, omega, beta, eps):
    pc = _clip(expit(Xc @ beta), eps)
    ps = _clip(expit(Xs @ beta), eps)
    return -(Xc.T * (pc * (1.0 - pc))) @ Xc - (Xs.T * (omega * ps * (1.0 - ps))) @ Xs


def _collinear_columns(H: np.ndarray, names) -> list[str]:
    _, s, vt = np.linalg.svd(H)
    null = np.abs(vt[-1])
    involved = np.nonzero(null > 0.1 * null.max())[0]
    return [names[i] for i in involved]


def fit_pseudo_mle(cohort: CohortSample, survey: SurveySample,
                   cfg: FitConfig = FitConfig()) -> PropensityFit:
    """Fit the propensity model and return scores for both samples."""
    check = validate_inputs(cohort, survey)
    if not check.ok:
        raise FitError("; ".join(check.violations))

    Xc = cohort.X.values
    Xs = survey.X.values
    if cfg.survey_weight_mode == "unweighted":
        omega, a, weighted = np.ones(survey.n), 1.0, False
    elif cfg.survey_weight_mode == "weighted":
        omega, a, weighted = survey.d, 1.0, True
    else:
        omega, a = scale_weights(survey.d)
        weighted = True

    n_c = cohort.n
    eps = cfg.p_clip
    names = cohort.X.names

    # exact solution of the intercept-only problem
    beta = np.zeros(cohort.X.k)
    beta[0] = np.log(n_c / omega.sum())
    ll = _loglik(Xc, Xs, omega, beta, eps)
    warnings: list[str] = []
    converged = False
    it = 0

    for it in range(1, cfg.max_iterations + 1):
        s = _score(Xc, Xs, omega, beta, eps)
        if np.max(np.abs(s)) / n_c <= cfg.score_tolerance:
            converged = True
            break
        H = _hessian(Xc, Xs, omega, beta, eps)
        try:
            step = np.linalg.solve(-H, s)
        except np.linalg.LinAlgError:
            raise CollinearityError(_collinear_columns(H, names)) from None
        if not np.all(np.isfinite(step)):
            raise CollinearityError(_collinear_columns(H, names))
        # step-halving: accept only ascent of the pseudo log-likelihood
        accepted = False
        for _ in range(cfg.step_halving_max + 1):
            cand = beta + step
            ll_cand = _loglik(Xc, Xs, omega, cand, eps)
            if ll_cand >= ll:
                beta, ll, accepted = cand, ll_cand, True
                break
            step *= 0.5
        if not accepted:
            warnings.append("step-halving stalled before the score tolerance was met")
            break
    else:
        it = cfg.max_iterations

    if not converged:
        s = _score(Xc, Xs, omega, beta, eps)
        converged = np.max(np.abs(s)) / n_c <= cfg.score_tolerance
    if not converged:
        warnings.append(f"no convergence after {it} iterations")
        log.warning("propensity fit did not converge (mode=%s)", cfg.survey_weight_mode)

    qc = Xc @ beta
    qs = Xs @ beta
    if converged and max(np.max(np.abs(qc)), np.max(np.abs(qs))) > SEPARATION_Q:
        warnings.append("possible separation: |linear score| exceeds 30")

    return PropensityFit(
        beta=beta, scale_a=a, weighted=weighted,
        p_cohort=_clip(expit(qc), eps), p_survey=_clip(expit(qs), eps),
        q_cohort=qc, q_survey=qs,
        converged=bool(converged), iterations=it, warnings=tuple(warnings),
    )


def participation_rates(fit: PropensityFit, X: CovariateMatrix) -> np.ndarray:
    """Estimated cohort participation rates, capped at 1.

    The rate is the odds exp(beta'x) from the weighted fit, multiplied by the
    scaling factor a to undo the intercept offset a scaled fit introduces
    (a = 1 for an unscaled fit, where this is exactly p / (1 - p)).
    """
    if not fit.weighted:
        raise ValueError("participation rates require a survey-weighted fit")
    rate = fit.scale_a * np.exp(X.values @ fit.beta)
    n_capped = int(np.count_nonzero(rate > 1.0))
    if n_capped:
        log.warning("%d participation rates capped at 1", n_capped)
    return np.minimum(rate, 1.0)


def matching_scores(fit: PropensityFit) -> tuple[np.ndarray, np.ndarray]:
    """Linear scores beta'x for both samples, used verbatim by kernel matching."""
    return fit.q_cohort, fit.q_survey
