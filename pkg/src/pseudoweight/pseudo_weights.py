"""Construction of the five pseudo-weight sets.

Two families:

* inverse-propensity weights (IPSW, IPSW.S): reciprocal of the estimated
  participation rate;
* kernel-matching weights (KW, KW.W, KW.S): each survey unit's base weight is
  split across cohort units proportionally to a kernel of the score distance.

The fit mode differs per method (unweighted survey for KW, weighted for
IPSW/KW.W, scaled-weighted for IPSW.S/KW.S), but the kernel methods always
distribute the *original* base weights d: scaling exists only to stabilize
the fit, and distributing scaled weights would shrink the implied population
to the survey sample size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import kernels
from .data_model import (METHODS, CohortSample, PropensityFit, PseudoWeightSet, SurveySample)
from .propensity import FitConfig, fit_pseudo_mle, matching_scores, participation_rates

log = logging.getLogger(__name__)

_FIT_MODE = {
    "IPSW": "weighted",
    "IPSW.S": "scaled",
    "KW": "unweighted",
    "KW.W": "weighted",
    "KW.S": "scaled",
}

MASS_TOL = 1e-10


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "triangular"
    bandwidth: Union[str, float] = "silverman"

    def __post_init__(self):
        if self.kind not in kernels.KERNEL_KINDS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {kernels.KERNEL_KINDS}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "silverman":
                raise ValueError("bandwidth must be 'silverman' or a positive number")
        elif not self.bandwidth > 0:
            raise ValueError("fixed bandwidth must be positive")


def kernel_eval(u, kind: str) -> np.ndarray:
    """Zero-centered kernel density (symmetric in u)."""
    return kernels.kernel_eval(u, kind)


def silverman_bandwidth(q_pooled: np.ndarray) -> float:
    """Rule-of-thumb bandwidth on the pooled cohort and survey scores.

    h = 0.9 * min(sd, IQR/1.34) * m^(-1/5); falls back to sd when the IQR
    degenerates.  Zero spread signals a degenerate fit and is an error.
    """
    q = np.asarray(q_pooled, dtype=np.float64)
    if q.size < 2:
        raise ValueError("need at least 2 pooled scores")
    sd = q.std(ddof=1)
    lo, hi = np.percentile(q, [25.0, 75.0])
    iqr = (hi - lo) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    if spread <= 1e-12 * max(1.0, float(np.abs(q).max())):
        raise ValueError("zero spread in matching scores: degenerate propensity fit")
    return 0.9 * spread * q.size ** (-0.2)


def kw_weights(q_cohort: np.ndarray, q_survey: np.ndarray, survey_weights: np.ndarray,
               kernel: KernelSpec = KernelSpec(), h: Optional[float] = None,
               method: str = "KW.W") -> PseudoWeightSet:
    """Kernel-matching pseudo-weights distributing survey mass over the cohort.

    Exact mass conservation holds: sum(w) equals sum(survey_weights), with
    survey units matching no cohort unit handed entirely to the nearest
    cohort score (counted in ``n_fallback``).
    """
    if h is None:
        if kernel.bandwidth == "silverman":
            h = silverman_bandwidth(np.concatenate([q_cohort, q_survey]))
        else:
            h = float(kernel.bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    w, n_fallback = kernels.kw_weight_sums(q_cohort, q_survey, survey_weights, kernel.kind, h)
    if n_fallback:
        log.debug("%d survey units had no kernel match; mass moved to nearest cohort unit",
                  n_fallback)
    total = np.asarray(survey_weights, dtype=np.float64).sum()
    if abs(w.sum() - total) > MASS_TOL * total:
        raise AssertionError("kernel weight mass conservation violated")
    return PseudoWeightSet(method=method, w=w, kernel=kernel.kind, bandwidth=h,
                           n_fallback=n_fallback)


def ipsw_weights(participation: np.ndarray, method: str = "IPSW") -> PseudoWeightSet:
    """Inverse of the estimated participation rate."""
    pi = np.asarray(participation, dtype=np.float64)
    if np.any(pi <= 0):
        raise ValueError("participation rates must be positive")
    return PseudoWeightSet(method=method, w=1.0 / pi)


def kw_jacobian(q_cohort: np.ndarray, q_survey: np.ndarray,
                X_cohort: np.ndarray, X_survey: np.ndarray,
                survey_weights: np.ndarray, kernel: KernelSpec, h: float) -> np.ndarray:
    """Derivative of the kernel-matching weights w.r.t. the fit coefficients.

    Column sums are zero (mass conservation does not depend on the fit);
    fallback survey units contribute zero derivative.
    """
    return kernels.kw_jacobian_dense(q_cohort, q_survey, X_cohort, X_survey,
                                     survey_weights, kernel.kind, float(h))


def compute_pseudoweights(method: str, cohort: CohortSample, survey: SurveySample,
                          cfg: Optional[FitConfig] = None,
                          kernel: KernelSpec = KernelSpec(),
                          fit: Optional[PropensityFit] = None,
                          need_jacobian: bool = True,
                          ) -> tuple[PropensityFit, PseudoWeightSet]:
    """Fit the method's propensity model and build its pseudo-weight set.

    A precomputed ``fit`` (from the matching mode) may be supplied to share
    one fit across methods.  The weight Jacobian feeds the linearized
    variance; replication paths that only need point estimates can skip it
    with ``need_jacobian=False``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    mode = _FIT_MODE[method]
    if fit is None:
        base = cfg if cfg is not None else FitConfig()
        fit = fit_pseudo_mle(cohort, survey, FitConfig(
            survey_weight_mode=mode,
            max_iterations=base.max_iterations,
            score_tolerance=base.score_tolerance,
            step_halving_max=base.step_halving_max,
            p_clip=base.p_clip,
        ))

    if method in ("IPSW", "IPSW.S"):
        pi = participation_rates(fit, cohort.X)
        weights = ipsw_weights(pi, method=method)
        if need_jacobian:
            jac = -weights.w[:, None] * cohort.X.values  # d/dbeta of (1/a) exp(-beta'x)
            weights = PseudoWeightSet(method=method, w=weights.w, jac=jac)
    else:
        qc, qs = matching_scores(fit)
        ws = kw_weights(qc, qs, survey.d, kernel=kernel, method=method)
        jac = None
        if need_jacobian:
            jac = kw_jacobian(qc, qs, cohort.X.values, survey.X.values,
                              survey.d, kernel, ws.bandwidth)
        weights = PseudoWeightSet(method=method, w=ws.w, kernel=ws.kernel,
                                  bandwidth=ws.bandwidth, jac=jac,
                                  n_fallback=ws.n_fallback)
    return fit, weights
