"""Monte Carlo harness: synthetic population, PPS draws, and metrics.

The finite population carries four covariates (two standard normals around 1,
one log-normal, one threshold indicator), an outcome linear in three of them,
and two distorted versions of the first covariate used to study propensity
model misspecification.  Cohort and survey are drawn independently by Poisson
PPS with log-linear measures of size; under that design the true propensity
models are exactly logistic, and draws stay independent across units.

Replicates are embarrassingly parallel and individually seeded from the
master seed, so the metrics table is bit-identical for a given config
regardless of thread count.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .data_model import (METHODS, CohortSample, CovariateMatrix, DesignInfo, SurveySample)
from .estimation import (assign_jackknife_groups, confidence_interval, design_variance,
                         hajek_mean, tl_variance)
from .propensity import FitConfig, fit_pseudo_mle
from .pseudo_weights import KernelSpec, compute_pseudoweights

log = logging.getLogger(__name__)

MODELS = ("T", "U", "M1", "M2")

ALPHA_DEFAULT = (0.6, 0.15, 0.24)
GAMMA_SCENARIO_1 = (-0.4, -0.1, 0.16)
GAMMA_SCENARIO_2 = (-0.65, 0.2, 0.0)

ESTIMATORS = ("Naive", "SVY") + METHODS

_FIT_MODE = {"IPSW": "weighted", "IPSW.S": "scaled", "KW": "unweighted",
             "KW.W": "weighted", "KW.S": "scaled"}


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    N: int = 50_000
    n_c: int = 2_400
    n_s: int = 2_000
    B: int = 500
    alpha: tuple[float, float, float] = ALPHA_DEFAULT
    gamma: tuple[float, float, float] = GAMMA_SCENARIO_1
    model: str = "T"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    seed: int = 0
    jk_groups: int = 20

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if self.N <= self.n_c + self.n_s:
            raise ValueError("population must exceed the two sample sizes")

    def to_json(self) -> str:
        d = asdict(self)
        d["kernel"] = {"kind": self.kernel.kind, "bandwidth": self.kernel.bandwidth}
        return json.dumps(d, indent=2)

    @staticmethod
    def from_json(text: str) -> "ScenarioConfig":
        d = json.loads(text)
        if "kernel" in d:
            d["kernel"] = KernelSpec(**d["kernel"])
        for key in ("alpha", "gamma"):
            if key in d:
                d[key] = tuple(d[key])
        return ScenarioConfig(**d)


def scenario_preset(name: str, **overrides) -> ScenarioConfig:
    gammas = {"scenario1": GAMMA_SCENARIO_1, "scenario2": GAMMA_SCENARIO_2}
    if name not in gammas:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(gammas)}")
    return replace(ScenarioConfig(gamma=gammas[name]), **overrides)


@dataclass(frozen=True)
class FinitePopulation:
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    x4: np.ndarray
    x1_cubic: np.ndarray
    x1_cat: np.ndarray  # integer codes 1..5 from population percentiles
    y: np.ndarray

    @property
    def size(self) -> int:
        return self.y.shape[0]

    def mean_y(self) -> float:
        return float(self.y.mean())

    def model_columns(self, model: str, idx: np.ndarray) -> dict[str, np.ndarray]:
        """Named covariate columns for the given fitted-model variant."""
        if model == "T":
            return {"x1": self.x1[idx], "x2": self.x2[idx], "x4": self.x4[idx]}
        if model == "U":
            return {"x1": self.x1[idx], "x2": self.x2[idx]}
        if model == "M1":
            return {"x1_cubic": self.x1_cubic[idx], "x2": self.x2[idx]}
        if model == "M2":
            cat = self.x1_cat[idx]
            cols = {f"x1_cat={lvl}": (cat == lvl).astype(np.float64) for lvl in (2, 3, 4, 5)}
            cols["x2"] = self.x2[idx]
            return cols
        raise ValueError(f"model must be one of {MODELS}")


def generate_population(N: int, seed: int = 0) -> FinitePopulation:
    """Synthetic finite population with distorted-covariate variants."""
    if N < 1000:
        raise ValueError("population size must be at least 1000")
    rng = np.random.default_rng(seed)
    x1 = rng.normal(1.0, 1.0, N)
    x2 = rng.normal(1.0, 1.0, N)
    x3 = rng.lognormal(0.0, 0.7, N)
    x4 = (x1 + x2 > 2.0).astype(np.float64)
    y = 2.0 + x1 + x2 + x4 + rng.normal(0.0, 1.0, N)
    x1_cubic = x1 + 0.15 * x1**3
    cuts = np.percentile(x1, [10.0, 40.0, 70.0, 90.0])
    x1_cat = (1 + np.searchsorted(cuts, x1, side="left")).astype(np.int64)
    return FinitePopulation(x1, x2, x3, x4, x1_cubic, x1_cat, y)


def pps_poisson_sample(mos: np.ndarray, n: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    """Poisson PPS draw: inclusion probability min(1, n * mos / sum(mos)).

    Realized size is random with expectation n (before capping).  Returns
    (selected indices, weights 1/pi, number of capped units).
    """
    mos = np.asarray(mos, dtype=np.float64)
    if np.any(mos <= 0):
        raise ValueError("measures of size must be positive")
    pi = n * mos / mos.sum()
    n_capped = int(np.count_nonzero(pi > 1.0))
    pi = np.minimum(pi, 1.0)
    take = rng.random(mos.size) < pi
    idx = np.nonzero(take)[0]
    return idx, 1.0 / pi[idx], n_capped


@dataclass(frozen=True)
class MetricsRow:
    estimator: str
    rb_pct: float
    v: Optional[float]
    mse: float
    vr_tl: Optional[float]
    vr_jk: Optional[float]
    cp_tl: Optional[float]
    cp_jk: Optional[float]


@dataclass(frozen=True)
class SimulationResult:
    config: ScenarioConfig
    mu_true: float
    rows: tuple[MetricsRow, ...]
    n_failed: int

    def to_dataframe(self) -> pd.DataFrame:
        df = pd.DataFrame([asdict(r) for r in self.rows])
        return df.rename(columns={
            "estimator": "estimator", "rb_pct": "%RB", "v": "V", "mse": "MSE",
            "vr_tl": "VR(TL)", "vr_jk": "VR(JK)", "cp_tl": "CP(TL)", "cp_jk": "CP(JK)"})

    def to_json(self) -> str:
        return json.dumps({
            "mu_true": self.mu_true,
            "n_failed": self.n_failed,
            "rows": [asdict(r) for r in self.rows],
        }, indent=2)


def compute_metrics(estimator: str, estimates: np.ndarray, var_tl: np.ndarray,
                    var_jk: np.ndarray, mu_true: float) -> MetricsRow:
    """Relative bias, empirical variance, MSE, variance ratios, and coverage.

    Intervals are closed, so a zero-width interval at the truth counts as
    covered.  Variance ratios are mean estimated variance over empirical
    variance (reported as a plain ratio, about 1 for a calibrated estimator).
    """
    B = estimates.size
    if B < 1:
        raise SimulationError("need at least 1 replicate")
    rb = float((estimates - mu_true).mean() / mu_true * 100.0)
    v = float(estimates.var(ddof=1)) if B >= 2 else None
    mse = float(((estimates - mu_true) ** 2).mean())

    def ratio_and_coverage(vars_):
        if np.all(np.isnan(vars_)):
            return None, None
        ok = ~np.isnan(vars_)
        vr = float(vars_[ok].mean() / v) if (v is not None and v > 0) else None
        half = 1.96 * np.sqrt(vars_[ok])
        hits = (estimates[ok] - half <= mu_true) & (mu_true <= estimates[ok] + half)
        return vr, float(hits.mean())

    vr_tl, cp_tl = ratio_and_coverage(var_tl)
    vr_jk, cp_jk = ratio_and_coverage(var_jk)
    return MetricsRow(estimator, rb, v, mse, vr_tl, vr_jk, cp_tl, cp_jk)


def _method_means(cohort: CohortSample, survey: SurveySample, fits: dict,
                  kernel: KernelSpec) -> dict[str, tuple]:
    """Hajek means (and fit/weight objects) for the five methods, sharing fits."""
    out = {}
    for m in METHODS:
        fit = fits[_FIT_MODE[m]]
        _, ws = compute_pseudoweights(m, cohort, survey, kernel=kernel, fit=fit)
        out[m] = (hajek_mean(ws.w, cohort.y), fit, ws)
    return out


def _fit_all_modes(cohort, survey) -> dict:
    return {mode: fit_pseudo_mle(cohort, survey, FitConfig(survey_weight_mode=mode))
            for mode in ("unweighted", "weighted", "scaled")}


def run_single_replicate(pop: FinitePopulation, cfg: ScenarioConfig, b: int) -> dict:
    """One draw of cohort and survey plus all estimators; keyed per estimator
    as (estimate, TL variance, JK variance), with NaN where undefined."""
    ss = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(b,))
    rng = np.random.default_rng(ss)

    mos_c = np.exp(cfg.alpha[0] * pop.x1 + cfg.alpha[1] * pop.x2 + cfg.alpha[2] * pop.x3)
    mos_s = np.exp(cfg.gamma[0] * pop.x1 + cfg.gamma[1] * pop.x2 + cfg.gamma[2] * pop.x3)
    idx_c, _, _ = pps_poisson_sample(mos_c, cfg.n_c, rng)
    idx_s, d, _ = pps_poisson_sample(mos_s, cfg.n_s, rng)
    if idx_c.size < 10 or idx_s.size < 10:
        raise SimulationError("degenerate replicate: sample too small")

    cohort = CohortSample(X=CovariateMatrix.from_columns(pop.model_columns(cfg.model, idx_c)),
                          y=pop.y[idx_c])
    survey = SurveySample(X=CovariateMatrix.from_columns(pop.model_columns(cfg.model, idx_s)),
                          d=d, design=DesignInfo("poisson"), y=pop.y[idx_s])

    results: dict[str, tuple] = {}
    yc, ys = cohort.y, survey.y
    results["Naive"] = (float(yc.mean()), float(yc.var(ddof=1) / yc.size), np.nan)

    mu_svy = hajek_mean(d, ys)
    z = (d * (ys - mu_svy))[:, None]
    v_svy = float(design_variance(z, survey.design, d)[0, 0] / d.sum() ** 2)
    results["SVY"] = [mu_svy, v_svy, np.nan]

    fits = _fit_all_modes(cohort, survey)
    means = _method_means(cohort, survey, fits, cfg.kernel)
    for m, (mu, fit, ws) in means.items():
        v_tl, _ = tl_variance(m, cohort, survey, fit, ws, mu)
        results[m] = [mu, v_tl, np.nan]

    if cfg.jk_groups >= 2:
        jk_seed = int(rng.integers(2**31))
        cg, sg = assign_jackknife_groups(cohort, survey, cfg.jk_groups, seed=jk_seed)
        G = cfg.jk_groups
        up = G / (G - 1.0)
        rep = {m: [] for m in METHODS}
        rep_svy = []
        for g in range(G):
            kc, ks = cg != g, sg != g
            sub_c = CohortSample(X=CovariateMatrix(cohort.X.values[kc], cohort.X.names),
                                 y=yc[kc])
            sub_s = SurveySample(X=CovariateMatrix(survey.X.values[ks], survey.X.names),
                                 d=d[ks] * up, design=survey.design, y=ys[ks])
            rep_svy.append(hajek_mean(sub_s.d, sub_s.y))
            sub_fits = _fit_all_modes(sub_c, sub_s)
            for m in METHODS:
                _, ws = compute_pseudoweights(m, sub_c, sub_s, kernel=cfg.kernel,
                                              fit=sub_fits[_FIT_MODE[m]],
                                              need_jacobian=False)
                rep[m].append(hajek_mean(ws.w, sub_c.y))
        fac = (G - 1.0) / G
        results["SVY"][2] = fac * float(((np.asarray(rep_svy) - mu_svy) ** 2).sum())
        for m in METHODS:
            results[m][2] = fac * float(((np.asarray(rep[m]) - results[m][0]) ** 2).sum())

    return {k: tuple(v) for k, v in results.items()}


def _safe_replicate(pop, cfg, b):
    try:
        return run_single_replicate(pop, cfg, b)
    except Exception as exc:  # noqa: BLE001 - failures are tallied by the caller
        log.warning("replicate %d failed: %s", b, exc)
        return None


def run_replications(cfg: ScenarioConfig, population: Optional[FinitePopulation] = None,
                     threads: int = 1) -> SimulationResult:
    """Run B replicates and aggregate the metrics table.

    ``threads=0`` uses all cores.  Aggregation is an ordered reduction over
    the replicate index, so results do not depend on the thread count.
    """
    if population is None:
        population = generate_population(cfg.N, seed=cfg.seed)
    mu_true = population.mean_y()

    n_jobs = threads if threads > 0 else -1
    if n_jobs == 1:
        raw = [_safe_replicate(population, cfg, b) for b in range(cfg.B)]
    else:
        raw = Parallel(n_jobs=n_jobs)(
            delayed(_safe_replicate)(population, cfg, b) for b in range(cfg.B))

    n_failed = sum(r is None for r in raw)
    if n_failed:
        if n_failed / cfg.B >= 0.01:
            raise SimulationError(f"{n_failed}/{cfg.B} replicates failed")
        log.warning("excluded %d failed replicates", n_failed)
    raw = [r for r in raw if r is not None]

    rows = []
    for est in ESTIMATORS:
        mus = np.array([r[est][0] for r in raw])
        v_tl = np.array([r[est][1] for r in raw])
        v_jk = np.array([r[est][2] for r in raw])
        rows.append(compute_metrics(est, mus, v_tl, v_jk, mu_true))
    return SimulationResult(config=cfg, mu_true=mu_true, rows=tuple(rows), n_failed=n_failed)
