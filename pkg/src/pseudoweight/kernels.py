"""Hot numeric kernels for kernel-matching weights.

Two interchangeable backends compute the same quantities:

* ``numba`` (default when importable): compiled per-survey-unit loops.
* ``numpy``: blocked vectorized path, used as a fallback and for checking
  the compiled code.

Select explicitly with ``PSEUDOWEIGHT_BACKEND=numpy`` or ``=numba``.
``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import math
import os

import numpy as np

KERNEL_KINDS = ("epanechnikov", "triangular", "gaussian")
_KIND_ID = {k: i for i, k in enumerate(KERNEL_KINDS)}
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_BLOCK = 512  # survey-unit block size for the numpy path


def _resolve_backend() -> str:
    requested = os.environ.get("PSEUDOWEIGHT_BACKEND", "").strip().lower()
    if requested and requested not in ("numba", "numpy"):
        raise ValueError(f"PSEUDOWEIGHT_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if requested == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _resolve_backend()


def active_backend() -> str:
    """Name of the backend selected at import time."""
    return BACKEND


# ---------------------------------------------------------------------------
# scalar kernels (numpy-vectorized)

def kernel_eval(u, kind: str) -> np.ndarray:
    """Evaluate a zero-centered kernel density at u."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(np.isnan(u)):
        raise ValueError("NaN kernel argument")
    if kind == "epanechnikov":
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    if kind == "triangular":
        return np.maximum(1.0 - np.abs(u), 0.0)
    if kind == "gaussian":
        return _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KERNEL_KINDS}")


def kernel_deriv(u, kind: str) -> np.ndarray:
    """Derivative of the kernel (a.e. for the compact-support kinds)."""
    u = np.asarray(u, dtype=np.float64)
    if kind == "epanechnikov":
        return np.where(np.abs(u) <= 1.0, -1.5 * u, 0.0)
    if kind == "triangular":
        return np.where(np.abs(u) < 1.0, -np.sign(u), 0.0)
    if kind == "gaussian":
        return -u * _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KERNEL_KINDS}")


def kernel_support(kind: str) -> float:
    """Half-width of the kernel support (inf for gaussian)."""
    return math.inf if kind == "gaussian" else 1.0


# ---------------------------------------------------------------------------
# numpy backend

def _kw_weights_np(qc, qs, omega, kind, h):
    n_c = qc.shape[0]
    w = np.zeros(n_c)
    n_fallback = 0
    for lo in range(0, qs.shape[0], _BLOCK):
        hi = min(lo + _BLOCK, qs.shape[0])
        u = (qc[:, None] - qs[None, lo:hi]) / h
        K = kernel_eval(u, kind)
        S = K.sum(axis=0)
        good = S > 0.0
        if good.any():
            w += K[:, good] @ (omega[lo:hi][good] / S[good])
        for j in np.nonzero(~good)[0]:
            nearest = int(np.argmin(np.abs(qc - qs[lo + j])))
            w[nearest] += omega[lo + j]
            n_fallback += 1
    return w, n_fallback


def _kw_jacobian_np(qc, qs, Xc, Xs, omega, kind, h):
    jac = np.zeros((qc.shape[0], Xc.shape[1]))
    for lo in range(0, qs.shape[0], _BLOCK):
        hi = min(lo + _BLOCK, qs.shape[0])
        u = (qc[:, None] - qs[None, lo:hi]) / h
        K = kernel_eval(u, kind)
        Kp = kernel_deriv(u, kind)
        S = K.sum(axis=0)
        good = S > 0.0  # empty columns keep zero derivative (mass pinned to one unit)
        if not good.any():
            continue
        K, Kp, S = K[:, good], Kp[:, good], S[good]
        om = omega[lo:hi][good]
        Xsb = Xs[lo:hi][good]
        # T_j = sum_l K'_lj (x_l - x_j) / h
        T = (Kp.T @ Xc - Kp.sum(axis=0)[:, None] * Xsb) / h
        A = om / S
        jac += (Xc * (Kp @ A)[:, None] - (Kp * A) @ Xsb) / h
        jac -= (K * (om / S**2)) @ T
    return jac


# ---------------------------------------------------------------------------
# numba backend

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True, inline="always")
    def _kval(u, kind):
        if kind == 0:
            if abs(u) <= 1.0:
                return 0.75 * (1.0 - u * u)
            return 0.0
        elif kind == 1:
            a = abs(u)
            if a < 1.0:
                return 1.0 - a
            return 0.0
        else:
            return _INV_SQRT_2PI * math.exp(-0.5 * u * u)

    @njit(cache=True, inline="always")
    def _kderiv(u, kind):
        if kind == 0:
            if abs(u) <= 1.0:
                return -1.5 * u
            return 0.0
        elif kind == 1:
            if abs(u) < 1.0:
                if u > 0.0:
                    return -1.0
                elif u < 0.0:
                    return 1.0
                return 0.0
            return 0.0
        else:
            return -u * _INV_SQRT_2PI * math.exp(-0.5 * u * u)

    @njit(cache=True, inline="always")
    def _support_range(qc_s, center, kind, h):
        # compact kernels only touch scores within h of the survey score
        if kind == 2:
            return 0, qc_s.shape[0]
        lo = np.searchsorted(qc_s, center - h, side="left")
        hi = np.searchsorted(qc_s, center + h, side="right")
        return lo, hi

    @njit(cache=True, inline="always")
    def _nearest_sorted(qc_s, order, x):
        # nearest score; distance ties and duplicate scores go to the lowest
        # original index (stable sort puts it first in an equal run)
        n = qc_s.shape[0]
        pos = np.searchsorted(qc_s, x)
        if pos == 0:
            best = 0
        elif pos == n:
            best = n - 1
        else:
            dl = abs(x - qc_s[pos - 1])
            dr = abs(qc_s[pos] - x)
            if dl < dr:
                best = pos - 1
            elif dr < dl:
                best = pos
            else:
                best = pos - 1 if order[pos - 1] < order[pos] else pos
        while best > 0 and qc_s[best - 1] == qc_s[best]:
            best -= 1
        return best

    @njit(cache=True)
    def _kw_weights_nb(qc_s, order, qs, omega, kind, h):
        n_c = qc_s.shape[0]
        n_s = qs.shape[0]
        w = np.zeros(n_c)
        col = np.empty(n_c)
        n_fallback = 0
        for j in range(n_s):
            lo, hi = _support_range(qc_s, qs[j], kind, h)
            s = 0.0
            for i in range(lo, hi):
                kv = _kval((qc_s[i] - qs[j]) / h, kind)
                col[i] = kv
                s += kv
            if s > 0.0:
                f = omega[j] / s
                for i in range(lo, hi):
                    if col[i] != 0.0:
                        w[order[i]] += col[i] * f
            else:
                w[order[_nearest_sorted(qc_s, order, qs[j])]] += omega[j]
                n_fallback += 1
        return w, n_fallback

    @njit(cache=True)
    def _kw_jacobian_nb(qc_s, order, qs, Xc, Xs, omega, kind, h):
        n_c = qc_s.shape[0]
        n_s = qs.shape[0]
        k = Xc.shape[1]
        jac = np.zeros((n_c, k))
        col = np.empty(n_c)
        colp = np.empty(n_c)
        t = np.empty(k)
        for j in range(n_s):
            lo, hi = _support_range(qc_s, qs[j], kind, h)
            s = 0.0
            sp = 0.0
            for i in range(lo, hi):
                u = (qc_s[i] - qs[j]) / h
                col[i] = _kval(u, kind)
                colp[i] = _kderiv(u, kind)
                s += col[i]
                sp += colp[i]
            if s <= 0.0:
                continue
            for c in range(k):
                acc = 0.0
                for i in range(lo, hi):
                    if colp[i] != 0.0:
                        acc += colp[i] * Xc[order[i], c]
                t[c] = (acc - sp * Xs[j, c]) / h
            a = omega[j] / s
            b = omega[j] / (s * s)
            for i in range(lo, hi):
                kp = colp[i]
                kv = col[i]
                if kp == 0.0 and kv == 0.0:
                    continue
                io = order[i]
                for c in range(k):
                    jac[io, c] += a * kp * (Xc[io, c] - Xs[j, c]) / h - b * kv * t[c]
        return jac


def kw_weight_sums(qc: np.ndarray, qs: np.ndarray, omega: np.ndarray,
                   kind: str, h: float) -> tuple[np.ndarray, int]:
    """Distribute each survey unit's weight across cohort units by kernel share.

    Survey units with an all-zero kernel column fall back to their nearest
    cohort unit by score distance (ties go to the lower index), preserving
    exact mass conservation.  Returns (weights, fallback count).
    """
    qc = np.ascontiguousarray(qc, dtype=np.float64)
    qs = np.ascontiguousarray(qs, dtype=np.float64)
    omega = np.ascontiguousarray(omega, dtype=np.float64)
    if BACKEND == "numba":
        order = np.argsort(qc, kind="stable")
        return _kw_weights_nb(qc[order], order, qs, omega, _KIND_ID[kind], float(h))
    return _kw_weights_np(qc, qs, omega, kind, float(h))


def kw_jacobian_dense(qc: np.ndarray, qs: np.ndarray, Xc: np.ndarray, Xs: np.ndarray,
                      omega: np.ndarray, kind: str, h: float) -> np.ndarray:
    """Analytic derivative of the kernel-matching weights w.r.t. the fit coefficients.

    Fallback columns (all-zero kernel sums) contribute zero derivative.
    Column sums of the result are zero: total mass does not depend on beta.
    """
    qc = np.ascontiguousarray(qc, dtype=np.float64)
    qs = np.ascontiguousarray(qs, dtype=np.float64)
    Xc = np.ascontiguousarray(Xc, dtype=np.float64)
    Xs = np.ascontiguousarray(Xs, dtype=np.float64)
    omega = np.ascontiguousarray(omega, dtype=np.float64)
    if BACKEND == "numba":
        order = np.argsort(qc, kind="stable")
        return _kw_jacobian_nb(qc[order], order, qs, Xc, Xs, omega, _KIND_ID[kind], float(h))
    return _kw_jacobian_np(qc, qs, Xc, Xs, omega, kind, float(h))
