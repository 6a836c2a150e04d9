"""Hot likelihood kernels: JIT-compiled when numba is available.

Every kernel has a pure-numpy twin; the implementation is chosen once at
import time (set ``PAI_DISABLE_JIT=1`` to force the numpy path). Each path
is deterministic on its own; across paths values agree to float round-off
(summation order differs).
"""

from __future__ import annotations

import math
import os

import numpy as np

LOG2 = math.log(2.0)

_want_jit = os.environ.get("PAI_DISABLE_JIT", "") not in ("1", "true", "yes")
try:  # pragma: no cover - exercised via PAI_DISABLE_JIT in tests
    if not _want_jit:
        raise ImportError
    import numba

    JIT_ENABLED = True
except ImportError:  # pragma: no cover
    numba = None
    JIT_ENABLED = False


# ---------------------------------------------------------------------------
# two-component mixture likelihood (means given per coordinate)
# ---------------------------------------------------------------------------


def _mixture_batch_py(a, b, y, inv2s2, log_norm):
    # log[0.5 N(y; a_m, s2) + 0.5 N(y; b_m, s2)] summed over data, per row m
    M = a.shape[0]
    out = np.empty(M)
    for m in range(M):
        la = -((y - a[m]) ** 2) * inv2s2
        lb = -((y - b[m]) ** 2) * inv2s2
        out[m] = float(np.sum(np.logaddexp(la, lb))) + y.size * (log_norm - LOG2)
    return out


def _mixture_grid_py(a_vals, b_vals, y, inv2s2, log_norm):
    R1, R2 = a_vals.size, b_vals.size
    out = np.empty((R1, R2))
    LB = -((y[None, :] - b_vals[:, None]) ** 2) * inv2s2
    for i in range(R1):
        la = -((y - a_vals[i]) ** 2) * inv2s2
        out[i, :] = np.sum(np.logaddexp(la[None, :], LB), axis=1)
    return out + y.size * (log_norm - LOG2)


# ---------------------------------------------------------------------------
# location-scale Student's t likelihood (location given per point)
# ---------------------------------------------------------------------------


def _student_const(nu, scale):
    return (
        math.lgamma(0.5 * (nu + 1.0))
        - math.lgamma(0.5 * nu)
        - 0.5 * math.log(nu * math.pi)
        - math.log(scale)
    )


def _student_batch_py(loc, y, nu, scale):
    M = loc.shape[0]
    out = np.empty(M)
    c = _student_const(nu, scale)
    for m in range(M):
        z = (y - loc[m]) / scale
        out[m] = y.size * c - 0.5 * (nu + 1.0) * float(np.sum(np.log1p(z * z / nu)))
    return out


def _student_grid_py(g1, g2, y, nu, scale):
    R1, R2 = g1.size, g2.size
    out = np.empty((R1, R2))
    c = _student_const(nu, scale)
    g2sq = g2 * g2
    for i in range(R1):
        locs = g1[i] + g2sq
        z = (y[None, :] - locs[:, None]) / scale
        out[i, :] = y.size * c - 0.5 * (nu + 1.0) * np.sum(np.log1p(z * z / nu), axis=1)
    return out


# ---------------------------------------------------------------------------
# diagonal-bandwidth Gaussian mixture log-density (equal weights)
# ---------------------------------------------------------------------------


def _gmm_logpdf_py(X, centers, inv_bw2, log_norm):
    M = X.shape[0]
    out = np.empty(M)
    chunk = max(1, int(2e6 // max(centers.shape[0], 1)))
    for s in range(0, M, chunk):
        e = min(s + chunk, M)
        d2 = np.zeros((e - s, centers.shape[0]))
        for d in range(X.shape[1]):
            diff = X[s:e, d][:, None] - centers[None, :, d]
            d2 += diff * diff * inv_bw2[d]
        mx = np.max(-0.5 * d2, axis=1)
        out[s:e] = mx + np.log(np.sum(np.exp(-0.5 * d2 - mx[:, None]), axis=1))
    return out + log_norm - math.log(centers.shape[0])


if JIT_ENABLED:
    _nj = numba.njit(cache=True, fastmath=False)
    _njp = numba.njit(cache=True, parallel=True, fastmath=False)

    @_nj
    def _mixture_batch_nb(a, b, y, inv2s2, log_norm):  # pragma: no cover - jitted
        M, N = a.shape[0], y.shape[0]
        out = np.empty(M)
        for m in range(M):
            s = 0.0
            for n in range(N):
                da = y[n] - a[m]
                db = y[n] - b[m]
                la = -da * da * inv2s2
                lb = -db * db * inv2s2
                diff = la - lb
                if diff > 40.0:
                    s += la
                elif diff < -40.0:
                    s += lb
                elif diff >= 0.0:
                    s += la + math.log1p(math.exp(-diff))
                else:
                    s += lb + math.log1p(math.exp(diff))
            out[m] = s + N * (log_norm - LOG2)
        return out

    @_njp
    def _mixture_grid_nb(a_vals, b_vals, y, inv2s2, log_norm):  # pragma: no cover
        R1, R2, N = a_vals.shape[0], b_vals.shape[0], y.shape[0]
        out = np.empty((R1, R2))
        for i in numba.prange(R1):
            la = np.empty(N)
            for n in range(N):
                d = y[n] - a_vals[i]
                la[n] = -d * d * inv2s2
            for j in range(R2):
                bj = b_vals[j]
                s = 0.0
                for n in range(N):
                    d = y[n] - bj
                    lb = -d * d * inv2s2
                    diff = la[n] - lb
                    if diff > 40.0:
                        s += la[n]
                    elif diff < -40.0:
                        s += lb
                    elif diff >= 0.0:
                        s += la[n] + math.log1p(math.exp(-diff))
                    else:
                        s += lb + math.log1p(math.exp(diff))
                out[i, j] = s + N * (log_norm - LOG2)
        return out

    @_nj
    def _student_batch_nb(loc, y, nu, scale):  # pragma: no cover
        M, N = loc.shape[0], y.shape[0]
        c = (
            math.lgamma(0.5 * (nu + 1.0))
            - math.lgamma(0.5 * nu)
            - 0.5 * math.log(nu * math.pi)
            - math.log(scale)
        )
        out = np.empty(M)
        for m in range(M):
            s = 0.0
            for n in range(N):
                z = (y[n] - loc[m]) / scale
                s += math.log1p(z * z / nu)
            out[m] = N * c - 0.5 * (nu + 1.0) * s
        return out

    @_njp
    def _student_grid_nb(g1, g2, y, nu, scale):  # pragma: no cover
        R1, R2, N = g1.shape[0], g2.shape[0], y.shape[0]
        c = (
            math.lgamma(0.5 * (nu + 1.0))
            - math.lgamma(0.5 * nu)
            - 0.5 * math.log(nu * math.pi)
            - math.log(scale)
        )
        out = np.empty((R1, R2))
        for i in numba.prange(R1):
            for j in range(R2):
                loc = g1[i] + g2[j] * g2[j]
                s = 0.0
                for n in range(N):
                    z = (y[n] - loc) / scale
                    s += math.log1p(z * z / nu)
                out[i, j] = N * c - 0.5 * (nu + 1.0) * s
        return out

    @_njp
    def _gmm_logpdf_nb(X, centers, inv_bw2, log_norm):  # pragma: no cover
        M, D = X.shape
        C = centers.shape[0]
        out = np.empty(M)
        for m in numba.prange(M):
            buf = np.empty(C)
            mx = -np.inf
            for c in range(C):
                d2 = 0.0
                for d in range(D):
                    diff = X[m, d] - centers[c, d]
                    d2 += diff * diff * inv_bw2[d]
                v = -0.5 * d2
                buf[c] = v
                if v > mx:
                    mx = v
            s = 0.0
            for c in range(C):
                s += math.exp(buf[c] - mx)
            out[m] = mx + math.log(s) + log_norm - math.log(C)
        return out

    mixture_batch = _mixture_batch_nb
    mixture_grid = _mixture_grid_nb
    student_batch = _student_batch_nb
    student_grid = _student_grid_nb
    gmm_logpdf = _gmm_logpdf_nb
else:
    mixture_batch = _mixture_batch_py
    mixture_grid = _mixture_grid_py
    student_batch = _student_batch_py
    student_grid = _student_grid_py
    gmm_logpdf = _gmm_logpdf_py
