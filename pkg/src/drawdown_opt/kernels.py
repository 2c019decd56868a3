"""Hot numeric kernels: banded pressure solve and polytope projection.

Each kernel has a numba body (``*_nb``) and a numpy/scipy body (``*_np``);
the public names dispatch on :data:`drawdown_opt._accel.USE_NUMBA`.
"""
import math

import numpy as np
from scipy.linalg import solveh_banded

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# Pressure system
#
# Cells are numbered c = ix * ny + iy, so y-neighbours sit one apart and
# x-neighbours ny apart. The matrix is symmetric positive definite with
# half-bandwidth ny and is kept in LAPACK lower band storage:
#     ab[d, j] = A[j + d, j]
# ---------------------------------------------------------------------------


def assemble_band(acc, tx, ty, nx, ny, well_cell, well_coef):
    """Return lower band storage of the backward-Euler pressure matrix."""
    n = nx * ny
    bw = max(ny, 1)
    ab = np.zeros((bw + 1, n))
    diag = acc.copy()
    if nx > 1:
        t = tx.ravel()  # faces (ix, iy)-(ix+1, iy), ix < nx-1
        lo = np.arange((nx - 1) * ny)
        diag[lo] += t
        diag[lo + ny] += t
        ab[ny, lo] = -t
    if ny > 1:
        t = ty.ravel()  # faces (ix, iy)-(ix, iy+1), iy < ny-1
        ix, iy = np.divmod(np.arange(nx * (ny - 1)), ny - 1)
        lo = ix * ny + iy
        diag[lo] += t
        diag[lo + 1] += t
        ab[1, lo] = -t
    diag[well_cell] += well_coef
    ab[0] = diag
    return ab


@njit
def band_matvec(ab, x):
    bw = ab.shape[0] - 1
    n = x.shape[0]
    y = ab[0] * x
    for d in range(1, bw + 1):
        for j in range(n - d):
            a = ab[d, j]
            if a != 0.0:
                y[j + d] += a * x[j]
                y[j] += a * x[j + d]
    return y


@njit
def _band_abs_matvec(ab, x):
    bw = ab.shape[0] - 1
    n = x.shape[0]
    y = np.abs(ab[0]) * np.abs(x)
    for d in range(1, bw + 1):
        for j in range(n - d):
            a = abs(ab[d, j])
            y[j + d] += a * abs(x[j])
            y[j] += a * abs(x[j + d])
    return y


@njit
def _backward_error(ab, x, b):
    """Componentwise backward error max |Ax-b| / (|A||x| + |b|)."""
    r = band_matvec(ab, x) - b
    s = _band_abs_matvec(ab, x) + np.abs(b)
    err = 0.0
    for i in range(x.shape[0]):
        if s[i] > 0.0:
            e = abs(r[i]) / s[i]
            if e > err:
                err = e
    return err


@njit
def _cholesky_solve_nb(ab, b):
    # row-oriented factor: r[i, bw + k - i] = L[i, k], so inner products
    # over k run along contiguous memory
    bw = ab.shape[0] - 1
    n = b.shape[0]
    r = np.zeros((n, bw + 1))
    for i in range(n):
        for j in range(max(0, i - bw), i + 1):
            s = ab[i - j, j]
            k0 = max(0, i - bw)
            oi = bw - i
            oj = bw - j
            for k in range(k0, j):
                s -= r[i, oi + k] * r[j, oj + k]
            if i == j:
                if s <= 0.0:
                    return np.full(n, np.nan)
                r[i, bw] = math.sqrt(s)
            else:
                r[i, oi + j] = s / r[j, bw]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        oi = bw - i
        for k in range(max(0, i - bw), i):
            s -= r[i, oi + k] * y[k]
        y[i] = s / r[i, bw]
    x = y.copy()
    for i in range(n - 1, -1, -1):
        x[i] /= r[i, bw]
        oi = bw - i
        for k in range(max(0, i - bw), i):
            x[k] -= r[i, oi + k] * x[i]
    return x


def _solve_band_nb(ab, b):
    x = _cholesky_solve_nb(ab, b)
    return x, _backward_error(ab, x, b)


def _band_matvec_np(ab, x, absolute=False):
    if absolute:
        ab, x = np.abs(ab), np.abs(x)
    y = ab[0] * x
    for d in range(1, ab.shape[0]):
        y[d:] += ab[d, :-d] * x[:-d]
        y[:-d] += ab[d, :-d] * x[d:]
    return y


def _solve_band_np(ab, b):
    try:
        if ab.shape[1] == 1:  # solveh_banded trips over a 1x1 system with extra band rows
            if not ab[0, 0] > 0:
                raise np.linalg.LinAlgError("not positive definite")
            x = b / ab[0]
        else:
            x = solveh_banded(ab, b, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        x = np.full(b.shape, np.nan)
    r = np.abs(_band_matvec_np(ab, x) - b)
    s = _band_matvec_np(ab, x, absolute=True) + np.abs(b)
    mask = s > 0
    err = float(np.max(r[mask] / s[mask])) if mask.any() else 0.0
    return x, err


def solve_band(ab, b):
    """Solve the SPD band system; returns ``(x, backward_error)``."""
    if USE_NUMBA:
        return _solve_band_nb(ab, b)
    return _solve_band_np(ab, b)


def harmonic_transmissibility(k, nx, ny, dx, dy, thickness, mu):
    """Two-point face transmissibilities (m^3 / (Pa s)) with harmonic k."""
    kk = k.reshape(nx, ny)
    tx = np.zeros((max(nx - 1, 0), ny))
    ty = np.zeros((nx, max(ny - 1, 0)))
    if nx > 1:
        a, b = kk[:-1, :], kk[1:, :]
        tx = (dy * thickness / dx) * (2.0 * a * b / (a + b)) / mu
    if ny > 1:
        a, b = kk[:, :-1], kk[:, 1:]
        ty = (dx * thickness / dy) * (2.0 * a * b / (a + b)) / mu
    return tx, ty


# ---------------------------------------------------------------------------
# Projection onto {p_min <= u <= p_max, |u_t - u_{t-1}| <= dp, [u_t <= u_{t-1}]}
# ---------------------------------------------------------------------------


@njit
def _pava_nonincreasing_nb(y):
    n = y.shape[0]
    vals = np.empty(n)
    wts = np.empty(n)
    lens = np.empty(n, dtype=np.int64)
    top = -1
    for i in range(n):
        top += 1
        vals[top] = y[i]
        wts[top] = 1.0
        lens[top] = 1
        while top > 0 and vals[top - 1] < vals[top]:
            w = wts[top - 1] + wts[top]
            vals[top - 1] = (wts[top - 1] * vals[top - 1] + wts[top] * vals[top]) / w
            wts[top - 1] = w
            lens[top - 1] += lens[top]
            top -= 1
    out = np.empty(n)
    pos = 0
    for b in range(top + 1):
        for _ in range(lens[b]):
            out[pos] = vals[b]
            pos += 1
    return out


def _pava_nonincreasing_np(y):
    blocks = []  # [mean, weight, length]
    for v in y:
        blocks.append([float(v), 1.0, 1])
        while len(blocks) > 1 and blocks[-2][0] < blocks[-1][0]:
            m2, w2, l2 = blocks.pop()
            m1, w1, l1 = blocks[-1]
            w = w1 + w2
            blocks[-1] = [(w1 * m1 + w2 * m2) / w, w, l1 + l2]
    return np.concatenate([np.full(n, m) for m, _, n in blocks]) if blocks else np.empty(0)


@njit
def _band_pairs_nb(x, dp, start):
    out = x.copy()
    for t in range(start, x.shape[0] - 1, 2):
        a = x[t]
        b = x[t + 1]
        if a - b > dp:
            m = 0.5 * (a + b)
            out[t] = m + 0.5 * dp
            out[t + 1] = m - 0.5 * dp
        elif b - a > dp:
            m = 0.5 * (a + b)
            out[t] = m - 0.5 * dp
            out[t + 1] = m + 0.5 * dp
    return out


def _band_pairs_np(x, dp, start):
    out = x.copy()
    a = x[start:-1:2]
    b = x[start + 1::2]
    m = 0.5 * (a + b)
    half = 0.5 * np.clip(a - b, -dp, dp)
    bad = np.abs(a - b) > dp
    out[start:-1:2] = np.where(bad, m + half, a)
    out[start + 1::2] = np.where(bad, m - half, b)
    return out


@njit
def _repair_nb(x, p_min, p_max, dp, monotone):
    out = x.copy()
    out[0] = min(max(out[0], p_min), p_max)
    for t in range(1, out.shape[0]):
        lo = max(p_min, out[t - 1] - dp)
        hi = min(p_max, out[t - 1] + dp)
        if monotone:
            hi = min(hi, out[t - 1])
        v = min(max(out[t], lo), hi)
        # u[t-1] +- dp can round one ulp outside the band; step back towards u[t-1]
        while v - out[t - 1] > dp:
            v = np.nextafter(v, -np.inf)
        while out[t - 1] - v > dp:
            v = np.nextafter(v, np.inf)
        out[t] = v
    return out


@njit
def _dykstra_nb(x0, p_min, p_max, dp, monotone, max_iter, tol):
    n = x0.shape[0]
    nsets = 4 if monotone else 3
    incr = np.zeros((nsets, n))
    x = x0.copy()
    it = 0
    for it in range(1, max_iter + 1):
        x_prev = x.copy()
        incr_prev = incr.copy()
        for s in range(nsets):
            z = x + incr[s]
            if s == 0:
                p = np.minimum(np.maximum(z, p_min), p_max)
            elif s == 1:
                p = _band_pairs_nb(z, dp, 0)
            elif s == 2:
                p = _band_pairs_nb(z, dp, 1)
            else:
                p = _pava_nonincreasing_nb(z)
            incr[s] = z - p
            x = p
        # x alone can repeat for a cycle while the corrections still move
        if np.max(np.abs(x - x_prev)) <= tol and np.max(np.abs(incr - incr_prev)) <= tol:
            break
    return _repair_nb(x, p_min, p_max, dp, monotone), it


def _dykstra_np(x0, p_min, p_max, dp, monotone, max_iter, tol):
    projections = [
        lambda z: np.clip(z, p_min, p_max),
        lambda z: _band_pairs_np(z, dp, 0),
        lambda z: _band_pairs_np(z, dp, 1),
    ]
    if monotone:
        projections.append(_pava_nonincreasing_np)
    incr = np.zeros((len(projections), x0.shape[0]))
    x = np.array(x0, dtype=float)
    it = 0
    for it in range(1, max_iter + 1):
        x_prev = x
        incr_prev = incr.copy()
        for s, proj in enumerate(projections):
            z = x + incr[s]
            x = proj(z)
            incr[s] = z - x
        if np.max(np.abs(x - x_prev)) <= tol and np.max(np.abs(incr - incr_prev)) <= tol:
            break
    return _repair_np(x, p_min, p_max, dp, monotone), it


def _repair_np(x, p_min, p_max, dp, monotone):
    out = np.array(x, dtype=float)
    out[0] = min(max(out[0], p_min), p_max)
    for t in range(1, out.shape[0]):
        lo = max(p_min, out[t - 1] - dp)
        hi = min(p_max, out[t - 1] + dp)
        if monotone:
            hi = min(hi, out[t - 1])
        v = min(max(out[t], lo), hi)
        # u[t-1] +- dp can round one ulp outside the band; step back towards u[t-1]
        while v - out[t - 1] > dp:
            v = np.nextafter(v, -np.inf)
        while out[t - 1] - v > dp:
            v = np.nextafter(v, np.inf)
        out[t] = v
    return out


def dykstra_project(x0, p_min, p_max, dp, monotone, max_iter=500, tol=0.0):
    """Dykstra alternating projections followed by an exact feasibility pass.

    Returns ``(x, iterations)``.
    """
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    if USE_NUMBA:
        return _dykstra_nb(x0, float(p_min), float(p_max), float(dp), bool(monotone), int(max_iter), float(tol))
    return _dykstra_np(x0, float(p_min), float(p_max), float(dp), bool(monotone), int(max_iter), float(tol))


def pava_nonincreasing(y):
    """Least-squares non-increasing fit (pool adjacent violators)."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    if USE_NUMBA:
        return _pava_nonincreasing_nb(y)
    return _pava_nonincreasing_np(y)
