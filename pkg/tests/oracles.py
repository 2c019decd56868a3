"""Independent reference implementations used only by the tests.

Nothing here imports the package's numerics: geometry, assembly and solves
are redone with scipy.sparse / cvxopt so agreement means something.
"""
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from cvxopt import matrix, solvers

solvers.options["show_progress"] = False
solvers.options["abstol"] = 1e-14
solvers.options["reltol"] = 1e-14
solvers.options["feastol"] = 1e-14
solvers.options["maxiters"] = 200


def qp_project(x0, p_min, p_max, dp, monotone=False):
    """Euclidean projection by a generic QP solver, rescaled to [0, 1]."""
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    r = p_max - p_min
    y0 = (x0 - p_min) / r
    rows, h = [], []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        rows += [e, -e]
        h += [1.0, 0.0]
    for i in range(n - 1):
        d = np.zeros(n)
        d[i + 1], d[i] = 1.0, -1.0
        rows += [d, -d]
        h += [dp / r, dp / r]
        if monotone:
            rows.append(d)
            h.append(0.0)
    G = matrix(np.array(rows))
    sol = solvers.qp(matrix(np.eye(n)), matrix(-y0), G, matrix(np.array(h, dtype=float)))
    return p_min + r * np.array(sol["x"]).ravel()


def control_ends(horizon_s, n, ratio):
    lengths = ratio ** np.arange(n)
    return np.cumsum(lengths / lengths.sum() * horizon_s)


def flow_only_reference(cfg, bhp, substeps=None):
    """Backward-Euler flow with frozen k0 on the same grid, via scipy.sparse.

    Returns cumulative production at the end of each control step.
    """
    nx, ny = cfg.nx, cfg.ny
    n = nx * ny
    frac = nx // 2 if cfg.fracture_ix < 0 else cfg.fracture_ix
    k = np.empty(n)
    phi = np.empty(n)
    for ix in range(nx):
        for iy in range(ny):
            c = ix * ny + iy
            d = abs(ix - frac)
            if d == 0:
                k[c], phi[c] = cfg.k0_propped, cfg.phi_propped
            elif d <= cfg.halo_width:
                k[c], phi[c] = cfg.k0_unpropped, cfg.phi_unpropped
            else:
                k[c], phi[c] = cfg.k0_matrix, cfg.phi_matrix
    V = cfg.dx * cfg.dy * cfg.thickness
    cv = phi * cfg.ct * V
    rows, cols, vals = [], [], []
    for ix in range(nx):
        for iy in range(ny):
            c = ix * ny + iy
            for jx, jy, area, dist in ((ix + 1, iy, cfg.dy * cfg.thickness, cfg.dx),
                                       (ix, iy + 1, cfg.dx * cfg.thickness, cfg.dy)):
                if jx >= nx or jy >= ny:
                    continue
                d = jx * ny + jy
                kf = 2 * k[c] * k[d] / (k[c] + k[d])
                t = area / dist * kf / cfg.mu
                rows += [c, d, c, d]
                cols += [c, d, d, c]
                vals += [t, t, -t, -t]
    Tm = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    wx = frac if cfg.well_ix < 0 else cfg.well_ix
    wy = ny // 2 if cfg.well_iy < 0 else cfg.well_iy
    w = wx * ny + wy
    wi = 2 * math.pi * cfg.thickness / math.log(0.14 * math.hypot(cfg.dx, cfg.dy) / cfg.well_radius)
    J = wi * k[w] / cfg.mu
    ends = control_ends(cfg.horizon_days * 86400.0, cfg.n_control, cfg.step_ratio)
    starts = np.concatenate([[0.0], ends[:-1]])
    m = cfg.substeps if substeps is None else substeps
    p = np.full(n, cfg.p_init)
    cum = 0.0
    out = []
    for t0, t1, pw in zip(starts, ends, bhp):
        dt = (t1 - t0) / m
        for _ in range(m):
            A = (Tm + sp.diags(cv / dt)).tolil()
            A[w, w] += J
            b = cv / dt * p
            b[w] += J * pw
            p_new = spla.spsolve(A.tocsc(), b)
            rate = J * (p_new[w] - pw)
            if cfg.rate_clamp and rate < 0:
                p_new = spla.spsolve((Tm + sp.diags(cv / dt)).tocsc(), cv / dt * p)
                rate = 0.0
            p = p_new
            cum += rate * dt
        out.append(cum)
    return np.array(out)


def tank_decline(p0, bhp, tau, t):
    """Closed-form single-cell pressure: bhp + (p0 - bhp) exp(-t / tau)."""
    return bhp + (p0 - bhp) * np.exp(-np.asarray(t) / tau)
