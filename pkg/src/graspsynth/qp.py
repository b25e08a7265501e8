"""Operator-splitting solver for box/linear-inequality quadratic programs.

Solves   min 0.5 x'Px + q'x   s.t.  l <= Ax <= u
with an ADMM iteration on the split variable z = Ax (Ruiz equilibration,
adaptive penalty), plus an active-set polish that solves a regularized KKT
system with iterative refinement to push the KKT residual to tight
tolerance. Dense and deterministic; problems here are small (tens of
variables, low hundreds of rows).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import SolverFailure

DEFAULT_EPS = 1e-8
DEFAULT_MAX_ITER = 20000


@dataclass
class QPSolution:
    x: np.ndarray
    y: np.ndarray  # constraint multipliers; negative pairs with l, positive with u
    iterations: int
    kkt_residual: float
    polished: bool


def _kkt_residual(P, q, A, l, u, x, y):
    """Scaled max of stationarity, primal feasibility, and complementarity residuals.

    Each term is normalized by the magnitude of its own ingredients (floored
    at 1), so the tolerance behaves absolutely on well-scaled problems and
    relatively when forces or multipliers grow large.
    """
    Px = P @ x
    Aty = A.T @ y if len(y) else np.zeros_like(q)
    # scale by the intermediate product magnitudes: cancellation limits the
    # attainable absolute residual to roughly eps_mach times these
    stat_scale = max(1.0, np.max(np.abs(P) @ np.abs(x), initial=0.0),
                     np.max(np.abs(q), initial=0.0),
                     np.max(np.abs(A.T) @ np.abs(y), initial=0.0) if len(y) else 0.0)
    stat = np.max(np.abs(Px + q + Aty), initial=0.0) / stat_scale
    if not len(y):
        return stat
    z = A @ x
    prim_scale = max(1.0, np.max(np.abs(A) @ np.abs(x), initial=0.0))
    prim = max(np.max(np.maximum(l - z, 0.0), initial=0.0),
               np.max(np.maximum(z - u, 0.0), initial=0.0)) / prim_scale
    low_gap = np.where(np.isfinite(l), z - l, np.inf)
    up_gap = np.where(np.isfinite(u), u - z, np.inf)
    comp_low = np.where(y < 0, -y * np.minimum(low_gap, 1.0), 0.0)
    comp_up = np.where(y > 0, y * np.minimum(up_gap, 1.0), 0.0)
    comp_scale = max(1.0, np.max(np.abs(y), initial=0.0))
    comp = max(np.max(comp_low, initial=0.0), np.max(comp_up, initial=0.0)) / comp_scale
    return max(stat, prim, comp)


def _solve_active_kkt(P, q, A, l, u, low_act, up_act, eq, delta=1e-9, refine_steps=12):
    """Solve the equality-constrained QP on a fixed active set.

    Uses a quasi-definite +delta/-delta regularization with iterative
    refinement against the unregularized KKT matrix, so degenerate
    (duplicate or rank-deficient) active sets stay solvable.
    """
    n = len(q)
    rows = np.nonzero(eq | low_act | up_act)[0]
    if len(rows) == 0:
        x_p = np.linalg.lstsq(P + delta * np.eye(n), -q, rcond=None)[0]
        return x_p, np.zeros(len(l))
    b = np.where(eq[rows] | low_act[rows], l[rows], u[rows])
    A_act = A[rows]
    k = len(rows)
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P + delta * np.eye(n)
    K[:n, n:] = A_act.T
    K[n:, :n] = A_act
    K[n:, n:] = -delta * np.eye(k)
    rhs = np.concatenate([-q, b])
    factors = lu_factor(K)
    sol = lu_solve(factors, rhs)
    K0 = K.copy()
    K0[:n, :n] = P
    K0[n:, n:] = 0.0
    for _ in range(refine_steps):
        sol = sol + lu_solve(factors, rhs - K0 @ sol)
    x_p = sol[:n]
    y_p = np.zeros(len(l))
    y_p[rows] = sol[n:]
    y_p[np.abs(y_p) < 1e-12] = 0.0
    return x_p, y_p


def _polish(P, q, A, l, u, x, y, z, act_tol):
    """One-shot polish: solve the KKT system on the active set guessed from ADMM."""
    eq = np.isfinite(l) & np.isfinite(u) & (np.abs(u - l) < 1e-14)
    low_act = np.isfinite(l) & ((z - l < act_tol) | (y < -act_tol)) & ~eq
    up_act = np.isfinite(u) & ((u - z < act_tol) | (y > act_tol)) & ~eq
    try:
        return _solve_active_kkt(P, q, A, l, u, low_act, up_act, eq)
    except Exception:
        return x, y


def _active_set_solve(P, q, A, l, u, x0, max_pivots=500, feas_eps=1e-9, sign_eps=1e-10):
    """Primal active-set QP solve from a feasible start.

    Single add/drop pivots with ratio tests; lowest-index tie-breaking keeps
    degenerate vertices from cycling. Returns (x, y) at the exact optimum,
    or the last iterate when the pivot budget runs out.
    """
    m = len(l)
    x = np.asarray(x0, dtype=float).copy()
    z = A @ x
    eq = np.isfinite(l) & np.isfinite(u) & (np.abs(u - l) < 1e-14)
    low_W = np.isfinite(l) & (z - l <= feas_eps) & ~eq
    up_W = np.isfinite(u) & (u - z <= feas_eps) & ~eq & ~low_W
    y_full = np.zeros(m)
    for _ in range(max_pivots):
        x_c, y_c = _solve_active_kkt(P, q, A, l, u, low_W, up_W, eq)
        p = x_c - x
        if np.max(np.abs(p), initial=0.0) <= 1e-11:
            # EQP optimum reached: verify multiplier signs, drop one offender
            bad_low = low_W & (y_c > sign_eps)
            bad_up = up_W & (y_c < -sign_eps)
            offenders = np.nonzero(bad_low | bad_up)[0]
            if len(offenders) == 0:
                return x_c, y_c
            drop = offenders[0]
            low_W[drop] = False
            up_W[drop] = False
            x = x_c
            y_full = y_c
            continue
        # ratio test against rows outside the working set
        Ap = A @ p
        free = ~(low_W | up_W | eq)
        alpha = 1.0
        block = -1
        block_side = 0
        idx = np.nonzero(free)[0]
        for i in idx:
            if Ap[i] > 1e-13 and np.isfinite(u[i]):
                ratio = max((u[i] - z[i]) / Ap[i], 0.0)
                if ratio < alpha - 1e-15:
                    alpha, block, block_side = ratio, i, +1
            elif Ap[i] < -1e-13 and np.isfinite(l[i]):
                ratio = max((l[i] - z[i]) / Ap[i], 0.0)
                if ratio < alpha - 1e-15:
                    alpha, block, block_side = ratio, i, -1
        x = x + alpha * p
        z = z + alpha * Ap
        y_full = y_c
        if block >= 0:
            if block_side > 0:
                up_W[block] = True
            else:
                low_W[block] = True
    return x, y_full


def solve_qp(P, q, A=None, l=None, u=None, *, eps=DEFAULT_EPS, max_iter=DEFAULT_MAX_ITER,
             rho=0.1, sigma=1e-9, alpha=1.6, check_every=25, raise_on_failure=True,
             x0=None):
    """Solve the QP; returns QPSolution or raises SolverFailure on budget exhaustion.

    A may be None for an unconstrained problem. Infinite bounds are allowed
    row-wise; equality rows use l == u. x0, when given, must be primal
    feasible; it seeds the active-set fallback used when the splitting
    iteration stalls short of tolerance.
    """
    q = np.asarray(q, dtype=float)
    n = len(q)
    P = np.asarray(P, dtype=float)
    if A is None or len(A) == 0:
        A = np.zeros((0, n))
        l = np.zeros(0)
        u = np.zeros(0)
    A = np.asarray(A, dtype=float)
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    m = len(l)

    if m == 0:
        x = np.linalg.lstsq(P + sigma * np.eye(n), -q, rcond=None)[0]
        res = _kkt_residual(P, q, A, l, u, x, np.zeros(0))
        if res >= eps and raise_on_failure:
            raise SolverFailure(f"unconstrained solve residual {res:.2e} > {eps:.0e}")
        return QPSolution(x, np.zeros(0), 1, res, polished=False)

    # Ruiz-style equilibration; D scales variables, E scales constraint rows.
    D = np.ones(n)
    E = np.ones(m)
    Ps, As = P.copy(), A.copy()
    for _ in range(10):
        col_norm = np.sqrt(np.maximum(
            np.max(np.abs(Ps), axis=0, initial=0.0),
            np.max(np.abs(As), axis=0, initial=0.0)))
        col_norm[col_norm < 1e-8] = 1.0
        d = 1.0 / col_norm
        Ps = Ps * d[None, :] * d[:, None]
        As = As * d[None, :]
        D *= d
        row_norm = np.sqrt(np.max(np.abs(As), axis=1, initial=0.0))
        row_norm[row_norm < 1e-8] = 1.0
        e = 1.0 / row_norm
        As = As * e[:, None]
        E *= e
    qs = q * D
    ls = l * E
    us = u * E

    eq_rows = np.isfinite(ls) & np.isfinite(us) & (np.abs(us - ls) < 1e-14)

    def make_rho_vec(r):
        rv = np.full(m, r)
        rv[eq_rows] = r * 1e3
        return rv

    def factor(rv):
        KKT = np.zeros((n + m, n + m))
        KKT[:n, :n] = Ps + sigma * np.eye(n)
        KKT[:n, n:] = As.T
        KKT[n:, :n] = As
        KKT[n:, n:] = -np.diag(1.0 / rv)
        return lu_factor(KKT)

    rho_cur = rho
    rho_vec = make_rho_vec(rho_cur)
    factors = factor(rho_vec)
    x = np.zeros(n)
    z = np.clip(np.zeros(m), ls, us)
    y = np.zeros(m)
    best = None

    def consider(x_u, y_u):
        nonlocal best
        res = _kkt_residual(P, q, A, l, u, x_u, y_u)
        if best is None or res < best[2]:
            best = (x_u, y_u, res)
        return res

    for it in range(1, max_iter + 1):
        rhs = np.concatenate([sigma * x - qs, z - y / rho_vec])
        sol = lu_solve(factors, rhs)
        x_t = sol[:n]
        nu = sol[n:]
        z_t = z + (nu - y) / rho_vec
        x = alpha * x_t + (1 - alpha) * x
        z_r = alpha * z_t + (1 - alpha) * z
        z = np.clip(z_r + y / rho_vec, ls, us)
        y = y + rho_vec * (z_r - z)

        if it % check_every == 0 or it == max_iter:
            x_u = D * x
            y_u = E * y
            res = consider(x_u, y_u)
            if res < eps:
                return QPSolution(x_u, y_u, it, res, polished=False)
            if it % (check_every * 4) == 0 or res < 1e3 * eps:
                x_p, y_p = _polish(P, q, A, l, u, x_u, y_u, A @ x_u,
                                   act_tol=max(res * 10, 1e-9))
                res_p = consider(x_p, y_p)
                if res_p < eps:
                    return QPSolution(x_p, y_p, it, res_p, polished=True)
            if it % 2000 == 0:
                seed = x0 if x0 is not None else best[0]
                zb = A @ seed
                viol = max(np.max(np.maximum(l - zb, 0.0), initial=0.0),
                           np.max(np.maximum(zb - u, 0.0), initial=0.0))
                x_p, y_p = _active_set_solve(P, q, A, l, u, seed,
                                             feas_eps=max(1e-9, 2.0 * viol))
                res_p = consider(x_p, y_p)
                if res_p < eps:
                    return QPSolution(x_p, y_p, it, res_p, polished=True)
            # adaptive penalty: rebalance primal vs dual progress
            if it % 100 == 0:
                zs = As @ x
                prim = np.max(np.abs(zs - z), initial=0.0)
                prim_ref = max(np.max(np.abs(zs), initial=0.0),
                               np.max(np.abs(z), initial=0.0), 1e-10)
                dual = np.max(np.abs(Ps @ x + qs + As.T @ y), initial=0.0)
                dual_ref = max(np.max(np.abs(Ps @ x), initial=0.0),
                               np.max(np.abs(As.T @ y), initial=0.0),
                               np.max(np.abs(qs), initial=0.0), 1e-10)
                ratio = np.sqrt((prim / prim_ref) / max(dual / dual_ref, 1e-16))
                if ratio > 5.0 or ratio < 0.2:
                    rho_cur = float(np.clip(rho_cur * ratio, 1e-6, 1e6))
                    rho_vec = make_rho_vec(rho_cur)
                    factors = factor(rho_vec)

    x_u, y_u, res = best
    if res >= eps:
        # last resort: pivot from the caller's feasible point, else from the
        # (near-feasible) splitting iterate with a loosened feasibility skin
        seed = x0 if x0 is not None else best[0]
        zb = A @ seed
        viol = max(np.max(np.maximum(l - zb, 0.0), initial=0.0),
                   np.max(np.maximum(zb - u, 0.0), initial=0.0))
        x_p, y_p = _active_set_solve(P, q, A, l, u, seed, max_pivots=2000,
                                     feas_eps=max(1e-9, 2.0 * viol))
        res_p = consider(x_p, y_p)
        if res_p < res:
            x_u, y_u, res = x_p, y_p, res_p
    if res < eps:
        return QPSolution(x_u, y_u, max_iter, res, polished=True)
    if raise_on_failure:
        raise SolverFailure(
            f"QP solver hit the {max_iter}-iteration cap with KKT residual {res:.2e} > {eps:.0e}")
    return QPSolution(x_u, y_u, max_iter, res, polished=False)
