#!/usr/bin/env python3
"""
Dense Two-Phase Simplex
Embedded reference LP engine for small programs:
    min c @ x  s.t.  A_ub @ x <= b_ub,  A_eq @ x == b_eq,  lb <= x <= ub
Bland's rule keeps it cycle-free, so it terminates on degenerate programs.
"""

from typing import NamedTuple, Optional

import numpy as np
from scipy import sparse

PIVOT_TOL = 1e-9


class LPResult(NamedTuple):
    x: Optional[np.ndarray]
    fun: float
    status: str  # optimal | infeasible | unbounded | iteration-limit
    iterations: int


def _dense(matrix, n_cols):
    if matrix is None:
        return np.zeros((0, n_cols))
    if sparse.issparse(matrix):
        return matrix.toarray()
    return np.atleast_2d(np.asarray(matrix, dtype=float)).reshape(-1, n_cols)


def _pivot(T, basis, row, col):
    T[row] /= T[row, col]
    factor = T[:, col].copy()
    factor[row] = 0.0
    T -= np.outer(factor, T[row])
    basis[row] = col


def _iterate(T, basis, cost, allowed, max_iter, tol):
    """Primal simplex with Bland's rule on a canonical tableau"""
    iterations = 0
    while iterations < max_iter:
        reduced = cost - cost[basis] @ T[:, :-1]
        candidates = np.flatnonzero((reduced < -tol) & allowed)
        if candidates.size == 0:
            return "optimal", iterations
        col = candidates[0]
        column = T[:, col]
        positive = np.flatnonzero(column > tol)
        if positive.size == 0:
            return "unbounded", iterations
        ratios = T[positive, -1] / column[positive]
        best = ratios.min()
        ties = positive[ratios <= best + 1e-12]
        row = ties[np.argmin(basis[ties])]
        _pivot(T, basis, row, col)
        iterations += 1
    return "iteration-limit", iterations


def solve_lp_dense(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, lb=None, ub=None, max_iter=200000,
                   tol=PIVOT_TOL) -> LPResult:
    c = np.asarray(c, dtype=float)
    n = c.size
    lb = np.zeros(n) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    if np.any(ub < lb - tol):
        return LPResult(None, np.inf, "infeasible", 0)

    A_ub = _dense(A_ub, n)
    A_eq = _dense(A_eq, n)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)

    # shift to x' = x - lb >= 0; finite upper bounds become rows
    finite = np.flatnonzero(np.isfinite(ub))
    bound_rows = np.zeros((finite.size, n))
    bound_rows[np.arange(finite.size), finite] = 1.0
    A_le = np.vstack([A_ub, bound_rows])
    b_le = np.concatenate([b_ub - A_ub @ lb, (ub - lb)[finite]])
    b_e = b_eq - A_eq @ lb
    m_le, m_eq = A_le.shape[0], A_eq.shape[0]
    m = m_le + m_eq

    needs_artificial = np.concatenate([b_le < 0, np.ones(m_eq, dtype=bool)])
    art_rows = np.flatnonzero(needs_artificial)
    n_cols = n + m_le + art_rows.size
    T = np.zeros((m, n_cols + 1))
    T[:m_le, :n] = A_le
    T[np.arange(m_le), n + np.arange(m_le)] = 1.0
    T[m_le:, :n] = A_eq
    T[:m_le, -1] = b_le
    T[m_le:, -1] = b_e
    negative = T[:, -1] < 0
    T[negative] *= -1.0

    basis = np.empty(m, dtype=int)
    basis[:m_le] = n + np.arange(m_le)
    art_cols = n + m_le + np.arange(art_rows.size)
    T[art_rows, art_cols] = 1.0
    basis[art_rows] = art_cols

    iterations = 0
    if art_rows.size:
        phase1_cost = np.zeros(n_cols)
        phase1_cost[art_cols] = 1.0
        status, its = _iterate(T, basis, phase1_cost, np.ones(n_cols, dtype=bool), max_iter, tol)
        iterations += its
        if status == "iteration-limit":
            return LPResult(None, np.inf, status, iterations)
        infeasibility = phase1_cost[basis] @ T[:, -1]
        if infeasibility > tol * max(1.0, np.abs(T[:, -1]).max(initial=0.0)):
            return LPResult(None, np.inf, "infeasible", iterations)

        # drive zero-valued artificials out of the basis, drop redundant rows
        keep = np.ones(m, dtype=bool)
        for row in np.flatnonzero(basis >= n + m_le):
            candidates = np.flatnonzero(np.abs(T[row, :n + m_le]) > tol)
            if candidates.size:
                _pivot(T, basis, row, candidates[0])
            else:
                keep[row] = False
        T = np.hstack([T[keep, :n + m_le], T[keep, -1:]])
        basis = basis[keep]

    cost = np.zeros(n + m_le)
    cost[:n] = c
    status, its = _iterate(T, basis, cost, np.ones(n + m_le, dtype=bool), max_iter, tol)
    iterations += its
    if status != "optimal":
        return LPResult(None, np.inf if status != "unbounded" else -np.inf, status, iterations)

    shifted = np.zeros(n + m_le)
    shifted[basis] = T[:, -1]
    x = lb + shifted[:n]
    return LPResult(x, float(c @ x), "optimal", iterations)
