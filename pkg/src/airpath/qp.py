"""Dense convex QP solver (dual active-set method).

Solves   min_z  0.5 z'Hz + g'z   s.t.  A z <= b   with H positive
definite.  The method starts from the unconstrained minimum and adds the
most violated constraint at a time, taking dual steps that keep all
multipliers nonnegative (Goldfarb-Idnani scheme with a bordered-KKT
solve per step).  All tie-breaking picks the lowest constraint index, so
results are deterministic.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

#: a constraint counts as violated when a'z - b exceeds this
PRIMAL_FEAS_TOL = 1.0e-8


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration_limit"


@dataclass(frozen=True)
class QpResult:
    """Solution report; ``z`` is meaningful only when status is OPTIMAL."""

    z: np.ndarray
    lam: np.ndarray
    status: QpStatus
    active_set: tuple[int, ...]
    iterations: int
    kkt_residual: float


def _kkt_step(h, rows, rhs_top):
    """Solve [H N'; N 0] [dz; dw] = [rhs_top; 0] for the active rows."""
    n = h.shape[0]
    k = len(rows)
    if k == 0:
        return np.linalg.solve(h, rhs_top), np.empty(0)
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = h
    kkt[:n, n:] = rows.T
    kkt[n:, :n] = rows
    rhs = np.concatenate([rhs_top, np.zeros(k)])
    sol = np.linalg.solve(kkt, rhs)
    return sol[:n], sol[n:]


def solve_qp(h, g, a_mat=None, b_vec=None, warm_start=None,
             max_iter=None) -> QpResult:
    """Minimize 0.5 z'Hz + g'z subject to a_mat @ z <= b_vec.

    ``warm_start`` is an optional iterable of constraint indices used to
    seed the active set.  Infeasible problems are reported through the
    status flag, not an exception; only malformed inputs raise.
    """
    h = np.atleast_2d(np.asarray(h, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    n = h.shape[0]
    if h.shape != (n, n):
        raise ValueError(f"hessian must be square, got {h.shape}")
    if g.shape != (n,):
        raise ValueError(f"gradient must have shape ({n},), got {g.shape}")
    scale = max(1.0, float(np.max(np.abs(h))))
    if np.max(np.abs(h - h.T)) > 1.0e-8 * scale:
        raise ValueError("hessian must be symmetric")
    h = 0.5 * (h + h.T)
    try:
        chol = cho_factor(h)
    except np.linalg.LinAlgError as exc:
        raise ValueError("hessian must be positive definite") from exc

    z = cho_solve(chol, -g)
    if a_mat is None or b_vec is None or len(b_vec) == 0:
        return QpResult(z=z, lam=np.empty(0), status=QpStatus.OPTIMAL,
                        active_set=(), iterations=0,
                        kkt_residual=float(np.max(np.abs(h @ z + g))))

    a_mat = np.atleast_2d(np.asarray(a_mat, dtype=float))
    b_vec = np.atleast_1d(np.asarray(b_vec, dtype=float))
    m_c = a_mat.shape[0]
    if a_mat.shape != (m_c, n):
        raise ValueError(f"constraint matrix must be ({m_c}, {n}), "
                         f"got {a_mat.shape}")
    if b_vec.shape != (m_c,):
        raise ValueError(f"constraint bound must have shape ({m_c},), "
                         f"got {b_vec.shape}")
    if max_iter is None:
        max_iter = 10 * (m_c + n) + 100

    lam = np.zeros(m_c)
    active: list[int] = []

    if warm_start:
        active = sorted({int(i) for i in warm_start})
        for idx in active:
            if not 0 <= idx < m_c:
                raise ValueError(f"warm-start index {idx} out of range")
        # hold the seeded set as equalities, dropping rows that come out
        # dependent or with a negative multiplier, then optimize as usual
        while active:
            rows = a_mat[active]
            kkt = np.zeros((n + len(active), n + len(active)))
            kkt[:n, :n] = h
            kkt[:n, n:] = rows.T
            kkt[n:, :n] = rows
            rhs = np.concatenate([-g, b_vec[active]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                active.pop()
                continue
            z_try, w_try = sol[:n], sol[n:]
            if not np.all(np.isfinite(z_try)):
                active.pop()
                continue
            neg = [k for k, w in enumerate(w_try) if w < 0.0]
            if not neg:
                z = z_try
                lam[:] = 0.0
                for k, idx in enumerate(active):
                    lam[idx] = w_try[k]
                break
            drop = min(neg, key=lambda k: active[k])
            active.pop(drop)
        if not active:
            z = cho_solve(chol, -g)
            lam[:] = 0.0

    status = QpStatus.ITERATION_LIMIT
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        slack = a_mat @ z - b_vec
        slack[active] = 0.0
        worst = int(np.argmax(slack))
        if slack[worst] <= PRIMAL_FEAS_TOL:
            status = QpStatus.OPTIMAL
            break
        p_row = a_mat[worst]
        lam_p = 0.0
        infeasible = False
        while iterations < max_iter:
            rows = a_mat[active] if active else np.empty((0, n))
            dz, dw = _kkt_step(h, rows, -p_row)
            adz = float(p_row @ dz)

            t_full = np.inf
            if adz < -1.0e-13:
                t_full = (float(p_row @ z) - b_vec[worst]) / (-adz)
            t_block, blocker = np.inf, -1
            for k, idx in enumerate(active):
                if dw[k] < -1.0e-13:
                    t_k = -lam[idx] / dw[k]
                    if t_k < t_block - 1.0e-15 or (
                            abs(t_k - t_block) <= 1.0e-15 and idx < blocker):
                        t_block, blocker = t_k, idx
            if not np.isfinite(t_full) and not np.isfinite(t_block):
                infeasible = True
                break
            t = min(t_full, t_block)
            z = z + t * dz
            lam_p += t
            for k, idx in enumerate(active):
                lam[idx] += t * dw[k]
            if t_full <= t_block:
                lam[worst] = lam_p
                active.append(worst)
                break
            iterations += 1
            lam[blocker] = 0.0
            active.remove(blocker)
        if infeasible:
            status = QpStatus.INFEASIBLE
            break

    kkt_residual = float(np.max(np.abs(h @ z + g + a_mat.T @ lam)))
    return QpResult(z=z, lam=lam.copy(), status=status,
                    active_set=tuple(sorted(active)), iterations=iterations,
                    kkt_residual=kkt_residual)
