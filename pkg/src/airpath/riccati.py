"""Discrete-time Riccati solver and LQR gain for the terminal penalty.

The solver runs a structure-preserving doubling iteration and checks the
fixed-point residual; if doubling stalls (e.g. very ill-conditioned data)
a plain Riccati recursion is used as a fallback before giving up.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

#: maximum allowed infinity-norm fixed-point residual of a returned solution
DARE_RESIDUAL_TOL = 1.0e-9


def _as_square(mat, name) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(mat, dtype=float))
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be square, got shape {arr.shape}")
    return arr


def _check_symmetric(mat, name) -> np.ndarray:
    scale = max(1.0, float(np.max(np.abs(mat))))
    if np.max(np.abs(mat - mat.T)) > 1.0e-8 * scale:
        raise ValueError(f"{name} must be symmetric")
    return 0.5 * (mat + mat.T)


def dare_residual(a, b, q, r, p) -> float:
    """Infinity norm of the fixed-point defect of a candidate solution."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    with np.errstate(over="ignore", invalid="ignore"):
        bpa = b.T @ p @ a
        gain_term = a.T @ p @ b @ np.linalg.solve(r + b.T @ p @ b, bpa)
        defect = p - (a.T @ p @ a - gain_term + q)
    value = np.max(np.abs(defect))
    return float(value) if np.isfinite(value) else np.inf


def _doubling(a, g, h, max_iter=100):
    """Doubling iteration; returns the h limit (the Riccati solution)."""
    eye = np.eye(a.shape[0])
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            m = np.linalg.solve(eye + g @ h, np.column_stack([a, g]))
            ma = m[:, :a.shape[0]]
            mg = m[:, a.shape[0]:]
            a_next = a @ ma
            g_next = g + a @ mg @ a.T
            h_next = h + a.T @ h @ ma
            delta = np.max(np.abs(h_next - h))
            a, g, h = a_next, g_next, h_next
            if not np.all(np.isfinite(h)):
                raise np.linalg.LinAlgError("doubling iteration diverged")
            if delta <= 1.0e-14 * max(1.0, np.max(np.abs(h))):
                break
    return 0.5 * (h + h.T)


def _recursion(a, b, q, r, max_iter=100000):
    p = q.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            bpb = r + b.T @ p @ b
            bpa = b.T @ p @ a
            p_next = q + a.T @ p @ a - a.T @ p @ b @ np.linalg.solve(bpb, bpa)
            p_next = 0.5 * (p_next + p_next.T)
            if not np.all(np.isfinite(p_next)):
                return p
            if np.max(np.abs(p_next - p)) <= 1.0e-13 * max(1.0, np.max(np.abs(p_next))):
                return p_next
            p = p_next
    return p


def _newton_polish(a, b, q, r, p, iters=3):
    """Kleinman refinement: re-solve the closed-loop Lyapunov equation.

    Each step needs a stabilizing gain, which a near-solution provides;
    the best iterate by fixed-point residual is kept, so a bad step can
    never make the returned solution worse.
    """
    n = a.shape[0]
    best_p, best_res = p, dare_residual(a, b, q, r, p)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(iters):
            try:
                k = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
                acl = a - b @ k
                if np.max(np.abs(np.linalg.eigvals(acl))) >= 1.0:
                    break  # refinement needs a stabilizing gain
                rhs = q + k.T @ r @ k
                if n <= 30:
                    lhs = np.eye(n * n) - np.kron(acl.T, acl.T)
                    p = np.linalg.solve(lhs, rhs.flatten(order="F")).reshape(
                        (n, n), order="F")
                else:
                    p = _doubling(acl, np.zeros_like(q), rhs)
            except np.linalg.LinAlgError:
                break
            p = 0.5 * (p + p.T)
            if not np.all(np.isfinite(p)):
                break
            res = dare_residual(a, b, q, r, p)
            if not np.isfinite(res):
                break
            if res < best_res:
                best_p, best_res = p, res
    return best_p, best_res


def solve_dare(a, b, q, r) -> np.ndarray:
    """Stabilizing solution P of  P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q.

    Q must be symmetric positive semidefinite and R symmetric positive
    definite.  Raises RuntimeError when no solution satisfying the
    residual tolerance can be computed (e.g. unstabilizable dynamics).
    """
    a = _as_square(a, "a")
    q = _check_symmetric(_as_square(q, "q"), "q")
    r_mat = _check_symmetric(_as_square(r, "r"), "r")
    b = np.asarray(b, dtype=float)
    if b.ndim == 0:
        b = b.reshape(1, 1)
    elif b.ndim == 1:
        b = b.reshape(-1, 1)
    n, m = b.shape
    if n != a.shape[0]:
        raise ValueError(f"b must have {a.shape[0]} rows, got {b.shape}")
    if r_mat.shape != (m, m):
        raise ValueError(f"r must be {m}x{m} to match b, got {r_mat.shape}")
    if q.shape != a.shape:
        raise ValueError(f"q must match a ({a.shape}), got {q.shape}")
    q_eigs = np.linalg.eigvalsh(q)
    if q_eigs[0] < -1.0e-8 * max(1.0, q_eigs[-1]):
        raise ValueError(f"q must be positive semidefinite "
                         f"(min eigenvalue {q_eigs[0]:.3e})")
    try:
        r_chol = cho_factor(r_mat)
    except np.linalg.LinAlgError as exc:
        raise ValueError("r must be positive definite") from exc

    g = b @ cho_solve(r_chol, b.T)
    try:
        p, residual = _newton_polish(a, b, q, r_mat, _doubling(a, g, q))
    except np.linalg.LinAlgError:
        residual = np.inf
        p = None
    if not residual <= DARE_RESIDUAL_TOL:
        p, residual = _newton_polish(a, b, q, r_mat, _recursion(a, b, q, r_mat))
        if not residual <= DARE_RESIDUAL_TOL:
            raise RuntimeError(
                f"Riccati solution did not converge (residual {residual:.3e})")
    # The fixed-point equation also has non-stabilizing roots; only the
    # solution whose implied feedback makes A - BK Schur stable is valid.
    k = np.linalg.solve(r_mat + b.T @ p @ b, b.T @ p @ a)
    closed_loop_radius = np.max(np.abs(np.linalg.eigvals(a - b @ k)))
    if closed_loop_radius >= 1.0:
        raise RuntimeError(
            f"Riccati solution did not converge (closed-loop spectral "
            f"radius {closed_loop_radius:.6f})")
    return p


def dlqr(a, b, q, r) -> tuple[np.ndarray, np.ndarray]:
    """Infinite-horizon LQR gain K and cost matrix P.

    The optimal state feedback is u = -K x; K = (R + B'PB)^-1 B'PA.
    """
    p = solve_dare(a, b, q, r)
    a_sq = _as_square(a, "a")
    b_mat = np.asarray(b, dtype=float)
    if b_mat.ndim == 0:
        b_mat = b_mat.reshape(1, 1)
    elif b_mat.ndim == 1:
        b_mat = b_mat.reshape(-1, 1)
    r_mat = np.atleast_2d(np.asarray(r, dtype=float))
    k = np.linalg.solve(r_mat + b_mat.T @ p @ b_mat, b_mat.T @ p @ a_sq)
    return k, p
