"""Rate-based predictive tracking controller with a Riccati terminal penalty.

The controller decides input *increments* du_0..du_{N-1} rather than
absolute inputs, so constant disturbances and model offsets are rejected
without a separate integrator: integral action is built into the rate
form.  Each 20 ms step it

1. schedules the lattice model at the current operating point,
2. forms the composite tracking state  zeta = [dx; e]  from
   dx = x_k - x_{k-1} and e = x_k - r_k,
3. condenses the N-step prediction into a dense QP over
   z = [du_0 .. du_{N-1}; eps], where the two-channel slack eps softens
   the state bounds (shared across the horizon) while the input bounds
   stay hard, and
4. applies u_k = u_bar_{k-1} + du_0 with
   u_bar_{k-1} = u_{k-1} + u_ff_k - u_ff_{k-1}, so feedforward moves pass
   straight through to the plant and feedback only shapes the remainder.

The terminal penalty is the fixed point of the discrete Riccati equation
for the composite dynamics; with inactive constraints the first move
converges to the corresponding infinite-horizon feedback as the horizon
grows.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import MpcSettings
from .lpv import LpvModel, ScheduledModel
from .plant import ActuatorInput, OperatingPoint
from .qp import QpStatus, solve_qp
from .riccati import solve_dare

__all__ = [
    "ExtendedState",
    "MpcConfig",
    "MpcController",
    "MpcSolution",
    "QpProblem",
    "StepDiagnostics",
    "build_extended",
    "build_qp",
    "mpc_step",
    "solve_tracking_qp",
    "terminal_penalty",
    "tracking_dynamics",
]

_N_STATES = 2
_N_INPUTS = 2


def _as_vector(value, size: int, name: str) -> np.ndarray:
    vec = np.asarray(value, dtype=float)
    if vec.shape != (size,):
        raise ValueError(f"{name} must have shape ({size},), got {vec.shape}")
    return vec


def _input_vector(value) -> np.ndarray:
    if isinstance(value, ActuatorInput):
        return np.array([value.egr_pos, value.vgt_pos])
    return _as_vector(value, _N_INPUTS, "input")


def _weight_matrix(value, name: str) -> np.ndarray:
    mat = np.asarray(value, dtype=float)
    if mat.shape != (_N_STATES, _N_STATES):
        raise ValueError(f"{name} must be {_N_STATES}x{_N_STATES}, "
                         f"got {mat.shape}")
    scale = max(1.0, float(np.max(np.abs(mat))))
    if np.max(np.abs(mat - mat.T)) > 1.0e-12 * scale:
        raise ValueError(f"{name} must be symmetric")
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, weights, and bounds of the incremental tracking QP.

    ``mu`` penalizes the shared state-bound slack; when omitted it is
    derived as 1e4 times the largest eigenvalue of ``q_e`` so the slack
    only activates when the bounds are otherwise unreachable.  ``r`` is
    always 2x2: the controller commands the two valve channels, and any
    extra model input column (fuel) is eliminated before the QP is built.
    """

    horizon: int = 50
    q_e: np.ndarray = field(default_factory=lambda: np.diag([1.0, 25.0]))
    r: np.ndarray = field(default_factory=lambda: np.diag([0.02, 0.02]))
    mu: float | None = None
    x_min: np.ndarray = field(default_factory=lambda: np.array([0.9, 0.0]))
    x_max: np.ndarray = field(default_factory=lambda: np.array([3.0, 0.6]))
    u_min: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([100.0, 100.0]))
    dt: float = 0.02
    solver_max_iter: int | None = None

    def __post_init__(self):
        if not isinstance(self.horizon, (int, np.integer)) or self.horizon < 1:
            raise ValueError(f"horizon must be a positive integer, "
                             f"got {self.horizon!r}")
        q_e = _weight_matrix(self.q_e, "q_e")
        q_eigs = np.linalg.eigvalsh(q_e)
        if q_eigs[0] < -1.0e-12 * max(1.0, q_eigs[-1]):
            raise ValueError(f"q_e must be positive semidefinite "
                             f"(min eigenvalue {q_eigs[0]:.3e})")
        r = _weight_matrix(self.r, "r")
        if np.linalg.eigvalsh(r)[0] <= 0.0:
            raise ValueError("r must be positive definite")
        mu = self.mu
        if mu is None:
            mu = 1.0e4 * q_eigs[-1] if q_eigs[-1] > 0.0 else 1.0e4
        mu = float(mu)
        if not mu > 0.0:
            raise ValueError(f"mu must be positive, got {mu}")
        x_min = _as_vector(self.x_min, _N_STATES, "x_min")
        x_max = _as_vector(self.x_max, _N_STATES, "x_max")
        u_min = _as_vector(self.u_min, _N_INPUTS, "u_min")
        u_max = _as_vector(self.u_max, _N_INPUTS, "u_max")
        if not np.all(x_min < x_max):
            raise ValueError("x_min must be elementwise below x_max")
        if not np.all(u_min < u_max):
            raise ValueError("u_min must be elementwise below u_max")
        if not float(self.dt) > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.solver_max_iter is not None and self.solver_max_iter < 1:
            raise ValueError("solver_max_iter must be at least 1")
        for name, arr in (("q_e", q_e), ("r", r), ("x_min", x_min),
                          ("x_max", x_max), ("u_min", u_min),
                          ("u_max", u_max)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "dt", float(self.dt))

    @classmethod
    def from_settings(cls, settings: MpcSettings) -> "MpcConfig":
        """Build from the flat configuration-file section."""
        lam = max(settings.q_diag)
        mu = settings.mu_scale * lam if lam > 0.0 else settings.mu_scale
        return cls(horizon=settings.horizon,
                   q_e=np.diag(settings.q_diag),
                   r=np.diag(settings.r_diag),
                   mu=mu,
                   x_min=np.array(settings.x_min),
                   x_max=np.array(settings.x_max),
                   u_min=np.array(settings.u_min),
                   u_max=np.array(settings.u_max),
                   dt=settings.dt)


@dataclass(frozen=True)
class ExtendedState:
    """Controller memory stacked as [dx; e; x_prev; u_prev] (dimension 8)."""

    dx: np.ndarray
    e: np.ndarray
    x_prev: np.ndarray
    u_prev: np.ndarray

    def __post_init__(self):
        for name in ("dx", "e", "x_prev", "u_prev"):
            vec = _as_vector(getattr(self, name), _N_STATES, name)
            vec.flags.writeable = False
            object.__setattr__(self, name, vec)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dx, self.e, self.x_prev, self.u_prev])


def build_extended(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Block dynamics of [dx; e; x_prev; u_prev] driven by the increment du.

    Row blocks: dx' = A dx + B du;  e' = A dx + e + B du;
    x_prev' = x_prev + dx;  u_prev' = u_prev + du.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"a must be square, got {a.shape}")
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ValueError(f"b must have one row per state, got {b.shape}")
    n, m = b.shape
    dim = 3 * n + m
    a_ext = np.zeros((dim, dim))
    a_ext[:n, :n] = a
    a_ext[n:2 * n, :n] = a
    a_ext[n:2 * n, n:2 * n] = np.eye(n)
    a_ext[2 * n:3 * n, :n] = np.eye(n)
    a_ext[2 * n:3 * n, 2 * n:3 * n] = np.eye(n)
    a_ext[3 * n:, 3 * n:] = np.eye(m)
    b_ext = np.zeros((dim, m))
    b_ext[:n] = b
    b_ext[n:2 * n] = b
    b_ext[3 * n:] = np.eye(m)
    return a_ext, b_ext


def tracking_dynamics(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Dynamics of the cost-carrying composite block zeta = [dx; e]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"a must be square, got {a.shape}")
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ValueError(f"b must have one row per state, got {b.shape}")
    n = a.shape[0]
    a_bar = np.block([[a, np.zeros((n, n))], [a, np.eye(n)]])
    b_bar = np.vstack([b, b])
    return a_bar, b_bar


def terminal_penalty(a, b, q_e, r) -> np.ndarray:
    """Riccati fixed-point cost of the composite [dx; e] dynamics.

    The tracking-error block of zeta integrates the state increments, so
    a stabilizing solution exists only when every error channel carries
    weight.  An identically zero ``q_e`` makes the tracking cost zero
    everywhere, so the penalty degenerates to zero as well.
    """
    q_e = np.asarray(q_e, dtype=float)
    n = np.asarray(a).shape[0]
    if not np.any(q_e):
        return np.zeros((2 * n, 2 * n))
    a_bar, b_bar = tracking_dynamics(a, b)
    q_bar = np.zeros((2 * n, 2 * n))
    q_bar[n:, n:] = q_e
    return solve_dare(a_bar, b_bar, q_bar, r)


@dataclass(frozen=True)
class QpProblem:
    """Condensed tracking QP over z = [du_0 .. du_{N-1}; eps].

    Constraint rows are ordered: state upper bounds (2N, slack-relaxed),
    state lower bounds (2N, slack-relaxed), slack nonnegativity (2), input
    upper bounds (2N, hard), input lower bounds (2N, hard).  ``f0`` is the
    stacked response of [dx; e] to zero solved increments — it includes
    the feedforward increment applied this period — and ``g`` maps the
    stacked increments onto it, so predictions are ``f0 + g @ z[:2N]``.
    """

    hessian: np.ndarray
    gradient: np.ndarray
    a_mat: np.ndarray
    b_vec: np.ndarray
    horizon: int
    x_k: np.ndarray
    u_bar: np.ndarray
    f0: np.ndarray
    g: np.ndarray

    @property
    def n_variables(self) -> int:
        return self.hessian.shape[0]


def build_qp(cfg: MpcConfig, sm: ScheduledModel, x_k, x_km1, u_bar_km1,
             r_k, terminal: np.ndarray | None = None,
             du_ff=None) -> QpProblem:
    """Condense the N-step tracking problem into a dense QP.

    ``sm`` must expose exactly the two valve input columns; a model with a
    fuel column must have it eliminated first (fuel is not a decision
    variable).  ``terminal`` lets the caller reuse a cached Riccati
    penalty; when omitted it is recomputed from the scheduled matrices.
    ``du_ff`` is the input increment the loop applies this period even if
    the solved increments are zero (the feedforward change folded into
    ``u_bar_km1``); it enters the free response so the decision variables
    only carry the corrective part, instead of re-fighting a move the
    feedforward path already makes.
    """
    a = np.asarray(sm.a, dtype=float)
    b = np.asarray(sm.b, dtype=float)
    if b.shape != (_N_STATES, _N_INPUTS):
        raise ValueError(
            f"scheduled model must have exactly {_N_INPUTS} input columns "
            f"(got {b.shape}); eliminate extra input columns before "
            f"building the tracking QP")
    x_k = _as_vector(x_k, _N_STATES, "x_k")
    x_km1 = _as_vector(x_km1, _N_STATES, "x_km1")
    u_bar = _as_vector(u_bar_km1, _N_INPUTS, "u_bar_km1")
    r_k = _as_vector(r_k, _N_STATES, "r_k")
    if du_ff is None:
        du_ff = np.zeros(_N_INPUTS)
    else:
        du_ff = _as_vector(du_ff, _N_INPUTS, "du_ff")

    n = cfg.horizon
    zeta0 = np.concatenate([x_k - x_km1, x_k - r_k])
    a_bar, b_bar = tracking_dynamics(a, b)
    if terminal is None:
        terminal = terminal_penalty(a, b, cfg.q_e, cfg.r)
    p = np.asarray(terminal, dtype=float)
    if p.shape != (4, 4):
        raise ValueError(f"terminal penalty must be 4x4, got {p.shape}")

    # Stacked prediction  Z = f_mat @ zeta0 + g_mat @ dU  over stages 1..N,
    # where each stage block is [dx_j; e_j].
    powers = [np.eye(4)]
    for _ in range(n):
        powers.append(a_bar @ powers[-1])
    f_mat = np.vstack(powers[1:])
    col = np.vstack([pw @ b_bar for pw in powers[:n]])
    g_mat = np.zeros((4 * n, 2 * n))
    for j in range(n):
        g_mat[4 * j:, 2 * j:2 * j + 2] = col[:4 * (n - j)]

    # Stage weights: zero on dx, q_e on e for stages 1..N-1, the Riccati
    # penalty on the full terminal block.
    q_bar = np.zeros((4, 4))
    q_bar[2:, 2:] = cfg.q_e
    g3 = g_mat.reshape(n, 4, 2 * n)
    wg3 = np.empty_like(g3)
    if n > 1:
        wg3[:n - 1] = np.einsum("ab,jbc->jac", q_bar, g3[:n - 1])
    wg3[n - 1] = p @ g3[n - 1]
    wg = wg3.reshape(4 * n, 2 * n)
    f0 = f_mat @ zeta0 + g_mat[:, :2] @ du_ff
    f03 = f0.reshape(n, 4)
    wf3 = np.empty_like(f03)
    if n > 1:
        wf3[:n - 1] = f03[:n - 1] @ q_bar
    wf3[n - 1] = p @ f03[n - 1]
    wf = wf3.reshape(4 * n)

    nu = 2 * n
    n_z = nu + 2
    hessian = np.zeros((n_z, n_z))
    hessian[:nu, :nu] = 2.0 * (g_mat.T @ wg + np.kron(np.eye(n), cfg.r))
    hessian[nu:, nu:] = 2.0 * cfg.mu * np.eye(2)
    hessian = 0.5 * (hessian + hessian.T)
    gradient = np.zeros(n_z)
    gradient[:nu] = 2.0 * (g_mat.T @ wf)
    try:
        np.linalg.cholesky(hessian)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(
            "assembled tracking Hessian is not positive definite; check "
            "the weight matrices and the scheduled model") from exc

    # Soft state bounds on absolute x_j = x_k + cumulative dx, j = 1..N.
    idx_dx = (4 * np.arange(n)[:, None] + np.arange(2)).ravel()
    c_mat = g_mat[idx_dx].reshape(n, 2, nu).cumsum(axis=0).reshape(nu, nu)
    free_x = x_k + f0[idx_dx].reshape(n, 2).cumsum(axis=0)
    d_vec = free_x.ravel()
    eps_cols = np.tile(-np.eye(2), (n, 1))
    # Hard input bounds on u_j = u_bar + cumulative du, j = 0..N-1.
    t_mat = np.kron(np.tril(np.ones((n, n))), np.eye(2))
    zeros_ue = np.zeros((nu, 2))

    a_mat = np.vstack([
        np.hstack([c_mat, eps_cols]),
        np.hstack([-c_mat, eps_cols]),
        np.hstack([np.zeros((2, nu)), -np.eye(2)]),
        np.hstack([t_mat, zeros_ue]),
        np.hstack([-t_mat, zeros_ue]),
    ])
    b_vec = np.concatenate([
        np.tile(cfg.x_max, n) - d_vec,
        d_vec - np.tile(cfg.x_min, n),
        np.zeros(2),
        np.tile(cfg.u_max - u_bar, n),
        np.tile(u_bar - cfg.u_min, n),
    ])
    return QpProblem(hessian=hessian, gradient=gradient, a_mat=a_mat,
                     b_vec=b_vec, horizon=n, x_k=x_k, u_bar=u_bar,
                     f0=f0, g=g_mat)


@dataclass(frozen=True)
class MpcSolution:
    """Solved increments with the implied predictions.

    ``x_pred``/``e_pred`` cover stages 1..N, ``u_pred`` stages 0..N-1.
    On an iteration-limited solve these hold the best iterate found.
    """

    du0: np.ndarray
    du: np.ndarray
    slack: np.ndarray
    status: QpStatus
    kkt_residual: float
    iterations: int
    active_set: tuple[int, ...]
    x_pred: np.ndarray
    e_pred: np.ndarray
    u_pred: np.ndarray


def solve_tracking_qp(problem: QpProblem, warm_start=None,
                      max_iter: int | None = None) -> MpcSolution:
    """Solve the condensed QP and unpack increments and predictions."""
    res = solve_qp(problem.hessian, problem.gradient, problem.a_mat,
                   problem.b_vec, warm_start=warm_start, max_iter=max_iter)
    n = problem.horizon
    nu = 2 * n
    du = res.z[:nu].reshape(n, 2)
    slack = res.z[nu:].copy()
    zeta = (problem.f0 + problem.g @ res.z[:nu]).reshape(n, 4)
    dx_pred = zeta[:, :2]
    e_pred = zeta[:, 2:].copy()
    x_pred = problem.x_k + np.cumsum(dx_pred, axis=0)
    u_pred = problem.u_bar + np.cumsum(du, axis=0)
    return MpcSolution(du0=du[0].copy(), du=du, slack=slack,
                       status=res.status, kkt_residual=res.kkt_residual,
                       iterations=res.iterations, active_set=res.active_set,
                       x_pred=x_pred, e_pred=e_pred, u_pred=u_pred)


@dataclass(frozen=True)
class StepDiagnostics:
    """Per-step solver telemetry for logging."""

    status: QpStatus
    kkt_residual: float
    iterations: int
    active_set_size: int
    slack: np.ndarray
    du0: np.ndarray
    u_applied: np.ndarray
    solve_time: float
    p_refreshed: bool
    cell: tuple[int, int]


class MpcController:
    """Stateful incremental tracking controller over a lattice model.

    One instance drives one loop: it remembers the previous measured
    state, the previously applied input, and the previous feedforward
    value.  The first call initializes that memory from its arguments
    (zero state increment, previous input equal to the feedforward).
    The Riccati terminal penalty is recomputed only when the operating
    point moves to a different lattice cell.
    """

    def __init__(self, model: LpvModel, config: MpcConfig | None = None,
                 warm_start: bool = True):
        if config is None:
            config = MpcConfig()
        self.model = model
        self.config = config
        self.warm_start = bool(warm_start)
        self.last_solution: MpcSolution | None = None
        self.last_diagnostics: StepDiagnostics | None = None
        self.reset()

    def reset(self) -> None:
        """Forget loop memory; the next step re-initializes from its inputs."""
        self._x_prev: np.ndarray | None = None
        self._u_prev: np.ndarray | None = None
        self._u_ff_prev: np.ndarray | None = None
        self._cell: tuple[int, int] | None = None
        self._terminal: np.ndarray | None = None
        self._active_seed: tuple[int, ...] | None = None

    def _lattice_cell(self, rho: OperatingPoint) -> tuple[int, int]:
        s_ax = np.asarray(self.model.speed_axis)
        f_ax = np.asarray(self.model.fuel_axis)
        s = min(max(rho.engine_speed, s_ax[0]), s_ax[-1])
        f = min(max(rho.fuel_rate, f_ax[0]), f_ax[-1])
        i = int(np.clip(np.searchsorted(s_ax, s, side="right") - 1,
                        0, len(s_ax) - 2))
        j = int(np.clip(np.searchsorted(f_ax, f, side="right") - 1,
                        0, len(f_ax) - 2))
        return (i, j)

    def step(self, x_k, r_k, rho_k: OperatingPoint, u_ff_k) -> ActuatorInput:
        """Compute the valve commands for the current control period.

        On a solver failure the increment falls back to zero (the
        feedforward-corrected previous input is applied) and a
        RuntimeWarning is emitted; the failed solve stays available in
        ``last_solution``/``last_diagnostics``.
        """
        t_start = time.perf_counter()
        x_k = _as_vector(x_k, _N_STATES, "x_k")
        r_k = _as_vector(r_k, _N_STATES, "r_k")
        u_ff = _input_vector(u_ff_k)
        if self._x_prev is None:
            self._x_prev = x_k.copy()
            self._u_prev = u_ff.copy()
            self._u_ff_prev = u_ff.copy()

        sm = self.model.schedule(rho_k)
        if sm.m != _N_INPUTS:
            sm = ScheduledModel(a=sm.a, b=sm.b[:, :_N_INPUTS],
                                x_ss=sm.x_ss, u_ss=sm.u_ss[:_N_INPUTS],
                                rho=sm.rho)
        cell = self._lattice_cell(rho_k)
        refreshed = False
        if self._terminal is None or cell != self._cell:
            self._terminal = terminal_penalty(sm.a, sm.b, self.config.q_e,
                                              self.config.r)
            self._cell = cell
            refreshed = True

        du_ff = u_ff - self._u_ff_prev
        u_bar = self._u_prev + du_ff
        problem = build_qp(self.config, sm, x_k, self._x_prev, u_bar, r_k,
                           terminal=self._terminal, du_ff=du_ff)
        seed = self._active_seed if self.warm_start else None
        solution = solve_tracking_qp(problem, warm_start=seed,
                                     max_iter=self.config.solver_max_iter)
        if solution.status is QpStatus.OPTIMAL:
            du0 = solution.du0
            self._active_seed = solution.active_set
        else:
            du0 = np.zeros(_N_INPUTS)
            self._active_seed = None
            warnings.warn(
                f"tracking QP returned {solution.status.name} at "
                f"({rho_k.engine_speed:g} rpm, {rho_k.fuel_rate:g} mm^3), "
                f"kkt residual {solution.kkt_residual:.3e}; applying zero "
                f"increment", RuntimeWarning, stacklevel=2)
        u_k = np.clip(u_bar + du0, self.config.u_min, self.config.u_max)

        self._x_prev = x_k.copy()
        self._u_prev = u_k
        self._u_ff_prev = u_ff
        self.last_solution = solution
        self.last_diagnostics = StepDiagnostics(
            status=solution.status, kkt_residual=solution.kkt_residual,
            iterations=solution.iterations,
            active_set_size=len(solution.active_set),
            slack=solution.slack, du0=np.array(du0, copy=True),
            u_applied=u_k.copy(),
            solve_time=time.perf_counter() - t_start,
            p_refreshed=refreshed, cell=cell)
        return ActuatorInput(egr_pos=float(u_k[0]), vgt_pos=float(u_k[1]))


def mpc_step(controller: MpcController, x_k, r_k, rho_k: OperatingPoint,
             u_ff_k) -> ActuatorInput:
    """Advance the controller one control period; see MpcController.step."""
    return controller.step(x_k, r_k, rho_k, u_ff_k)
