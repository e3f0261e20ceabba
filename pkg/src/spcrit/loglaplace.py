"""Nonlinear mass evolution: survival, extinction and conditional limits.

The negative log of the Laplace functional of the process solves a
nonlinear evolution equation driven by the spatial generator and the
branching mechanism.  Integrating it gives survival probabilities, the
t*P(survival) limit table, and the finite-time Laplace transforms whose
long-time targets are 1/(1 + nu*lambda*weight).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.integrate import simpson

from . import _kernels
from .model import (
    SuperprocessModel,
    as_field,
    as_measure,
    check_grey_domination,
    derived_coefficients,
    pairing,
)
from .spectral import MeanSemigroup, SpectralData, nu as nu_constant, require_critical

TOL_ODE = 1e-8
TOL_LADDER = 1e-6
THETA_LADDER = (1e2, 1e4, 1e6)
_MAX_RECORDS = 4096


class SolverError(RuntimeError):
    """Step-halving disagreement or a negative solution value."""


class LadderError(RuntimeError):
    """The large-initial-data ladder failed to converge."""


# ---------------------------------------------------------------------------
# branching mechanism evaluations

def branching_mechanism(model: SuperprocessModel, x: int, z: float) -> float:
    """Pointwise mechanism beta*(-a z + b z^2 + sum_k w_k (e^{-z y_k}-1+z y_k))."""
    if z < 0:
        raise ValueError(f"mechanism argument must be >= 0, got {z}")
    br = model.branching
    atoms = br.jumps[x]
    jump = float(np.sum(atoms[:, 1] * (np.exp(-z * atoms[:, 0]) - 1.0 + z * atoms[:, 0])))
    return float(br.beta[x] * (-br.a[x] * z + br.b[x] * z * z + jump))


def mechanism_field(model: SuperprocessModel, u: np.ndarray) -> np.ndarray:
    """Mechanism evaluated statewise at u(x)."""
    u = as_field(model, u)
    return np.array(
        [branching_mechanism(model, x, float(u[x])) for x in range(model.n_states)]
    )


class RemainderParts(NamedTuple):
    remainder: float       # mechanism plus the linear drift part; >= 0
    quad_defect: float     # remainder minus the pure-quadratic approximation
    defect_bound: float    # jump-tail control coefficient for the defect


def mechanism_remainders(model: SuperprocessModel, x: int, z: float) -> RemainderParts:
    """Nonlinear remainder, its quadratic defect and the defect control.

    The remainder is squeezed between 0 and kbound*z^2/2, and the defect is
    bounded by defect_bound*z^2; both bounds are exact consequences of the
    mechanism's convexity and are exercised as properties in the tests.
    """
    if z < 0:
        raise ValueError(f"mechanism argument must be >= 0, got {z}")
    br = model.branching
    dc = derived_coefficients(model)
    remainder = branching_mechanism(model, x, z) + dc.alpha[x] * z
    quad_defect = remainder - 0.5 * dc.avar[x] * z * z
    atoms = br.jumps[x]
    defect_bound = float(
        br.beta[x]
        * np.sum(atoms[:, 1] * atoms[:, 0] ** 2 * np.minimum(1.0, atoms[:, 0] * z / 6.0))
    )
    return RemainderParts(float(remainder), float(quad_defect), defect_bound)


def remainder_field(model: SuperprocessModel, u: np.ndarray) -> np.ndarray:
    """Statewise nonlinear remainder r(x, u(x))."""
    u = as_field(model, u)
    dc = derived_coefficients(model)
    return mechanism_field(model, u) + dc.alpha * u


# ---------------------------------------------------------------------------
# solver plumbing

def _padded_jumps(model: SuperprocessModel) -> tuple[np.ndarray, np.ndarray]:
    br = model.branching
    kmax = max((a.shape[0] for a in br.jumps), default=0)
    n = model.n_states
    jy = np.zeros((n, kmax))
    jw = np.zeros((n, kmax))
    for i, atoms in enumerate(br.jumps):
        k = atoms.shape[0]
        if k:
            jy[i, :k] = atoms[:, 0]
            jw[i, :k] = br.beta[i] * atoms[:, 1]
    return jy, jw


class _Rhs:
    """Precomputed kernel coefficients for one model."""

    def __init__(self, model: SuperprocessModel):
        br = model.branching
        self.Q = np.ascontiguousarray(model.Q)
        self.lin = np.ascontiguousarray(br.beta * br.a)
        self.quad = np.ascontiguousarray(br.beta * br.b)
        self.jy, self.jw = _padded_jumps(model)
        dc = derived_coefficients(model)
        self.kbound = dc.kbound
        self.qnorm = float(np.abs(model.Q).sum(axis=1).max())
        self.j_y2w = (self.jw * self.jy ** 2).sum(axis=1)
        self.j_yw = (self.jw * self.jy).sum(axis=1)

    def local_rate(self, u_max: float) -> float:
        """Lipschitz bound of the right-hand side at solution scale u_max.

        The jump part's slope saturates at beta*sum(w*y), unlike the
        quadratic part which keeps growing with the solution.
        """
        per_state = (
            np.abs(self.lin)
            + 2.0 * self.quad * u_max
            + np.minimum(self.j_y2w * u_max, self.j_yw)
        )
        return self.qnorm + float(per_state.max())

    def evolve(self, u: np.ndarray, h: float, n_steps: int, rec_steps, rec):
        return _kernels.rk4_evolve(
            self.Q, self.lin, self.quad, self.jy, self.jw,
            u, h, n_steps, rec_steps, rec,
        )

    def advance_checked(self, u0: np.ndarray, h: float, n_steps: int) -> np.ndarray:
        """One coarse/fine pair over a window, returning the fine result."""
        empty = np.empty((0,), dtype=np.int64)
        no_rec = np.empty((0, u0.shape[0], u0.shape[1]))
        uc = u0.copy()
        min_c = self.evolve(uc, h, n_steps, empty, no_rec)
        uf = u0.copy()
        min_f = self.evolve(uf, 0.5 * h, 2 * n_steps, empty, no_rec)
        _check_discrepancy(uc[None], uf[None], np.array([h * n_steps]))
        _check_negative(min(min_c, min_f), u0)
        return uf


def default_step(model: SuperprocessModel, f0=None) -> float:
    """Step size from the stiffest linear rate and the initial-data scale.

    The constants leave the step-halving check roughly a decade of margin
    on randomized models; the quadratic part contributes a rate of order
    kbound times the solution scale, which is bounded by the initial data.
    """
    dc = derived_coefficients(model)
    qnorm = float(np.abs(model.Q).sum(axis=1).max())
    dt = 0.01
    if dc.kbound > 0:
        dt = min(dt, 0.05 / dc.kbound)
    if qnorm > 0:
        dt = min(dt, 0.05 / qnorm)
    if f0 is not None:
        fmax = float(np.max(f0, initial=0.0))
        if fmax > 0 and dc.kbound > 0:
            dt = min(dt, 0.025 / (dc.kbound * (1.0 + fmax)))
    return dt


def _check_negative(min_seen: float, u0: np.ndarray) -> None:
    floor = -1e-12 * max(1.0, float(np.max(u0, initial=0.0)))
    if min_seen < floor:
        raise SolverError(
            f"solution went negative (min {min_seen:.3e}); the step is too "
            f"large for this mechanism; negatives are never clipped silently"
        )


def _check_discrepancy(rec_c: np.ndarray, rec_f: np.ndarray, times) -> float:
    """Max relative gap between the coarse and fine runs at shared times."""
    worst = 0.0
    worst_t = 0.0
    for k in range(rec_c.shape[0]):
        scale = float(np.abs(rec_f[k]).max())
        if scale == 0.0:
            gap = float(np.abs(rec_c[k]).max())
            rel = 0.0 if gap == 0.0 else math.inf
        else:
            rel = float(np.abs(rec_c[k] - rec_f[k]).max()) / scale
        if rel > worst:
            worst = rel
            worst_t = float(times[k])
    if worst > TOL_ODE:
        raise SolverError(
            f"step-halving discrepancy {worst:.3e} at t={worst_t:g} exceeds "
            f"{TOL_ODE:g}; decrease dt"
        )
    return worst


@dataclass(frozen=True)
class StepMeta:
    dt_requested: float
    dt_coarse: float
    dt_fine: float
    n_steps_fine: int
    rel_discrepancy: float


@dataclass(frozen=True, eq=False)
class LogLaplaceTrajectory:
    """Solution values on a time grid, starting at the initial field."""

    t_grid: np.ndarray
    u_values: np.ndarray
    f0: np.ndarray
    step_meta: StepMeta

    @property
    def final(self) -> np.ndarray:
        return self.u_values[-1]

    def interp(self, t: float) -> np.ndarray:
        """Linear interpolation on the recorded grid."""
        return np.array(
            [np.interp(t, self.t_grid, self.u_values[:, i])
             for i in range(self.u_values.shape[1])]
        )


class _BatchSolution(NamedTuple):
    times: np.ndarray        # record times, excluding 0
    values: np.ndarray       # (n_rec, batch, n) fine-run records
    discrepancy: float
    min_seen: float
    dt_coarse: float
    n_steps: int


def _solve_batch(
    model: SuperprocessModel,
    f0_batch: np.ndarray,
    T: float,
    dt: float,
    max_records: int = _MAX_RECORDS,
) -> _BatchSolution:
    """Coarse/fine RK4 pair on [0, T]; returns the fine run's records."""
    rhs = _Rhs(model)
    n_req = max(1, int(math.ceil(T / dt - 1e-12)))
    stride = max(1, int(math.ceil(n_req / max_records)))
    # pad to an even number of uniform record intervals: downstream
    # quadrature runs on the recorded grid with composite Simpson
    n_rec = int(math.ceil(n_req / stride))
    if n_rec % 2 and n_rec > 1:
        n_rec += 1
    n_steps = stride * n_rec
    h = T / n_steps
    rec_steps = stride * np.arange(1, n_rec + 1, dtype=np.int64)
    times = rec_steps.astype(float) * h

    batch, n = f0_batch.shape
    rec_c = np.empty((rec_steps.size, batch, n))
    uc = f0_batch.copy()
    min_c = rhs.evolve(uc, h, n_steps, rec_steps, rec_c)

    rec_f = np.empty((rec_steps.size, batch, n))
    uf = f0_batch.copy()
    min_f = rhs.evolve(uf, 0.5 * h, 2 * n_steps, 2 * rec_steps, rec_f)

    disc = _check_discrepancy(rec_c, rec_f, times)
    min_seen = min(min_c, min_f)
    _check_negative(min_seen, f0_batch)
    return _BatchSolution(times, rec_f, disc, min_seen, h, n_steps)


def solve_log_laplace(
    model: SuperprocessModel,
    f0,
    T: float,
    dt: float | None = None,
) -> LogLaplaceTrajectory:
    """Integrate the evolution equation from a nonnegative initial field.

    Runs classical RK4 at a fixed step, reruns at half the step and demands
    relative agreement below 1e-8, then checks the solution is squeezed
    between 0 and the mean-semigroup image of the initial field.
    """
    f0 = as_field(model, f0)
    if np.any(f0 < 0):
        idx = int(np.argmin(f0))
        raise ValueError(f"initial field must be >= 0; f0[{idx}] = {f0[idx]}")
    if T <= 0:
        raise ValueError(f"horizon must be > 0, got {T}")
    dt_req = default_step(model, f0) if dt is None else float(dt)
    if dt_req <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")

    sol = _solve_batch(model, f0[None, :], T, dt_req)
    t_grid = np.concatenate(([0.0], sol.times))
    u_values = np.concatenate((f0[None, :], sol.values[:, 0, :]), axis=0)

    _check_mean_domination(model, t_grid, u_values, f0)

    meta = StepMeta(
        dt_requested=dt_req,
        dt_coarse=sol.dt_coarse,
        dt_fine=0.5 * sol.dt_coarse,
        n_steps_fine=2 * sol.n_steps,
        rel_discrepancy=sol.discrepancy,
    )
    return LogLaplaceTrajectory(
        t_grid=t_grid, u_values=u_values, f0=f0, step_meta=meta
    )


def _check_mean_domination(model, t_grid, u_values, f0, n_checks: int = 33) -> None:
    """0 <= u <= T_t f0, and the gap is at most e^{Kt} T_t(f0^2)."""
    if not np.any(f0 > 0):
        return
    sg = MeanSemigroup(model)
    kbound = derived_coefficients(model).kbound
    idx = np.unique(np.linspace(0, len(t_grid) - 1, n_checks).astype(int))
    for k in idx:
        t = float(t_grid[k])
        mean = sg.apply(t, f0)
        slack = TOL_ODE * (1.0 + float(np.abs(mean).max()))
        gap = mean - u_values[k]
        if np.any(gap < -slack):
            raise SolverError(
                f"solution exceeds its mean-semigroup bound at t={t:g} "
                f"by {float(-gap.min()):.3e}"
            )
        if kbound * t < 700.0:
            bound = math.exp(kbound * t) * sg.apply(t, f0 * f0)
            if np.any(gap > bound + slack):
                raise SolverError(
                    f"remainder exceeds its second-moment bound at t={t:g}"
                )


# ---------------------------------------------------------------------------
# extinction and survival

def _cascade_evolve(
    model: SuperprocessModel,
    u0: np.ndarray,
    t: float,
    dt_target: float,
) -> np.ndarray:
    """Integrate over [0, t] with steps graded to the decaying data scale.

    Large initial data makes the quadratic part stiff; a uniform step sized
    for it would need ~t/h0 steps.  Windows of 64 steps whose size doubles
    as the solution collapses reach the target step after ~log2(dt/h0)
    windows; every window runs the coarse/fine agreement check.  The
    schedule is a deterministic function of the inputs.
    """
    rhs = _Rhs(model)

    def stability_step(u):
        rate = rhs.local_rate(float(np.max(u, initial=0.0)))
        return 0.05 / rate if rate > 0 else dt_target

    u = u0.copy()
    remaining = float(t)
    h = min(dt_target, stability_step(u))
    for _ in range(20000):
        if remaining <= 0:
            return u
        if h >= dt_target * (1.0 - 1e-12):
            n = max(1, int(math.ceil(remaining / dt_target - 1e-12)))
            return rhs.advance_checked(u, remaining / n, n)
        window = min(64.0 * h, remaining)
        n = max(1, int(math.ceil(window / h - 1e-12)))
        u = rhs.advance_checked(u, window / n, n)
        remaining -= window
        h = min(dt_target, max(h, min(2.0 * h, stability_step(u))))
    raise LadderError("graded integration failed to reach the target step")


def neg_log_extinction(
    model: SuperprocessModel,
    t: float,
    dt: float | None = None,
    thetas: tuple[float, ...] = THETA_LADDER,
) -> np.ndarray:
    """Negative log extinction probability by time t, statewise.

    Computed as the large-theta limit of the evolution started from the
    constant field theta, along the ladder (1e2, 1e4, 1e6).  Convergence
    requires the increments between rungs to shrink geometrically (the gap
    to the limit decays like 1/theta) or the Richardson-estimated
    remainder past the last rung to fall below 1e-6 relatively.
    """
    if t <= 0:
        raise ValueError(f"extinction time must be > 0, got {t}")
    if len(thetas) < 3:
        raise ValueError("the ladder needs at least three rungs")
    grey = check_grey_domination(model)
    if not grey:
        warnings.warn(
            "finite-time extinction is not certified (min beta*b = 0); "
            "the ladder may fail to converge",
            stacklevel=2,
        )
    dt_target = default_step(model) if dt is None else float(dt)
    n = model.n_states
    u0 = np.tile(np.asarray(thetas, dtype=float)[:, None], (1, n))
    u = _cascade_evolve(model, u0, t, dt_target)

    for r in range(len(thetas) - 1):
        if np.any(u[r] > u[r + 1] * (1.0 + 1e-9) + 1e-30):
            raise LadderError("ladder is not monotone in the initial level")
    # the gap to the limit decays like 1/theta; the remainder past the last
    # rung is the last increment shrunk by theta[-2]/theta[-1], and healthy
    # convergence shows successive increments shrinking by that same factor
    inc_prev = float(np.abs(u[-2] - u[-3]).max())
    inc_last = float(np.abs(u[-1] - u[-2]).max())
    remainder = inc_last * thetas[-2] / (thetas[-1] - thetas[-2])
    scale = float(np.abs(u[-1]).max())
    small = remainder <= TOL_LADDER * max(scale, 1e-300)
    geometric = inc_prev >= 20.0 * inc_last
    if not (small or geometric):
        raise LadderError(
            f"ladder not converged: estimated remaining gap {remainder:.3e} "
            f"vs scale {scale:.3e}; the mechanism may be too weak"
        )
    return u[-1]


def survival_probability(model: SuperprocessModel, mu, t: float, dt=None) -> float:
    """Probability the process started from mu is alive at time t."""
    mu = as_measure(model, mu)
    w = neg_log_extinction(model, t, dt=dt)
    p = -math.expm1(-pairing(w, mu))
    if not 0.0 < p < 1.0:
        raise SolverError(f"survival probability {p} outside (0, 1)")
    return p


@dataclass(frozen=True)
class KolmogorovRow:
    t: float
    p_survival: float
    t_times_p: float
    limit: float


@dataclass(frozen=True)
class KolmogorovReport:
    rows: tuple[KolmogorovRow, ...]
    limit: float
    survival_decreasing: bool


def kolmogorov_table(
    model: SuperprocessModel,
    sd: SpectralData,
    mu,
    t_grid,
    dt=None,
) -> KolmogorovReport:
    """t * P(survival) against its constant long-time limit."""
    require_critical(sd)
    mu = as_measure(model, mu)
    limit = pairing(sd.phi0, mu) / nu_constant(model, sd)
    rows = []
    for t in np.asarray(t_grid, dtype=float):
        p = survival_probability(model, mu, float(t), dt=dt)
        rows.append(KolmogorovRow(float(t), p, float(t) * p, limit))
    decreasing = all(
        rows[i].p_survival >= rows[i + 1].p_survival - 1e-12
        for i in range(len(rows) - 1)
    )
    return KolmogorovReport(tuple(rows), limit, decreasing)


@dataclass(frozen=True)
class YaglomResult:
    value: float
    target: float
    p_survival: float
    lam: float
    t: float


def yaglom_transform(
    model: SuperprocessModel,
    sd: SpectralData,
    mu,
    f,
    lam: float,
    t: float,
    dt=None,
) -> YaglomResult:
    """Conditional Laplace transform of the time-scaled mass functional.

    value = E[exp(-lam/t * <f, X_t>) | survival to t]; its long-time target
    is 1/(1 + nu*lam*<f, psi0>_m).
    """
    require_critical(sd)
    mu = as_measure(model, mu)
    f = as_field(model, f)
    if np.any(f < 0):
        raise ValueError("the test field must be >= 0")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if t <= 0:
        raise ValueError(f"time must be > 0, got {t}")
    target = 1.0 / (1.0 + nu_constant(model, sd) * lam * sd.psi_weight(f))
    p = survival_probability(model, mu, t, dt=dt)
    if lam == 0.0:
        return YaglomResult(1.0, target, p, lam, t)
    traj = solve_log_laplace(model, lam * f / t, t, dt=dt)
    value = 1.0 - (-math.expm1(-pairing(traj.final, mu))) / p
    return YaglomResult(value, target, p, lam, t)


def nu_slope_estimate(
    model: SuperprocessModel,
    sd: SpectralData,
    f,
    delta: float,
    n: int,
    dt=None,
) -> float:
    """Finite-horizon slope of the reciprocal psi0-weight of the solution.

    Converges to the constant nu as the horizon n*delta grows; exact at
    every horizon for purely quadratic mechanisms.
    """
    require_critical(sd)
    f = as_field(model, f)
    if delta <= 0 or n < 1:
        raise ValueError("need delta > 0 and n >= 1")
    w0 = sd.psi_weight(f)
    if not w0 > 0:
        raise ValueError(f"psi0-weight of f must be positive, got {w0}")
    horizon = n * delta
    traj = solve_log_laplace(model, f, horizon, dt=dt)
    wt = sd.psi_weight(traj.final)
    return (1.0 / wt - 1.0 / w0) / horizon


# ---------------------------------------------------------------------------
# diagnostics used by the property suites

def remainder_identity(
    model: SuperprocessModel,
    traj: LogLaplaceTrajectory,
) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the mass-deficit identity at the final time.

    Direct side: mean-semigroup image minus the solution.  Integral side:
    composite Simpson over the trajectory's own (uniform) record grid of
    the semigroup applied to the nonlinear remainder, using the recorded
    solution values reversed in time.  They agree up to quadrature error.
    """
    t = float(traj.t_grid[-1])
    sg = MeanSemigroup(model)
    direct = sg.apply(t, traj.f0) - traj.final
    ss = traj.t_grid
    u_rev = traj.u_values[::-1]
    vals = np.empty_like(traj.u_values)
    for i, s in enumerate(ss):
        vals[i] = sg.matrix(float(s)) @ remainder_field(
            model, np.maximum(u_rev[i], 0.0)
        )
    integral = simpson(vals, x=ss, axis=0)
    return direct, integral


def principal_profile_gap(sd: SpectralData, u: np.ndarray) -> float:
    """Sup-norm of u normalized by its rank-one principal profile, minus 1."""
    weight = sd.psi_weight(u)
    if weight <= 0:
        raise ValueError("profile gap needs a field with positive psi0-weight")
    return float(np.abs(u / (weight * sd.phi0) - 1.0).max())
