# trajectory.py
"""
Boundary-value and initial-value Newton problems for decaying forces.

The two-point problem prescribes the *initial* position/angular momentum
and the *final* angle/radial momentum:

    (r, omega)(t1) = (r_i, omega_i),     (theta, rho)(t2) = (theta_f, rho_f),

with dynamics x' = (rho + F_r, F_theta, F_rho, F_omega).  In centered
variables

    ring_r(s)     = r(s) - r_i - (s - t1) rho_f,
    ring_theta(s) = theta(s) - theta_f,
    ring_rho(s)   = rho(s) - rho_f,
    ring_omega(s) = omega(s) - omega_i,

the problem is the fixed point of the integral map

    P_r(x)(s)     =  int_t1^s  (ring_rho + F_r)(u) du
    P_theta(x)(s) = -int_s^t2  F_theta(u) du
    P_rho(x)(s)   = -int_s^t2  F_rho(u) du
    P_omega(x)(s) =  int_t1^s  F_omega(u) du

which is a contraction in the weighted product norm with exponent
profile (1, 0, -eps~, 1-eps~):

    ||x|| = max( sup |ring_r|/|s-t1|, sup |ring_theta|,
                 sup |ring_rho| <s>^eps~, sup |ring_omega|/|s-t1|^(1-eps~) ).

Picard iteration starts from the zero centered path (the free solution)
and integrates by composite Simpson on a geometrically graded grid.

The long-range (time-independent) problem on an outgoing region is
reduced to the time-dependent one by the cutoff trick: solve with the
effective force on [rbar, rbar + t], rbar = r_i C0/(C0 - eps0), and shift
time back; an a-posteriori check asserts the path never leaves the set
where the effective force equals the original one.

An adaptive fourth-order Runge-Kutta integrator (step doubling with
Richardson acceptance) lives here too; it is the oracle-grade propagator
used by the shooting cross-checks and by the characteristic builds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicSpline

from .errors import (ConfigurationError, ConsistencyError, DivergenceError,
                     InversionError, PreconditionError, StiffnessError)
from .fitting import DecayReport, make_fit
from .manifold import (CutoffParams, EffectiveForce, ForceModel,
                       OutgoingRegion, PhasePoint, angle_difference,
                       effective_force)

# =============================================================================
# GRIDS, NORMS, BOUNDARY DATA
# =============================================================================


@dataclass(frozen=True)
class TimeGrid:
    """Geometrically graded quadrature grid on [t1, t2] (dense near t1)."""

    nodes: np.ndarray

    @staticmethod
    def graded(t1: float, t2: float, n: int = 512) -> "TimeGrid":
        if not 0 < t1 < t2:
            raise ConfigurationError(f"need 0 < t1 < t2, got [{t1}, {t2}]")
        if n < 8:
            raise ConfigurationError("time grid needs at least 8 nodes")
        return TimeGrid(np.geomspace(t1, t2, n))

    @property
    def t1(self) -> float:
        return float(self.nodes[0])

    @property
    def t2(self) -> float:
        return float(self.nodes[-1])

    def __len__(self):
        return len(self.nodes)


def _cumulative(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Composite-Simpson cumulative integral along axis 0, zero at x[0]."""
    flat = y.reshape(len(x), -1)
    out = cumulative_simpson(flat, x=x, axis=0, initial=0.0)
    return out.reshape(y.shape)


@dataclass(frozen=True)
class BoundaryData:
    """
    Boundary data of the two-point problem.  ``t2`` may be math.inf; the
    solver then truncates at the configured finite horizon and flags the
    solution as extrapolated asymptotic data.
    """

    t1: float
    t2: float
    r_i: float
    theta_f: tuple
    rho_f: float
    omega_i: tuple

    def __post_init__(self):
        object.__setattr__(self, "theta_f",
                           tuple(float(v) for v in np.atleast_1d(self.theta_f)))
        object.__setattr__(self, "omega_i",
                           tuple(float(v) for v in np.atleast_1d(self.omega_i)))
        if not self.t1 < self.t2:
            raise ConfigurationError(f"need t1 < t2, got {self.t1} >= {self.t2}")

    @property
    def n_ang(self) -> int:
        return len(self.theta_f)


class WeightedNorm:
    """
    The product-space norm with exponent profile (1, 0, -eps~, 1-eps~).
    Positive-exponent components exclude the s = t1 node (their weight
    vanishes there); boundary values are asserted separately.
    """

    def __init__(self, t1: float, epsilon_tilde: float, nodes: np.ndarray):
        self.t1 = float(t1)
        self.epsilon_tilde = float(epsilon_tilde)
        self.nodes = np.asarray(nodes, dtype=float)
        ds = self.nodes[1:] - self.t1
        self._w_r = 1.0 / ds
        self._w_om = ds ** -(1.0 - epsilon_tilde)
        self._w_rho = (1.0 + self.nodes) ** epsilon_tilde

    def component_sups(self, X: "CenteredPath") -> dict:
        return {
            "r": float(np.max(np.abs(X.r[1:]) * self._w_r)) if len(X.r) > 1 else 0.0,
            "theta": float(np.max(np.abs(X.theta))),
            "rho": float(np.max(np.abs(X.rho) * self._w_rho)),
            "omega": float(np.max(np.abs(X.omega[1:]) * self._w_om[:, None]))
            if len(X.omega) > 1 else 0.0,
        }

    def __call__(self, X: "CenteredPath") -> float:
        return max(self.component_sups(X).values())


@dataclass
class CenteredPath:
    """Sampled centered variables on a shared grid."""

    r: np.ndarray
    theta: np.ndarray
    rho: np.ndarray
    omega: np.ndarray

    @staticmethod
    def zeros(n: int, n_ang: int) -> "CenteredPath":
        return CenteredPath(np.zeros(n), np.zeros((n, n_ang)),
                            np.zeros(n), np.zeros((n, n_ang)))

    def copy(self) -> "CenteredPath":
        return CenteredPath(self.r.copy(), self.theta.copy(),
                            self.rho.copy(), self.omega.copy())

    def __sub__(self, other: "CenteredPath") -> "CenteredPath":
        return CenteredPath(self.r - other.r, self.theta - other.theta,
                            self.rho - other.rho, self.omega - other.omega)

    def __add__(self, other: "CenteredPath") -> "CenteredPath":
        return CenteredPath(self.r + other.r, self.theta + other.theta,
                            self.rho + other.rho, self.omega + other.omega)

    def scale(self, c: float) -> "CenteredPath":
        return CenteredPath(c * self.r, c * self.theta, c * self.rho, c * self.omega)


@dataclass
class TrajectorySolution:
    """
    A sampled classical path with boundary data and iteration diagnostics.
    ``s`` is the physical time axis; ring_* are the centered variables.
    Dense evaluation between nodes is cubic.
    """

    s: np.ndarray
    r: np.ndarray
    theta: np.ndarray
    rho: np.ndarray
    omega: np.ndarray
    ring_r: np.ndarray
    ring_theta: np.ndarray
    ring_rho: np.ndarray
    ring_omega: np.ndarray
    boundary: BoundaryData | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self._splines = None

    def _build_splines(self):
        if self._splines is None:
            stack = np.column_stack([self.r, self.theta, self.rho, self.omega])
            self._splines = CubicSpline(self.s, stack, axis=0)
        return self._splines

    def at(self, s):
        """Cubic-interpolated (r, theta, rho, omega) at time(s) s."""
        vals = self._build_splines()(s)
        A = self.theta.shape[1]
        return (vals[..., 0], vals[..., 1:1 + A], vals[..., 1 + A],
                vals[..., 2 + A:2 + 2 * A])

    def sup_distance(self, other: "TrajectorySolution") -> float:
        """
        Sup-norm distance on the common time range (for oracle checks).
        Angles are compared on the circle.
        """
        lo = max(self.s[0], other.s[0])
        hi = min(self.s[-1], other.s[-1])
        ss = np.linspace(lo, hi, 257)
        ra, tha, rhoa, oma = self.at(ss)
        rb, thb, rhob, omb = other.at(ss)
        return float(max(np.max(np.abs(ra - rb)),
                         np.max(np.abs(angle_difference(tha, thb))),
                         np.max(np.abs(rhoa - rhob)),
                         np.max(np.abs(oma - omb))))

    def export_csv(self, path) -> None:
        A = self.theta.shape[1]
        header = (["s", "r"] + [f"theta{i}" for i in range(A)] + ["rho"]
                  + [f"omega{i}" for i in range(A)]
                  + ["ring_r"] + [f"ring_theta{i}" for i in range(A)]
                  + ["ring_rho"] + [f"ring_omega{i}" for i in range(A)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self.s)):
                row = ([self.s[k], self.r[k]] + list(self.theta[k])
                       + [self.rho[k]] + list(self.omega[k])
                       + [self.ring_r[k]] + list(self.ring_theta[k])
                       + [self.ring_rho[k]] + list(self.ring_omega[k]))
                w.writerow([f"{v:.14g}" for v in row])


# =============================================================================
# PICARD SOLVER (TIME-DEPENDENT BVP)
# =============================================================================

def _picard_map(F: ForceModel, bd: BoundaryData, nodes: np.ndarray,
                X: CenteredPath) -> CenteredPath:
    s = nodes
    y_r = bd.r_i + (s - bd.t1) * bd.rho_f + X.r
    y_th = np.asarray(bd.theta_f) + X.theta
    y_rho = bd.rho_f + X.rho
    y_om = np.asarray(bd.omega_i) + X.omega
    fr, fth, frho, fom = F.components(s, y_r, y_th, y_rho, y_om)
    int_r = _cumulative(X.rho + fr, s)
    int_th = _cumulative(fth, s)
    int_rho = _cumulative(frho, s)
    int_om = _cumulative(fom, s)
    return CenteredPath(
        r=int_r,
        theta=-(int_th[-1] - int_th),
        rho=-(int_rho[-1] - int_rho),
        omega=int_om,
    )


def solve_bvp_time_dependent(F: ForceModel, bd: BoundaryData,
                             grid: TimeGrid | None = None,
                             tol: float = 1e-10,
                             max_iters: int = 200,
                             horizon_factor: float = 256.0,
                             n_nodes: int = 512) -> TrajectorySolution:
    """
    Picard fixed point of the boundary-value integral map.

    Infinite t2 is truncated at ``horizon_factor * t1`` (final data imposed
    there); the solution's ``info['truncated_horizon']`` records it.
    Raises DivergenceError (with the residual history) if the iteration
    fails to contract within ``max_iters`` sweeps.
    """
    if F.kind != "slowly-decaying":
        raise PreconditionError(
            "time-dependent boundary solver needs a slowly-decaying force")
    threshold = getattr(F, "t_threshold", None)
    if threshold is not None and bd.t1 < threshold - 1e-12:
        raise PreconditionError(
            f"t1 = {bd.t1} below contraction threshold T = {threshold}")
    if tol <= 0:
        raise ConfigurationError("tol must be positive")

    truncated = math.isinf(bd.t2)
    t2 = bd.t1 * horizon_factor if truncated else bd.t2
    if grid is None:
        grid = TimeGrid.graded(bd.t1, t2, n_nodes)
    nodes = grid.nodes
    norm = WeightedNorm(bd.t1, getattr(F, "epsilon_tilde", 0.25), nodes)

    X = CenteredPath.zeros(len(nodes), bd.n_ang)
    residuals: list[float] = []
    for sweep in range(1, max_iters + 1):
        X_new = _picard_map(F, bd, nodes, X)
        res = norm(X_new - X)
        residuals.append(res)
        X = X_new
        if res < tol:
            break
    else:
        ratio = (residuals[-1] / residuals[-2]
                 if len(residuals) > 1 and residuals[-2] > 0 else None)
        raise DivergenceError(
            f"Picard iteration did not reach tol={tol} in {max_iters} sweeps "
            f"(last residual {residuals[-1]:.3e})",
            residual_history=residuals, ratio=ratio)

    ratios = [residuals[k + 1] / residuals[k]
              for k in range(len(residuals) - 1) if residuals[k] > 0]
    s = nodes
    sol = TrajectorySolution(
        s=s,
        r=bd.r_i + (s - bd.t1) * bd.rho_f + X.r,
        theta=np.asarray(bd.theta_f) + X.theta,
        rho=bd.rho_f + X.rho,
        omega=np.asarray(bd.omega_i) + X.omega,
        ring_r=X.r, ring_theta=X.theta, ring_rho=X.rho, ring_omega=X.omega,
        boundary=bd,
        info={
            "method": "picard",
            "sweeps": len(residuals),
            "residuals": residuals,
            "contraction_ratios": ratios,
            "measured_contraction": max(ratios) if ratios else 0.0,
            "tol": tol,
            "truncated_horizon": t2 if truncated else None,
        },
    )
    return sol


def fixed_point_residual(F: ForceModel, sol: TrajectorySolution) -> float:
    """Independent recomputation of || x - P(x) || for a returned solution."""
    bd = sol.boundary
    nodes = sol.s
    X = CenteredPath(sol.ring_r, sol.ring_theta, sol.ring_rho, sol.ring_omega)
    PX = _picard_map(F, bd, nodes, X)
    norm = WeightedNorm(bd.t1, getattr(F, "epsilon_tilde", 0.25), nodes)
    return norm(X - PX)


def contraction_estimate(F: ForceModel, t1: float, probe_count: int = 16,
                         bd: BoundaryData | None = None,
                         horizon_factor: float = 64.0,
                         n_nodes: int = 384,
                         seed: int = 7) -> float:
    """
    Empirical upper bound on the Lipschitz constant of the Picard map in
    the weighted norm: max over random smooth path pairs of
    ||P(x) - P(y)|| / ||x - y||.
    """
    if F.kind != "slowly-decaying":
        raise PreconditionError("contraction estimate needs a slowly-decaying force")
    rng = np.random.default_rng(seed)
    if bd is None:
        bd = BoundaryData(t1, t1 * horizon_factor, r_i=1.25 * t1,
                          theta_f=(0.0,), rho_f=1.0, omega_i=(0.0,))
    grid = TimeGrid.graded(bd.t1, bd.t2, n_nodes)
    nodes = grid.nodes
    eps_t = getattr(F, "epsilon_tilde", 0.25)
    norm = WeightedNorm(bd.t1, eps_t, nodes)
    A = bd.n_ang

    def random_path(scale: float) -> CenteredPath:
        u = (nodes - bd.t1) / (nodes[-1] - bd.t1)
        ds = nodes - bd.t1

        def modes(count):
            coef = rng.normal(size=count)
            phase = rng.uniform(0, 2 * np.pi, size=count)
            out = np.zeros_like(u)
            for j in range(count):
                out += coef[j] * np.sin((j + 1) * np.pi * u + phase[j])
            return out / max(1, count)

        return CenteredPath(
            r=scale * ds * modes(3),
            theta=scale * np.column_stack([modes(3) for _ in range(A)]),
            rho=scale * (1 + nodes) ** (-eps_t) * modes(3),
            omega=scale * ds[:, None] ** (1 - eps_t)
            * np.column_stack([modes(3) for _ in range(A)]),
        )

    best = 0.0
    for _ in range(probe_count):
        scale = 10.0 ** rng.uniform(-3, 0)
        x = random_path(scale)
        y = random_path(scale)
        d = norm(x - y)
        if d == 0.0:
            continue
        Px = _picard_map(F, bd, nodes, x)
        Py = _picard_map(F, bd, nodes, y)
        best = max(best, norm(Px - Py) / d)
    return best


# =============================================================================
# ADAPTIVE RK4 (ORACLE-GRADE INTEGRATOR)
# =============================================================================

def adaptive_rk4(rhs, x0: np.ndarray, t0: float, t1: float,
                 t_eval: np.ndarray | None = None,
                 rtol: float = 1e-10, atol: float = 1e-12,
                 h0: float | None = None, max_steps: int = 2_000_000):
    """
    Classic RK4 with step doubling: each accepted step compares one
    full step against two half steps, keeps the Richardson-extrapolated
    fifth-order value, and adapts h by the usual 1/5-power rule.

    ``x0`` may be a batch (..., D); the error control is then the max over
    the batch (shared steps).  Returns (t_nodes, x_nodes) where t_nodes
    includes t0, all points of ``t_eval``, and t1.
    """
    x = np.array(x0, dtype=float)
    t = float(t0)
    direction = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)
    if span == 0:
        return np.array([t0]), np.array([x])
    targets = [t1] if t_eval is None else sorted(set(list(np.atleast_1d(t_eval)) + [t1]),
                                                 reverse=direction < 0)
    targets = [tt for tt in targets if (tt - t0) * direction > 1e-300]
    h = h0 if h0 is not None else span / 100.0
    out_t, out_x = [t], [x.copy()]

    def step(xc, tc, hc):
        k1 = np.asarray(rhs(tc, xc))
        k2 = np.asarray(rhs(tc + 0.5 * hc, xc + 0.5 * hc * k1))
        k3 = np.asarray(rhs(tc + 0.5 * hc, xc + 0.5 * hc * k2))
        k4 = np.asarray(rhs(tc + hc, xc + hc * k3))
        return xc + (hc / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    steps = 0
    for target in targets:
        while (target - t) * direction > 1e-13 * max(1.0, abs(t)):
            steps += 1
            if steps > max_steps:
                raise StiffnessError("adaptive RK4 exceeded the step budget")
            hc = direction * min(abs(h), abs(target - t))
            full = step(x, t, hc)
            half = step(step(x, t, 0.5 * hc), t + 0.5 * hc, 0.5 * hc)
            scale = atol + rtol * np.maximum(np.abs(x), np.abs(half))
            err = float(np.max(np.abs(half - full) / scale)) / 15.0
            if err <= 1.0:
                x = half + (half - full) / 15.0
                t = t + hc
                grow = 0.9 * err ** -0.2 if err > 0 else 5.0
                h = abs(hc) * min(5.0, max(0.2, grow))
            else:
                h = abs(hc) * max(0.1, 0.9 * err ** -0.2)
                if h < 1e-14 * max(1.0, abs(t)):
                    raise StiffnessError(
                        f"step-size underflow at t={t}: the problem looks stiff")
        out_t.append(t)
        out_x.append(x.copy())
    return np.array(out_t), np.array(out_x)


def _pack_rhs(F: ForceModel, n_ang: int):
    A = n_ang

    def rhs(t, x):
        r, th = x[..., 0], x[..., 1:1 + A]
        rho, om = x[..., 1 + A], x[..., 2 + A:2 + 2 * A]
        fr, fth, frho, fom = F.components(t, r, th, rho, om)
        out = np.empty_like(x)
        out[..., 0] = rho + fr
        out[..., 1:1 + A] = fth
        out[..., 1 + A] = frho
        out[..., 2 + A:2 + 2 * A] = fom
        return out

    return rhs


def solve_ivp(F: ForceModel, x0: PhasePoint, t_horizon: float,
              tol: float = 1e-10, t_eval: np.ndarray | None = None,
              region: OutgoingRegion | None = None) -> TrajectorySolution:
    """
    Forward solution of x' = (rho + F_r, F_theta, F_rho, F_omega) from
    x(0) = x0 by adaptive RK4.  For a long-range force a region may be
    passed to enforce the outgoing precondition x0 in Gamma.
    """
    if region is not None:
        r0, th0, rho0, om0 = x0.as_arrays()
        if not bool(region.contains(r0, th0, rho0, om0)):
            raise PreconditionError(f"initial point {x0} outside the outgoing region")
    A = len(x0.theta)
    state0 = np.concatenate([[x0.r], x0.theta, [x0.rho], x0.omega])
    if t_eval is None:
        t_eval = np.linspace(0.0, t_horizon, 257)
    ts, xs = adaptive_rk4(_pack_rhs(F, A), state0, 0.0, t_horizon,
                          t_eval=t_eval, rtol=tol, atol=tol * 1e-2)
    r = xs[:, 0]
    th = xs[:, 1:1 + A]
    rho = xs[:, 1 + A]
    om = xs[:, 2 + A:2 + 2 * A]
    return TrajectorySolution(
        s=ts, r=r, theta=th, rho=rho, omega=om,
        ring_r=r - x0.r - ts * x0.rho,
        ring_theta=th - np.asarray(x0.theta),
        ring_rho=rho - x0.rho,
        ring_omega=om - np.asarray(x0.omega),
        boundary=None,
        info={"method": "adaptive_rk4", "x0": x0, "tol": tol},
    )


def shooting_bvp(F: ForceModel, bd: BoundaryData, tol: float = 1e-9,
                 max_newton: int = 40) -> TrajectorySolution:
    """
    Independent boundary-value oracle: shoot on the unknown initial
    (theta, rho), integrate with adaptive RK4, and Newton on the final
    mismatch (finite-difference Jacobian, damped by step halving).

    The mismatch and its Jacobian columns are integrated as one batch so
    each Newton iteration costs a single (vectorized) RK4 sweep; the
    Newton phase runs at a relaxed tolerance and the converged initial
    data get one final tight integration.
    """
    if math.isinf(bd.t2):
        raise ConfigurationError("shooting oracle needs a finite horizon")
    A = bd.n_ang
    rhs = _pack_rhs(F, A)
    coarse = dict(rtol=min(1e-11, 0.1 * tol), atol=1e-13)

    def batch_mismatch(z_batch):
        """z_batch (B, A+1) -> mismatches (B, A+1), shared integration."""
        B = len(z_batch)
        states = np.empty((B, 2 + 2 * A))
        states[:, 0] = bd.r_i
        states[:, 1:1 + A] = z_batch[:, :A]
        states[:, 1 + A] = z_batch[:, A]
        states[:, 2 + A:] = np.asarray(bd.omega_i)
        _, xs = adaptive_rk4(rhs, states, bd.t1, bd.t2, **coarse)
        xf = xs[-1]
        dth = angle_difference(xf[:, 1:1 + A], np.asarray(bd.theta_f))
        return np.column_stack([dth, xf[:, 1 + A] - bd.rho_f])

    z = np.concatenate([bd.theta_f, [bd.rho_f]])
    m = batch_mismatch(z[None, :])[0]
    for _ in range(max_newton):
        if np.max(np.abs(m)) < tol:
            break
        hs = 1e-7 * np.maximum(1.0, np.abs(z))
        probes = [z]
        for j in range(A + 1):
            zp = z.copy(); zp[j] += hs[j]
            zm = z.copy(); zm[j] -= hs[j]
            probes += [zp, zm]
        vals = batch_mismatch(np.array(probes))
        m = vals[0]
        if np.max(np.abs(m)) < tol:
            break
        Jac = np.empty((A + 1, A + 1))
        for j in range(A + 1):
            Jac[:, j] = (vals[1 + 2 * j] - vals[2 + 2 * j]) / (2 * hs[j])
        try:
            dz = np.linalg.solve(Jac, -m)
        except np.linalg.LinAlgError as exc:
            raise InversionError(f"singular shooting Jacobian: {exc}") from exc
        lam = 1.0
        for _ in range(20):
            z_try = z + lam * dz
            m_try = batch_mismatch(z_try[None, :])[0]
            if np.max(np.abs(m_try)) < np.max(np.abs(m)):
                z, m = z_try, m_try
                break
            lam *= 0.5
        else:
            raise InversionError("shooting Newton stalled (damping exhausted)")
    else:
        raise InversionError(f"shooting Newton did not converge below {tol}")

    state0 = np.concatenate([[bd.r_i], z[:A], [z[A]], bd.omega_i])
    span = bd.t2 - bd.t1
    t_eval = np.concatenate([[bd.t1], bd.t1 + np.geomspace(1e-4 * span, span, 511)])
    ts, xs = adaptive_rk4(rhs, state0, bd.t1, bd.t2, t_eval=t_eval,
                          rtol=1e-12, atol=1e-13)
    r = xs[:, 0]; th = xs[:, 1:1 + A]; rho = xs[:, 1 + A]; om = xs[:, 2 + A:]
    return TrajectorySolution(
        s=ts, r=r, theta=th, rho=rho, omega=om,
        ring_r=r - bd.r_i - (ts - bd.t1) * bd.rho_f,
        ring_theta=th - np.asarray(bd.theta_f),
        ring_rho=rho - bd.rho_f,
        ring_omega=om - np.asarray(bd.omega_i),
        boundary=bd, info={"method": "rk4_shooting", "tol": tol})


# =============================================================================
# LONG-RANGE (TIME-INDEPENDENT) PROBLEMS ON OUTGOING REGIONS
# =============================================================================

def _require_effective(F: ForceModel, region: OutgoingRegion,
                       cutoff_params: CutoffParams | None,
                       t_threshold: float | None) -> EffectiveForce:
    if isinstance(F, EffectiveForce):
        return F
    if F.kind != "long-range":
        raise PreconditionError("long-range solver needs a long-range force")
    cut = cutoff_params or CutoffParams.defaults(region)
    if t_threshold is None:
        t_threshold = region.R * cut.C0 / (cut.C0 - cut.eps0)
    return effective_force(F, region, cut, t_threshold)


def solve_bvp_long_range(F: ForceModel, t: float, bd_tuple,
                         region: OutgoingRegion, tol: float = 1e-10,
                         cutoff_params: CutoffParams | None = None,
                         t_threshold: float | None = None,
                         n_nodes: int = 512) -> TrajectorySolution:
    """
    Boundary-value problem for a time-independent long-range force on
    [0, t]: (r, omega)(0) = (r_i, omega_i), (theta, rho)(t) = (theta_f,
    rho_f), for boundary data in the outgoing region.

    Solves the effective-force problem time-shifted by
    rbar = |r_i| C0 / (C0 - eps0) and checks a posteriori that the path
    stays where the cutoffs are identically one.
    """
    r_i, theta_f, rho_f, omega_i = bd_tuple
    Fe = _require_effective(F, region, cutoff_params, t_threshold)
    cut = Fe.cutoffs
    if not bool(region.contains(r_i, np.atleast_1d(theta_f), rho_f,
                                np.atleast_1d(omega_i))):
        raise PreconditionError(
            f"boundary data (r_i={r_i}, ...) outside the outgoing region")
    R_needed = Fe.t_threshold * (cut.C0 - cut.eps0) / cut.C0
    if region.R < R_needed - 1e-9:
        raise PreconditionError(
            f"region radius R={region.R} below the effective-force threshold "
            f"requirement R = T(C0-eps0)/C0 = {R_needed}")
    rbar = abs(r_i) * cut.C0 / (cut.C0 - cut.eps0)
    bd = BoundaryData(rbar, rbar + t, r_i=r_i, theta_f=theta_f,
                      rho_f=rho_f, omega_i=omega_i)
    sol_e = solve_bvp_time_dependent(Fe, bd, tol=tol, n_nodes=n_nodes)

    on = Fe.on_plateau(sol_e.s, sol_e.r, sol_e.theta, sol_e.rho, sol_e.omega)
    if not bool(np.all(on)):
        bad = sol_e.s[~on]
        raise ConsistencyError(
            f"path left the cutoff-identity region at s={bad[0] - rbar:.4g} "
            f"(and {np.count_nonzero(~on) - 1} more nodes): R too small")

    s_phys = sol_e.s - rbar
    return TrajectorySolution(
        s=s_phys, r=sol_e.r, theta=sol_e.theta, rho=sol_e.rho, omega=sol_e.omega,
        ring_r=sol_e.r - r_i - s_phys * rho_f,
        ring_theta=sol_e.theta - np.asarray(bd.theta_f),
        ring_rho=sol_e.rho - rho_f,
        ring_omega=sol_e.omega - np.asarray(bd.omega_i),
        boundary=bd,
        info={**sol_e.info, "rbar": rbar, "time_shifted": True})


def boundary_to_initial(F: ForceModel, bd_tuple, region: OutgoingRegion,
                        tol: float = 1e-10,
                        cutoff_params: CutoffParams | None = None,
                        t_threshold: float | None = None,
                        horizon_factor: float = 256.0,
                        n_nodes: int = 512):
    """
    Time-zero phase point of the infinite-horizon boundary problem:
    data (r_i, theta_f, rho_f, omega_i) at t = (0, inf, inf, 0) mapped to
    (r_0, theta_0, rho_0, omega_0) = path(0).  (r_0, omega_0) equal
    (r_i, omega_i) exactly.  The horizon is truncated at
    ``horizon_factor * rbar``; asymptotic data carry that truncation.
    """
    r_i, theta_f, rho_f, omega_i = bd_tuple
    Fe = _require_effective(F, region, cutoff_params, t_threshold)
    cut = Fe.cutoffs
    rbar = abs(r_i) * cut.C0 / (cut.C0 - cut.eps0)
    t = rbar * (horizon_factor - 1.0)
    sol = solve_bvp_long_range(F if not isinstance(F, EffectiveForce) else Fe,
                               t, bd_tuple, region, tol=tol,
                               cutoff_params=cut,
                               t_threshold=Fe.t_threshold, n_nodes=n_nodes)
    return PhasePoint(r=float(sol.r[0]), theta=tuple(np.atleast_1d(sol.theta[0])),
                      rho=float(sol.rho[0]), omega=tuple(np.atleast_1d(sol.omega[0])))


def initial_to_boundary(F: ForceModel, x0: PhasePoint, region: OutgoingRegion,
                        tol: float = 1e-9, max_newton: int = 40,
                        cutoff_params: CutoffParams | None = None,
                        t_threshold: float | None = None,
                        horizon_factor: float = 256.0,
                        n_nodes: int = 512):
    """
    Asymptotic data (theta_f, rho_f) of the forward trajectory from x0:
    numerically inverts ``boundary_to_initial`` by damped Newton on
    (theta_f, rho_f) with (r_i, omega_i) = (r_0, omega_0) held fixed.
    """
    r0, th0, rho0, om0 = x0.as_arrays()
    if not bool(region.contains(r0, th0, rho0, om0)):
        raise PreconditionError("initial point outside the outgoing region")
    A = len(x0.theta)
    target = np.concatenate([np.atleast_1d(th0), [rho0]])

    def g(z):
        theta_f = tuple(z[:A])
        rho_f = float(z[A])
        pt = boundary_to_initial(F, (x0.r, theta_f, rho_f, x0.omega), region,
                                 tol=min(tol * 1e-2, 1e-10),
                                 cutoff_params=cutoff_params,
                                 t_threshold=t_threshold,
                                 horizon_factor=horizon_factor,
                                 n_nodes=n_nodes)
        got = np.concatenate([pt.theta, [pt.rho]])
        out = got - target
        out[:A] = angle_difference(got[:A], target[:A])
        return out

    z = target.copy()
    m = g(z)
    for _ in range(max_newton):
        if np.max(np.abs(m)) < tol:
            return tuple(z[:A]), float(z[A])
        Jac = np.zeros((A + 1, A + 1))
        for j in range(A + 1):
            h = 1e-6 * max(1.0, abs(z[j]))
            zp = z.copy(); zp[j] += h
            zm = z.copy(); zm[j] -= h
            Jac[:, j] = (g(zp) - g(zm)) / (2 * h)
        try:
            dz = np.linalg.solve(Jac, -m)
        except np.linalg.LinAlgError as exc:
            raise InversionError(
                "singular Jacobian inverting the boundary map "
                "(region too small?)") from exc
        lam = 1.0
        for _ in range(20):
            z_try = z + lam * dz
            m_try = g(z_try)
            if np.max(np.abs(m_try)) < np.max(np.abs(m)):
                z, m = z_try, m_try
                break
            lam *= 0.5
        else:
            raise InversionError("Newton damping exhausted inverting boundary map")
    raise InversionError(
        f"initial_to_boundary did not converge below {tol} "
        "(signals the region radius R is too small)")


# =============================================================================
# ESTIMATE VERIFICATION (SLOPE FITS AGAINST THE CLAIMED TABLE)
# =============================================================================

def _solve_family(Fe: EffectiveForce, t1: float, bd_list, n_nodes=384,
                  horizon_factor=64.0, tol=1e-11):
    sols = []
    for (r_i, th_f, rho_f, om_i) in bd_list:
        bd = BoundaryData(t1, t1 * horizon_factor, r_i=r_i, theta_f=th_f,
                          rho_f=rho_f, omega_i=om_i)
        sols.append(solve_bvp_time_dependent(Fe, bd, tol=tol, n_nodes=n_nodes))
    return sols


def _bd_lattice(Fe: EffectiveForce, t1: float, edge_fraction: float = 0.9):
    """
    Boundary-data lattice saturating the uniformity class Gamma_{R,U,J,Q}:
    radial data on the moving plateau (r_i ~ t1) and angular momenta up
    to the Gamma-edge scale Q r_i^(1-eps~).
    """
    lo, hi = Fe.region.J
    r_i = 1.25 * t1
    om_edge = edge_fraction * Fe.region.Q * r_i ** (1.0 - Fe.epsilon_tilde)
    lattice = []
    for rho_f in (lo, 0.5 * (lo + hi), hi):
        for th_f in (0.0, 2.1):
            for om in (0.0, om_edge):
                lattice.append((r_i, (th_f,), rho_f, (om,)))
    return lattice


def verify_trajectory_estimates(F: ForceModel, region: OutgoingRegion,
                                t1_values=None, which: str = "first",
                                tolerance: float = 0.15,
                                cutoff_params: CutoffParams | None = None,
                                n_nodes: int = 384,
                                fd_steps: dict | None = None) -> DecayReport:
    """
    Slope-fit verification of the boundary-value estimates.

    which='zeroth': fits of sup |ring_theta|, |ring_rho| against s (the
    claimed profile is a bound; fits are one-sided: at least that decay).
    which='first': fits in t1 of the first-derivative table entries,
    evaluated at their sup over s (attained near s = t1) with derivatives
    by central differences in the boundary data.  The claimed t1-exponent
    of an entry combines the s-profile at s ~ t1 with the t1-column
    factor; entries tested here are saturated by the edge lattice, so the
    comparison is two-sided.
    """
    if t1_values is None:
        t1_values = [20.0, 40.0, 80.0, 160.0, 320.0]
    t1_values = np.asarray(t1_values, dtype=float)
    Fe = _require_effective(F, region, cutoff_params, t_threshold=min(t1_values))
    eps_t = Fe.epsilon_tilde
    eps = 2.0 * eps_t
    steps = {"r_i": 1e-3, "theta_f": 1e-4, "rho_f": 1e-4, "omega_i": 1e-3}
    steps.update(fd_steps or {})
    report = DecayReport(title=f"trajectory estimates ({which}), eps={eps}")

    if which == "zeroth":
        t1 = float(t1_values[0])
        bds = _bd_lattice(Fe, t1)
        sols = _solve_family(Fe, t1, bds, n_nodes=n_nodes)
        s_probe = t1 * 2.0 ** np.arange(5)
        for name, comp, claimed in (("sup|ring_theta| in s", "ring_theta", -eps_t),
                                    ("sup|ring_rho| in s", "ring_rho", -eps_t)):
            sups = []
            for sp in s_probe:
                vals = [np.max(np.abs(getattr(sol, comp)[np.searchsorted(sol.s, sp)]))
                        for sol in sols]
                sups.append(max(vals))
            report.add(make_fit(name, s_probe, np.array(sups), claimed, tolerance,
                                one_sided=True,
                                note="claimed profile is an upper bound"))
        return report

    # first-derivative table entries, fitted in t1 at the sup over s
    entries = {
        "d(ring_theta)/d(theta_f)": ("theta_f", "ring_theta", -eps_t),
        "d(ring_theta)/d(omega_i)": ("omega_i", "ring_theta", -1.0),
        "d(ring_theta)/d(rho_f)": ("rho_f", "ring_theta", -eps_t),
        "d(ring_rho)/d(rho_f)": ("rho_f", "ring_rho", -eps),
        "d(ring_rho)/d(r_i)": ("r_i", "ring_rho", -(1.0 + eps)),
    }
    sups = {name: [] for name in entries}
    for t1 in t1_values:
        bds = _bd_lattice(Fe, float(t1))
        for name, (var, comp, _) in entries.items():
            best = 0.0
            for bd_tuple in bds:
                r_i, th_f, rho_f, om_i = bd_tuple
                h = steps[var] * (max(1.0, abs(r_i)) if var == "r_i"
                                  else max(1.0, abs(om_i[0])) if var == "omega_i"
                                  else 1.0)
                bump = {
                    "r_i": lambda s: (r_i + s, th_f, rho_f, om_i),
                    "theta_f": lambda s: (r_i, (th_f[0] + s,), rho_f, om_i),
                    "rho_f": lambda s: (r_i, th_f, rho_f + s, om_i),
                    "omega_i": lambda s: (r_i, th_f, rho_f, (om_i[0] + s,)),
                }[var]
                sol_p, sol_m = _solve_family(Fe, float(t1),
                                             [bump(h), bump(-h)], n_nodes=n_nodes)
                dcomp = (getattr(sol_p, comp) - getattr(sol_m, comp)) / (2 * h)
                best = max(best, float(np.max(np.abs(dcomp))))
            sups[name].append(best)
    for name, (_, _, claimed) in entries.items():
        report.add(make_fit(name, t1_values, np.array(sups[name]), claimed,
                            tolerance, one_sided=False,
                            note="sup over s; claimed exponent combines the "
                                 "s-profile at s~t1 with the t1 column factor"))
    return report


def export_family_csv(out_dir, sols: list[TrajectorySolution],
                      manifest_extra: dict | None = None) -> None:
    """One CSV per trajectory plus a manifest listing the boundary data."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"files": [], **(manifest_extra or {})}
    for i, sol in enumerate(sols):
        name = f"trajectory_{i:03d}.csv"
        sol.export_csv(out_dir / name)
        bd = sol.boundary
        manifest["files"].append({
            "file": name,
            "t1": bd.t1 if bd else None,
            "t2": bd.t2 if bd else None,
            "r_i": bd.r_i if bd else None,
            "theta_f": list(bd.theta_f) if bd else None,
            "rho_f": bd.rho_f if bd else None,
            "omega_i": list(bd.omega_i) if bd else None,
            "sweeps": sol.info.get("sweeps"),
        })
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
