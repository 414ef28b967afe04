# manifold.py
"""
Model geometry on the conic end, the classical Hamiltonian, and forces.

The end of the manifold is a product (0, inf) x boundary with coordinates
(r, theta) and phase-space coordinates (r, theta, rho, omega).  The
classical Hamiltonian splits as

    h = rho^2/2 + htilde,
    htilde = a1 rho^2 / 2 + a2 . (rho omega) / r
             + omega . a3 omega / (2 r^2) + V_L(r, theta),

and the associated force is

    (F_r, F_theta, F_rho, F_omega)
        = (d_rho htilde, d_omega htilde, -d_r htilde, -d_theta htilde),

so Newton's equation reads (r', theta', rho', omega') = (rho + F_r,
F_theta, F_rho, F_omega).

Shipped test model (n = 2, circle boundary, H(theta) = 1):

    a1 = c1 <r>^-eps cos(theta),     a2 = (c2 <r>^-eps sin(theta),),
    a3 = ((1 + c3 cos(theta)),),     V_L = cL j(r) <r>^-eps,

with <r> = 1 + r j(r) and j the smooth switch from `profiles`.  All
derivative evaluators for this model are closed-form (jets in r times
shifted trigs in theta).

Decay bookkeeping follows the index table

    m(l, a, 0, 0) = m(l, a, 1, 0) = m(l, a, 2, 0) = l + eps
    m(l, a, 0, |b|=1) = l + 1 + eps/2
    m(l, a, 1, |b|=1) = l + 1 + eps
    m(l, a, 0, |b|=2) = l + 2
    m = +inf when k + |b| >= 3,

with component indices n_r = m(l, a, k+1, b), n_theta = m(l, a, k, b+e),
n_rho = m(l+1, a, k, b), n_omega = m(l, a+e, k, b).  A slowly-decaying
(time-dependent) force obeys these rates in t over all of phase space; a
long-range (time-independent) force obeys them in R over outgoing regions

    Gamma_{R,U,J,Q} = {r > R, theta in U, rho in J, |omega| <= Q r^(1-eps/2)}.

All evaluators are pure and vectorized; arrays of shape (...,) for r, rho
and (..., n-1) for theta, omega broadcast through every operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (CapabilityError, ConfigurationError, DomainError,
                     PreconditionError)
from .fitting import DecayFit, DecayReport, make_fit
from .profiles import (MAX_JET_ORDER, SmoothBump, jet_product, jfun_jet,
                       rbracket_power_jet)

TWO_PI = 2.0 * math.pi


def _as_multi_index(alpha, n_ang: int) -> tuple[int, ...]:
    """Normalize an angular derivative order to a multi-index tuple."""
    if isinstance(alpha, (int, np.integer)):
        if n_ang == 1:
            return (int(alpha),)
        if alpha == 0:
            return (0,) * n_ang
        raise CapabilityError("scalar angular order is ambiguous for n > 2")
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != n_ang:
        raise CapabilityError(f"multi-index length {len(alpha)} != n-1 = {n_ang}")
    return alpha


def wrap_angle(theta):
    """Reduce angles componentwise to the fundamental domain [0, 2*pi)."""
    return np.mod(theta, TWO_PI)


def angle_difference(a, b):
    """Shortest signed representative of a - b on the circle."""
    d = np.asarray(a) - np.asarray(b)
    return (d + math.pi) % TWO_PI - math.pi


# =============================================================================
# PARAMETERS AND DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class ModelParams:
    """
    Model constants: dimension, long-range decay exponent and perturbation
    strengths.  ``epsilon_tilde`` is derived as epsilon/2 and stored.
    """

    n: int = 2
    epsilon: float = 0.5
    c1: float = 0.1
    c2: float = 0.1
    c3: float = 0.2
    cL: float = 0.3
    cS: float = 0.2
    eta: float = 0.5
    boundary_density: float = 1.0  # constant H(theta) for the circle model
    epsilon_tilde: float = field(init=False)

    def __post_init__(self):
        if self.n < 2:
            raise ConfigurationError(f"spatial dimension must be >= 2, got n={self.n}")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigurationError(
                f"invariant 0 < epsilon < 1 violated: epsilon={self.epsilon}")
        if self.boundary_density <= 0.0:
            raise ConfigurationError("boundary density H must be positive")
        if abs(self.c3) >= 1.0:
            raise ConfigurationError(
                f"|c3| < 1 required for positive-definite a3, got c3={self.c3}")
        object.__setattr__(self, "epsilon_tilde", 0.5 * self.epsilon)

    @property
    def n_ang(self) -> int:
        return self.n - 1


@dataclass(frozen=True)
class PhasePoint:
    """A point (r, theta, rho, omega) of phase space; theta stored wrapped."""

    r: float
    theta: tuple
    rho: float
    omega: tuple

    def __post_init__(self):
        th = tuple(float(x) % TWO_PI for x in np.atleast_1d(self.theta))
        om = tuple(float(x) for x in np.atleast_1d(self.omega))
        vals = (self.r, self.rho) + th + om
        if not all(math.isfinite(v) for v in vals):
            raise DomainError("phase point has non-finite coordinates")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "rho", float(self.rho))

    def as_arrays(self):
        return (np.float64(self.r), np.array(self.theta),
                np.float64(self.rho), np.array(self.omega))


class DecayIndexTable:
    """The decay-index table m(l, alpha, k, beta) and derived component rates."""

    def __init__(self, epsilon: float):
        if not 0 < epsilon < 1:
            raise ConfigurationError("decay table needs 0 < epsilon < 1")
        self.epsilon = float(epsilon)
        self.epsilon_tilde = 0.5 * epsilon

    def m(self, l: int, alpha, k: int, beta) -> float:
        babs = int(np.sum(beta)) if not isinstance(beta, (int, np.integer)) else int(beta)
        if k + babs >= 3:
            return math.inf
        if babs == 0:
            return l + self.epsilon          # k = 0, 1, 2
        if babs == 1:
            return l + 1 + (self.epsilon_tilde if k == 0 else self.epsilon)
        if babs == 2:
            return l + 2 if k == 0 else math.inf
        return math.inf

    def n_r(self, l, alpha, k, beta):
        return self.m(l, alpha, k + 1, beta)

    def n_theta(self, l, alpha, k, beta):
        babs = int(np.sum(beta)) if not isinstance(beta, (int, np.integer)) else int(beta)
        return self.m(l, alpha, k, babs + 1)

    def n_rho(self, l, alpha, k, beta):
        return self.m(l + 1, alpha, k, beta)

    def n_omega(self, l, alpha, k, beta):
        return self.m(l, alpha, k, beta)  # alpha + e_i leaves the value unchanged

    def component_rate(self, component: str, l, alpha, k, beta) -> float:
        return {
            "r": self.n_r, "theta": self.n_theta,
            "rho": self.n_rho, "omega": self.n_omega,
        }[component](l, alpha, k, beta)


@dataclass(frozen=True)
class AngularBox:
    """
    A box window on the boundary torus.  ``full=True`` means all of the
    boundary (the window used by the Hamilton-Jacobi builds); otherwise the
    box is the product of arcs center +- halfwidth.
    """

    full: bool = True
    center: tuple = (0.0,)
    halfwidth: tuple = (math.pi / 2,)

    def contains(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.full:
            return np.ones(theta.shape[:-1], dtype=bool)
        d = np.abs(angle_difference(theta, np.asarray(self.center)))
        return np.all(d <= np.asarray(self.halfwidth), axis=-1)

    def expanded(self, margin: float) -> "AngularBox":
        if self.full:
            return self
        hw = tuple(min(h + margin, math.pi) for h in self.halfwidth)
        if all(h >= math.pi for h in hw):
            return AngularBox(full=True)
        return AngularBox(False, self.center, hw)

    def sample(self, count: int) -> np.ndarray:
        if self.full:
            pts = np.linspace(0.0, TWO_PI, count, endpoint=False)
        else:
            c, h = self.center[0], self.halfwidth[0]
            pts = np.linspace(c - h, c + h, count)
        return pts[:, None]  # shape (count, n_ang=1)


@dataclass(frozen=True)
class OutgoingRegion:
    """
    Outgoing phase-space region: r > R, theta in U, rho in J,
    |omega| <= Q * r^(1 - epsilon_tilde).
    """

    R: float
    J: tuple
    Q: float
    U: AngularBox = AngularBox(full=True)
    epsilon_tilde: float = 0.25

    def __post_init__(self):
        if self.R <= 0:
            raise ConfigurationError("outgoing region needs R > 0")
        lo, hi = self.J
        if not 0 < lo < hi:
            raise ConfigurationError(
                f"momentum window must satisfy 0 < lo < hi, got J={self.J}")
        if self.Q <= 0:
            raise ConfigurationError("outgoing region needs Q > 0")

    def contains(self, r, theta, rho, omega) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        rho = np.asarray(rho, dtype=float)
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        lo, hi = self.J
        ok = (r > self.R) & (rho >= lo) & (rho <= hi)
        ok &= self.U.contains(theta)
        om_norm = np.linalg.norm(omega, axis=-1)
        ok &= om_norm <= self.Q * np.maximum(r, 0.0) ** (1.0 - self.epsilon_tilde)
        return ok

    def expanded(self, j_factor: float = 1.4, u_margin: float = math.pi / 4):
        """The enlarged companion region (J-tilde, U-tilde) for cutoffs."""
        lo, hi = self.J
        width = hi - lo
        lo2 = max(0.25 * lo, lo - 0.5 * (j_factor - 1.0) * width)
        hi2 = hi + 0.5 * (j_factor - 1.0) * width
        return OutgoingRegion(self.R, (lo2, hi2), self.Q,
                              self.U.expanded(u_margin), self.epsilon_tilde)

    def lattice(self, R: float | None = None, n_r: int = 3, n_theta: int = 8,
                n_rho: int = 5, omega_fracs=(0.0, 0.35, 0.999)) -> tuple:
        """
        A sampling lattice inside the region with inner radius ``R``.
        The omega samples scale with the Gamma edge Q r^(1-eps~) so that
        edge behavior is exercised.  Returns broadcastable flat arrays.
        """
        Rv = float(self.R if R is None else R)
        rs = Rv * np.array([1.0, 1.6, 2.5][:n_r])
        ths = self.U.sample(n_theta)
        lo, hi = self.J
        rhos = np.linspace(lo, hi, n_rho)
        pts_r, pts_th, pts_rho, pts_om = [], [], [], []
        for r in rs:
            om_edge = self.Q * r ** (1.0 - self.epsilon_tilde)
            for th in ths:
                for rho in rhos:
                    for frac in omega_fracs:
                        for sign in ((1.0,) if frac == 0.0 else (1.0, -1.0)):
                            pts_r.append(r)
                            pts_th.append(th)
                            pts_rho.append(rho)
                            pts_om.append([sign * frac * om_edge])
        if not pts_r:
            raise ConfigurationError("empty sampling lattice")
        return (np.array(pts_r), np.array(pts_th), np.array(pts_rho),
                np.array(pts_om))


# =============================================================================
# METRIC PERTURBATIONS
# =============================================================================

class MetricPerturbation:
    """
    Interface: evaluators for a1 (scalar), a2 ((n-1)-covector), a3
    (symmetric (n-1)x(n-1) tensor) and V_L (scalar) with mixed
    (r, theta)-derivatives up to total order 4.

    ``deriv`` arguments: l = radial order, alpha = angular multi-index.
    Shapes broadcast; a2 gains trailing axis (n-1), a3 (n-1, n-1).
    """

    n_ang: int = 1
    max_order: int = MAX_JET_ORDER
    decay_mu = {"a1": None, "a2": None, "a3": 0.0, "vl": None}

    def a1_deriv(self, l, alpha, r, theta):
        raise NotImplementedError

    def a2_deriv(self, l, alpha, r, theta):
        raise NotImplementedError

    def a3_deriv(self, l, alpha, r, theta):
        raise NotImplementedError

    def vl_deriv(self, l, alpha, r, theta):
        raise NotImplementedError

    def check_order(self, l, alpha):
        if l + int(np.sum(alpha)) > self.max_order:
            raise CapabilityError(
                f"derivative order {l}+|{alpha}| exceeds capability {self.max_order}")


def _trig_deriv(kind: str, order: int, x: np.ndarray) -> np.ndarray:
    """order-th derivative of cos or sin via the quarter-turn shift."""
    shift = order * math.pi / 2.0
    if kind == "cos":
        return np.cos(x + shift)
    return np.sin(x + shift)


class ShippedPerturbation(MetricPerturbation):
    """
    The closed-form circle model described in the module docstring.  All
    fields are separable products f(r) g(theta); derivatives are exact.
    """

    def __init__(self, params: ModelParams):
        if params.n != 2:
            raise ConfigurationError("shipped perturbation is the n = 2 circle model")
        self.params = params
        self.n_ang = 1
        self.decay_mu = {"a1": params.epsilon, "a2": params.epsilon,
                         "a3": 0.0, "vl": params.epsilon}

    # radial profiles -------------------------------------------------------
    def _w_jet(self, r):
        return rbracket_power_jet(r, -self.params.epsilon)

    def _vl_jet(self, r):
        w = self._w_jet(r)
        if np.all(np.asarray(r, dtype=float) >= 1.0):
            return self.params.cL * w  # j = 1 identically there
        return self.params.cL * jet_product(jfun_jet(r), w)

    # field evaluators ------------------------------------------------------
    def a1_deriv(self, l, alpha, r, theta):
        self.check_order(l, alpha)
        a = _as_multi_index(alpha, 1)[0]
        th = np.asarray(theta, dtype=float)[..., 0]
        return self.params.c1 * self._w_jet(r)[l] * _trig_deriv("cos", a, th)

    def a2_deriv(self, l, alpha, r, theta):
        self.check_order(l, alpha)
        a = _as_multi_index(alpha, 1)[0]
        th = np.asarray(theta, dtype=float)[..., 0]
        val = self.params.c2 * self._w_jet(r)[l] * _trig_deriv("sin", a, th)
        return val[..., None]

    def a3_deriv(self, l, alpha, r, theta):
        self.check_order(l, alpha)
        a = _as_multi_index(alpha, 1)[0]
        th = np.asarray(theta, dtype=float)[..., 0]
        if l > 0:
            val = np.zeros_like(th)
        else:
            val = self.params.c3 * _trig_deriv("cos", a, th)
            if a == 0:
                val = 1.0 + val
        return val[..., None, None]

    def vl_deriv(self, l, alpha, r, theta):
        self.check_order(l, alpha)
        a = _as_multi_index(alpha, 1)[0]
        if a > 0:
            r = np.asarray(r, dtype=float)
            th = np.asarray(theta, dtype=float)[..., 0]
            return np.zeros(np.broadcast(r, th).shape)
        th = np.asarray(theta, dtype=float)[..., 0]
        return self._vl_jet(r)[l] * np.ones_like(th)


class CallablePerturbation(MetricPerturbation):
    """
    User-supplied fields with finite-difference derivatives (central,
    2nd order, step 1e-5 * max(1, |x|)).  Lower accuracy than the shipped
    closed forms; intended for quick experiments with custom models.
    """

    lower_accuracy = True

    def __init__(self, a1, a2, a3, vl, n_ang: int = 1, max_order: int = 4):
        self._f = {"a1": a1, "a2": a2, "a3": a3, "vl": vl}
        self.n_ang = n_ang
        self.max_order = max_order

    def _fd(self, f, l, alpha, r, theta):
        if l > 0:
            h = 1e-5 * np.maximum(1.0, np.abs(r))
            up = self._fd(f, l - 1, alpha, r + h, theta)
            dn = self._fd(f, l - 1, alpha, r - h, theta)
            return (up - dn) / (2.0 * h)
        a = list(_as_multi_index(alpha, self.n_ang))
        for i, ai in enumerate(a):
            if ai > 0:
                a[i] -= 1
                h = 1e-5
                e = np.zeros(self.n_ang)
                e[i] = h
                theta = np.asarray(theta, dtype=float)
                up = self._fd(f, 0, tuple(a), r, theta + e)
                dn = self._fd(f, 0, tuple(a), r, theta - e)
                return (up - dn) / (2.0 * h)
        return np.asarray(f(r, theta), dtype=float)

    def a1_deriv(self, l, alpha, r, theta):
        self.check_order(l, alpha)
        return self._fd(self._f["a1"], l, alpha, r, theta)

    def a2_deriv(self, l, alpha, r, theta):
        self.check_order(l, alpha)
        return self._fd(self._f["a2"], l, alpha, r, theta)

    def a3_deriv(self, l, alpha, r, theta):
        self.check_order(l, alpha)
        return self._fd(self._f["a3"], l, alpha, r, theta)

    def vl_deriv(self, l, alpha, r, theta):
        self.check_order(l, alpha)
        return self._fd(self._f["vl"], l, alpha, r, theta)


def zero_perturbation(params: ModelParams) -> ShippedPerturbation:
    """The shipped model with every perturbation coefficient switched off."""
    free = ModelParams(n=params.n, epsilon=params.epsilon, c1=0.0, c2=0.0,
                       c3=0.0, cL=0.0, cS=0.0, eta=params.eta,
                       boundary_density=params.boundary_density)
    return ShippedPerturbation(free)


# =============================================================================
# HAMILTONIAN AND ITS PARTIAL DERIVATIVES
# =============================================================================

def _inv_r_derivs(r: np.ndarray, power: int, l: int) -> np.ndarray:
    """l-th derivative of r^(-power) for power in {1, 2}."""
    coeff = 1.0
    for i in range(l):
        coeff *= -(power + i)
    return coeff * r ** (-(power + l))


def htilde_partial(params: ModelParams, pert: MetricPerturbation,
                   l: int, alpha, k: int, beta,
                   r, theta, rho, omega) -> np.ndarray:
    """
    Mixed partial d_r^l d_theta^alpha d_rho^k d_omega^beta of htilde.

    htilde is quadratic in (rho, omega), so k >= 3 or |beta| >= 3 (and any
    mixed order with k + |beta| >= 3) vanishes identically.
    """
    n_ang = params.n_ang
    alpha = _as_multi_index(alpha, n_ang)
    beta = _as_multi_index(beta, n_ang)
    babs = sum(beta)
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    rho = np.asarray(rho, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if np.any(r <= 0):
        raise DomainError("htilde requires r > 0")
    shape = np.broadcast(r, theta[..., 0], rho, omega[..., 0]).shape
    out = np.zeros(shape)
    if k + babs > 2:
        return out

    # coefficient partials: A1 = a1, A2 = a2 / r, A3 = a3 / r^2, A0 = V_L
    def A1(lr):
        return pert.a1_deriv(lr, alpha, r, theta)

    def A2(lr):
        acc = 0.0
        for i in range(lr + 1):
            acc = acc + (math.comb(lr, i) * pert.a2_deriv(i, alpha, r, theta)
                         * _inv_r_derivs(r, 1, lr - i)[..., None])
        return acc

    def A3(lr):
        acc = 0.0
        for i in range(lr + 1):
            acc = acc + (math.comb(lr, i) * pert.a3_deriv(i, alpha, r, theta)
                         * _inv_r_derivs(r, 2, lr - i)[..., None, None])
        return acc

    # rho-polynomial factors
    rho_sq = {0: rho ** 2, 1: 2.0 * rho, 2: 2.0 * np.ones(shape)}.get(k)
    rho_lin = {0: rho, 1: np.ones(shape)}.get(k)

    # a1 term: (1/2) A1 rho^2, only beta = 0 contributes
    if babs == 0 and rho_sq is not None:
        out = out + 0.5 * A1(l) * rho_sq

    # a2 term: sum_i A2_i rho omega_i
    if rho_lin is not None:
        a2v = A2(l)
        if babs == 0:
            out = out + np.sum(a2v * omega, axis=-1) * rho_lin
        elif babs == 1:
            i = beta.index(1)
            out = out + a2v[..., i] * rho_lin

    # a3 term: (1/2) omega . A3 omega, only k = 0 contributes
    if k == 0:
        a3v = A3(l)
        if babs == 0:
            out = out + 0.5 * np.einsum("...ij,...i,...j->...", a3v, omega, omega)
        elif babs == 1:
            i = beta.index(1)
            out = out + np.einsum("...j,...j->...", a3v[..., i, :], omega)
        else:  # |beta| = 2
            idx = [i for i, b in enumerate(beta) for _ in range(b)]
            out = out + a3v[..., idx[0], idx[1]]

    # potential term
    if k == 0 and babs == 0:
        out = out + pert.vl_deriv(l, alpha, r, theta)
    return out


def eval_htilde(params, pert, r, theta, rho, omega):
    zero = (0,) * params.n_ang
    return htilde_partial(params, pert, 0, zero, 0, zero, r, theta, rho, omega)


def eval_hamiltonian(params: ModelParams, pert: MetricPerturbation,
                     x, theta=None, rho=None, omega=None):
    """
    h(r, theta, rho, omega) = rho^2/2 + htilde.  Accepts either a
    PhasePoint or raw (r, theta, rho, omega) arrays.  Raises DomainError
    for non-positive r.
    """
    if isinstance(x, PhasePoint):
        r, theta, rho, omega = x.as_arrays()
    else:
        r = x
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise DomainError("hamiltonian requires r > 0")
    rho = np.asarray(rho, dtype=float)
    return 0.5 * rho ** 2 + eval_htilde(params, pert, r, theta, rho, omega)


# =============================================================================
# FORCE MODELS
# =============================================================================

_COMPONENTS = ("r", "theta", "rho", "omega")


class ForceModel:
    """
    Evaluator of (F_r, F_theta, F_rho, F_omega) and of mixed phase-space
    partials up to total order 3.  ``kind`` is 'long-range'
    (time-independent) or 'slowly-decaying' (time-dependent); the time
    argument is ignored by time-independent models.
    """

    kind = "long-range"
    max_deriv_order = 3

    def __init__(self, n_ang: int = 1):
        self.n_ang = n_ang

    def components(self, t, r, theta, rho, omega):
        raise NotImplementedError

    def component_deriv(self, component, l, alpha, k, beta, t, r, theta, rho, omega):
        raise NotImplementedError

    def _check_deriv_order(self, l, alpha, k, beta):
        total = l + int(np.sum(alpha)) + k + int(np.sum(beta))
        if total > self.max_deriv_order:
            raise CapabilityError(
                f"force derivatives available up to total order "
                f"{self.max_deriv_order}, requested {total}")

    def rhs(self, t, r, theta, rho, omega):
        """Newton right-hand side (rho + F_r, F_theta, F_rho, F_omega)."""
        fr, fth, frho, fom = self.components(t, r, theta, rho, omega)
        return np.asarray(rho) + fr, fth, frho, fom


class ZeroForce(ForceModel):
    """F identically zero; usable in both kinds."""

    def __init__(self, n_ang: int = 1, kind: str = "slowly-decaying"):
        super().__init__(n_ang)
        self.kind = kind

    def components(self, t, r, theta, rho, omega):
        r = np.asarray(r, dtype=float)
        theta = np.asarray(theta, dtype=float)
        shape = np.broadcast(r, theta[..., 0]).shape
        z = np.zeros(shape)
        zv = np.zeros(shape + (self.n_ang,))
        return z, zv, z, zv.copy()

    def component_deriv(self, component, l, alpha, k, beta, t, r, theta, rho, omega):
        self._check_deriv_order(l, alpha, k, beta)
        fr, fth, frho, fom = self.components(t, r, theta, rho, omega)
        return {"r": fr, "theta": fth, "rho": frho, "omega": fom}[component]


class HamiltonianForce(ForceModel):
    """
    The long-range force of the classical Hamiltonian:
    (d_rho htilde, d_omega htilde, -d_r htilde, -d_theta htilde).
    Derivatives are exact partials of htilde shifted by one order.
    """

    kind = "long-range"

    def __init__(self, params: ModelParams, pert: MetricPerturbation):
        super().__init__(params.n_ang)
        self.params = params
        self.pert = pert

    def components(self, t, r, theta, rho, omega):
        # fused evaluation: each coefficient partial is computed once
        pert = self.pert
        A = self.n_ang
        zero = (0,) * A
        r = np.asarray(r, dtype=float)
        theta = np.asarray(theta, dtype=float)
        rho = np.asarray(rho, dtype=float)
        omega = np.asarray(omega, dtype=float)
        if np.any(r <= 0):
            raise DomainError("force evaluation requires r > 0")
        inv1 = 1.0 / r
        inv2 = inv1 * inv1
        a1 = pert.a1_deriv(0, zero, r, theta)
        a2 = pert.a2_deriv(0, zero, r, theta)
        a3 = pert.a3_deriv(0, zero, r, theta)
        A2 = a2 * inv1[..., None]
        A3 = a3 * inv2[..., None, None]
        fr = a1 * rho + np.einsum("...i,...i->...", A2, omega)
        fth = A2 * rho[..., None] + np.einsum("...ij,...j->...i", A3, omega)
        a1r = pert.a1_deriv(1, zero, r, theta)
        a2r = pert.a2_deriv(1, zero, r, theta)
        a3r = pert.a3_deriv(1, zero, r, theta)
        vlr = pert.vl_deriv(1, zero, r, theta)
        A2r = a2r * inv1[..., None] - a2 * inv2[..., None]
        A3r = (a3r * inv2[..., None, None]
               - 2.0 * a3 * (inv2 * inv1)[..., None, None])
        frho = -(0.5 * a1r * rho ** 2
                 + np.einsum("...i,...i->...", A2r, omega) * rho
                 + 0.5 * np.einsum("...ij,...i,...j->...", A3r, omega, omega)
                 + vlr)
        fom = np.empty(np.broadcast(fr, omega[..., 0]).shape + (A,))
        for i in range(A):
            e = _unit(i, A)
            a1t = pert.a1_deriv(0, e, r, theta)
            a2t = pert.a2_deriv(0, e, r, theta)
            a3t = pert.a3_deriv(0, e, r, theta)
            vlt = pert.vl_deriv(0, e, r, theta)
            fom[..., i] = -(0.5 * a1t * rho ** 2
                            + np.einsum("...i,...i->...", a2t, omega)
                            * rho * inv1
                            + 0.5 * np.einsum("...ij,...i,...j->...",
                                              a3t, omega, omega) * inv2
                            + vlt)
        return fr, fth, frho, fom

    def component_deriv(self, component, l, alpha, k, beta, t, r, theta, rho, omega):
        self._check_deriv_order(l, alpha, k, beta)
        alpha = _as_multi_index(alpha, self.n_ang)
        beta = _as_multi_index(beta, self.n_ang)
        p = lambda l2, a2, k2, b2: htilde_partial(self.params, self.pert,
                                                  l2, a2, k2, b2,
                                                  r, theta, rho, omega)
        if component == "r":
            return p(l, alpha, k + 1, beta)
        if component == "rho":
            return -p(l + 1, alpha, k, beta)
        if component == "theta":
            return np.stack([p(l, alpha, k, _add(beta, i))
                             for i in range(self.n_ang)], axis=-1)
        if component == "omega":
            return np.stack([-p(l, _add(alpha, i), k, beta)
                             for i in range(self.n_ang)], axis=-1)
        raise ConfigurationError(f"unknown force component {component!r}")


def _unit(i: int, n: int) -> tuple:
    e = [0] * n
    e[i] = 1
    return tuple(e)


def _add(mi: tuple, i: int) -> tuple:
    out = list(mi)
    out[i] += 1
    return tuple(out)


@dataclass(frozen=True)
class CutoffParams:
    """
    Constants of the effective-force construction.  Must satisfy
    0 < eps0 < C0, Qtilde >= 2 Q / C0^(1-eps~) and
    0 < eps1 < Qtilde (C0 - eps0)^(1-eps~) / 2.
    """

    C0: float
    eps0: float
    Qtilde: float
    eps1: float

    def validate(self, Q: float, epsilon_tilde: float):
        if not 0 < self.eps0 < self.C0:
            raise ConfigurationError(
                f"cutoff constants violate 0 < eps0 < C0: "
                f"eps0={self.eps0}, C0={self.C0}")
        bound_q = 2.0 * Q / self.C0 ** (1.0 - epsilon_tilde)
        if self.Qtilde < bound_q:
            raise ConfigurationError(
                f"cutoff constants violate Qtilde >= 2Q/C0^(1-eps~): "
                f"Qtilde={self.Qtilde} < {bound_q}")
        bound_e1 = 0.5 * self.Qtilde * (self.C0 - self.eps0) ** (1.0 - epsilon_tilde)
        if not 0 < self.eps1 < bound_e1:
            raise ConfigurationError(
                f"cutoff constants violate 0 < eps1 < Qtilde(C0-eps0)^(1-eps~)/2: "
                f"eps1={self.eps1}, bound={bound_e1}")

    @staticmethod
    def defaults(region: OutgoingRegion) -> "CutoffParams":
        C0 = min(1.0, region.J[0])
        eps0 = 0.5 * C0
        Qtilde = 2.5 * region.Q / C0 ** (1.0 - region.epsilon_tilde)
        eps1 = 0.25 * Qtilde * (C0 - eps0) ** (1.0 - region.epsilon_tilde)
        return CutoffParams(C0, eps0, Qtilde, eps1)


class EffectiveForce(ForceModel):
    """
    Time-dependent reduction of a long-range force:

        F_e(t, x) = I_r(r/t) I_theta(theta) I_rho(rho)
                    I_omega(omega / r^(1-eps~)) F(x).

    Slowly decaying over all of phase space; equals F wherever every
    cutoff sits on its plateau.  Phase-space derivatives are central
    finite differences of the product (the cutoffs are stock bumps, the
    exactness of F's own derivatives is not needed through them).
    """

    kind = "slowly-decaying"

    def __init__(self, base: ForceModel, region: OutgoingRegion,
                 cutoffs: CutoffParams, t_threshold: float):
        if base.kind != "long-range":
            raise PreconditionError("effective force needs a long-range base force")
        super().__init__(base.n_ang)
        cutoffs.validate(region.Q, region.epsilon_tilde)
        self.base = base
        self.region = region
        self.cutoffs = cutoffs
        self.t_threshold = float(t_threshold)
        self.epsilon_tilde = region.epsilon_tilde
        tilde = region.expanded()
        self.J_tilde = tilde.J
        self.U_tilde = tilde.U
        c_edge = cutoffs.C0 - cutoffs.eps0
        self._I_r = SmoothBump(0.60 * c_edge, 0.95 * c_edge, math.inf, None)
        lo, hi = self.J_tilde
        self._I_rho = SmoothBump(0.5 * lo, lo, hi, hi + 0.5 * (hi - lo))
        self._I_omega = SmoothBump(-1.30 * cutoffs.Qtilde, -1.02 * cutoffs.Qtilde,
                                   1.02 * cutoffs.Qtilde, 1.30 * cutoffs.Qtilde)
        self._theta_full = self.U_tilde.full
        if not self._theta_full:
            c = self.U_tilde.center[0]
            h = self.U_tilde.halfwidth[0]
            pad = min(0.5 * (math.pi - h), 0.5 * h) if h < math.pi else 0.0
            self._I_theta = SmoothBump(-(h + pad), -h, h, h + pad)
            self._theta_center = c

    def cutoff_factors(self, t, r, theta, rho, omega):
        t = np.asarray(t, dtype=float)
        r = np.asarray(r, dtype=float)
        rho = np.asarray(rho, dtype=float)
        omega = np.asarray(omega, dtype=float)
        tt = np.maximum(t, 1e-300)
        ir = self._I_r(r / tt)
        irho = self._I_rho(rho)
        rpow = np.maximum(r, 1e-300) ** (1.0 - self.epsilon_tilde)
        om_arg = np.linalg.norm(omega, axis=-1) / rpow
        iom = self._I_omega(om_arg)
        if self._theta_full:
            ith = np.ones_like(irho)
        else:
            d = angle_difference(np.asarray(theta)[..., 0], self._theta_center)
            ith = self._I_theta(d)
        return ir, ith, irho, iom

    def on_plateau(self, t, r, theta, rho, omega) -> np.ndarray:
        """True where all four cutoffs are identically 1."""
        t = np.asarray(t, dtype=float)
        r = np.asarray(r, dtype=float)
        tt = np.maximum(t, 1e-300)
        ok = self._I_r.plateau_contains(r / tt)
        ok = ok & self._I_rho.plateau_contains(np.asarray(rho, dtype=float))
        rpow = np.maximum(r, 1e-300) ** (1.0 - self.epsilon_tilde)
        om_arg = np.linalg.norm(np.asarray(omega, dtype=float), axis=-1) / rpow
        ok = ok & self._I_omega.plateau_contains(om_arg)
        if not self._theta_full:
            d = angle_difference(np.asarray(theta)[..., 0], self._theta_center)
            ok = ok & self._I_theta.plateau_contains(d)
        return ok

    def components(self, t, r, theta, rho, omega):
        # cutoffs first: F_e is globally defined and vanishes wherever any
        # cutoff does, so the base force is only evaluated on the support
        ir, ith, irho, iom = self.cutoff_factors(t, r, theta, rho, omega)
        cut = ir * ith * irho * iom
        r = np.asarray(r, dtype=float)
        support = cut > 0.0
        r_safe = np.where(support, r, 1.0)
        fr, fth, frho, fom = self.base.components(t, r_safe, theta, rho, omega)
        return cut * fr, cut[..., None] * fth, cut * frho, cut[..., None] * fom

    def component_deriv(self, component, l, alpha, k, beta, t, r, theta, rho, omega):
        self._check_deriv_order(l, alpha, k, beta)
        alpha = _as_multi_index(alpha, self.n_ang)
        beta = _as_multi_index(beta, self.n_ang)

        def value(rv, thv, rhov, omv):
            comps = self.components(t, rv, thv, rhov, omv)
            return dict(zip(_COMPONENTS, comps))[component]

        return _fd_phase_deriv(value, l, alpha, k, beta, r, theta, rho, omega,
                               self.n_ang)


def _fd_phase_deriv(value, l, alpha, k, beta, r, theta, rho, omega, n_ang):
    """Nested central differences in (r, theta, rho, omega)."""
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    rho = np.asarray(rho, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if l > 0:
        h = 1e-4 * np.maximum(1.0, np.abs(r))
        up = _fd_phase_deriv(value, l - 1, alpha, k, beta, r + h, theta, rho,
                             omega, n_ang)
        dn = _fd_phase_deriv(value, l - 1, alpha, k, beta, r - h, theta, rho,
                             omega, n_ang)
        hh = h if up.ndim == r.ndim else h[..., None]
        return (up - dn) / (2.0 * hh)
    for i in range(n_ang):
        if alpha[i] > 0:
            h = 1e-4
            e = np.zeros(n_ang)
            e[i] = h
            a2 = _add_neg(alpha, i)
            up = _fd_phase_deriv(value, 0, a2, k, beta, r, theta + e, rho, omega, n_ang)
            dn = _fd_phase_deriv(value, 0, a2, k, beta, r, theta - e, rho, omega, n_ang)
            return (up - dn) / (2.0 * h)
    if k > 0:
        h = 1e-4 * np.maximum(1.0, np.abs(rho))
        up = _fd_phase_deriv(value, 0, alpha, k - 1, beta, r, theta, rho + h,
                             omega, n_ang)
        dn = _fd_phase_deriv(value, 0, alpha, k - 1, beta, r, theta, rho - h,
                             omega, n_ang)
        hh = h if up.ndim == rho.ndim else h[..., None]
        return (up - dn) / (2.0 * hh)
    for i in range(n_ang):
        if beta[i] > 0:
            h = 1e-4 * max(1.0, float(np.max(np.abs(omega))))
            e = np.zeros(n_ang)
            e[i] = h
            b2 = _add_neg(beta, i)
            up = _fd_phase_deriv(value, 0, alpha, 0, b2, r, theta, rho, omega + e, n_ang)
            dn = _fd_phase_deriv(value, 0, alpha, 0, b2, r, theta, rho, omega - e, n_ang)
            return (up - dn) / (2.0 * h)
    return np.asarray(value(r, theta, rho, omega), dtype=float)


def _add_neg(mi: tuple, i: int) -> tuple:
    out = list(mi)
    out[i] -= 1
    return tuple(out)


def hamiltonian_to_force(params: ModelParams,
                         pert: MetricPerturbation) -> HamiltonianForce:
    """Time-independent long-range force derived from the Hamiltonian."""
    return HamiltonianForce(params, pert)


def effective_force(F: ForceModel, region: OutgoingRegion,
                    cutoff_params: CutoffParams | None = None,
                    t_threshold: float = 10.0) -> EffectiveForce:
    """
    Insert the time-dependent cutoffs.  ``t_threshold`` is the contraction
    threshold T used by the boundary-value machinery; the companion inner
    radius for the long-range problem is R = T (C0 - eps0) / C0.
    """
    cutoffs = cutoff_params or CutoffParams.defaults(region)
    return EffectiveForce(F, region, cutoffs, t_threshold)


# =============================================================================
# DECAY VERIFICATION
# =============================================================================

def verify_force_decay(F: ForceModel, region, table: DecayIndexTable,
                       orders, scales=None, tolerance: float = 0.2,
                       one_sided: bool = True,
                       lattice_kwargs: dict | None = None) -> DecayReport:
    """
    Sample sup |d^(l,alpha,k,beta) F_component| over a lattice in the
    region at a geometric sequence of radii (long-range F) or times
    (slowly-decaying F), fit the log-log slope and compare against the
    index table.

    For a long-range force, ``region`` is the OutgoingRegion and
    ``scales`` the sequence of inner radii R; for a slowly-decaying force
    ``scales`` is the sequence of times and the lattice covers the moving
    support r ~ t.  Entries whose table rate is +inf assert that the
    sampled derivative vanishes identically.
    """
    if scales is None:
        scales = [10.0, 20.0, 40.0, 80.0, 160.0]
    scales = np.asarray(scales, dtype=float)
    lattice_kwargs = dict(lattice_kwargs or {})
    time_dependent = F.kind == "slowly-decaying"
    report = DecayReport(
        title=f"force decay ({F.kind}) vs index table, eps={table.epsilon}")

    for (l, alpha, k, beta) in orders:
        al = _as_multi_index(alpha, F.n_ang)
        be = _as_multi_index(beta, F.n_ang)
        for comp in _COMPONENTS:
            rate = table.component_rate(comp, l, al, k, be)
            name = f"F_{comp} (l={l},a={sum(al)},k={k},b={sum(be)})"
            sups = []
            for sc in scales:
                if time_dependent:
                    # lattice over the moving support r ~ c t with the
                    # enlarged momentum/angular windows of the cutoffs
                    cut = getattr(F, "cutoffs", None)
                    frac = (cut.C0 - cut.eps0) if cut is not None else 0.5
                    base = getattr(F, "region", region)
                    Q = cut.Qtilde if cut is not None else base.Q
                    J = getattr(F, "J_tilde", base.J)
                    lat_region = OutgoingRegion(frac * sc, J, Q, base.U,
                                                base.epsilon_tilde)
                    r, th, rho, om = lat_region.lattice(**lattice_kwargs)
                    t = sc
                else:
                    r, th, rho, om = region.lattice(R=sc, **lattice_kwargs)
                    t = 0.0
                vals = F.component_deriv(comp, l, al, k, be, t, r, th, rho, om)
                vals = np.abs(vals)
                if vals.ndim > r.ndim:
                    vals = np.max(vals, axis=-1)
                sups.append(float(np.max(vals)))
            sups = np.asarray(sups)
            if math.isinf(rate):
                ok = bool(np.max(sups) < 1e-12)
                report.add(DecayFit(
                    name=name + " [rate +inf]", claimed=math.inf,
                    fitted=None, tolerance=0.0, vacuous=ok,
                    xs=scales.tolist(), ys=sups.tolist(),
                    note="infinite rate: derivative must vanish identically"
                         + ("" if ok else " -- VIOLATED")))
            else:
                report.add(make_fit(name, scales, sups, -rate, tolerance,
                                    one_sided=one_sided))
    return report


def shipped_model(params: ModelParams | None = None):
    """Convenience: (params, perturbation, hamiltonian force) for the test model."""
    params = params or ModelParams()
    pert = ShippedPerturbation(params)
    return params, pert, hamiltonian_to_force(params, pert)
