# profiles.py
"""
Smooth cutoff profiles and derivative bookkeeping.

Everything here is elementary C^infinity glue built from exp(-1/x):

* ``smoothstep``   -- the canonical step (0 for x<=0, 1 for x>=1),
* ``jfun``         -- the radial switch j(r): 0 for r<=1/2, 1 for r>=1,
* ``rbracket``     -- the regularized radius <r> = 1 + r*j(r),
* ``SmoothBump``   -- plateau bump (0, ramp up, 1 on a plateau, ramp down, 0),

plus a tiny "jet" toolkit: a jet is the stack of derivative values
(f, f', ..., f^(K)) of a scalar profile at an array of points.  Jets of
products and compositions follow Leibniz / Faa di Bruno up to order 4,
which is all the model fields ever need (force derivatives are taken to
total order 3, so coefficient fields are differentiated to order 4).

All functions are vectorized over numpy arrays.
"""

from __future__ import annotations

import numpy as np

MAX_JET_ORDER = 4

# Binomial table for Leibniz products up to order 4.
_BINOM = np.array([
    [1, 0, 0, 0, 0],
    [1, 1, 0, 0, 0],
    [1, 2, 1, 0, 0],
    [1, 3, 3, 1, 0],
    [1, 4, 6, 4, 1],
], dtype=float)


def _expglue_jet(x: np.ndarray) -> np.ndarray:
    """Jet of f(x) = exp(-1/x) for x > 0 (0 for x <= 0), orders 0..4."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros((MAX_JET_ORDER + 1,) + x.shape)
    pos = x > 0.0
    if not np.any(pos):
        return out
    xp = x[pos]
    f = np.exp(-1.0 / xp)
    inv = 1.0 / xp
    out[0][pos] = f
    out[1][pos] = f * inv**2
    out[2][pos] = f * (inv**4 - 2.0 * inv**3)
    out[3][pos] = f * (inv**6 - 6.0 * inv**5 + 6.0 * inv**4)
    out[4][pos] = f * (inv**8 - 12.0 * inv**7 + 36.0 * inv**6 - 24.0 * inv**5)
    return out


def jet_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Leibniz product of two jets (stacks of derivatives, orders 0..K)."""
    K = a.shape[0] - 1
    out = np.zeros_like(a)
    for k in range(K + 1):
        for i in range(k + 1):
            out[k] = out[k] + _BINOM[k, i] * a[i] * b[k - i]
    return out


def jet_compose(g_derivs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """
    Jet of g(u(x)) given g's derivatives evaluated at u[0] and the jet of u.

    ``g_derivs`` has the same stack layout as a jet: g_derivs[k] = g^(k)(u[0]).
    Faa di Bruno, hard-coded to order 4.
    """
    out = np.zeros_like(u)
    u1, u2, u3, u4 = u[1], u[2], u[3], u[4]
    out[0] = g_derivs[0]
    out[1] = g_derivs[1] * u1
    out[2] = g_derivs[2] * u1**2 + g_derivs[1] * u2
    out[3] = g_derivs[3] * u1**3 + 3.0 * g_derivs[2] * u1 * u2 + g_derivs[1] * u3
    out[4] = (g_derivs[4] * u1**4 + 6.0 * g_derivs[3] * u1**2 * u2
              + g_derivs[2] * (3.0 * u2**2 + 4.0 * u1 * u3) + g_derivs[1] * u4)
    return out


def power_jet(u: np.ndarray, p: float) -> np.ndarray:
    """Jet of u(x)**p from the jet of u (u[0] must be positive)."""
    base = u[0]
    g = np.zeros_like(u)
    coeff = 1.0
    for k in range(MAX_JET_ORDER + 1):
        g[k] = coeff * base ** (p - k)
        coeff *= (p - k)
    return jet_compose(g, u)


def affine_jet(x: np.ndarray, a: float, b: float) -> np.ndarray:
    """Jet of the affine map a*x + b."""
    x = np.asarray(x, dtype=float)
    out = np.zeros((MAX_JET_ORDER + 1,) + x.shape)
    out[0] = a * x + b
    out[1] = a
    return out


def const_jet(x: np.ndarray, c: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros((MAX_JET_ORDER + 1,) + x.shape)
    out[0] = c
    return out


def smoothstep_jet(x: np.ndarray) -> np.ndarray:
    """
    Jet of the C^infinity step s(x) = f(x) / (f(x) + f(1-x)), f = exp(-1/x).

    s = 0 for x <= 0 and s = 1 for x >= 1, strictly increasing in between.
    """
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    fa = _expglue_jet(x)
    # f(1-x): chain rule flips odd orders.
    fb = _expglue_jet(1.0 - x)
    for k in (1, 3):
        fb[k] = -fb[k]
    den = fa + fb
    inv_den = power_jet(den, -1.0)
    out = jet_product(fa, inv_den)
    # Pin the flats exactly: glue jets vanish there but avoid 0/0 dust.
    flat_lo = x <= 0.0
    flat_hi = x >= 1.0
    out[:, flat_lo] = 0.0
    out[:, flat_hi] = 0.0
    out[0][flat_hi] = 1.0
    return out[:, 0] if scalar else out


def smoothstep(x: np.ndarray) -> np.ndarray:
    """Value-only fast path of the C^infinity step."""
    x = np.asarray(x, dtype=float)
    mid = np.clip(x, 1e-12, 1.0 - 1e-12)
    fa = np.exp(-1.0 / mid)
    fb = np.exp(-1.0 / (1.0 - mid))
    out = fa / (fa + fb)
    return np.where(x <= 0.0, 0.0, np.where(x >= 1.0, 1.0, out))


def jfun_jet(r: np.ndarray) -> np.ndarray:
    """Jet of j(r): the smooth switch with j = 0 on r <= 1/2, j = 1 on r >= 1."""
    r = np.asarray(r, dtype=float)
    s = smoothstep_jet(2.0 * r - 1.0)
    for k in range(1, MAX_JET_ORDER + 1):
        s[k] = s[k] * 2.0**k
    return s


def jfun(r: np.ndarray) -> np.ndarray:
    return jfun_jet(r)[0]


def rbracket_jet(r: np.ndarray) -> np.ndarray:
    """Jet of <r> = 1 + r * j(r)  (equals 1 + r for r >= 1, equals 1 for r <= 1/2)."""
    r = np.asarray(r, dtype=float)
    rj = np.zeros((MAX_JET_ORDER + 1,) + r.shape)
    rj[0] = r
    rj[1] = 1.0
    out = jet_product(rj, jfun_jet(r))
    out[0] = out[0] + 1.0
    return out


def rbracket(r: np.ndarray) -> np.ndarray:
    return rbracket_jet(r)[0]


def rbracket_power_jet(r: np.ndarray, p: float) -> np.ndarray:
    """Jet of <r>**p (typically p = -epsilon)."""
    r = np.asarray(r, dtype=float)
    if np.all(r >= 1.0):
        # hot path: <r> = 1 + r exactly, plain power-law derivatives
        out = np.empty((MAX_JET_ORDER + 1,) + r.shape)
        base = 1.0 + r
        coeff = 1.0
        for k in range(MAX_JET_ORDER + 1):
            out[k] = coeff * base ** (p - k)
            coeff *= (p - k)
        return out
    return power_jet(rbracket_jet(r), p)


class SmoothBump:
    """
    C^infinity plateau bump: 0 on (-inf, a], ramps to 1 on [a, b],
    1 on [b, c], ramps to 0 on [c, d], 0 on [d, inf).

    Pass ``a=None`` / ``d=None`` for one-sided profiles (no lower / upper
    ramp), e.g. the radial cutoff that equals 1 for all large arguments.
    """

    def __init__(self, a: float | None, b: float, c: float, d: float | None):
        if a is not None and not a < b:
            raise ValueError(f"bump needs a < b, got a={a}, b={b}")
        if d is not None and not c < d:
            raise ValueError(f"bump needs c < d, got c={c}, d={d}")
        if not b <= c:
            raise ValueError(f"bump needs b <= c, got b={b}, c={c}")
        self.a, self.b, self.c, self.d = a, b, c, d

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.ones_like(x)
        if self.a is not None:
            out = out * smoothstep((x - self.a) / (self.b - self.a))
        if self.d is not None:
            out = out * smoothstep((self.d - x) / (self.d - self.c))
        return out

    def plateau_contains(self, x: np.ndarray) -> np.ndarray:
        """True where the bump is identically 1 (closed plateau [b, c])."""
        x = np.asarray(x, dtype=float)
        ok = np.ones(x.shape, dtype=bool)
        if self.a is not None:
            ok &= x >= self.b
        if self.d is not None:
            ok &= x <= self.c
        return ok

    def support_contains(self, x: np.ndarray) -> np.ndarray:
        """True where the bump can be nonzero (open support (a, d))."""
        x = np.asarray(x, dtype=float)
        ok = np.ones(x.shape, dtype=bool)
        if self.a is not None:
            ok &= x > self.a
        if self.d is not None:
            ok &= x < self.d
        return ok

    def jet(self, x: np.ndarray) -> np.ndarray:
        """Derivatives of the bump up to order 4 (stack layout like jets)."""
        x = np.asarray(x, dtype=float)
        out = const_jet(x, 1.0)
        if self.a is not None:
            w = 1.0 / (self.b - self.a)
            s = smoothstep_jet((x - self.a) * w)
            for k in range(1, MAX_JET_ORDER + 1):
                s[k] = s[k] * w**k
            out = jet_product(out, s)
        if self.d is not None:
            w = 1.0 / (self.d - self.c)
            s = smoothstep_jet((self.d - x) * w)
            for k in range(1, MAX_JET_ORDER + 1):
                s[k] = s[k] * (-w) ** k
            out = jet_product(out, s)
        return out

    def params(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "d": self.d}
