# fitting.py
"""
Log-log slope fitting and decay reports.

Most of the verification in this package has the same shape: evaluate the
sup of some quantity over a lattice at a geometric sequence of times (or
radii), fit the exponent of the power law by least squares in log-log
coordinates, and compare the fitted exponent with a claimed one.  A
``DecayFit`` records one such comparison; a ``DecayReport`` is a bag of
them with JSON/CSV output.

Conventions: exponents are signed slopes, so a quantity ~ t^(-0.5) has
``fitted = -0.5``.  A claim of the form O(t^p) is *bound-type*: it only
requires the fitted slope not to exceed p (within tolerance).  A claim
known to be saturated by the probe family is *two-sided*.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

# Values below this (relative to the largest sample) are treated as an
# exactly-vanishing quantity rather than fitted.
VACUOUS_FLOOR = 1e-13


def fit_loglog(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """
    Least-squares fit of log(y) = intercept + slope * log(x).

    Returns (slope, intercept).  Requires positive x and y.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two samples for a slope fit")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive samples")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(intercept)


def fit_power_anchored(x: np.ndarray, y: np.ndarray,
                       x0: float) -> tuple[float, float, float]:
    """
    Fit y = B * (x^p - x0^p) for a quantity known to vanish at x = x0.

    This is the natural model for growth measured from a construction
    start time (e.g. centered modifier data, which are zero at the window
    start by choice of initial phase); a plain log-log slope over a
    finite x-range is biased upward by the -B x0^p transient.  The
    exponent p is found by bounded scalar minimization of the relative
    least-squares residual; B follows by projection.  Returns
    (p, B, relative rms).
    """
    from scipy.optimize import minimize_scalar

    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    scale = float(np.max(np.abs(y)))
    if scale <= 0:
        raise ValueError("anchored power fit needs nonvanishing samples")

    def badness(p):
        z = x ** p - x0 ** p
        denom = float(np.dot(z, z))
        if denom <= 0:
            return 1e6
        B = float(np.dot(y, z)) / denom
        return float(np.sqrt(np.mean((y - B * z) ** 2))) / scale

    res = minimize_scalar(badness, bounds=(0.01, 1.6), method="bounded",
                          options={"xatol": 1e-8})
    p = float(res.x)
    z = x ** p - x0 ** p
    B = float(np.dot(y, z) / np.dot(z, z))
    return p, B, float(res.fun)


@dataclass
class DecayFit:
    """One fitted-vs-claimed exponent comparison."""

    name: str
    claimed: float
    fitted: float | None
    tolerance: float
    one_sided: bool = False
    vacuous: bool = False
    xs: list = field(default_factory=list)
    ys: list = field(default_factory=list)
    note: str = ""

    @property
    def passed(self) -> bool:
        if self.vacuous:
            return True
        if self.fitted is None:
            return False
        if self.one_sided:
            # decay at least as fast as claimed (more negative is fine)
            return self.fitted <= self.claimed + self.tolerance
        return abs(self.fitted - self.claimed) <= self.tolerance

    def summary(self) -> str:
        if self.vacuous:
            return f"{self.name}: vacuously satisfied (quantity ~ 0)"
        side = "<=" if self.one_sided else "~"
        status = "ok" if self.passed else "FAIL"
        return (f"{self.name}: fitted {self.fitted:+.4f} {side} claimed "
                f"{self.claimed:+.4f} (tol {self.tolerance:.3f}) [{status}]")


def make_fit(name: str, xs: np.ndarray, sups: np.ndarray, claimed: float,
             tolerance: float, one_sided: bool = False, note: str = "") -> DecayFit:
    """Build a DecayFit from sampled sups, detecting the vacuous case."""
    xs = np.asarray(xs, dtype=float)
    sups = np.asarray(sups, dtype=float)
    scale = float(np.max(sups)) if sups.size else 0.0
    if scale <= VACUOUS_FLOOR:
        return DecayFit(name, claimed, None, tolerance, one_sided, vacuous=True,
                        xs=xs.tolist(), ys=sups.tolist(), note=note or "all sups ~ 0")
    mask = sups > max(VACUOUS_FLOOR, scale * 1e-12)
    slope, _ = fit_loglog(xs[mask], sups[mask])
    return DecayFit(name, claimed, slope, tolerance, one_sided,
                    xs=xs.tolist(), ys=sups.tolist(), note=note)


@dataclass
class DecayReport:
    """A collection of decay fits with serialization helpers."""

    title: str
    fits: list[DecayFit] = field(default_factory=list)

    def add(self, fit: DecayFit) -> DecayFit:
        self.fits.append(fit)
        return fit

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.fits)

    def summary(self) -> str:
        lines = [f"== {self.title} =="]
        lines += ["  " + f.summary() for f in self.fits]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "passed": self.passed,
            "fits": [
                {
                    "name": f.name,
                    "claimed": f.claimed,
                    "fitted": f.fitted,
                    "tolerance": f.tolerance,
                    "one_sided": f.one_sided,
                    "vacuous": f.vacuous,
                    "passed": f.passed,
                    "x": f.xs,
                    "sup": f.ys,
                    "note": f.note,
                }
                for f in self.fits
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "x", "sup", "claimed", "fitted", "passed"])
            for f in self.fits:
                fitted = "" if f.fitted is None else f"{f.fitted:.6g}"
                for x, y in zip(f.xs, f.ys):
                    writer.writerow([f.name, f"{x:.8g}", f"{y:.10g}",
                                     f"{f.claimed:.6g}", fitted, f.passed])


def geometric_times(t0: float, factor: float, count: int) -> np.ndarray:
    """t0, t0*factor, ..., t0*factor**(count-1)."""
    if t0 <= 0 or factor <= 1 or count < 2:
        raise ValueError("need t0 > 0, factor > 1, count >= 2")
    return t0 * factor ** np.arange(count)


def relative_error(a, b) -> float:
    """|a - b| / max(|a|, |b|, tiny) for scalars or arrays (max over entries)."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / denom


def check_runtime(seconds: float, budget: float, label: str) -> str:
    status = "within" if seconds <= budget else "OVER"
    return f"{label}: {seconds:.1f}s ({status} {budget:.0f}s budget)"


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def math_isclose(a: float, b: float, tol: float) -> bool:
    return math.isclose(a, b, rel_tol=0.0, abs_tol=tol)
