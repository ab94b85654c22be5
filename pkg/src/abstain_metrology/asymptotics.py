"""Large-n closed forms for optimal phase estimation with abstention.

Covers the optimal-encoding limit, the phase-state (flat probe) solution, and
the parallel-copies probe in its two regimes:

* shot-noise regime (fixed abstention rate), where the optimal profile is a
  cosine cap glued to a Gaussian tail and the deficit follows a parametric
  curve in the scaled frequency ``Omega``;
* Heisenberg regime (coincidence-set boundary fixed in ``t``), reached at an
  exponentially small acceptance rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, erfc, erfcx

from .probe_states import relative_entropy_bernoulli

OMEGA_MIN = 1e-9
OMEGA_EDGE = 1e-6
OMEGA_MAX = math.pi / 2 - OMEGA_EDGE

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class BracketError(ValueError):
    """No sign change (or a non-monotone stretch) found while scanning for a root."""


def scan_bisect(f, lo, hi, points=256, xtol=1e-12, monotone=True):
    """Root of ``f`` on ``[lo, hi]`` by a grid scan followed by bisection.

    With ``monotone=True`` the scanned values must never reverse direction
    (ties from floating-point saturation are allowed); a reversal raises
    :class:`BracketError` instead of being skipped.
    """
    xs = np.linspace(lo, hi, points)
    fs = np.array([f(x) for x in xs])
    if monotone:
        d = np.diff(fs)
        up, down = d > 0, d < 0
        if up.any() and down.any():
            minority = down if up.sum() >= down.sum() else up
            bad = int(np.flatnonzero(minority)[0])
            raise BracketError(f"function not monotone on scan near x={xs[bad]:.6g}")
    sign = np.sign(fs)
    if np.any(sign == 0):
        return float(xs[np.flatnonzero(sign == 0)[0]])
    change = np.flatnonzero(sign[:-1] != sign[1:])
    if change.size == 0:
        raise BracketError(f"no sign change on [{lo:.6g}, {hi:.6g}]")
    a, b = xs[change[0]], xs[change[0] + 1]
    fa = fs[change[0]]
    while b - a > xtol:
        m = 0.5 * (a + b)
        if m <= a or m >= b:
            break
        fm = f(m)
        if fm == 0:
            return float(m)
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return float(0.5 * (a + b))


def optimal_encoding_fidelity(n: int) -> float:
    """Leading-order ``1 - pi^2 / (4 n^2)`` for the best probe."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return 1.0 - math.pi ** 2 / (4.0 * n * n)


def phase_state_fidelity_asym(n: int, q: float) -> float:
    """Flat probe with abstention ``q``: ``1 - pi^2 / (16 q (1-q) n^2)`` up to the plateau at ``q = 1/2``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0.0 < q < 1.0):
        raise ValueError("asymptotic phase-state formula needs 0 < q < 1")
    if q > 0.5:
        return optimal_encoding_fidelity(n)
    return 1.0 - math.pi ** 2 / (16.0 * q * (1.0 - q) * n * n)


def phase_state_profile(q: float, t):
    """Optimal rescaled filtered amplitudes ``phi(t)`` for the flat probe.

    A quarter sine rising to the cap ``(1-q)^{-1/2}`` on ``[0, q)``, flat up to
    ``t = 1/2`` and mirrored about it.
    """
    if not (0.0 < q <= 0.5):
        raise ValueError("phase_state_profile needs 0 < q <= 1/2")
    t_arr = np.asarray(t, dtype=float)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError("t must lie in [0, 1]")
    tt = np.minimum(t_arr, 1.0 - t_arr)
    lam = 1.0 / math.sqrt(1.0 - q)
    out = np.where(tt < q, lam * np.sin(math.pi * tt / (2.0 * q)), lam)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class ParametricPoint:
    omega_param: float
    q: float
    ns: float


def _check_omega(omega):
    if not (0.0 < omega <= OMEGA_MAX):
        raise ValueError(f"Omega must lie in (0, pi/2 - {OMEGA_EDGE:g}], got {omega!r}")


def shotnoise_q(omega: float) -> float:
    """Abstention rate on the copies shot-noise curve at scaled frequency ``Omega``."""
    _check_omega(omega)
    tan = math.tan(omega)
    sec2 = 1.0 + tan * tan
    x2 = omega * tan
    return float(erf(math.sqrt(x2)) - (omega * sec2 + tan) * math.sqrt(tan / (math.pi * omega)) * math.exp(-x2))


def shotnoise_ns(omega: float) -> float:
    """``n (1 - Delta) = 2 n (1 - F)`` on the copies shot-noise curve."""
    _check_omega(omega)
    tan = math.tan(omega)
    sec2 = 1.0 + tan * tan
    x2 = omega * tan
    # erfc(x) e^{x^2} as one scaled call; the product cancels catastrophically otherwise
    denom = 2.0 * omega * omega * sec2 + math.sqrt(math.pi * x2) * float(erfcx(math.sqrt(x2)))
    num = tan * tan - omega * (2.0 * omega - tan) * sec2
    return 0.5 / (1.0 + num / denom)


def copies_shotnoise_point(omega_param: float) -> ParametricPoint:
    return ParametricPoint(omega_param, shotnoise_q(omega_param), shotnoise_ns(omega_param))


def copies_shotnoise_omega_at_q(q: float) -> float:
    if not (0.0 < q < 1.0):
        raise ValueError("q must lie in (0, 1)")
    return scan_bisect(lambda w: shotnoise_q(w) - q, OMEGA_MIN, OMEGA_MAX, points=256, xtol=1e-12)


def copies_shotnoise_ns_at_q(q: float) -> float:
    """Shot-noise-regime ``n S`` for copies at abstention ``q``, by inverting ``Q(Omega)``."""
    return shotnoise_ns(copies_shotnoise_omega_at_q(q))


@dataclass(frozen=True)
class MatchingSolution:
    """Glue point of the cosine cap and the Gaussian tail for an ``n``-copy probe.

    ``a`` is the boundary in units of the Gaussian width, ``alpha = a / sqrt(n)``
    its position measured from ``t = 1/2``.
    """

    n: int
    omega_param: float
    a: float
    capital_a: float
    lam: float
    omega: float
    alpha: float

    def profile(self, t):
        """``phi(t)``: ``A cos(omega tau)`` inside ``|tau| <= alpha``, ``lam psi(tau)`` outside."""
        t_arr = np.asarray(t, dtype=float)
        if np.any((t_arr < 0) | (t_arr > 1)):
            raise ValueError("t must lie in [0, 1]")
        tau = t_arr - 0.5
        inner = self.capital_a * np.cos(self.omega * tau)
        outer = self.lam * gaussian_profile(self.n, tau)
        out = np.where(np.abs(tau) <= self.alpha, inner, outer)
        return float(out) if np.ndim(out) == 0 else out


def gaussian_profile(n: int, tau):
    return (2.0 * n / math.pi) ** 0.25 * np.exp(-n * np.asarray(tau, dtype=float) ** 2)


def _inv_lambda2(omega: float) -> float:
    """Right-hand side of the normalization condition, as ``1 / lam^2``."""
    tan = math.tan(omega)
    a2 = 0.5 * omega * tan
    a = math.sqrt(a2)
    tail = float(erfc(math.sqrt(2.0 * a2)))
    core = a * (4.0 * a2 * a2 + omega * omega) * (2.0 * omega + math.sin(2.0 * omega)) / (_SQRT_2PI * omega ** 3)
    return tail + core * math.exp(-2.0 * a2)


def solve_matching(n: int, lam: float) -> MatchingSolution:
    """Solve the continuity and normalization conditions for ``Omega`` at cap ``lam``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if lam <= 1.0:
        raise ValueError("shot-noise matching needs lam > 1")
    target = 1.0 / (lam * lam)
    omega = scan_bisect(lambda w: _inv_lambda2(w) - target, OMEGA_MIN, OMEGA_MAX, points=256, xtol=1e-14)
    tan = math.tan(omega)
    a2 = 0.5 * omega * tan
    a = math.sqrt(a2)
    cap_a2 = math.sqrt(2.0 * n / math.pi) * lam * lam * math.exp(-2.0 * a2) * (4.0 * a2 * a2 + omega ** 2) / omega ** 2
    return MatchingSolution(
        n=n,
        omega_param=omega,
        a=a,
        capital_a=math.sqrt(cap_a2),
        lam=lam,
        omega=omega * math.sqrt(n) / a,
        alpha=a / math.sqrt(n),
    )


def copies_profile(n: int, lam: float, t):
    """Asymptotic filtered profile ``phi(t)`` of the ``n``-copy probe at cap ``lam``."""
    return solve_matching(n, lam).profile(t)


def heisenberg_exponent(n: int, alpha: float) -> float:
    """``n H(1/2 + alpha || 1/2)``: minus the log of the Heisenberg-regime acceptance."""
    if not (0.0 < alpha <= 0.5):
        raise ValueError("alpha must lie in (0, 1/2]")
    return n * relative_entropy_bernoulli(0.5 + alpha)


def copies_heisenberg(n: int, alpha: float):
    """(fidelity, acceptance) for copies with the coincidence boundary at ``|t - 1/2| = alpha``.

    The acceptance ``exp(-n H(1/2 + alpha || 1/2))`` is the leading exponential
    order only; no polynomial prefactor is attached.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    exponent = heisenberg_exponent(n, alpha)
    fidelity = 1.0 - math.pi ** 2 / (16.0 * n * n * alpha * alpha)
    return fidelity, math.exp(-exponent)
