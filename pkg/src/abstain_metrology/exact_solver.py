"""Finite-n optimal abstention filter.

For a probe with amplitudes ``c`` and abstention budget ``q`` we maximize the
nearest-neighbour overlap

    Delta = sum_j xi_j xi_{j+1}   subject to   |xi| = 1,  0 <= xi_j <= lam c_j,

with ``lam = (1 - q)^{-1/2}``.  The optimal fidelity of the covariant
measurement on the filtered state is ``(1 + Delta) / 2``.

:func:`solve` is a primal active-set method.  For a trial coincidence set
``C`` (caps that bind) the free components follow from a tridiagonal linear
system parametrized by the normalization multiplier ``b2``; ``b2`` is fixed
by a one-dimensional root find on ``|xi| = 1``.  The returned solution carries
its KKT multipliers so optimality can be checked independently with
:func:`kkt_residuals`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import solveh_banded
from scipy.optimize import brentq

from .probe_states import FiducialState

FEAS_TOL = 1e-10
CERT_TOL = 1e-8
MAX_ITER = 200


class SolverError(RuntimeError):
    """Active-set iteration failed; carries the last iterate for diagnosis."""

    def __init__(self, message, xi=None, b2=None, coincidence_set=(), iterations=0, residuals=None):
        super().__init__(message)
        self.xi = xi
        self.b2 = b2
        self.coincidence_set = tuple(coincidence_set)
        self.iterations = iterations
        self.residuals = residuals


@dataclass(frozen=True)
class AbstentionBudget:
    """Abstention rate ``q`` and the amplitude cap ``lam = (1 - q)^{-1/2}`` it buys."""

    q: float

    def __post_init__(self):
        q = float(self.q)
        if not (0.0 <= q < 1.0):
            raise ValueError(f"abstention rate must lie in [0, 1), got {self.q!r}")
        object.__setattr__(self, "q", q)

    @property
    def q_bar(self) -> float:
        return 1.0 - self.q

    @property
    def lam(self) -> float:
        return 1.0 / math.sqrt(self.q_bar)

    @classmethod
    def from_lambda(cls, lam: float) -> "AbstentionBudget":
        if lam < 1.0:
            raise ValueError(f"cap multiplier must be >= 1, got {lam!r}")
        return cls(1.0 - 1.0 / (lam * lam))


class OverlapOperator:
    """The tridiagonal operator with ``1/2`` on both off-diagonals, zero diagonal.

    Never stored densely; only matrix-vector products and the closed-form
    spectrum of the Toeplitz matrix are used.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dimension must be positive")
        self.dim = dim

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[1:] += 0.5 * x[:-1]
        out[:-1] += 0.5 * x[1:]
        return out

    def eigenvalue(self, k: int = 1) -> float:
        return math.cos(k * math.pi / (self.dim + 1))

    def eigenvector(self, k: int = 1) -> np.ndarray:
        j = np.arange(1, self.dim + 1)
        return math.sqrt(2.0 / (self.dim + 1)) * np.sin(k * j * math.pi / (self.dim + 1))

    def dense(self) -> np.ndarray:
        """Dense copy, for cross-checks on small sizes only."""
        return 0.5 * (np.eye(self.dim, k=1) + np.eye(self.dim, k=-1))


def quad_form(xi) -> float:
    """``<xi|M|xi> = sum_j xi_j xi_{j+1}``."""
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1 or xi.size < 2:
        raise ValueError("quad_form needs a vector of length >= 2")
    return float(np.dot(xi[:-1], xi[1:]))


def unconstrained_optimum(n: int):
    """Top eigenpair ``(cos(pi/(n+2)), xi*)`` of the overlap operator on ``n+1`` levels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    op = OverlapOperator(n + 1)
    return op.eigenvalue(1), op.eigenvector(1)


class CriticalAbstention(NamedTuple):
    q_star: float
    f_star: float
    argmin: int
    q_bar_star: float
    attainable: bool


def critical_abstention(state: FiducialState) -> CriticalAbstention:
    """Smallest abstention rate at which the optimal-encoding fidelity is reached.

    ``q_bar_star`` is returned alongside ``q_star`` because for copies states it
    is exponentially small and ``1 - q_bar_star`` rounds to one.  When a level
    has ``c_j = 0`` the plateau is only approached as ``q -> 1`` and
    ``attainable`` is False.
    """
    delta_star, xs = unconstrained_optimum(state.n)
    f_star = 0.5 * (1.0 + delta_star)
    c = state.coeffs
    if np.any(c == 0):
        return CriticalAbstention(1.0, f_star, int(np.argmin(c)), 0.0, False)
    ratios = (c / xs) ** 2
    j = int(np.argmin(ratios))
    q_bar_star = min(1.0, float(ratios[j]))
    return CriticalAbstention(1.0 - q_bar_star, f_star, j, q_bar_star, True)


@dataclass(frozen=True)
class FilterSolution:
    xi: np.ndarray
    delta: float
    fidelity: float
    coincidence_set: tuple
    eigen_multiplier: float
    slack: np.ndarray
    filter_diag: np.ndarray
    converged: bool
    iterations: int


@dataclass(frozen=True)
class KKTResiduals:
    stationarity: float
    primal: float
    dual: float
    slackness: float
    normalization: float

    @property
    def worst(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.slackness, self.normalization)

    def ok(self, tol: float = CERT_TOL) -> bool:
        return self.worst <= tol


def filter_abstention(state: FiducialState, sol: FilterSolution) -> float:
    """Abstention probability ``sum_j f_j c_j^2`` realized by the filter diagonal."""
    coeffs = state.coeffs
    return float(np.dot(sol.filter_diag, coeffs * coeffs))


def kkt_residuals(sol: FilterSolution, state: FiducialState, budget: AbstentionBudget) -> KKTResiduals:
    """Max-norm residuals of the KKT system for ``sol``.

    Stationarity is ``2 M xi - 2 b2 xi - s = 0``; ``s`` lives on the caps.
    """
    xi = np.asarray(sol.xi, dtype=float)
    s = np.asarray(sol.slack, dtype=float)
    u = budget.lam * state.coeffs
    op = OverlapOperator(xi.size)
    stat = 2.0 * op.apply(xi) - 2.0 * sol.eigen_multiplier * xi - s
    gap = xi - u
    return KKTResiduals(
        stationarity=float(np.max(np.abs(stat))),
        primal=float(max(0.0, np.max(gap), -np.min(xi))),
        dual=float(max(0.0, -np.min(s))),
        slackness=float(np.max(np.abs(s * gap))),
        normalization=abs(float(np.dot(xi, xi)) - 1.0),
    )


def _runs(mask):
    """(start, stop) pairs of maximal runs of True in ``mask``."""
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(m)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def _free_solve(u, in_c):
    """Optimal free components for a fixed coincidence set.

    Returns ``(xi, b2)`` or ``None`` when the caps in ``C`` already exhaust the
    norm budget.
    """
    op = OverlapOperator(u.size)
    xi = np.where(in_c, u, 0.0)
    target = 1.0 - float(np.dot(xi, xi))
    if target <= 0.0:
        return None
    rhs = op.apply(xi)
    driven, idle = [], []
    for a, b in _runs(~in_c):
        mu = math.cos(math.pi / (b - a + 1))
        (driven if np.any(rhs[a:b] > 0) else idle).append((a, b, mu))

    b2 = -math.inf
    if driven:
        idx = np.concatenate([np.arange(a, b) for a, b, _ in driven])
        r = rhs[idx]
        nu = max(mu for _, _, mu in driven)
        # superdiagonal of -M restricted to the driven blocks; zero across block gaps
        sup = np.where(np.diff(idx) == 1, -0.5, 0.0)

        def free_part(b2):
            if idx.size == 1:
                return r / b2
            ab = np.empty((2, idx.size))
            ab[0, 0] = 0.0
            ab[0, 1:] = sup
            ab[1] = b2
            return solveh_banded(ab, r, check_finite=False)

        def excess(b2):
            y = free_part(b2)
            return float(np.dot(y, y)) - target

        # |(b2 - M_FF)^{-1} r| <= |r| / (b2 - nu) brackets the root from above
        hi = nu + math.sqrt(float(np.dot(r, r)) / target) * 1.01
        step = hi - nu
        lo = nu + 0.5 * step
        while excess(lo) <= 0.0:
            step *= 0.5
            lo = nu + 0.5 * step
            if step < 1e-300:
                break
        # excess is strictly decreasing on (nu, inf)
        b2 = brentq(excess, lo, hi, xtol=1e-15, rtol=4.0 * np.finfo(float).eps, maxiter=500)
        mu_idle = max((mu for _, _, mu in idle), default=-math.inf)
        if mu_idle > b2:
            b2 = mu_idle
        y = free_part(b2)
        xi[idx] = y
    else:
        b2 = max(mu for _, _, mu in idle)

    remaining = 1.0 - float(np.dot(xi, xi))
    tied = [(a, b) for a, b, mu in idle if mu == b2]
    if tied and remaining > 0.0:
        share = remaining / len(tied)
        for a, b in tied:
            xi[a:b] = math.sqrt(share) * OverlapOperator(b - a).eigenvector(1)
    elif driven:
        # absorb the root-finder's last-ulp normalization error into the free part
        free = ~in_c
        fx = float(np.dot(xi[free], xi[free]))
        if fx > 0.0:
            xi[free] *= math.sqrt(target / fx)
    return xi, b2


def _package(xi, b2, in_c, state, budget, converged, iterations):
    op = OverlapOperator(xi.size)
    c = state.coeffs
    s = np.where(in_c, 2.0 * (op.apply(xi) - b2 * xi), 0.0)
    delta = quad_form(xi)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(c > 0, 1.0 - budget.q_bar * xi * xi / np.where(c > 0, c * c, 1.0), 1.0)
    return FilterSolution(
        xi=xi,
        delta=delta,
        fidelity=0.5 * (1.0 + delta),
        coincidence_set=tuple(int(j) for j in np.flatnonzero(in_c)),
        eigen_multiplier=float(b2),
        slack=s,
        filter_diag=f,
        converged=converged,
        iterations=iterations,
    )


def solve(state: FiducialState, budget: AbstentionBudget, max_iter: int = MAX_ITER,
          feas_tol: float = FEAS_TOL) -> FilterSolution:
    """Optimal filtered state for ``state`` at abstention rate ``budget.q``.

    Raises :class:`SolverError` if the active set has not settled within
    ``max_iter`` iterations.
    """
    c = state.coeffs
    n1 = c.size
    if n1 < 2:
        raise ValueError("need at least two levels")
    op = OverlapOperator(n1)
    zero = c == 0

    if budget.q == 0.0:
        # lam = 1: the unit sphere meets the box only at xi = c
        mc = op.apply(c)
        pos = ~zero
        b2 = float(np.min(mc[pos] / c[pos]))
        return _package(c.copy(), b2, np.ones(n1, dtype=bool), state, budget, True, 0)

    delta_star, xs = op.eigenvalue(1), op.eigenvector(1)
    u = budget.lam * c
    if np.all(u >= xs):
        return _package(xs, delta_star, np.zeros(n1, dtype=bool), state, budget, True, 0)

    in_c = (u < xs) | zero
    seen = set()
    single = False
    xi, b2 = None, None
    for it in range(1, max_iter + 1):
        key = in_c.tobytes()
        if key in seen:
            if single:
                break
            # block updates are cycling; fall back to one index per step
            single = True
            seen.clear()
        seen.add(key)

        out = _free_solve(u, in_c)
        if out is None:
            raise SolverError("coincidence set exhausts the norm budget", coincidence_set=np.flatnonzero(in_c),
                              iterations=it)
        xi, b2 = out
        s = 2.0 * (op.apply(xi) - b2 * xi)
        over = ~in_c & (xi > u * (1.0 + 0.25 * feas_tol))
        under = in_c & ~zero & (s < -feas_tol)
        if not over.any() and not under.any():
            return _package(xi, b2, in_c, state, budget, True, it)
        in_c = in_c.copy()
        if single:
            if over.any():
                with np.errstate(divide="ignore"):
                    j = int(np.argmax(np.where(over, xi / u, -np.inf)))
                in_c[j] = True
            else:
                in_c[int(np.argmin(np.where(under, s, np.inf)))] = False
        else:
            in_c[over] = True
            in_c[under] = False

    last = None
    if xi is not None:
        last = kkt_residuals(_package(xi, b2, in_c, state, budget, False, max_iter), state, budget)
    raise SolverError(f"active set did not converge in {max_iter} iterations", xi=xi, b2=b2,
                      coincidence_set=np.flatnonzero(in_c), iterations=max_iter, residuals=last)


# ---------------------------------------------------------------------------
# independent check: projected ascent on the capped sphere


def _cap_project(y, u):
    """argmax <y, z> over ``|z| = 1, 0 <= z <= u`` for ``y >= 0`` (water filling)."""
    pos = y > 0
    room = float(np.dot(u[pos], u[pos]))
    if room < 1.0 - 1e-12:
        raise ValueError("support of y cannot carry unit norm under the caps")
    if room <= 1.0:
        return np.where(pos, u, 0.0) / math.sqrt(room)
    with np.errstate(over="ignore", divide="ignore"):
        order = np.argsort(np.where(pos, u / np.where(pos, y, 1.0), np.inf))
    uo, yo = u[order], y[order]
    capped_u2 = 0.0
    free_y2 = float(np.dot(yo, yo))
    k = 0
    for k in range(yo.size):
        if yo[k] == 0:
            break
        kappa = math.sqrt((1.0 - capped_u2) / free_y2)
        if kappa * yo[k] <= uo[k]:
            break
        capped_u2 += uo[k] ** 2
        free_y2 -= yo[k] ** 2
    kappa = math.sqrt(max(0.0, 1.0 - capped_u2) / free_y2) if free_y2 > 0 else 0.0
    return np.minimum(u, kappa * y)


def _ascend(x0, u, op, max_iter=50000, tol=1e-15):
    x = x0
    val = quad_form(x)
    for _ in range(max_iter):
        # y = (I + M) x: ascent on the convex surrogate x.(I+M).x
        x_new = _cap_project(x + op.apply(x), u)
        new_val = quad_form(x_new)
        if abs(new_val - val) < tol and np.max(np.abs(x_new - x)) < 1e-12:
            return x_new, new_val
        x, val = x_new, new_val
    return x, val


def _grid_best(u, n):
    step = 1e-3 if n <= 2 else 1e-2
    a = np.arange(0.0, math.pi / 2 + step, step)
    a = np.minimum(a, math.pi / 2)
    if n == 1:
        pts = [np.cos(a), np.sin(a)]
    elif n == 2:
        t, p = np.meshgrid(a, a, indexing="ij")
        pts = [np.cos(t), np.sin(t) * np.cos(p), np.sin(t) * np.sin(p)]
    else:
        t, p, r = np.meshgrid(a, a, a, indexing="ij")
        st = np.sin(t)
        pts = [np.cos(t), st * np.cos(p), st * np.sin(p) * np.cos(r), st * np.sin(p) * np.sin(r)]
    feasible = np.ones_like(pts[0], dtype=bool)
    for comp, cap in zip(pts, u):
        feasible &= comp <= cap + 1e-12
    val = sum(pts[j] * pts[j + 1] for j in range(n))
    val = np.where(feasible, val, -np.inf)
    return float(np.max(val))


def brute_force_oracle(state: FiducialState, budget: AbstentionBudget, restarts: int = 16,
                       seed: int = 0) -> float:
    """Delta by multi-start projected ascent, plus an angle grid for ``n <= 3``.

    Shares nothing with :func:`solve` beyond the problem definition.
    """
    c = state.coeffs
    n = state.n
    u = budget.lam * c
    op = OverlapOperator(n + 1)
    if budget.q == 0.0:
        return quad_form(c)
    rng = np.random.default_rng(seed)
    starts = [c.copy(), np.minimum(u, op.eigenvector(1))]
    starts += [rng.random(n + 1) + 1e-3 for _ in range(restarts)]
    best = -math.inf
    for s in starts:
        s = np.where(c > 0, s, 0.0)
        x0 = _cap_project(s, u)
        _, val = _ascend(x0, u, op)
        best = max(best, val)
    if n <= 3:
        best = max(best, _grid_best(u, n))
    return best
