"""Monte Carlo run of the abstain-then-measure protocol.

Each shot draws a true phase, passes the probe through the diagonal
abstention filter, and on acceptance reads out the covariant POVM seeded by
``|Phi> = sum_j |j>``.  Given acceptance, the estimate error
``delta = theta_hat - theta`` has density ``|sum_j xi_j e^{i j delta}|^2 / 2 pi``
for the filtered amplitudes ``xi``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .exact_solver import AbstentionBudget, FilterSolution, filter_abstention
from .probe_states import FiducialState

TWO_PI = 2.0 * math.pi
THREADS_ENV = "ABSTAIN_METROLOGY_THREADS"


class SamplerError(RuntimeError):
    pass


def _check_xi(xi):
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1 or xi.size == 0:
        raise ValueError("xi must be a nonempty vector")
    if abs(float(np.dot(xi, xi)) - 1.0) > 1e-9:
        raise ValueError("xi must be normalized")
    return xi


def _amplitude2(xi, delta):
    """``|sum_j xi_j e^{i j delta}|^2`` by Horner accumulation in ``e^{i delta}``, O(n) per point."""
    z = np.exp(1j * np.asarray(delta, dtype=float))
    acc = np.full(z.shape, xi[-1], dtype=complex)
    for x in xi[-2::-1]:
        acc = acc * z + x
    return acc.real ** 2 + acc.imag ** 2


def conditional_density(xi, delta_angle):
    """Density of the estimate error given acceptance."""
    xi = _check_xi(xi)
    out = _amplitude2(xi, delta_angle) / TWO_PI
    return float(out) if np.ndim(out) == 0 else out


def bin_probabilities(xi, edges):
    """Exact probability mass of the error density between consecutive ``edges``."""
    xi = _check_xi(xi)
    edges = np.asarray(edges, dtype=float)
    # density = (1/2pi) [1 + 2 sum_k R_k cos(k delta)], R_k = sum_j xi_j xi_{j+k}
    r = np.array([np.dot(xi[:-k], xi[k:]) for k in range(1, xi.size)])
    k = np.arange(1, xi.size)
    prim = edges + 2.0 * (np.sin(np.multiply.outer(edges, k)) / k) @ r
    return np.diff(prim) / TWO_PI


def sample_estimates(xi, rng, size, max_rejection_iters=10**6):
    """``size`` independent draws of the estimate error by flat-envelope rejection."""
    xi = _check_xi(xi)
    peak = float(np.sum(np.abs(xi))) ** 2
    out = np.empty(size)
    filled = 0
    tried = 0
    limit = max_rejection_iters * max(size, 1)
    while filled < size:
        m = int(min(max(1.5 * peak * (size - filled), 64), 2**20))
        d = rng.uniform(0.0, TWO_PI, m)
        u = rng.random(m)
        keep = d[u * peak <= _amplitude2(xi, d)]
        take = min(keep.size, size - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
        tried += m
        if filled < size and tried >= limit:
            raise SamplerError(f"rejection sampler exceeded {limit} proposals")
    return out


def _draw(xi, peak, batch, rng, max_rejection_iters):
    j = np.arange(xi.size)
    tried = 0
    while tried < max_rejection_iters:
        m = min(batch, max_rejection_iters - tried)
        d = rng.uniform(0.0, TWO_PI, m)
        u = rng.random(m)
        phase = np.multiply.outer(d, j)
        re = np.cos(phase) @ xi
        im = np.sin(phase) @ xi
        hit = np.flatnonzero(u * peak <= re * re + im * im)
        if hit.size:
            return float(d[hit[0]])
        tried += m
    raise SamplerError(f"no acceptance after {max_rejection_iters} proposals")


def _envelope(xi):
    peak = float(np.sum(np.abs(xi))) ** 2
    return peak, max(8, int(1.5 * peak) + 1)


def sample_estimate(xi, rng, max_rejection_iters=10**6) -> float:
    """One draw of ``delta`` in ``[0, 2 pi)``.

    The envelope ``(sum_j |xi_j|)^2 / 2 pi`` is the density's maximum, reached
    at ``delta = 0`` for nonnegative ``xi``.
    """
    xi = _check_xi(xi)
    peak, batch = _envelope(xi)
    return _draw(xi, peak, batch, rng, max_rejection_iters)


@dataclass(frozen=True)
class SimulationConfig:
    shots: int
    seed: int = 0
    max_rejection_iters: int = 10**6
    workers: int | None = None

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.max_rejection_iters < 1:
            raise ValueError("max_rejection_iters must be >= 1")


@dataclass(frozen=True)
class SimulationReport:
    shots: int
    accepted: int
    empirical_q: float
    empirical_fidelity: float
    fidelity_stderr: float
    exact_q: float
    exact_fidelity: float

    def to_dict(self):
        return asdict(self)


def shot_rng(seed: int, shot: int) -> np.random.Generator:
    """Independent stream for one shot; identical however shots are scheduled."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(shot,))))


def _worker_count(cfg):
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def simulate(state: FiducialState, budget: AbstentionBudget, sol: FilterSolution,
             cfg: SimulationConfig) -> SimulationReport:
    xi = _check_xi(sol.xi)
    if xi.size != state.dim:
        raise ValueError("solution does not match the state dimension")
    p_abstain = filter_abstention(state, sol)
    peak, batch = _envelope(xi)
    fid = np.full(cfg.shots, np.nan)

    def run(lo, hi):
        for i in range(lo, hi):
            rng = shot_rng(cfg.seed, i)
            theta = rng.uniform(0.0, TWO_PI)
            # diagonal filter: abstention odds do not depend on theta
            if rng.random() < p_abstain:
                continue
            delta = _draw(xi, peak, batch, rng, cfg.max_rejection_iters)
            estimate = math.fmod(theta + delta, TWO_PI)
            fid[i] = 0.5 * (1.0 + math.cos(theta - estimate))

    workers = _worker_count(cfg)
    if workers == 1:
        run(0, cfg.shots)
    else:
        bounds = np.linspace(0, cfg.shots, workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda ab: run(*ab), zip(bounds[:-1], bounds[1:])))

    ok = fid[~np.isnan(fid)]
    accepted = int(ok.size)
    mean = float(np.sum(ok) / accepted) if accepted else math.nan
    stderr = float(np.std(ok, ddof=1) / math.sqrt(accepted)) if accepted > 1 else math.nan
    return SimulationReport(
        shots=cfg.shots,
        accepted=accepted,
        empirical_q=1.0 - accepted / cfg.shots,
        empirical_fidelity=mean,
        fidelity_stderr=stderr,
        exact_q=budget.q,
        exact_fidelity=sol.fidelity,
    )
