"""Fiducial probe states for covariant phase estimation.

A probe is described by its amplitudes ``c_j`` in the eigenbasis of the
phase shift ``U(theta)|j> = exp(i theta j)|j>``, ``j = 0..n``.  Only real,
nonnegative amplitudes are supported; any phases can be absorbed into the
covariant measurement.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NORM_TOL = 1e-12
FILE_NORM_TOL = 1e-9

FAMILIES = ("phase", "copies")


class StateError(ValueError):
    """Raised for malformed or unphysical probe-state data."""


@dataclass(frozen=True)
class FiducialState:
    """Normalized nonnegative amplitudes ``c_0..c_n`` of the fiducial state."""

    n: int
    coeffs: np.ndarray = field(repr=False)
    label: str = ""

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if self.n < 0:
            raise StateError(f"n must be nonnegative, got {self.n}")
        if c.ndim != 1 or c.size != self.n + 1:
            raise StateError(f"expected {self.n + 1} coefficients, got {c.size}")
        if not np.all(np.isfinite(c)):
            raise StateError("coefficients must be finite")
        if np.any(c < 0):
            raise StateError(f"negative coefficient at index {int(np.argmin(c))}")
        norm2 = float(np.dot(c, c))
        if abs(norm2 - 1.0) > NORM_TOL:
            raise StateError(f"coefficients not normalized: sum c_j^2 = {norm2!r}")
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @property
    def dim(self) -> int:
        return self.n + 1

    def is_mirror_symmetric(self) -> bool:
        return bool(np.array_equal(self.coeffs, self.coeffs[::-1]))

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "coeffs": self.coeffs.tolist()})


def make_phase_state(n: int) -> FiducialState:
    """Equal superposition of all ``n + 1`` levels."""
    if n < 1:
        raise StateError("phase state needs n >= 1")
    return FiducialState(n, np.full(n + 1, 1.0 / math.sqrt(n + 1)), "phase")


def make_copies_state(n: int) -> FiducialState:
    """``n`` identical qubits ``(|0> + |1>)/sqrt(2)``, collected by excitation number.

    The amplitudes ``2^{-n/2} binom(n, j)^{1/2}`` are evaluated with log-gamma
    so that large ``n`` neither overflows nor underflows prematurely.
    """
    if n < 1:
        raise StateError("copies state needs n >= 1")
    j = np.arange(n // 2 + 1)
    log_c = 0.5 * (
        math.lgamma(n + 1)
        - np.array([math.lgamma(k + 1) + math.lgamma(n - k + 1) for k in j])
        - n * math.log(2.0)
    )
    half = np.exp(log_c)
    # mirror the lower half so c_j == c_{n-j} bit for bit
    c = np.concatenate([half, half[: (n + 1) // 2][::-1]])
    # log-gamma rounding at large n leaves ~1e-13 relative error
    c /= math.sqrt(math.fsum(c * c))
    return FiducialState(n, c, "copies")


def make_state(family: str, n: int) -> FiducialState:
    if family == "phase":
        return make_phase_state(n)
    if family == "copies":
        return make_copies_state(n)
    raise StateError(f"unknown state family {family!r}; expected one of {FAMILIES}")


def load_state(path) -> FiducialState:
    """Read a state file ``{"n": int, "coeffs": [...]}``.

    Coefficients whose norm is within ``1e-9`` of one are renormalized exactly;
    anything further off is rejected.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StateError(f"cannot read state file {path}: {exc}") from exc
    if not isinstance(data, dict) or "n" not in data or "coeffs" not in data:
        raise StateError('state file must hold an object with "n" and "coeffs"')
    n = data["n"]
    if isinstance(n, bool) or not isinstance(n, int):
        raise StateError(f'"n" must be an integer, got {n!r}')
    try:
        c = np.asarray(data["coeffs"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise StateError(f"coefficients are not a list of reals: {exc}") from exc
    if c.ndim != 1 or c.size != n + 1:
        raise StateError(f"expected {n + 1} coefficients for n={n}, got {c.size}")
    if np.any(c < 0):
        raise StateError(f"negative coefficient at index {int(np.argmin(c))}")
    norm = math.sqrt(math.fsum(c * c))
    if abs(norm - 1.0) > FILE_NORM_TOL:
        raise StateError(f"coefficient norm {norm:.6g} deviates from 1 by more than {FILE_NORM_TOL:g}")
    return FiducialState(n, c / norm, str(data.get("label", path.stem)))


def relative_entropy_bernoulli(t):
    """Kullback-Leibler divergence ``H(t || 1/2)`` in nats, with ``0 log 0 = 0``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any((t_arr < 0) | (t_arr > 1)) or np.any(np.isnan(t_arr)):
        raise ValueError("t must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(t_arr > 0, t_arr * np.log(np.where(t_arr > 0, t_arr, 1.0)), 0.0)
        s = 1.0 - t_arr
        b = np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)), 0.0)
    h = math.log(2.0) + a + b
    return float(h) if np.ndim(h) == 0 else h


def continuum_profile(family: str, t, n: int, gaussian: bool = False):
    """Large-n limit ``psi(t)`` of the rescaled amplitudes ``sqrt(n) c_{tn}``.

    For ``"copies"`` the default is the relative-entropy form; ``gaussian=True``
    gives its expansion ``(2n/pi)^{1/4} exp(-n (t - 1/2)^2)`` around the peak.
    The relative-entropy form is taken to vanish at ``t = 0, 1``.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any((t_arr < 0) | (t_arr > 1)) or np.any(np.isnan(t_arr)):
        raise ValueError("t must lie in [0, 1]")
    if family == "phase":
        out = np.ones_like(t_arr)
    elif family == "copies":
        if gaussian:
            out = (2.0 * n / math.pi) ** 0.25 * np.exp(-n * (t_arr - 0.5) ** 2)
        else:
            interior = (t_arr > 0) & (t_arr < 1)
            ti = np.where(interior, t_arr, 0.5)
            h = relative_entropy_bernoulli(ti)
            val = (n / (2.0 * math.pi * ti * (1.0 - ti))) ** 0.25 * np.exp(-0.5 * n * h)
            out = np.where(interior, val, 0.0)
    else:
        raise ValueError(f"unknown state family {family!r}")
    return float(out) if np.ndim(out) == 0 else out
