"""Command-line entry point: ``abstain-metrology <command> ...``.

Every output embeds its full parameter set.  JSON commands print one record;
``curve`` and ``profile`` print CSV whose first line is ``# `` followed by the
same record (without the rows) as JSON.

Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .asymptotics import (
    BracketError,
    copies_profile,
    copies_shotnoise_ns_at_q,
    phase_state_fidelity_asym,
    phase_state_profile,
)
from .exact_solver import (
    FEAS_TOL,
    MAX_ITER,
    AbstentionBudget,
    SolverError,
    critical_abstention,
    solve,
)
from .povm_sim import THREADS_ENV, SamplerError, SimulationConfig, simulate
from .probe_states import StateError, continuum_profile, load_state, make_state

EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


@dataclass
class RunRecord:
    command: str
    parameters: dict
    outputs: list = field(default_factory=list)
    artifact_version: str = __version__
    timestamp: str = ""

    def __post_init__(self):
        if not self.timestamp:
            self.timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def header(self) -> dict:
        return {
            "command": self.command,
            "parameters": self.parameters,
            "artifact_version": self.artifact_version,
            "timestamp": self.timestamp,
        }

    def to_json(self) -> str:
        doc = self.header()
        doc["outputs"] = [{k: _json_real(v) for k, v in row.items()} for row in self.outputs]
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        doc = json.loads(text)
        return cls(doc["command"], doc["parameters"], doc["outputs"], doc["artifact_version"], doc["timestamp"])

    def to_csv(self, columns) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.header()) + "\r\n")
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(columns)
        for row in self.outputs:
            writer.writerow([_csv_real(row.get(c)) for c in columns])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str):
        """Parse CSV produced by :meth:`to_csv`; returns ``(record, columns)``."""
        first, _, body = text.partition("\n")
        if not first.startswith("# "):
            raise ValueError("missing reproducibility header")
        head = json.loads(first[2:])
        reader = csv.reader(io.StringIO(body))
        columns = next(reader)
        rows = [{c: (float(v) if v != "" else None) for c, v in zip(columns, line)} for line in reader]
        rec = cls(head["command"], head["parameters"], rows, head["artifact_version"], head["timestamp"])
        return rec, columns


def _json_real(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, np.generic):
        return v.item()
    return v


def _csv_real(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if not math.isfinite(v) else format(v, ".17g")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _resolve_state(choice: str, n):
    """``phase`` | ``copies`` | ``file:<path>`` -> (state, family or None)."""
    if choice.startswith("file:"):
        state = load_state(choice[5:])
        if n is not None and n != state.n:
            raise UsageError(f"--n {n} disagrees with n={state.n} in {choice[5:]}")
        return state, None
    if choice not in ("phase", "copies"):
        raise UsageError(f"--state must be phase, copies or file:<path>, got {choice!r}")
    if n is None:
        raise UsageError("--n is required for built-in states")
    return make_state(choice, n), choice


def _solve(state, q, args):
    return solve(state, AbstentionBudget(q), max_iter=args.max_iter, feas_tol=args.feas_tol)


def asymptotic_fidelity(family, n, q) -> float:
    if family == "phase":
        return 1.0 - 1.0 / (2 * n + 2) if q == 0 else phase_state_fidelity_asym(n, q)
    if family == "copies":
        ns = 0.5 if q == 0 else copies_shotnoise_ns_at_q(q)
        return 1.0 - ns / (2.0 * n)
    raise UsageError("asymptotic fidelity is only available for the phase and copies families")


def cmd_fidelity(args):
    state, family = _resolve_state(args.state, args.n)
    crit = critical_abstention(state)
    row = {"q": args.q, "q_star": crit.q_star, "F_star": crit.f_star}
    if args.method in ("exact", "both"):
        sol = _solve(state, args.q, args)
        row.update(F=sol.fidelity, delta=sol.delta, iterations=sol.iterations)
    if args.method in ("asymptotic", "both"):
        f_asym = asymptotic_fidelity(family, state.n, args.q)
        if args.method == "asymptotic":
            row.update(F=f_asym, delta=2.0 * f_asym - 1.0)
        else:
            row.update(F_asymptotic=f_asym, residual=abs(row["F"] - f_asym),
                       deficit_ratio=(1.0 - row["F"]) / (1.0 - f_asym))
    params = {"state": args.state, "n": state.n, "q": args.q, "method": args.method,
              "max_iter": args.max_iter, "feas_tol": args.feas_tol}
    return RunRecord("fidelity", params, [row]).to_json()


def q_grid(args):
    if args.q_values:
        grid = [float(x) for x in args.q_values.split(",") if x.strip()]
    else:
        if args.q_step <= 0:
            raise UsageError("--q-step must be positive")
        count = int(math.floor((args.q_max - args.q_min) / args.q_step + 1e-9)) + 1
        grid = [round(args.q_min + k * args.q_step, 12) for k in range(max(count, 0))]
    if not grid:
        raise UsageError("empty q grid")
    for q in grid:
        if not (0.0 <= q < 1.0):
            raise UsageError(f"grid value {q} outside [0, 1)")
    return grid


CURVE_COLUMNS = ["q", "F_exact", "NS_exact", "NS_parametric", "abs_deviation"]


def cmd_curve(args):
    state, family = _resolve_state(args.state, args.n)
    grid = q_grid(args)
    n = state.n

    def point(q):
        sol = _solve(state, q, args)
        ns_exact = n * (1.0 - sol.delta)
        row = {"q": q, "F_exact": sol.fidelity, "NS_exact": ns_exact, "NS_parametric": None, "abs_deviation": None}
        if family == "copies":
            ns_par = 0.5 if q == 0 else copies_shotnoise_ns_at_q(q)
            row.update(NS_parametric=ns_par, abs_deviation=abs(ns_exact - ns_par))
        return row

    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(point, grid))
    else:
        rows = [point(q) for q in grid]
    params = {"state": args.state, "n": n, "q_grid": grid, "max_iter": args.max_iter, "feas_tol": args.feas_tol}
    return RunRecord("curve", params, rows).to_csv(CURVE_COLUMNS)


PROFILE_COLUMNS = ["j", "t", "sqrtN_xi", "phi_analytic", "lambda_psi", "lambda_psi_continuum"]


def cmd_profile(args):
    state, family = _resolve_state(args.state, args.n)
    if args.lam < 1.0:
        raise UsageError("--lambda must be >= 1")
    budget = AbstentionBudget.from_lambda(args.lam)
    sol = solve(state, budget, max_iter=args.max_iter, feas_tol=args.feas_tol)
    n = state.n
    j = np.arange(n + 1)
    t = j / n
    root_n = math.sqrt(n)
    phi = [None] * (n + 1)
    if family == "copies" and args.lam > 1.0:
        phi = copies_profile(n, args.lam, t)
    elif family == "phase" and budget.q > 0:
        phi = phase_state_profile(budget.q, t) if budget.q <= 0.5 else math.sqrt(2.0) * np.sin(math.pi * t)
    cont = [None] * (n + 1) if family is None else args.lam * continuum_profile(family, t, n)
    rows = [
        {"j": int(k), "t": float(t[k]), "sqrtN_xi": root_n * float(sol.xi[k]),
         "phi_analytic": None if phi[k] is None else float(phi[k]),
         "lambda_psi": root_n * budget.lam * float(state.coeffs[k]),
         "lambda_psi_continuum": None if cont[k] is None else float(cont[k])}
        for k in range(n + 1)
    ]
    params = {"state": args.state, "n": n, "lambda": args.lam, "q": budget.q,
              "max_iter": args.max_iter, "feas_tol": args.feas_tol}
    return RunRecord("profile", params, rows).to_csv(PROFILE_COLUMNS)


def cmd_simulate(args):
    state, _ = _resolve_state(args.state, args.n)
    budget = AbstentionBudget(args.q)
    sol = solve(state, budget, max_iter=args.max_iter, feas_tol=args.feas_tol)
    cfg = SimulationConfig(shots=args.shots, seed=args.seed, max_rejection_iters=args.max_rejection_iters)
    rep = simulate(state, budget, sol, cfg)
    row = rep.to_dict()
    row["exact_delta"] = sol.delta
    params = {"state": args.state, "n": state.n, "q": args.q, "shots": args.shots, "seed": args.seed,
              "max_rejection_iters": args.max_rejection_iters}
    return RunRecord("simulate", params, [row]).to_json()


def cmd_critical(args):
    state, _ = _resolve_state(args.state, args.n)
    crit = critical_abstention(state)
    row = {"q_star": crit.q_star, "q_bar_star": crit.q_bar_star, "F_star": crit.f_star,
           "argmin": crit.argmin, "attainable": crit.attainable}
    return RunRecord("critical", {"state": args.state, "n": state.n}, [row]).to_json()


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _probability(text):
    v = float(text)
    if not (0.0 <= v < 1.0):
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1), got {text}")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="abstain-metrology",
                                     description="Optimal phase estimation with abstention.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_q=True):
        p.add_argument("--state", default="phase", help="phase | copies | file:<path>")
        p.add_argument("--n", type=_positive_int, default=None, help="number of qubits")
        if needs_q:
            p.add_argument("--q", type=_probability, default=0.0, help="abstention rate")
        p.add_argument("--max-iter", type=_positive_int, default=MAX_ITER)
        p.add_argument("--feas-tol", type=float, default=FEAS_TOL)
        p.add_argument("-o", "--output", default=None, help="write to this file instead of stdout")

    p = sub.add_parser("fidelity", help="optimal fidelity at one abstention rate")
    common(p)
    p.add_argument("--method", choices=("exact", "asymptotic", "both"), default="exact")
    p.set_defaults(func=cmd_fidelity)

    p = sub.add_parser("curve", help="CSV of N*S = 2N(1-F) over a grid of abstention rates")
    common(p, needs_q=False)
    p.add_argument("--q-min", type=float, default=0.05)
    p.add_argument("--q-max", type=float, default=0.95)
    p.add_argument("--q-step", type=float, default=0.05)
    p.add_argument("--q-values", default=None, help="comma-separated grid, overrides min/max/step")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("profile", help="CSV of the optimal filtered amplitudes against the analytic profile")
    common(p, needs_q=False)
    p.add_argument("--lambda", dest="lam", type=float, default=1.5, help="cap multiplier (1-q)^(-1/2)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("simulate", help="Monte Carlo run of filter plus covariant measurement")
    common(p)
    p.add_argument("--shots", type=_positive_int, default=10**5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-rejection-iters", type=_positive_int, default=10**6)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("critical", help="critical abstention rate and plateau fidelity")
    common(p, needs_q=False)
    p.set_defaults(func=cmd_critical)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        text = args.func(args)
    except (UsageError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, SamplerError, BracketError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
