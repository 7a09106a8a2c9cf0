"""Command-line front end: solve, adjoint, check, sweep, list.

Exit codes: 0 success; 1 hard error (bad input, missing/corrupt files); 2
flagged non-convergence of the truncation scheme; 3 the improper integral did
not converge (informative, not a failure).  All randomized pools derive from
one seeded generator recorded in summary.txt, and all CSV output uses 17
significant digits, so a fixed seed reproduces byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cauchy, ode, pmp, transversality as tv
from .io import fmt, write_arc_csv, write_csv, write_text
from .problem import (
    ControlProblem,
    ProblemConfigError,
    UnknownBuiltinError,
    builtin,
    builtin_descriptions,
    load_problem,
)

__all__ = ["main", "entry"]


class UsageError(Exception):
    def __init__(self, message, usage):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _float_list(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s.strip()]


def _add_common(sp):
    sp.add_argument("--problem", help="path to a problem config (JSON)")
    sp.add_argument("--builtin", help="name of a builtin benchmark problem")
    sp.add_argument("--out", default=".", help="output directory")
    sp.add_argument("--seed", type=int, default=0, help="seed for randomized pools")
    sp.add_argument("--atol", type=float, default=ode.DEFAULT_ATOL)
    sp.add_argument("--rtol", type=float, default=ode.DEFAULT_RTOL)
    sp.add_argument("--tau", default="5,10,20,40", help="comma list of horizons")
    sp.add_argument("--tmax", type=float, default=160.0, help="integration horizon for tail analysis")
    sp.add_argument("--tol-conv", type=float, default=1e-6, dest="tol_conv")


def build_parser() -> _Parser:
    parser = _Parser(prog="horizon-pmp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")
    for name, helptext in [
        ("solve", "run the finite-horizon truncation scheme"),
        ("adjoint", "accumulate the sensitivity integral and evaluate the adjoint formula"),
        ("check", "run the transversality battery"),
        ("sweep", "continuity probe over perturbed starts plus abnormality indicator"),
        ("list", "list builtin problems"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        if name != "list":
            _add_common(sp)
        if name == "sweep":
            sp.add_argument("--radii", default="0.1,0.05,0.025,0.0125")
        if name == "check":
            sp.add_argument("--artifacts", help="reuse psi_cauchy.csv/I_accumulated.csv from this directory")
        if name == "list":
            sp.add_argument("--json", action="store_true", dest="as_json")
    return parser


def _resolve_problem(args) -> ControlProblem:
    if bool(args.problem) == bool(args.builtin):
        raise UsageError("exactly one of --problem or --builtin is required", "")
    if args.builtin:
        return builtin(args.builtin)
    path = Path(args.problem)
    if not path.exists():
        raise FileNotFoundError(f"problem file not found: {path}")
    return load_problem(path)


def _require_reference(p: ControlProblem):
    if p.reference is None:
        raise ValueError("problem config carries no reference control ('reference' field)")
    return p.reference


def _tau_list(args, p=None) -> np.ndarray:
    taus = np.asarray(_float_list(args.tau), dtype=float)
    if len(taus) < 2 or np.any(np.diff(taus) <= 0):
        raise ValueError("--tau must be a strictly increasing list with >= 2 entries")
    return taus


def _psi_grid(tmax: float) -> np.ndarray:
    return np.linspace(0.0, tmax, int(round(tmax / 0.1)) + 1)


def _adjoint_pipeline(p, u0, args):
    """accumulate -> classify -> (cauchy adjoint when converged).

    The adjoint grid is capped at the conditioning span: beyond it the formula
    multiplies quadrature noise by the inverse fundamental matrix.
    """
    acc = cauchy.accumulate(p, u0, p.x0, args.tmax, atol=args.atol, rtol=args.rtol)
    verdict = cauchy.classify_convergence(acc, args.tol_conv)
    ca, capped = None, None
    if verdict.kind == "converged":
        t_psi = min(args.tmax, cauchy.conditioned_span(acc))
        capped = t_psi if t_psi < args.tmax - 1e-9 else None
        ca = cauchy.cauchy_adjoint(p, u0, verdict, acc, acc.matrix_arc, _psi_grid(t_psi))
    return acc, verdict, ca, capped


def _verdict_block(verdict, ca):
    lines = ["[improper integral]", f"verdict: {verdict.kind}"]
    if verdict.limit is not None:
        lines.append("I_star: " + ",".join(fmt(v) for v in verdict.limit))
    if verdict.growth_exponent is not None:
        lines.append(f"growth_exponent: {fmt(verdict.growth_exponent)}")
    lines.append("window_oscillations: " + ",".join(fmt(v) for v in verdict.oscillations))
    for cp in verdict.cluster_points:
        lines.append("cluster_point: " + ",".join(fmt(v) for v in cp))
    if ca is not None:
        lines.append(f"lambda0: {fmt(ca.lam)}")
        lines.append("psi0_normalized: " + ",".join(fmt(v) for v in ca.psi.values[0]))
        lines.append("psi0_unit: " + ",".join(fmt(v) for v in ca.psi_unit.values[0]))
    return lines


def cmd_solve(args) -> int:
    p = _resolve_problem(args)
    u0 = _require_reference(p)
    taus = _tau_list(args)
    rng = np.random.default_rng(args.seed)
    run = pmp.run_truncation(p, u0, taus, rng=rng, atol=args.atol, rtol=args.rtol)
    out = Path(args.out)
    m = p.state_dim

    header = ["n", "tau_n", "gamma_n", "lambda_n"] + [f"psi0_{i + 1}" for i in range(m)] + ["residual", "converged"]
    rows = [[r.n, r.tau, r.gamma, r.lam, *r.psi0, r.residual, r.converged] for r in run.records]
    write_csv(out / "truncation.csv", header, rows)

    if run.extremal is not None:
        write_arc_csv(out / "extremal_x.csv", run.extremal.x)
        write_arc_csv(out / "extremal_psi.csv", run.extremal.psi)

    lines = [f"problem: {p.label or args.problem}", f"seed: {args.seed}", f"pool_size: {run.omega.pool_size}"]
    lines.append("tau: " + ",".join(fmt(t) for t in taus))
    lines.append("gamma: " + ",".join(fmt(g) for g in run.gammas))
    lines.append("omega: " + ",".join(fmt(v) for v in run.omega.values))
    for r in run.records:
        lines.append(
            f"n={r.n} tau={fmt(r.tau)} lambda={fmt(r.lam)} psi0={','.join(fmt(v) for v in r.psi0)} "
            f"residual={fmt(r.residual)} converged={fmt(r.converged)}"
        )
    if run.psi0_diffs:
        lines.append("cauchy_diff_psi0: " + ",".join(fmt(v) for v in run.psi0_diffs))
        lines.append("cauchy_diff_lambda: " + ",".join(fmt(v) for v in run.lambda_diffs))
    if run.extremal is not None:
        lines.append(f"final_lambda: {fmt(run.extremal.lam)}")
        lines.append("final_psi0: " + ",".join(fmt(v) for v in run.extremal.psi0))
    write_text(out / "summary.txt", "\n".join(lines) + "\n")
    return 0 if run.converged else 2


def cmd_adjoint(args) -> int:
    p = _resolve_problem(args)
    u0 = _require_reference(p)
    acc, verdict, ca, capped = _adjoint_pipeline(p, u0, args)
    out = Path(args.out)

    m = p.state_dim
    header = [f"xi_{i + 1}" for i in range(m)] + ["T"] + [f"I_{i + 1}" for i in range(m)]
    rows = [[*acc.xi, t, *v] for t, v in zip(acc.grid, acc.values)]
    write_csv(out / "I_accumulated.csv", header, rows)

    lines = [f"problem: {p.label or args.problem}", f"seed: {args.seed}"]
    lines += _verdict_block(verdict, ca)
    if ca is not None:
        write_arc_csv(out / "psi_cauchy.csv", ca.psi)
        dev = cauchy.verify_product_identity(ca.lam, ca.psi, acc, acc.matrix_arc, ca.i_limit)
        lines.append(f"product_identity_deviation: {fmt(dev)}")
        if capped is not None:
            lines.append(f"psi_grid_capped_at: {fmt(capped)} (conditioning of the inverse fundamental matrix)")
    write_text(out / "summary.txt", "\n".join(lines) + "\n")
    return 0 if verdict.kind == "converged" else 3


def _load_artifact_psi(path: Path) -> ode.AdjointArc:
    rows = [line.split(",") for line in path.read_text().strip().splitlines()]
    if not rows or rows[0][0] != "t":
        raise ValueError(f"corrupt artifact: {path}")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:]])
    except ValueError as err:
        raise ValueError(f"corrupt artifact: {path}: {err}") from None
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError(f"corrupt artifact: {path}")
    grid, vals = data[:, 0], data[:, 1:]
    derivs = np.gradient(vals, grid, axis=0)
    return ode.AdjointArc(grid, vals, derivs)


def cmd_check(args) -> int:
    p = _resolve_problem(args)
    u0 = _require_reference(p)
    taus = _tau_list(args)
    acc, verdict, ca, _ = _adjoint_pipeline(p, u0, args)
    if ca is None:
        raise ValueError(f"improper integral verdict is '{verdict.kind}'; no adjoint to check")
    psi, lam = ca.psi, ca.lam
    if args.artifacts:
        psi = _load_artifact_psi(Path(args.artifacts) / "psi_cauchy.csv")
    report = tv.run_battery(
        p, u0, lam=lam, psi=psi, fundamental=acc.matrix_arc, acc=acc,
        i_limit=ca.i_limit, taus=taus, tol=args.tol_conv,
        rng=np.random.default_rng(args.seed), atol=args.atol, rtol=args.rtol,
    )
    out = Path(args.out)
    write_text(out / "transversality.txt", report.to_text())
    for cid, v in report.entries.items():
        if len(v.windows):
            rows = [[lo, hi, s] for (lo, hi), s in zip(v.windows, v.statistics)]
            write_csv(out / f"evidence_{cid}.csv", ["window_lo", "window_hi", "sup"], rows)
        else:
            seq = v.subsequence if v.subsequence else range(len(v.statistics))
            rows = [[t, s] for t, s in zip(seq, v.statistics)]
            write_csv(out / f"evidence_{cid}.csv", ["tau", "norm"], rows)
    return 0


def cmd_sweep(args) -> int:
    p = _resolve_problem(args)
    u0 = _require_reference(p)
    radii = _float_list(args.radii)
    eye = np.eye(p.state_dim)
    directions = np.concatenate([eye, -eye], axis=0)
    probe = cauchy.continuity_probe(p, u0, radii, directions, args.tmax, atol=args.atol, rtol=args.rtol)
    ab = cauchy.abnormality_indicator(p, u0, radii, args.tmax, atol=args.atol, rtol=args.rtol)

    out = Path(args.out)
    m = p.state_dim
    rows = []
    for i, r in enumerate(probe.radii):
        for j, d in enumerate(probe.directions):
            rows.append([r, *d, probe.sup_diff[i, j]])
    write_csv(out / "probe.csv", ["r"] + [f"d_{i + 1}" for i in range(m)] + ["sup_diff"], rows)

    lines = [f"problem: {p.label or args.problem}", f"seed: {args.seed}", "[continuity probe]"]
    lines.append("radii: " + ",".join(fmt(r) for r in probe.radii))
    lines.append("sup_by_radius: " + ",".join(fmt(v) for v in probe.sup_by_radius))
    lines.append(f"decreasing: {fmt(probe.decreasing)}")
    if probe.modulus_exponent is not None:
        lines.append(f"modulus_exponent: {fmt(probe.modulus_exponent)}")
    for f in probe.failures:
        lines.append(f"failure: {f}")
    lines.append("[abnormality indicator]")
    lines.append(f"verdict: {ab.message}")
    lines.append(f"sup_norm: {fmt(ab.sup_norm)}")
    if ab.growth_exponent is not None:
        lines.append(f"growth_exponent: {fmt(ab.growth_exponent)}")
    write_text(out / "summary.txt", "\n".join(lines) + "\n")
    return 0


def cmd_list(args) -> int:
    items = builtin_descriptions()
    if getattr(args, "as_json", False):
        print(json.dumps([{"name": n, "description": d} for n, d in items], indent=2))
    else:
        for name, desc in items:
            print(f"{name} - {desc}")
    return 0


_COMMANDS = {
    "solve": cmd_solve,
    "adjoint": cmd_adjoint,
    "check": cmd_check,
    "sweep": cmd_sweep,
    "list": cmd_list,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            print(parser.format_usage(), file=sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        if err.usage:
            print(err.usage, file=sys.stderr)
        return 1
    except (
        FileNotFoundError,
        ValueError,
        ProblemConfigError,
        UnknownBuiltinError,
        ode.OdeError,
        cauchy.InsufficientSamplesError,
        cauchy.MissingVerdictError,
    ) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())
