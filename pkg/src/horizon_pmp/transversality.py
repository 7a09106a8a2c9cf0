"""Transversality and stability diagnostics for candidate adjoint arcs.

All asymptotic questions are decided as window-based trichotomies over
doubling tail windows [1,2], [2,4], ...: numeric data cannot certify a limit,
so each check returns holds / fails / inconclusive together with the window
statistics it looked at.  The battery covers

* plain limit          |psi(t)| -> 0,
* subsequence limit    min_n |psi(tau_n)| -> 0 over a given horizon sequence,
* weighted limits      psi(t) A(t) -> 0 in full-limit and liminf modes,
* exponential dominance  |dg/dx| |A| <= beta exp(-alpha t) fitted over a
  sample of trajectories,
* Lyapunov exponents of the adjoint flow (QR re-orthonormalisation of the
  inverse-transpose propagator of the fundamental matrix),
* the monotone case: sign hypotheses on dg/dx and the off-diagonal of df/dx,
  the implied sign of psi, and a probe-scale sandwich estimate pinning
  psi(0) between scaled limits of the accumulated integral.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ode
from .cauchy import AccumulatedIntegral, adjoint_ode_residual
from .problem import ControlProblem, ReferenceControl

__all__ = [
    "LimitVerdict",
    "DominanceFit",
    "MonotoneReport",
    "TransversalityReport",
    "ShortArcError",
    "check_plain_limit",
    "check_subsequence_limit",
    "check_weighted_limit",
    "fit_decay",
    "fit_exponential_dominance",
    "lyapunov_exponents",
    "monotone_analysis",
    "run_battery",
    "parse_summary_line",
    "report_from_text",
]


class ShortArcError(Exception):
    pass


# ---------------------------------------------------------------------------
# Window statistics and limit checks
# ---------------------------------------------------------------------------


def _windows(t0: float, t1: float) -> list[tuple[float, float]]:
    """Doubling windows [1,2], [2,4], ... clipped to the arc span."""
    edges = [t0]
    c = 1.0
    while c < t1 - 1e-9:
        if c > t0 + 1e-9:
            edges.append(c)
        c *= 2.0
    edges.append(t1)
    return list(zip(edges[:-1], edges[1:]))


def window_sups(grid: np.ndarray, norms: np.ndarray) -> tuple[list, np.ndarray]:
    wins = _windows(float(grid[0]), float(grid[-1]))
    sups = []
    for lo, hi in wins:
        sel = (grid >= lo - 1e-12) & (grid <= hi + 1e-12)
        sups.append(float(np.max(norms[sel])))
    return wins, np.asarray(sups)


@dataclass(frozen=True)
class LimitVerdict:
    condition: str
    verdict: str  # "holds" | "fails" | "inconclusive"
    statistics: np.ndarray  # window sups, or sampled sequence norms
    windows: tuple = ()
    subsequence: tuple = ()
    tol: float = 0.0

    @property
    def holds(self) -> bool:
        return self.verdict == "holds"


def _classify_window_sups(condition, wins, sups, tol) -> LimitVerdict:
    if len(sups) < 4:
        raise ShortArcError(f"{condition}: need >= 4 doubling windows, have {len(sups)}")
    tail = sups[-3:]
    # statistics two orders below tol sit at the numerical noise floor; their
    # internal ordering carries no signal for the monotonicity requirement
    snapped = np.maximum(tail, 0.01 * tol)
    nonincreasing = bool(np.all(np.diff(snapped) <= snapped[:-1] * 0.05))
    if sups[-1] <= tol and nonincreasing:
        verdict = "holds"
    elif np.min(tail) >= 10.0 * tol and sups[-1] >= 0.9 * sups[-2]:
        verdict = "fails"
    else:
        verdict = "inconclusive"
    return LimitVerdict(condition, verdict, sups, tuple(wins), tol=tol)


def check_plain_limit(psi: ode.AdjointArc, tol: float = 1e-6, condition: str = "trans") -> LimitVerdict:
    """Does |psi(t)| vanish at the far end of the arc?

    holds: final-window sup <= tol with non-increasing tail sups; fails: tail
    sups stagnate at >= 10 tol; inconclusive: anything in between (slow decay).
    """
    norms = np.linalg.norm(psi.values, axis=1)
    wins, sups = window_sups(psi.grid, norms)
    return _classify_window_sups(condition, wins, sups, tol)


def check_subsequence_limit(psi: ode.AdjointArc, taus, tol: float = 1e-6, condition: str = "partlim") -> LimitVerdict:
    """liminf surrogate: min of |psi(tau_n)| over the tail third of the sequence."""
    taus = np.asarray(taus, dtype=float)
    if np.any(taus < psi.t0 - 1e-9) or np.any(taus > psi.t1 + 1e-9):
        raise ValueError("subsequence leaves the arc span")
    vals = np.linalg.norm(np.atleast_2d(psi.eval(taus)), axis=1)
    k = max(1, int(np.ceil(len(taus) / 3)))
    tail_min = float(np.min(vals[-k:]))
    if tail_min <= tol:
        verdict = "holds"
    elif tail_min >= 10.0 * tol:
        verdict = "fails"
    else:
        verdict = "inconclusive"
    return LimitVerdict(condition, verdict, vals, subsequence=tuple(taus), tol=tol)


def _product_arc(psi: ode.AdjointArc, fundamental: ode.MatrixArc) -> tuple[np.ndarray, np.ndarray]:
    lo = max(psi.t0, fundamental.t0)
    hi = min(psi.t1, fundamental.t1)
    if hi - lo <= 0:
        raise ValueError("adjoint arc and matrix arc do not share a span")
    grid = psi.grid[(psi.grid >= lo - 1e-12) & (psi.grid <= hi + 1e-12)]
    prods = np.einsum("nm,nmj->nj", np.atleast_2d(psi.eval(grid)), fundamental.eval(grid))
    return grid, prods


def check_weighted_limit(
    psi: ode.AdjointArc,
    fundamental: ode.MatrixArc,
    mode: str = "full",
    tol: float = 1e-6,
    taus=None,
) -> LimitVerdict:
    """Plain/subsequence limit logic applied to the product t -> psi(t) A(t).

    With the identity matrix arc this reduces exactly to the unweighted check.
    """
    grid, prods = _product_arc(psi, fundamental)
    norms = np.linalg.norm(prods, axis=1)
    if mode == "full":
        wins, sups = window_sups(grid, norms)
        return _classify_window_sups("lim", wins, sups, tol)
    if mode != "liminf":
        raise ValueError("mode must be 'full' or 'liminf'")
    if taus is not None:
        taus = np.asarray(taus, dtype=float)
        sel_vals = np.interp(taus, grid, norms)
        seq = tuple(taus)
    else:
        sel_vals = norms
        seq = ()
    k = max(1, int(np.ceil(len(sel_vals) / 3)))
    tail_min = float(np.min(sel_vals[-k:]))
    verdict = "holds" if tail_min <= tol else ("fails" if tail_min >= 10.0 * tol else "inconclusive")
    return LimitVerdict("partlim_1", verdict, np.asarray(sel_vals), subsequence=seq, tol=tol)


# ---------------------------------------------------------------------------
# Exponential dominance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DominanceFit:
    alpha: float  # decay rate; +inf marks an identically zero product
    beta: float
    holds: bool
    max_log_residual: float
    n_samples: int
    per_trajectory: tuple = ()  # (alpha_i, beta_i) or None for zero products


def fit_decay(ts, values) -> tuple[float, float, float]:
    """Least-squares fit values ~ beta * exp(-alpha t); returns (alpha, beta,
    max log residual above the fit).  Zero values are excluded; all-zero data
    returns (inf, 0, 0)."""
    ts = np.asarray(ts, dtype=float)
    values = np.asarray(values, dtype=float)
    mask = values > 0
    if not np.any(mask):
        return float("inf"), 0.0, 0.0
    logs = np.log(values[mask])
    slope, intercept = np.polyfit(ts[mask], logs, 1)
    resid = float(np.max(logs - (slope * ts[mask] + intercept)))
    return -float(slope), float(np.exp(intercept)), resid


def fit_exponential_dominance(
    p: ControlProblem,
    samples,
    arcs,
    *,
    margin: float = 0.01,
    n_grid: int = 240,
) -> DominanceFit:
    """Fit |dg/dx| |A| <= beta exp(-alpha t) over a sample of trajectories.

    ``samples`` is a list of (trajectory, control) pairs and ``arcs`` their
    fundamental matrices.  The fit pools every positive product sample; holds
    means the fitted decay rate clears the margin.  The full quantification
    over all admissible controls is not checkable, so the report carries the
    sample size.
    """
    all_t: list[float] = []
    all_s: list[float] = []
    per_traj = []
    for (x_arc, u), A_arc in zip(samples, arcs):
        lo = max(x_arc.t0, A_arc.t0)
        hi = min(x_arc.t1, A_arc.t1)
        ts = np.linspace(lo, hi, n_grid)
        prods = np.empty(len(ts))
        for i, t in enumerate(ts):
            xt = x_arc.eval(float(t))
            ut = u.eval(float(t), xt)
            gx = p.g_gradient_x(float(t), xt, ut)
            prods[i] = float(np.linalg.norm(gx) * np.linalg.norm(A_arc.eval(float(t)), 2))
        per_traj.append(fit_decay(ts, prods))
        all_t.extend(ts)
        all_s.extend(prods)
    alpha, beta, resid = fit_decay(np.asarray(all_t), np.asarray(all_s))
    holds = alpha > margin
    return DominanceFit(
        alpha=alpha,
        beta=beta,
        holds=holds,
        max_log_residual=resid,
        n_samples=len(per_traj),
        per_trajectory=tuple(per_traj),
    )


# ---------------------------------------------------------------------------
# Lyapunov exponents
# ---------------------------------------------------------------------------


def lyapunov_exponents(
    fundamental: ode.MatrixArc,
    *,
    flow: str = "adjoint",
    dt: float = 0.5,
    t_min: float = 40.0,
) -> np.ndarray:
    """Lyapunov exponents, descending, by QR re-orthonormalisation every dt.

    ``flow="adjoint"`` uses the inverse-transpose propagator (the homogeneous
    adjoint flow), so its exponents are the negatives of the state flow's,
    reordered.  Requires the arc to span at least ``t_min``.
    """
    span = fundamental.t1 - fundamental.t0
    if span < t_min:
        raise ShortArcError(f"arc span {span:g} below required {t_min:g}")
    m = fundamental.dim
    times = np.arange(fundamental.t0, fundamental.t1 + 1e-9, dt)
    if times[-1] < fundamental.t1 - 1e-9:
        times = np.append(times, fundamental.t1)
    Q = np.eye(m)
    logs = np.zeros(m)
    prev = fundamental.eval(float(times[0]))
    for t in times[1:]:
        cur = fundamental.eval(float(t))
        # local state propagator Phi = A(t) A(t_prev)^-1
        phi = np.linalg.solve(prev.T, cur.T).T
        Z = np.linalg.solve(phi.T, Q) if flow == "adjoint" else phi @ Q
        Q, R = np.linalg.qr(Z)
        diag = np.diag(R)
        if np.any(~np.isfinite(diag)) or np.any(diag == 0.0):
            raise ode.SingularMatrixError(float(t), float("inf"))
        signs = np.sign(diag)
        Q = Q * signs
        logs += np.log(np.abs(diag))
        prev = cur
    exps = logs / (times[-1] - times[0])
    return np.sort(exps)[::-1]


# ---------------------------------------------------------------------------
# Monotone case
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonotoneReport:
    gx_nonneg: bool
    gx_strict: bool
    gx_min: float
    gx_min_at: tuple
    offdiag_nonneg: bool
    offdiag_strict: bool
    offdiag_min: float
    hypotheses_pass: bool
    psi_min: float | None  # asserted only when the hypotheses pass
    psi_sign_ok: bool | None
    sandwich_ok: bool | None
    sandwich: tuple = ()  # (lam*sup_probe I, psi(0), lam*lim I0) componentwise


def monotone_analysis(
    p: ControlProblem,
    u0: ReferenceControl,
    x_arc: ode.Trajectory,
    psi: ode.AdjointArc,
    lam: float,
    acc0: AccumulatedIntegral,
    probe_accs=(),
    *,
    ts=None,
    state_offsets=None,
    slack: float = 1e-8,
) -> MonotoneReport:
    """Monotone-case gate: sign hypotheses first, conclusions only if they pass.

    (i) dg/dx >= 0 componentwise on the probe set (strict variant > 0);
    (ii) off-diagonal of df/dx >= 0 (a scalar shift absorbs the diagonal);
    (iii) if both hold, assert psi >= 0 on the grid and the probe-scale
    sandwich lam*sup_probe I >= psi(0) >= lam*I0(end) >= 0 componentwise.
    """
    if ts is None:
        ts = np.linspace(x_arc.t0, x_arc.t1, 60)
    ts = np.asarray(ts, dtype=float)
    if state_offsets is None:
        spread = max(1.0, float(np.max(np.abs(x_arc.values))))
        state_offsets = np.concatenate([[np.zeros(p.state_dim)], 0.5 * spread * np.eye(p.state_dim), -0.5 * spread * np.eye(p.state_dim)])
    state_offsets = np.atleast_2d(np.asarray(state_offsets, dtype=float))

    gx_min, gx_at = np.inf, (None, None)
    off_min = np.inf
    m = p.state_dim
    for t in ts:
        xt = x_arc.eval(float(t))
        for off in state_offsets:
            x = xt + off
            ut = u0.eval(float(t), x)
            gx = p.g_gradient_x(float(t), x, ut)
            mn = float(np.min(gx))
            if mn < gx_min:
                gx_min, gx_at = mn, (float(t), tuple(x))
            if m > 1:
                J = p.f_jacobian_x(float(t), x, ut)
                od = J[~np.eye(m, dtype=bool)]
                off_min = min(off_min, float(np.min(od)))
    if m == 1:
        off_min = np.inf  # no off-diagonal entries; the shift absorbs the diagonal

    gx_nonneg = gx_min >= -slack
    gx_strict = gx_min > 0.0
    off_nonneg = (off_min is np.inf) or off_min >= -slack
    off_strict = (off_min is np.inf) or off_min > 0.0
    hypotheses = bool(gx_nonneg and off_nonneg)

    psi_min = psi_ok = sandwich_ok = None
    sandwich = ()
    if hypotheses:
        psi_min = float(np.min(psi.values))
        psi_ok = psi_min >= -slack
        all_vals = [acc0.values] + [a.values for a in probe_accs]
        probe_sup = np.max(np.concatenate(all_vals, axis=0), axis=0)
        lim_i0 = acc0.values[-1]
        psi0 = psi.values[0]
        upper = lam * probe_sup - psi0
        middle = psi0 - lam * lim_i0
        lower = lam * lim_i0
        sandwich_ok = bool(np.all(upper >= -slack) and np.all(middle >= -slack) and np.all(lower >= -slack))
        sandwich = (lam * probe_sup, psi0.copy(), lam * lim_i0)
    return MonotoneReport(
        gx_nonneg=bool(gx_nonneg),
        gx_strict=bool(gx_strict),
        gx_min=float(gx_min),
        gx_min_at=gx_at,
        offdiag_nonneg=bool(off_nonneg),
        offdiag_strict=bool(off_strict),
        offdiag_min=float(off_min) if off_min is not np.inf else float("inf"),
        hypotheses_pass=hypotheses,
        psi_min=psi_min,
        psi_sign_ok=psi_ok,
        sandwich_ok=sandwich_ok,
        sandwich=sandwich,
    )


# ---------------------------------------------------------------------------
# Battery
# ---------------------------------------------------------------------------


@dataclass
class TransversalityReport:
    entries: dict = field(default_factory=dict)  # condition id -> LimitVerdict
    dominance: DominanceFit | None = None
    lyapunov: np.ndarray | None = None
    monotone: MonotoneReport | None = None
    adjoint_residual: float | None = None
    product_deviation: float | None = None
    notes: list = field(default_factory=list)

    def summary_line(self) -> str:
        parts = [f"{cid}={v.verdict}" for cid, v in self.entries.items()]
        if self.dominance is not None:
            parts.append(f"exp={'holds' if self.dominance.holds else 'fails'}")
        return ";".join(parts)

    def to_text(self) -> str:
        lines = ["# transversality report", f"summary: {self.summary_line()}", ""]
        for cid, v in self.entries.items():
            lines.append(f"## condition {cid}")
            lines.append(f"verdict: {v.verdict}")
            lines.append(f"tol: {v.tol:.17g}")
            lines.append("statistics: " + ",".join(f"{s:.17g}" for s in v.statistics))
            if v.subsequence:
                lines.append("subsequence: " + ",".join(f"{s:.17g}" for s in v.subsequence))
            lines.append("")
        if self.dominance is not None:
            d = self.dominance
            lines.append("## condition exp")
            lines.append(f"verdict: {'holds' if d.holds else 'fails'}")
            lines.append(f"alpha: {d.alpha:.17g}")
            lines.append(f"beta: {d.beta:.17g}")
            lines.append(f"max_log_residual: {d.max_log_residual:.17g}")
            lines.append(f"n_samples: {d.n_samples}")
            lines.append("")
        if self.lyapunov is not None:
            lines.append("## lyapunov exponents (adjoint flow)")
            lines.append("values: " + ",".join(f"{v:.17g}" for v in self.lyapunov))
            lines.append("")
        if self.monotone is not None:
            mr = self.monotone
            lines.append("## monotone analysis")
            lines.append(f"hypotheses_pass: {mr.hypotheses_pass}")
            lines.append(f"gx_min: {mr.gx_min:.17g}")
            if mr.psi_min is not None:
                lines.append(f"psi_min: {mr.psi_min:.17g}")
                lines.append(f"sandwich_ok: {mr.sandwich_ok}")
            lines.append("")
        if self.adjoint_residual is not None:
            lines.append(f"adjoint_ode_residual: {self.adjoint_residual:.17g}")
        if self.product_deviation is not None:
            lines.append(f"product_identity_deviation: {self.product_deviation:.17g}")
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines) + "\n"


def parse_summary_line(line: str) -> dict:
    line = line.strip()
    if line.startswith("summary:"):
        line = line[len("summary:"):].strip()
    out = {}
    for part in line.split(";"):
        if part:
            cid, verdict = part.split("=")
            out[cid] = verdict
    return out


def report_from_text(text: str) -> TransversalityReport:
    """Rebuild verdicts and evidence arrays from :meth:`to_text` output."""
    report = TransversalityReport()
    current = None
    fields: dict[str, str] = {}

    def flush():
        nonlocal current, fields
        if current is None:
            return
        if current.startswith("condition ") and "verdict" in fields:
            cid = current.split(" ", 1)[1]
            if cid == "exp":
                report.dominance = DominanceFit(
                    alpha=float(fields.get("alpha", "nan")),
                    beta=float(fields.get("beta", "nan")),
                    holds=fields["verdict"] == "holds",
                    max_log_residual=float(fields.get("max_log_residual", "0")),
                    n_samples=int(fields.get("n_samples", "0")),
                )
            else:
                stats = np.array([float(s) for s in fields.get("statistics", "").split(",") if s])
                seq = tuple(float(s) for s in fields.get("subsequence", "").split(",") if s)
                report.entries[cid] = LimitVerdict(
                    cid, fields["verdict"], stats, subsequence=seq, tol=float(fields.get("tol", "0"))
                )
        elif current == "lyapunov exponents (adjoint flow)":
            report.lyapunov = np.array([float(s) for s in fields.get("values", "").split(",") if s])
        current, fields = None, {}

    for raw in text.splitlines():
        line = raw.strip()
        if line.startswith("## "):
            flush()
            current = line[3:]
        elif ":" in line and current is not None:
            key, val = line.split(":", 1)
            fields[key.strip()] = val.strip()
        elif line.startswith("note:"):
            report.notes.append(line[len("note:"):].strip())
        elif line.startswith("adjoint_ode_residual:"):
            report.adjoint_residual = float(line.split(":", 1)[1])
        elif line.startswith("product_identity_deviation:"):
            report.product_deviation = float(line.split(":", 1)[1])
    flush()
    return report


def run_battery(
    p: ControlProblem,
    u0: ReferenceControl,
    *,
    lam: float,
    psi: ode.AdjointArc,
    fundamental: ode.MatrixArc,
    acc: AccumulatedIntegral,
    i_limit,
    taus,
    tol: float = 1e-6,
    rng: np.random.Generator | None = None,
    n_dominance: int = 8,
    atol: float = ode.DEFAULT_ATOL,
    rtol: float = ode.DEFAULT_RTOL,
) -> TransversalityReport:
    """Run every transversality check on one candidate and cross-reference.

    The dominance condition quantifies over all admissible controls; here it
    is fitted over the reference trajectory plus ``n_dominance`` random bang
    perturbations, and the report records that sample size.
    """
    from . import pmp  # local import; pmp pulls no battery symbols
    from .cauchy import verify_product_identity

    report = TransversalityReport()
    taus = np.asarray(taus, dtype=float)
    report.entries["trans"] = check_plain_limit(psi, tol)
    taus_psi = taus[taus <= psi.t1 + 1e-9]
    if len(taus_psi) < len(taus):
        report.notes.append(
            f"subsequence clipped to the adjoint arc span [0, {psi.t1:g}] "
            "(adjoint values beyond it are noise-amplified)"
        )
    if len(taus_psi):
        report.entries["partlim"] = check_subsequence_limit(psi, taus_psi, tol)
    else:
        report.notes.append("partlim skipped: no horizon inside the adjoint arc span")

    # weighted conditions from the product identity psi A = lam (I* - I), which
    # stays well-conditioned over the whole accumulation span
    i_limit_arr = np.asarray(i_limit, dtype=float)
    prod_norms = lam * np.linalg.norm(i_limit_arr[None, :] - acc.values, axis=1)
    wins, sups = window_sups(acc.grid, prod_norms)
    report.entries["lim"] = _classify_window_sups("lim", wins, sups, tol)
    seq_norms = lam * np.linalg.norm(i_limit_arr[None, :] - np.atleast_2d(acc.eval(taus)), axis=1)
    k = max(1, int(np.ceil(len(taus) / 3)))
    tail_min = float(np.min(seq_norms[-k:]))
    verdict = "holds" if tail_min <= tol else ("fails" if tail_min >= 10.0 * tol else "inconclusive")
    report.entries["partlim_1"] = LimitVerdict("partlim_1", verdict, seq_norms, subsequence=tuple(taus), tol=tol)

    if rng is None:
        rng = np.random.default_rng(0)
    span = (float(psi.t0), float(psi.t1))
    pool = pmp.make_perturbation_pool(p, u0, span, rng, n_dominance)
    samples, arcs = [], []
    for u in pool:
        try:
            x_arc = ode.integrate_state(p, u, p.x0, span, atol=atol, rtol=rtol, dt_out=0.1)
            A_arc = ode.fundamental_matrix(p, u, x_arc, span, atol=atol, rtol=rtol, dt_out=0.1)
        except ode.OdeError as err:
            report.notes.append(f"dominance sample skipped: {err}")
            continue
        samples.append((x_arc, u))
        arcs.append(A_arc)
    report.dominance = fit_exponential_dominance(p, samples, arcs)

    try:
        report.lyapunov = lyapunov_exponents(fundamental, t_min=min(40.0, fundamental.t1 - fundamental.t0))
    except (ShortArcError, ode.SingularMatrixError) as err:
        report.notes.append(f"lyapunov exponents unavailable: {err}")

    report.monotone = monotone_analysis(p, u0, acc.x_arc, psi, lam, acc)
    report.adjoint_residual = adjoint_ode_residual(p, u0, acc.x_arc, psi, lam)
    report.product_deviation = verify_product_identity(lam, psi, acc, fundamental, i_limit)

    if report.dominance.holds and not report.entries["lim"].holds:
        report.notes.append(
            "internal inconsistency: exponential dominance holds but the weighted limit does not"
        )
    if report.entries["lim"].holds and report.entries["trans"].verdict == "fails":
        report.notes.append(
            "plain transversality fails while the matrix-weighted limit holds: "
            "the weighted condition is the applicable necessary condition here"
        )
    return report
