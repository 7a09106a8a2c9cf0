"""Accumulated sensitivity integral, improper-integral classification, and the
explicit Cauchy-type representation of the adjoint variable.

For a reference control u0 and a start perturbation xi, co-integrate in one
augmented system (sharing a single step controller)

    x'  = f(t, x, u0),            x(0)  = xi,
    A'  = (df/dx) A,              A(0)  = identity,
    I'  = (dg/dx) A,              I(0)  = 0,

so I(T) accumulates the payoff-gradient/fundamental-matrix product.  When the
improper integral lim_{T->inf} I(T) converges to a finite value I*, the
normal multiplier and the adjoint variable admit the closed form

    lam0   = 1 / (1 + |I*|),
    psi(T) = lam0 (I* - I(T)) A(T)^-1        (normalized pair), and
    psi(T) = (I* - I(T)) A(T)^-1             (unit-multiplier form),

whose consistency is exactly the product identity psi(T) A(T) = lam0 (I* -
I(T)), asserted by :func:`verify_product_identity`.

Convergence of the improper integral is decided numerically from oscillation
statistics over geometric (doubling) tail windows; an oscillating verdict
surfaces the window means as cluster points and never silently picks one.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ode
from .problem import ControlProblem, ReferenceControl

__all__ = [
    "AccumulatedIntegral",
    "ConvergenceVerdict",
    "CauchyAdjoint",
    "ContinuityProbe",
    "AbnormalityReport",
    "InsufficientSamplesError",
    "MissingVerdictError",
    "accumulate",
    "classify_convergence",
    "continuity_probe",
    "cauchy_adjoint",
    "abnormality_indicator",
    "verify_product_identity",
    "adjoint_ode_residual",
    "thread_cap",
]


class InsufficientSamplesError(Exception):
    pass


class MissingVerdictError(Exception):
    pass


def thread_cap(n_tasks: int) -> int:
    """Worker count for probe parallelism, capped by HORIZON_PMP_THREADS."""
    cap = os.environ.get("HORIZON_PMP_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n_tasks, limit))


# ---------------------------------------------------------------------------
# Accumulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AccumulatedIntegral:
    """Samples of I(T) on a uniform grid merged with doubling checkpoints."""

    xi: np.ndarray
    grid: np.ndarray  # (N,)
    values: np.ndarray  # (N, m), I at grid nodes; I(grid[0]) = 0 exactly
    derivs: np.ndarray  # (N, m), the integrand dg/dx A at the nodes
    checkpoints: np.ndarray  # subset of grid: t0 plus {1, 2, 4, ...} plus T_max
    x_arc: ode.Trajectory
    matrix_arc: ode.MatrixArc
    _arc: ode.Arc = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_arc", ode.Arc(self.grid, self.values, self.derivs))

    @property
    def state_dim(self) -> int:
        return self.values.shape[1]

    def eval(self, t):
        """Hermite interpolation of I between stored samples."""
        return self._arc.eval(t)

    def window_oscillations(self) -> np.ndarray:
        """Componentwise range of I (inf-norm) within each doubling window."""
        osc = []
        for lo, hi in zip(self.checkpoints[:-1], self.checkpoints[1:]):
            sel = (self.grid >= lo - 1e-12) & (self.grid <= hi + 1e-12)
            w = self.values[sel]
            osc.append(float(np.max(w.max(axis=0) - w.min(axis=0))))
        return np.asarray(osc)

    def window_means(self) -> np.ndarray:
        means = []
        for lo, hi in zip(self.checkpoints[:-1], self.checkpoints[1:]):
            sel = (self.grid >= lo - 1e-12) & (self.grid <= hi + 1e-12)
            means.append(self.values[sel].mean(axis=0))
        return np.asarray(means)


def _doubling_points(t0: float, t_max: float, base: float = 1.0) -> np.ndarray:
    pts = [t0]
    c = base
    while c < t_max - 1e-9:
        if c > t0 + 1e-9:
            pts.append(c)
        c *= 2.0
    pts.append(t_max)
    return np.asarray(pts)


def accumulate(
    p: ControlProblem,
    u0: ReferenceControl,
    xi,
    t_max: float,
    *,
    t0: float = 0.0,
    x_init=None,
    a_init=None,
    i_init=None,
    atol: float = ode.DEFAULT_ATOL,
    rtol: float = ode.DEFAULT_RTOL,
    dt_out: float = 0.05,
) -> AccumulatedIntegral:
    """Co-integrate (x, A, I) from a perturbed start x(t0) = xi up to t_max.

    ``x_init``/``a_init``/``i_init`` override the start data so tails can be
    restarted mid-arc (the accumulated integral is additive across restarts).
    Blow-ups of x or A raise :class:`ode.BlowUpError` with the escape time.
    """
    if t_max <= t0:
        raise ValueError("t_max must exceed the start time")
    m = p.state_dim
    xi = np.asarray(xi, dtype=float)
    x_start = xi if x_init is None else np.asarray(x_init, dtype=float)
    a_start = np.eye(m) if a_init is None else np.asarray(a_init, dtype=float)
    i_start = np.zeros(m) if i_init is None else np.asarray(i_init, dtype=float)

    def rhs(t, y):
        x = y[:m]
        A = y[m : m + m * m].reshape(m, m)
        uv = u0.eval(t, x)
        J, gx = p.adjoint_coeffs(t, x, uv)
        return np.concatenate([p.f(t, x, uv), (J @ A).ravel(), gx @ A, [np.trace(J)]])

    checkpoints = _doubling_points(t0, float(t_max))
    n = max(1, int(np.ceil((t_max - t0) / dt_out)))
    grid = np.unique(np.concatenate([np.linspace(t0, t_max, n + 1), checkpoints]))
    y0 = np.concatenate([x_start, a_start.ravel(), i_start, [0.0]])
    vals = ode._integrate(rhs, y0, grid, u0.breakpoints(t0, t_max), atol=atol, rtol=rtol, blowup=ode.DEFAULT_BLOWUP)
    derivs = np.stack([rhs(t, v) for t, v in zip(grid, vals)])

    xs = vals[:, :m]
    x_arc = ode.Trajectory(grid, xs, derivs[:, :m])
    matrix_arc = ode.MatrixArc(
        grid=grid,
        values=vals[:, m : m + m * m].reshape(-1, m, m),
        derivs=derivs[:, m : m + m * m].reshape(-1, m, m),
        logdet=vals[:, -1],
    )
    if a_init is None:
        matrix_arc.require_identity_start()
    return AccumulatedIntegral(
        xi=xi,
        grid=grid,
        values=vals[:, m + m * m : 2 * m + m * m],
        derivs=derivs[:, m + m * m : 2 * m + m * m],
        checkpoints=checkpoints,
        x_arc=x_arc,
        matrix_arc=matrix_arc,
    )


# ---------------------------------------------------------------------------
# Convergence classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceVerdict:
    kind: str  # "converged" | "diverged" | "oscillating"
    limit: np.ndarray | None  # I* when converged
    oscillations: np.ndarray  # per doubling window
    growth_exponent: float | None
    cluster_points: tuple = ()
    tol: float = 0.0


def classify_convergence(acc: AccumulatedIntegral, tol: float = 1e-6) -> ConvergenceVerdict:
    """Trichotomy on the improper integral from finite evidence.

    converged:  oscillation within each of the last 3 doubling windows <= tol
                and those window statistics non-increasing; the final sample
                stands in for the limit.
    diverged:   tail grows with a clearly positive power-law exponent.
    oscillating otherwise; window means are surfaced as cluster points so a
                subsequence analysis can be run explicitly on a chosen one.
    """
    if len(acc.checkpoints) < 5:  # 4 doubling checkpoints beyond the start
        raise InsufficientSamplesError(
            f"need >= 4 doubling checkpoints, have {len(acc.checkpoints) - 1}"
        )
    osc = acc.window_oscillations()
    last3 = osc[-3:]
    # oscillation more than two orders below the declared tolerance sits at
    # the integrator's noise floor; its internal ordering carries no signal,
    # so snap it before asking for non-increasing window statistics
    floor = 0.01 * tol
    snapped = np.maximum(last3, floor)
    nonincreasing = bool(np.all(snapped[1:] <= snapped[:-1] * 1.05))
    if np.all(last3 <= tol) and nonincreasing:
        return ConvergenceVerdict(
            kind="converged",
            limit=acc.values[-1].copy(),
            oscillations=osc,
            growth_exponent=None,
            tol=tol,
        )

    # power-law growth fit over the tail half of the checkpoints
    cps = acc.checkpoints[1:]
    norms = np.array([float(np.linalg.norm(acc.eval(t))) for t in cps])
    tail = slice(len(cps) // 2, None)
    ts = cps[tail]
    ns = norms[tail]
    mask = ns > 0
    slope = None
    if np.sum(mask) >= 2 and np.ptp(np.log(ts[mask])) > 0:
        slope = float(np.polyfit(np.log(ts[mask]), np.log(ns[mask]), 1)[0])
    if slope is not None and slope >= 0.25 and ns[-1] > 10.0 * tol:
        return ConvergenceVerdict(
            kind="diverged",
            limit=None,
            oscillations=osc,
            growth_exponent=slope,
            tol=tol,
        )
    means = acc.window_means()
    clusters = tuple(means[-min(6, len(means)):])
    return ConvergenceVerdict(
        kind="oscillating",
        limit=None,
        oscillations=osc,
        growth_exponent=slope,
        cluster_points=clusters,
        tol=tol,
    )


# ---------------------------------------------------------------------------
# Continuity probe over perturbed starts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContinuityProbe:
    radii: np.ndarray
    directions: np.ndarray  # (n_dir, m) unit vectors
    sup_diff: np.ndarray  # (n_radii, n_dir); nan where the probe blew up
    sup_by_radius: np.ndarray  # max over directions, nan-aware
    decreasing: bool
    modulus_exponent: float | None  # slope of log sup vs log r
    failures: tuple = ()


def continuity_probe(
    p: ControlProblem,
    u0: ReferenceControl,
    radii,
    directions,
    t_max: float,
    *,
    atol: float = ode.DEFAULT_ATOL,
    rtol: float = ode.DEFAULT_RTOL,
    dt_out: float = 0.05,
    base: AccumulatedIntegral | None = None,
) -> ContinuityProbe:
    """sup_T |I_xi(T) - I_0(T)| for xi = r d over radii x directions.

    Empirical surrogate for continuity of the accumulated integral at xi = 0:
    reports whether the sups decrease with r and the fitted modulus exponent.
    """
    radii = np.asarray(radii, dtype=float)
    if len(radii) == 0 or np.any(radii <= 0) or np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be positive and strictly decreasing")
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    norms = np.linalg.norm(directions, axis=1)
    directions = directions / norms[:, None]

    if base is None:
        base = accumulate(p, u0, np.zeros(p.state_dim), t_max, atol=atol, rtol=rtol, dt_out=dt_out)

    tasks = [(i, j, r * d) for i, r in enumerate(radii) for j, d in enumerate(directions)]

    def run(task):
        i, j, xi = task
        try:
            acc = accumulate(p, u0, p.x0 + xi, t_max, atol=atol, rtol=rtol, dt_out=dt_out)
        except ode.OdeError as err:
            return i, j, np.nan, f"xi={xi}: {err}"
        vals = acc.eval(base.grid)
        return i, j, float(np.max(np.linalg.norm(vals - base.values, axis=1))), None

    workers = thread_cap(len(tasks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    sup = np.full((len(radii), len(directions)), np.nan)
    failures = []
    for i, j, v, err in results:
        sup[i, j] = v
        if err:
            failures.append(err)
    by_radius = np.array([np.nanmax(row) if np.any(np.isfinite(row)) else np.nan for row in sup])
    finite = np.isfinite(by_radius)
    decreasing = bool(np.all(np.diff(by_radius[finite]) <= 1e-12)) if finite.sum() >= 2 else False
    slope = None
    pos = finite & (by_radius > 0)
    if pos.sum() >= 2:
        slope = float(np.polyfit(np.log(radii[pos]), np.log(by_radius[pos]), 1)[0])
    return ContinuityProbe(
        radii=radii,
        directions=directions,
        sup_diff=sup,
        sup_by_radius=by_radius,
        decreasing=decreasing,
        modulus_exponent=slope,
        failures=tuple(failures),
    )


# ---------------------------------------------------------------------------
# Cauchy-type adjoint
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CauchyAdjoint:
    lam: float  # 1 / (1 + |I*|)
    psi: ode.AdjointArc  # normalized pair: |psi(0)| + lam = 1 when I(0)=0
    psi_unit: ode.AdjointArc  # unit-multiplier form
    i_limit: np.ndarray


def noise_estimate(acc: AccumulatedIntegral) -> float:
    """Scale of the quadrature noise in I: last-window oscillation floor-ed at
    a few units of rounding on the integral's magnitude."""
    osc = acc.window_oscillations()
    scale = max(1.0, float(np.max(np.abs(acc.values))))
    return max(float(osc[-1]), 64.0 * np.finfo(float).eps * scale)


def conditioned_span(acc: AccumulatedIntegral, tol: float = 1e-7) -> float:
    """Largest grid time T at which evaluating (I* - I(T)) A(T)^-1 keeps the
    amplified quadrature noise below ``tol``.

    The formula multiplies an O(noise) cancellation error by |A(T)^-1| =
    1/sigma_min(A(T)); for contracting dynamics that factor grows
    exponentially, so adjoint values are only meaningful on a front span.
    """
    noise = noise_estimate(acc)
    sigma_floor = noise / tol
    grid = acc.grid
    lo = min(4.5, float(grid[-1]))  # keep enough span for window statistics
    for idx in range(len(grid) - 1, -1, -1):
        sigma_min = float(np.linalg.svd(acc.matrix_arc.values[idx], compute_uv=False)[-1])
        if sigma_min >= sigma_floor:
            return max(float(grid[idx]), lo)
    return lo


def cauchy_adjoint(
    p: ControlProblem,
    u0: ReferenceControl,
    verdict,
    acc: AccumulatedIntegral,
    fundamental: ode.MatrixArc,
    grid,
) -> CauchyAdjoint:
    """Evaluate psi(T) = lam (I* - I(T)) A(T)^-1 on the grid.

    ``verdict`` is either a converged :class:`ConvergenceVerdict` or an
    explicit limit vector (a chosen partial limit of the oscillating case).
    Node derivatives of the returned arcs follow the adjoint equation, so the
    arc is Hermite-consistent with the flow it represents.
    """
    if isinstance(verdict, ConvergenceVerdict):
        if verdict.kind != "converged" or verdict.limit is None:
            raise MissingVerdictError(
                f"verdict is '{verdict.kind}'; pass an explicit partial limit to proceed"
            )
        i_limit = np.asarray(verdict.limit, dtype=float)
    elif verdict is None:
        raise MissingVerdictError("no verdict or partial limit supplied")
    else:
        i_limit = np.asarray(verdict, dtype=float)

    lam0 = 1.0 / (1.0 + float(np.linalg.norm(i_limit)))
    grid = np.asarray(grid, dtype=float)
    m = p.state_dim
    vals_unit = np.empty((len(grid), m))
    for idx, t in enumerate(grid):
        inv = ode.inverse_at(fundamental, float(t))
        vals_unit[idx] = (i_limit - acc.eval(float(t))) @ inv

    def _derivs(vals, lam):
        out = np.empty_like(vals)
        for idx, t in enumerate(grid):
            xt = acc.x_arc.eval(float(t))
            ut = u0.eval(float(t), xt)
            J, gx = p.adjoint_coeffs(float(t), xt, ut)
            out[idx] = -(vals[idx] @ J) - lam * gx
        return out

    psi_unit = ode.AdjointArc(grid, vals_unit, _derivs(vals_unit, 1.0))
    vals_norm = lam0 * vals_unit
    psi_norm = ode.AdjointArc(grid, vals_norm, _derivs(vals_norm, lam0))
    return CauchyAdjoint(lam=lam0, psi=psi_norm, psi_unit=psi_unit, i_limit=i_limit)


def verify_product_identity(
    lam: float,
    psi: ode.AdjointArc,
    acc: AccumulatedIntegral,
    fundamental: ode.MatrixArc,
    i_limit,
    grid=None,
) -> float:
    """sup over the grid of |psi(T) A(T) - lam (I* - I(T))| (master check)."""
    i_limit = np.asarray(i_limit, dtype=float)
    if grid is None:
        grid = psi.grid
    grid = np.asarray(grid, dtype=float)
    lo = max(psi.t0, fundamental.t0, acc.grid[0])
    hi = min(psi.t1, fundamental.t1, acc.grid[-1])
    if lo - 1e-9 > grid[0] or grid[-1] > hi + 1e-9:
        raise ValueError("arcs do not share the requested span")
    dev = 0.0
    for t in grid:
        lhs = psi.eval(float(t)) @ fundamental.eval(float(t))
        rhs = lam * (i_limit - acc.eval(float(t)))
        dev = max(dev, float(np.linalg.norm(lhs - rhs)))
    return dev


def adjoint_ode_residual(
    p: ControlProblem,
    u0: ReferenceControl,
    x_arc: ode.Trajectory,
    psi: ode.AdjointArc,
    lam: float,
) -> float:
    """Max norm of psi' + psi df/dx + lam dg/dx at the grid midpoints."""
    mids = 0.5 * (psi.grid[:-1] + psi.grid[1:])
    worst = 0.0
    for t in mids:
        xt = x_arc.eval(float(t))
        ut = u0.eval(float(t), xt)
        J, gx = p.adjoint_coeffs(float(t), xt, ut)
        resid = psi.deriv(float(t)) + psi.eval(float(t)) @ J + lam * gx
        worst = max(worst, float(np.linalg.norm(resid)))
    return worst


# ---------------------------------------------------------------------------
# Abnormality indicator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AbnormalityReport:
    excluded: bool
    growth_exponent: float | None
    sup_norm: float
    statistic: np.ndarray  # sup over probed xi of |I_xi(T)| at checkpoints
    checkpoints: np.ndarray
    message: str


def abnormality_indicator(
    p: ControlProblem,
    u0: ReferenceControl,
    radii,
    t_max: float,
    *,
    directions=None,
    atol: float = ode.DEFAULT_ATOL,
    rtol: float = ode.DEFAULT_RTOL,
    exponent_threshold: float = 0.05,
) -> AbnormalityReport:
    """Contrapositive abnormality probe.

    An abnormal pair forces the accumulated integral to be unbounded over
    (T, xi) -> (inf, 0); if the probed sup stays bounded (tail growth exponent
    <= threshold), abnormality is excluded at probe scale.
    """
    radii = np.asarray(radii, dtype=float)
    if len(radii) == 0:
        raise ValueError("radii must be a nonempty decreasing list")
    if np.any(radii <= 0) or np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be positive and strictly decreasing")
    if directions is None:
        eye = np.eye(p.state_dim)
        directions = np.concatenate([eye, -eye], axis=0)
    directions = np.atleast_2d(np.asarray(directions, dtype=float))

    accs = [accumulate(p, u0, p.x0, t_max, atol=atol, rtol=rtol)]
    for r in radii:
        for d in directions:
            accs.append(accumulate(p, u0, p.x0 + r * d, t_max, atol=atol, rtol=rtol))

    cps = accs[0].checkpoints[1:]
    stat = np.zeros(len(cps))
    for acc in accs:
        norms = np.array([float(np.linalg.norm(acc.eval(float(t)))) for t in cps])
        stat = np.maximum(stat, norms)

    tail = slice(len(cps) // 2, None)
    ts, ns = cps[tail], stat[tail]
    mask = ns > 0
    slope = None
    if mask.sum() >= 2 and np.ptp(np.log(ts[mask])) > 0:
        slope = float(np.polyfit(np.log(ts[mask]), np.log(ns[mask]), 1)[0])
    excluded = slope is None or slope <= exponent_threshold
    msg = (
        "abnormality excluded at probe scale"
        if excluded
        else "abnormality not excluded: accumulated integral grows over the probe set"
    )
    return AbnormalityReport(
        excluded=excluded,
        growth_exponent=slope,
        sup_norm=float(stat.max()),
        statistic=stat,
        checkpoints=cps,
        message=msg,
    )
