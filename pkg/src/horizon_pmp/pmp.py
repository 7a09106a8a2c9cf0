"""Hamilton-Pontryagin function, maximum condition, finite-horizon truncation.

The Hamilton-Pontryagin function is H(x, t, u, lam, psi) = psi.f + lam.g.  A
candidate extremal is a quadruple (x, u, lam, psi) solving the state equation,
the adjoint equation, the pointwise maximum condition, and the normalisation
|psi(0)| + lam = 1.

Candidates are produced by a penalized finite-horizon scheme: on [0, tau] the
free right endpoint forces psi(tau) = 0, a deviation penalty gamma * w(t, u)
with gamma = sqrt(omega(tau)) keeps the solver near the reference control when
the payoff alone under-determines it, and a forward-backward sweep iterates

    (i)   integrate the state forward under the current control,
    (ii)  integrate the adjoint backward from psi(tau) = 0 with lam = 1,
    (iii) replace u(t) by a relaxed step toward argmax_u [H - gamma w](t),

until the control stops moving in L1.  Running the scheme over an increasing
horizon sequence (warm-started) accumulates on infinite-horizon extremals;
Cauchy differences of (lam_n, psi_n(0)) are recorded as evidence, with no
claim that the whole sequence converges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from . import ode
from .problem import ControlProblem, ReferenceControl, piecewise_control

__all__ = [
    "Extremal",
    "TruncationRecord",
    "TruncationRun",
    "OmegaEstimate",
    "DegenerateMultiplierError",
    "hamiltonian",
    "maximize_hamiltonian",
    "max_residual",
    "estimate_omega",
    "deviation_weight",
    "make_perturbation_pool",
    "solve_finite_horizon",
    "run_truncation",
    "normalize",
]

CONTROL_TOL = 1e-8  # golden-section refinement width
COARSE_POINTS = 33  # coarse grid points per control coordinate

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
_INVPHI2 = (3.0 - math.sqrt(5.0)) / 2.0


class DegenerateMultiplierError(Exception):
    pass


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------


def _hamiltonian_batch(p: ControlProblem, ts, xs, us, lam, psis) -> np.ndarray:
    """H at a batch of nodes: ts (N,), xs (N,m), us (N,k), psis (N,m) -> (N,)."""
    from .problem import kernels

    kn = kernels(p)
    shape = np.shape(ts)
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    args = (ts, *(xs[..., i] for i in range(p.state_dim)), *(us[..., i] for i in range(p.control_dim)))
    with np.errstate(all="ignore"):
        raw = kn.fg(*args)
    out = [np.broadcast_to(np.asarray(v, dtype=float), shape) for v in raw]
    if not all(np.all(np.isfinite(v)) for v in out):
        env = p.env(ts, xs, us)
        for e in p.dynamics + (p.payoff,):
            ex.evaluate(e, env)
        raise ex.ExprDomainError("non-finite result", p.payoff)
    fvals = np.stack(out[:-1], axis=-1)
    return np.einsum("...m,...m->...", psis, fvals) + lam * out[-1]


def hamiltonian(p: ControlProblem, x, t: float, u, lam: float, psi) -> float:
    """psi . f(t, x, u) + lam * g(t, x, u)."""
    return float(np.dot(np.asarray(psi, dtype=float), p.f(t, x, u)) + lam * p.g(t, x, u))


# ---------------------------------------------------------------------------
# Pointwise maximisation of H (optionally penalized)
# ---------------------------------------------------------------------------


def _argmax_batch(p, ts, xs, psis, lam, penalty=None):
    """argmax_u of H(t_i, x_i, u, lam, psi_i) - penalty(t_i, u) per node.

    Box sets: coarse scan on a per-coordinate grid, then a fixed-length
    coordinatewise golden-section refinement; candidates are enumerated in
    lexicographically ascending order and only strict improvements are
    accepted, so ties resolve to the lexicographically smallest control.
    Finite sets: exhaustive scan in lexicographic order.
    """
    ts = np.asarray(ts, dtype=float)
    n = len(ts)
    k = p.control_dim

    def objective(us):
        vals = _hamiltonian_batch(p, ts, xs, us, lam, psis)
        if penalty is not None:
            vals = vals - penalty(ts, us)
        return vals

    cs = p.control_set
    if cs.kind == "finite":
        pts = cs.points[np.lexsort(cs.points.T[::-1])]
        best_u = np.tile(pts[0], (n, 1))
        best_v = objective(best_u)
        for cand in pts[1:]:
            us = np.tile(cand, (n, 1))
            v = objective(us)
            better = v > best_v
            best_v = np.where(better, v, best_v)
            best_u[better] = cand
        return best_u, best_v

    lo, hi = cs.bounds_at(ts)  # (n, k) each
    span = hi - lo
    fracs = np.linspace(0.0, 1.0, COARSE_POINTS)

    best_u = lo.copy()
    best_v = np.full(n, -np.inf)
    for combo in np.ndindex(*([COARSE_POINTS] * k)):
        us = lo + span * np.array([fracs[c] for c in combo])
        v = objective(us)
        better = v > best_v
        best_v = np.where(better, v, best_v)
        best_u[better] = us[better]

    step = span / (COARSE_POINTS - 1)
    for d in range(k):
        a = np.maximum(lo[:, d], best_u[:, d] - step[:, d])
        b = np.minimum(hi[:, d], best_u[:, d] + step[:, d])
        width0 = float(np.max(b - a))
        if width0 <= CONTROL_TOL:
            continue
        n_iter = int(np.ceil(np.log(CONTROL_TOL / width0) / np.log(_INVPHI))) + 1

        def coord_obj(vals_d):
            us = best_u.copy()
            us[:, d] = vals_d
            return objective(us)

        x1 = a + _INVPHI2 * (b - a)
        x2 = a + _INVPHI * (b - a)
        f1 = coord_obj(x1)
        f2 = coord_obj(x2)
        for _ in range(n_iter):
            go_right = f1 < f2
            a = np.where(go_right, x1, a)
            b = np.where(go_right, b, x2)
            x1n = np.where(go_right, x2, a + _INVPHI2 * (b - a))
            x2n = np.where(go_right, a + _INVPHI * (b - a), x1)
            f1n = np.where(go_right, f2, 0.0)
            f2n = np.where(go_right, 0.0, f1)
            fresh = np.where(go_right, x2n, x1n)
            f_fresh = coord_obj(fresh)
            f1 = np.where(go_right, f1n, f_fresh)
            f2 = np.where(go_right, f_fresh, f2n)
            x1, x2 = x1n, x2n
        cand = 0.5 * (a + b)
        v = coord_obj(cand)
        better = v > best_v
        best_v = np.where(better, v, best_v)
        best_u[better, d] = cand[better]
    return best_u, best_v


def maximize_hamiltonian(p: ControlProblem, x, t: float, lam: float, psi):
    """Maximiser of H over U(t) and its value; ties resolve lexicographically."""
    xs = np.asarray(x, dtype=float)[None, :]
    psis = np.asarray(psi, dtype=float)[None, :]
    us, vs = _argmax_batch(p, np.array([t]), xs, psis, lam)
    return us[0], float(vs[0])


# ---------------------------------------------------------------------------
# Extremal candidates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Extremal:
    """Candidate (x, u, lam, psi) with |psi(0)| + lam = 1 after normalisation."""

    x: ode.Trajectory
    u: ReferenceControl
    lam: float
    psi: ode.AdjointArc
    horizon: float
    max_residual: float
    converged: bool = True
    iterations: int = 0

    @property
    def psi0(self) -> np.ndarray:
        return self.psi.values[0]


def max_residual(p: ControlProblem, e: Extremal, grid) -> float:
    """sup over the grid of [max_u H - H(u(t))]; zero means the maximum
    condition holds on the grid."""
    ts = np.asarray(grid, dtype=float)
    xs = e.x.eval(ts)
    psis = e.psi.eval(ts)
    us = np.atleast_2d(e.u.eval(ts, xs))
    _, best = _argmax_batch(p, ts, xs, psis, e.lam)
    actual = _hamiltonian_batch(p, ts, xs, us, e.lam, psis)
    return float(np.max(np.maximum(best - actual, 0.0)))


def normalize(lam_raw: float, psi: ode.AdjointArc):
    """Rescale (lam, psi) by the positive factor enforcing |psi(0)| + lam = 1."""
    if lam_raw < 0:
        raise ValueError("multiplier must be nonnegative")
    denom = lam_raw + float(np.linalg.norm(psi.values[0]))
    if denom <= 0.0:
        raise DegenerateMultiplierError("multiplier pair (lam, psi(0)) is identically zero")
    scaled = ode.AdjointArc(psi.grid, psi.values / denom, psi.derivs / denom)
    return lam_raw / denom, scaled


# ---------------------------------------------------------------------------
# Payoff-gap estimate omega and penalty pools
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OmegaEstimate:
    taus: np.ndarray
    values: np.ndarray  # non-increasing envelope of the raw gaps
    raw: np.ndarray
    pool_size: int

    def at(self, tau: float) -> float:
        i = int(np.argmin(np.abs(self.taus - tau)))
        return float(self.values[i])


def _payoff_curve(p, u, taus, *, atol, rtol):
    """J(tau) = int_0^tau g dt along u, sampled at the given horizons."""
    m = p.state_dim

    def rhs(t, y):
        x = y[:m]
        return p.f_with_payoff(t, x, u.eval(t, x))

    def rhs_factory(a, b):
        uv = u.frozen_on(a, b)
        if uv is None:
            return rhs
        return lambda t, y: p.f_with_payoff(t, y[:m], uv)

    grid = np.unique(np.concatenate([[0.0], np.asarray(taus, dtype=float)]))
    y0 = np.concatenate([p.x0, [0.0]])
    vals = ode._integrate(rhs, y0, grid, u.breakpoints(0.0, grid[-1]), atol=atol, rtol=rtol, blowup=ode.DEFAULT_BLOWUP, rhs_factory=rhs_factory)
    lookup = {float(t): vals[i, -1] for i, t in enumerate(grid)}
    return np.array([lookup[float(t)] for t in np.asarray(taus, dtype=float)])


def estimate_omega(
    p: ControlProblem,
    u0: ReferenceControl,
    taus,
    pool,
    *,
    atol: float = ode.DEFAULT_ATOL,
    rtol: float = ode.DEFAULT_RTOL,
) -> OmegaEstimate:
    """Empirical payoff-gap bound: max over the pool of [J_tau(u) - J_tau(u0)]+,
    smoothed to a non-increasing envelope (the gap bound holds for all later
    horizons, so the estimator takes the running max from the right)."""
    if len(pool) == 0:
        raise ValueError("candidate pool must be nonempty")
    taus = np.asarray(taus, dtype=float)
    base = _payoff_curve(p, u0, taus, atol=atol, rtol=rtol)
    raw = np.zeros_like(taus)
    for cand in pool:
        gaps = np.maximum(_payoff_curve(p, cand, taus, atol=atol, rtol=rtol) - base, 0.0)
        raw = np.maximum(raw, gaps)
    # gaps at the level of the integration error are measurement noise
    floor = 10.0 * (atol + rtol * max(1.0, float(np.max(np.abs(base)))))
    raw[raw <= floor] = 0.0
    envelope = np.maximum.accumulate(raw[::-1])[::-1]
    return OmegaEstimate(taus=taus, values=envelope, raw=raw, pool_size=len(pool))


def make_perturbation_pool(
    p: ControlProblem,
    u0: ReferenceControl,
    span,
    rng: np.random.Generator,
    n: int = 16,
) -> list[ReferenceControl]:
    """Reference control plus n random piecewise-constant perturbations: bang
    (corner-valued) controls and uniform box samples on random switch grids."""
    t0, t1 = float(span[0]), float(span[1])
    pool = [u0]
    cs = p.control_set
    for i in range(n):
        pieces = int(rng.integers(1, 7))
        cuts = np.sort(rng.uniform(t0, t1, size=pieces - 1))
        grid = np.concatenate([[t0], cuts, [t1]])
        grid = np.unique(grid)
        mids = 0.5 * (grid[:-1] + grid[1:])
        if cs.kind == "finite":
            idx = rng.integers(0, len(cs.points), size=len(mids))
            values = cs.points[idx]
        else:
            lo, hi = cs.bounds_at(mids)
            if i % 2 == 0:  # bang: pick a corner per piece
                corner = rng.integers(0, 2, size=lo.shape).astype(float)
                values = lo + corner * (hi - lo)
            else:
                values = lo + rng.uniform(size=lo.shape) * (hi - lo)
        pool.append(piecewise_control(grid, values))
    return pool


def deviation_weight(u0: ReferenceControl):
    """Admissible deviation weight w(t, u) = |u - u0(t)|^2.

    Vanishes exactly at the reference control.  Supports references that do
    not need state feedback (time-only or constant expressions).
    """

    def w(ts, us):
        base = np.atleast_2d(u0.eval(ts))
        d = np.atleast_2d(us) - base
        return np.einsum("...k,...k->...", d, d)

    return w


# ---------------------------------------------------------------------------
# Finite-horizon penalized solve (forward-backward sweep)
# ---------------------------------------------------------------------------


def _forward_pass(p, u_pc, nodes, gamma, w, *, atol, rtol):
    """State plus payoff (and penalty) accumulators under a piecewise control."""
    m = p.state_dim

    def rhs(t, y):
        x = y[:m]
        uv = u_pc.eval(t, x)
        pen = float(w(np.asarray(t), np.asarray(uv)[None, :])[0]) if w is not None else 0.0
        return np.append(p.f_with_payoff(t, x, uv), pen)

    def rhs_factory(a, b):
        uv = u_pc.frozen_on(a, b)
        if uv is None:
            return rhs
        if w is None:
            def seg_rhs(t, y):
                out = np.empty(m + 2)
                out[: m + 1] = p.f_with_payoff(t, y[:m], uv)
                out[m + 1] = 0.0
                return out
        else:
            def seg_rhs(t, y):
                out = np.empty(m + 2)
                out[: m + 1] = p.f_with_payoff(t, y[:m], uv)
                out[m + 1] = float(w(np.asarray(t), uv[None, :])[0])
                return out
        return seg_rhs

    y0 = np.concatenate([p.x0, [0.0, 0.0]])
    vals = ode._integrate(rhs, y0, nodes, u_pc.breakpoints(nodes[0], nodes[-1]), atol=atol, rtol=rtol, blowup=ode.DEFAULT_BLOWUP, rhs_factory=rhs_factory)
    xs = vals[:, :m]
    us = u_pc.eval(nodes, xs)
    derivs = np.stack([p.f(t, x, u) for t, x, u in zip(nodes, xs, np.atleast_2d(us))])
    traj = ode.Trajectory(nodes, xs, derivs)
    objective = vals[-1, m] - gamma * vals[-1, m + 1]
    return traj, objective


def solve_finite_horizon(
    p: ControlProblem,
    tau: float,
    gamma: float,
    w=None,
    u_init: ReferenceControl | None = None,
    *,
    control_dt: float = 0.1,
    theta: float = 0.5,
    tol_l1: float = 1e-7,
    max_iter: int = 500,
    atol: float = ode.DEFAULT_ATOL,
    rtol: float = ode.DEFAULT_RTOL,
) -> Extremal:
    """Penalized free-endpoint solve on [0, tau] by forward-backward sweep.

    The multiplier is held at lam = 1 during the sweep (finite-horizon free
    endpoint problems are normal) and the pair is rescaled afterwards.  The
    relaxation factor halves whenever a step would decrease the penalized
    objective, which keeps the accepted objective values non-decreasing.
    Returns the best iterate flagged ``converged=False`` when the L1 control
    change has not dropped below ``tol_l1`` within ``max_iter`` sweeps.
    """
    if tau <= 0:
        raise ValueError("horizon must be positive")
    if gamma < 0:
        raise ValueError("penalty weight must be nonnegative")
    if u_init is None:
        u_init = p.reference
    if u_init is None:
        raise ValueError("no initial control: pass u_init or set problem.reference")
    if gamma > 0 and w is None:
        raise ValueError("a deviation weight is required when gamma > 0")

    n_int = max(40, int(np.ceil(tau / control_dt)))
    nodes = np.linspace(0.0, tau, n_int + 1)
    mids = 0.5 * (nodes[:-1] + nodes[1:])
    dt = nodes[1] - nodes[0]
    lam = 1.0

    x0b = np.broadcast_to(p.x0, (len(mids), p.state_dim))
    u_vals = np.atleast_2d(u_init.eval(mids, x0b)).astype(float)
    if u_vals.shape != (n_int, p.control_dim):
        u_vals = u_vals.reshape(n_int, p.control_dim)
    u_pc = piecewise_control(nodes, u_vals)

    w_eff = w if gamma > 0 else None
    penalty = (lambda ts, us: gamma * w(ts, us)) if w_eff is not None else None

    traj, obj = _forward_pass(p, u_pc, nodes, gamma, w_eff, atol=atol, rtol=rtol)
    converged = False
    iterations = 0
    psi = None

    for iterations in range(1, max_iter + 1):
        psi = ode.integrate_adjoint_backward(p, u_pc, traj, lam, np.zeros(p.state_dim), (0.0, tau), atol=atol, rtol=rtol, grid=nodes)
        u_star, _ = _argmax_batch(p, nodes[:-1], traj.values[:-1], psi.values[:-1], lam, penalty=penalty)

        # relaxed update for boxes; finite sets admit only full replacement
        step = theta if p.control_set.kind == "box" else 1.0
        accepted = False
        while step >= 1e-9:
            u_try = u_vals + step * (u_star - u_vals)
            u_try_pc = piecewise_control(nodes, u_try)
            traj_try, obj_try = _forward_pass(p, u_try_pc, nodes, gamma, w_eff, atol=atol, rtol=rtol)
            if obj_try >= obj - 1e-10:
                accepted = True
                break
            if p.control_set.kind == "finite":
                break
            step *= 0.5
        if not accepted:
            converged = True  # no ascent step left at the relaxation floor
            break
        delta_l1 = float(np.sum(np.abs(u_try - u_vals)) * dt)
        u_vals, u_pc, traj, obj = u_try, u_try_pc, traj_try, obj_try
        if delta_l1 <= tol_l1:
            converged = True
            break

    psi = ode.integrate_adjoint_backward(p, u_pc, traj, lam, np.zeros(p.state_dim), (0.0, tau), atol=atol, rtol=rtol, grid=nodes)
    lam_n, psi_n = normalize(lam, psi)
    e = Extremal(
        x=traj,
        u=u_pc,
        lam=lam_n,
        psi=psi_n,
        horizon=tau,
        max_residual=0.0,
        converged=converged,
        iterations=iterations,
    )
    resid = max_residual(p, e, nodes)
    return Extremal(
        x=traj,
        u=u_pc,
        lam=lam_n,
        psi=psi_n,
        horizon=tau,
        max_residual=resid,
        converged=converged,
        iterations=iterations,
    )


# ---------------------------------------------------------------------------
# Truncation scheme over an increasing horizon sequence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TruncationRecord:
    n: int
    tau: float
    gamma: float
    lam: float
    psi0: np.ndarray
    residual: float
    converged: bool


@dataclass
class TruncationRun:
    taus: np.ndarray
    gammas: np.ndarray
    omega: OmegaEstimate
    records: list = field(default_factory=list)
    lambda_diffs: list = field(default_factory=list)  # |lam_n - lam_{n-1}|
    psi0_diffs: list = field(default_factory=list)  # |psi_n(0) - psi_{n-1}(0)|
    extremal: Extremal | None = None

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.records)


def run_truncation(
    p: ControlProblem,
    u0: ReferenceControl,
    taus,
    *,
    pool=None,
    rng: np.random.Generator | None = None,
    n_pool: int = 16,
    control_dt: float = 0.1,
    theta: float = 0.5,
    tol_l1: float = 1e-7,
    max_iter: int = 500,
    atol: float = ode.DEFAULT_ATOL,
    rtol: float = ode.DEFAULT_RTOL,
) -> TruncationRun:
    """Penalized truncation over increasing horizons tau_1 < tau_2 < ...

    Per horizon: gamma_n = sqrt(omega(tau_n)) from the pool estimate, the
    finite-horizon solve warm-starts from the previous control extended by the
    reference, and (lam_n, psi_n(0)) with their Cauchy differences are kept as
    convergence evidence.  Failures are flagged per horizon and the run
    continues.
    """
    taus = np.asarray(taus, dtype=float)
    if len(taus) < 2 or np.any(np.diff(taus) <= 0):
        raise ValueError("need a strictly increasing horizon sequence with >= 2 entries")
    if rng is None:
        rng = np.random.default_rng(0)
    if pool is None:
        pool = make_perturbation_pool(p, u0, (0.0, float(taus[-1])), rng, n_pool)
    omega = estimate_omega(p, u0, taus, pool, atol=atol, rtol=rtol)
    gammas = np.sqrt(np.maximum(omega.values, 0.0))
    w = deviation_weight(u0)

    run = TruncationRun(taus=taus, gammas=gammas, omega=omega)
    u_init = u0
    prev = None
    for n, (tau, gamma) in enumerate(zip(taus, gammas)):
        try:
            e = solve_finite_horizon(
                p, float(tau), float(gamma), w, u_init,
                control_dt=control_dt, theta=theta, tol_l1=tol_l1,
                max_iter=max_iter, atol=atol, rtol=rtol,
            )
        except ode.OdeError:
            run.records.append(TruncationRecord(n, float(tau), float(gamma), math.nan, np.full(p.state_dim, np.nan), math.nan, False))
            continue
        run.records.append(TruncationRecord(n, float(tau), float(gamma), e.lam, e.psi0.copy(), e.max_residual, e.converged))
        if prev is not None:
            run.lambda_diffs.append(abs(e.lam - prev.lam))
            run.psi0_diffs.append(float(np.linalg.norm(e.psi0 - prev.psi0)))
        run.extremal = e
        prev = e
        u_init = _extend_control(e.u, u0, float(tau))
    return run


class _ExtendedControl:
    """Previous iterate on [0, tau], reference control beyond (warm start)."""

    def __init__(self, u_pc: ReferenceControl, u0: ReferenceControl, tau: float):
        self.head = u_pc
        self.tail = u0
        self.tau = float(tau)

    @property
    def control_dim(self) -> int:
        return self.head.control_dim

    def eval(self, ts, x=None):
        ts_arr = np.atleast_1d(np.asarray(ts, dtype=float))
        inside = ts_arr <= self.tau
        out = np.empty((len(ts_arr), self.control_dim))
        if np.any(inside):
            out[inside] = np.atleast_2d(self.head.eval(ts_arr[inside]))
        if np.any(~inside):
            xo = None if x is None else np.atleast_2d(np.asarray(x, dtype=float))[~inside]
            out[~inside] = np.atleast_2d(self.tail.eval(ts_arr[~inside], xo))
        return out[0] if np.ndim(ts) == 0 else out

    def breakpoints(self, t0, t1):
        inner = self.head.breakpoints(t0, min(t1, self.tau))
        if t1 > self.tau:
            inner = np.unique(np.concatenate([inner, [self.tau], self.tail.breakpoints(self.tau, t1)]))
        return inner

    def frozen_on(self, a, b):
        if max(a, b) <= self.tau + 1e-12:
            return self.head.frozen_on(a, b)
        if min(a, b) >= self.tau - 1e-12:
            return self.tail.frozen_on(a, b)
        return None


def _extend_control(u_pc: ReferenceControl, u0: ReferenceControl, tau: float):
    return _ExtendedControl(u_pc, u0, tau)
