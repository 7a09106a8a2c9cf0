"""Adaptive integration of the state, adjoint and fundamental-matrix equations.

Stepping uses the Dormand-Prince 5(4) embedded pair (scipy's RK45) with local
error per step bounded by atol + rtol*|y|.  Integrations restart at control
discontinuity nodes so every step sees a smooth right-hand side, and every arc
is stored as node values plus node derivatives from the equation itself, i.e.
a cubic Hermite interpolant that reproduces values and slopes at the grid.

The three products are

* :func:`integrate_state`            dx/dt =  f(t, x, u(t))
* :func:`integrate_adjoint_backward` dpsi/dt = -psi df/dx - lam dg/dx, anchored
  at the terminal node (the free-endpoint anchor psi(T) is stored exactly)
* :func:`fundamental_matrix`         dA/dt = df/dx A, A(t0) = identity, with
  log|det A| co-integrated through the trace identity d log det A = tr(df/dx) dt
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45

from .problem import ControlProblem, ReferenceControl

__all__ = [
    "Arc",
    "Trajectory",
    "AdjointArc",
    "MatrixArc",
    "OdeError",
    "BlowUpError",
    "StepSizeUnderflowError",
    "SingularMatrixError",
    "integrate_state",
    "integrate_adjoint_backward",
    "fundamental_matrix",
    "inverse_at",
    "condition_estimate",
]

DEFAULT_ATOL = 1e-10
DEFAULT_RTOL = 1e-8
DEFAULT_BLOWUP = 1e12


class OdeError(Exception):
    pass


class BlowUpError(OdeError):
    """Solution norm exceeded the blow-up bound; carries the escape time."""

    def __init__(self, time: float, norm: float, bound: float):
        super().__init__(f"solution blew up at t={time:.6g} (|y|={norm:.3g} > {bound:.3g})")
        self.time = time
        self.norm = norm


class StepSizeUnderflowError(OdeError):
    def __init__(self, time: float):
        super().__init__(f"step size underflow at t={time:.6g}")
        self.time = time


class SingularMatrixError(OdeError):
    def __init__(self, time: float, cond: float):
        super().__init__(f"matrix numerically singular at t={time:.6g} (cond~{cond:.3g})")
        self.time = time
        self.cond = cond


# ---------------------------------------------------------------------------
# Sampled arcs with cubic Hermite interpolation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Arc:
    """Time-sampled curve with node derivatives; cubic Hermite between nodes."""

    grid: np.ndarray  # (N,), strictly increasing
    values: np.ndarray  # (N, d)
    derivs: np.ndarray  # (N, d)

    def __post_init__(self):
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("arc grid must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("arc has non-finite node values")

    @property
    def t0(self) -> float:
        return float(self.grid[0])

    @property
    def t1(self) -> float:
        return float(self.grid[-1])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def _locate(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = np.searchsorted(self.grid, t, side="right") - 1
        idx = np.clip(idx, 0, len(self.grid) - 2)
        h = self.grid[idx + 1] - self.grid[idx]
        s = (t - self.grid[idx]) / h
        return idx, h, s

    def _locate_scalar(self, t: float) -> tuple[int, float, float]:
        grid = self.grid
        if t < grid[0] - 1e-9 or t > grid[-1] + 1e-9:
            raise ValueError(f"time outside arc span [{self.t0:g}, {self.t1:g}]")
        idx = int(np.searchsorted(grid, t, side="right")) - 1
        if idx < 0:
            idx = 0
        elif idx > len(grid) - 2:
            idx = len(grid) - 2
        h = grid[idx + 1] - grid[idx]
        return idx, float(h), (t - grid[idx]) / float(h)

    def eval(self, t):
        """Hermite value(s) at t; (d,) for scalar t, (n, d) for an array."""
        if np.ndim(t) == 0:
            idx, h, s = self._locate_scalar(float(t))
            s2 = s * s
            s3 = s2 * s
            return (
                (2 * s3 - 3 * s2 + 1) * self.values[idx]
                + h * (s3 - 2 * s2 + s) * self.derivs[idx]
                + (3 * s2 - 2 * s3) * self.values[idx + 1]
                + h * (s3 - s2) * self.derivs[idx + 1]
            )
        ts = np.asarray(t, dtype=float)
        if np.any(ts < self.grid[0] - 1e-9) or np.any(ts > self.grid[-1] + 1e-9):
            raise ValueError(f"time outside arc span [{self.t0:g}, {self.t1:g}]")
        idx, h, s = self._locate(ts)
        s2, s3 = s * s, s * s * s
        h00 = 2 * s3 - 3 * s2 + 1
        h10 = s3 - 2 * s2 + s
        h01 = -2 * s3 + 3 * s2
        h11 = s3 - s2
        v0, v1 = self.values[idx], self.values[idx + 1]
        d0, d1 = self.derivs[idx], self.derivs[idx + 1]
        hh = h[:, None]
        return h00[:, None] * v0 + hh * h10[:, None] * d0 + h01[:, None] * v1 + hh * h11[:, None] * d1

    def deriv(self, t):
        """Hermite derivative(s) at t."""
        if np.ndim(t) == 0:
            idx, h, s = self._locate_scalar(float(t))
            s2 = s * s
            return (
                ((6 * s2 - 6 * s) / h) * self.values[idx]
                + (3 * s2 - 4 * s + 1) * self.derivs[idx]
                + ((6 * s - 6 * s2) / h) * self.values[idx + 1]
                + (3 * s2 - 2 * s) * self.derivs[idx + 1]
            )
        ts = np.asarray(t, dtype=float)
        idx, h, s = self._locate(ts)
        s2 = s * s
        g00 = (6 * s2 - 6 * s) / h
        g10 = 3 * s2 - 4 * s + 1
        g01 = (6 * s - 6 * s2) / h
        g11 = 3 * s2 - 2 * s
        v0, v1 = self.values[idx], self.values[idx + 1]
        d0, d1 = self.derivs[idx], self.derivs[idx + 1]
        return g00[:, None] * v0 + g10[:, None] * d0 + g01[:, None] * v1 + g11[:, None] * d1


class Trajectory(Arc):
    pass


class AdjointArc(Arc):
    pass


@dataclass(frozen=True)
class MatrixArc:
    """Fundamental-matrix arc: (N, m, m) samples plus log|det| at the nodes."""

    grid: np.ndarray
    values: np.ndarray  # (N, m, m)
    derivs: np.ndarray  # (N, m, m)
    logdet: np.ndarray  # (N,)
    _flat: Arc = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = self.values.shape[1]
        flat = Arc(self.grid, self.values.reshape(len(self.grid), m * m), self.derivs.reshape(len(self.grid), m * m))
        object.__setattr__(self, "_flat", flat)
        dets = np.linalg.det(self.values)
        if np.any(~np.isfinite(dets)) or np.any(np.abs(dets) <= 0.0):
            raise ValueError("fundamental matrix has singular node")

    def require_identity_start(self):
        if not np.allclose(self.values[0], np.eye(self.dim), atol=1e-12):
            raise ValueError("fundamental matrix must start at the identity")
        return self

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def t0(self) -> float:
        return float(self.grid[0])

    @property
    def t1(self) -> float:
        return float(self.grid[-1])

    def eval(self, t):
        m = self.dim
        out = self._flat.eval(t)
        if out.ndim == 1:
            return out.reshape(m, m)
        return out.reshape(-1, m, m)


# ---------------------------------------------------------------------------
# Core driver
# ---------------------------------------------------------------------------


def _integrate(
    rhs,
    y0: np.ndarray,
    out_grid: np.ndarray,
    breakpoints,
    *,
    atol: float,
    rtol: float,
    blowup: float,
    rhs_factory=None,
):
    """Integrate y' = rhs(t, y) across out_grid (monotone in either direction),
    restarting at each breakpoint; returns values at out_grid nodes.

    ``rhs_factory(a, b)``, when given, supplies the right-hand side per smooth
    segment, so a piecewise-constant control can be bound once per segment.
    """
    t_start, t_end = float(out_grid[0]), float(out_grid[-1])
    direction = 1.0 if t_end >= t_start else -1.0
    bps = [t for t in np.asarray(breakpoints, dtype=float) if (t - t_start) * direction > 1e-12 and (t_end - t) * direction > 1e-12]
    bps = sorted(set(bps), key=lambda t: direction * t)
    segments = [t_start] + bps + [t_end]

    values = np.empty((len(out_grid), len(y0)))
    values[0] = y0
    y = np.asarray(y0, dtype=float)
    filled = 1
    h_carry = None  # accepted step size carries across segment restarts

    with np.errstate(all="ignore"):
        for a, b in zip(segments[:-1], segments[1:]):
            if abs(b - a) <= 1e-14:
                continue
            seg_rhs = rhs_factory(a, b) if rhs_factory is not None else rhs
            first = min(abs(b - a), h_carry) if h_carry else min(abs(b - a), 1.0)
            solver = RK45(seg_rhs, a, y, b, rtol=rtol, atol=atol, first_step=first)
            while solver.status == "running":
                solver.step()
                if solver.status == "failed":
                    raise StepSizeUnderflowError(solver.t)
                norm = float(np.max(np.abs(solver.y)))
                if norm > blowup:
                    raise BlowUpError(solver.t, norm, blowup)
                dense = solver.dense_output()
                while filled < len(out_grid) and (out_grid[filled] - solver.t) * direction <= 1e-12:
                    tq = out_grid[filled]
                    values[filled] = y0 if abs(tq - t_start) < 1e-15 else dense(tq)
                    filled += 1
            y = solver.y
            h_carry = solver.h_abs
            # land segment ends exactly on the state the solver reached
            while filled < len(out_grid) and (out_grid[filled] - b) * direction <= 1e-12:
                values[filled] = y
                filled += 1
    if filled < len(out_grid):
        values[filled:] = y
    return values


def _output_grid(span, dt_out: float, extra=()) -> np.ndarray:
    t0, t1 = float(span[0]), float(span[1])
    n = max(1, int(np.ceil(abs(t1 - t0) / dt_out)))
    base = np.linspace(t0, t1, n + 1)
    pts = np.concatenate([base, np.asarray(list(extra), dtype=float)]) if len(extra) else base
    lo, hi = min(t0, t1), max(t0, t1)
    pts = pts[(pts >= lo - 1e-12) & (pts <= hi + 1e-12)]
    pts = np.unique(pts)
    return pts if t1 >= t0 else pts[::-1]


def integrate_state(
    p: ControlProblem,
    u: ReferenceControl,
    x_init,
    span,
    *,
    atol: float = DEFAULT_ATOL,
    rtol: float = DEFAULT_RTOL,
    blowup: float = DEFAULT_BLOWUP,
    dt_out: float = 0.01,
    grid=None,
) -> Trajectory:
    """Solve dx/dt = f(t, x, u(t, x)) over span = [t_a, t_b]."""
    x_init = np.asarray(x_init, dtype=float)

    def rhs(t, y):
        return p.f(t, y, u.eval(t, y))

    def rhs_factory(a, b):
        uv = u.frozen_on(a, b)
        if uv is None:
            return rhs
        return lambda t, y: p.f(t, y, uv)

    bps = u.breakpoints(span[0], span[1])
    out = np.asarray(grid, dtype=float) if grid is not None else _output_grid(span, dt_out, bps)
    values = _integrate(rhs, x_init, out, bps, atol=atol, rtol=rtol, blowup=blowup, rhs_factory=rhs_factory)
    derivs = np.stack([rhs(t, v) for t, v in zip(out, values)])
    order = np.argsort(out)
    return Trajectory(out[order], values[order], derivs[order])


def integrate_adjoint_backward(
    p: ControlProblem,
    u: ReferenceControl,
    x: Trajectory,
    lam: float,
    psi_terminal,
    span,
    *,
    atol: float = DEFAULT_ATOL,
    rtol: float = DEFAULT_RTOL,
    blowup: float = DEFAULT_BLOWUP,
    dt_out: float = 0.01,
    grid=None,
) -> AdjointArc:
    """Integrate the adjoint equation backward from psi(t_b) = psi_terminal.

    The Jacobians df/dx and dg/dx are evaluated along the interpolated state.
    The terminal node of the returned arc stores psi_terminal exactly.
    """
    t_a, t_b = float(span[0]), float(span[1])
    psi_terminal = np.asarray(psi_terminal, dtype=float)

    def rhs(t, psi):
        xt = x.eval(t)
        ut = u.eval(t, xt)
        J, gx = p.adjoint_coeffs(t, xt, ut)
        return -(psi @ J) - lam * gx

    def rhs_factory(a, b):
        uv = u.frozen_on(a, b)
        if uv is None:
            return rhs

        def seg_rhs(t, psi):
            J, gx = p.adjoint_coeffs(t, x.eval(t), uv)
            return -(psi @ J) - lam * gx

        return seg_rhs

    bps = u.breakpoints(t_a, t_b)
    if grid is not None:
        g = np.asarray(grid, dtype=float)
        out = g[::-1] if g[0] < g[-1] else g
    else:
        out = _output_grid((t_b, t_a), dt_out, bps)
    values = _integrate(rhs, psi_terminal, out, bps, atol=atol, rtol=rtol, blowup=blowup, rhs_factory=rhs_factory)
    derivs = np.stack([rhs(t, v) for t, v in zip(out, values)])
    order = np.argsort(out)
    return AdjointArc(out[order], values[order], derivs[order])


def fundamental_matrix(
    p: ControlProblem,
    u: ReferenceControl,
    x: Trajectory,
    span,
    *,
    atol: float = DEFAULT_ATOL,
    rtol: float = DEFAULT_RTOL,
    blowup: float = DEFAULT_BLOWUP,
    dt_out: float = 0.05,
    grid=None,
) -> MatrixArc:
    """Solve dA/dt = df/dx(t, x(t), u(t)) A with A(t_a) = identity.

    The m columns are advanced as one flattened system, so they share a single
    step controller, and log|det A| rides along via the trace identity.
    """
    m = p.state_dim

    def rhs(t, y):
        xt = x.eval(t)
        ut = u.eval(t, xt)
        J = p.f_jacobian_x(t, xt, ut)
        A = y[: m * m].reshape(m, m)
        return np.concatenate([(J @ A).ravel(), [np.trace(J)]])

    def rhs_factory(a, b):
        uv = u.frozen_on(a, b)
        if uv is None:
            return rhs

        def seg_rhs(t, y):
            J = p.f_jacobian_x(t, x.eval(t), uv)
            A = y[: m * m].reshape(m, m)
            return np.concatenate([(J @ A).ravel(), [np.trace(J)]])

        return seg_rhs

    y0 = np.concatenate([np.eye(m).ravel(), [0.0]])
    bps = u.breakpoints(span[0], span[1])
    out = np.asarray(grid, dtype=float) if grid is not None else _output_grid(span, dt_out, bps)
    values = _integrate(rhs, y0, out, bps, atol=atol, rtol=rtol, blowup=blowup, rhs_factory=rhs_factory)
    derivs = np.stack([rhs(t, v) for t, v in zip(out, values)])
    order = np.argsort(out)
    out, values, derivs = out[order], values[order], derivs[order]
    return MatrixArc(
        grid=out,
        values=values[:, : m * m].reshape(-1, m, m),
        derivs=derivs[:, : m * m].reshape(-1, m, m),
        logdet=values[:, -1],
    ).require_identity_start()


def condition_estimate(arc: MatrixArc, t: float) -> float:
    return float(np.linalg.cond(arc.eval(float(t)), 1))


def inverse_at(arc: MatrixArc, t: float, cond_limit: float = 1e14) -> np.ndarray:
    """A(t)^-1 by direct solve with partial pivoting.

    Raises :class:`SingularMatrixError` when the 1-norm condition estimate
    exceeds ``cond_limit``.
    """
    A = arc.eval(float(t))
    cond = float(np.linalg.cond(A, 1))
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularMatrixError(float(t), cond)
    return np.linalg.solve(A, np.eye(arc.dim))
