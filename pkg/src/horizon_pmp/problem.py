"""Control problem model: dynamics, payoff, control set, reference control.

A problem is the data of the autonomous-in-form system

    dx/dt = f(t, x, u),   x(0) = x0,   u(t) in U(t),

together with a running payoff g(t, x, u) accumulated on [0, inf).  The left
endpoint defaults to the origin; it is overridable because the sensitivity
analysis downstream integrates from perturbed starts x(0) = xi.

Problems load from a JSON document with fields ``state_dim``, ``control_dim``,
``dynamics`` (array of expression strings), ``payoff`` (expression string),
``control.kind`` plus ``control.lower``/``control.upper`` (box) or
``control.points`` (finite), optional ``x0``, ``label`` and ``reference``.

A registry of analytic benchmarks with documented closed forms is exposed via
:func:`builtin`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import expr as ex

__all__ = [
    "ControlSet",
    "ReferenceControl",
    "ControlProblem",
    "ProblemConfigError",
    "UnknownBuiltinError",
    "ValidationReport",
    "load_problem",
    "save_problem",
    "builtin",
    "builtin_names",
    "builtin_descriptions",
    "validate",
]


class ProblemConfigError(Exception):
    """Config rejected; message carries the offending field path."""

    def __init__(self, fieldpath: str, message: str):
        super().__init__(f"{fieldpath}: {message}")
        self.fieldpath = fieldpath


class UnknownBuiltinError(Exception):
    def __init__(self, name: str):
        avail = ", ".join(builtin_names())
        super().__init__(f"unknown builtin '{name}' (available: {avail})")
        self.name = name


# ---------------------------------------------------------------------------
# Control set
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlSet:
    """Compact control constraint: a time-varying box or a finite point set."""

    kind: str  # "box" | "finite"
    lower: tuple = ()  # box: Expr per control coordinate, functions of t
    upper: tuple = ()
    lower_src: tuple = ()
    upper_src: tuple = ()
    points: np.ndarray | None = None  # finite: (n_points, k)

    def bounds_at(self, t):
        """Box bounds (lo, hi) at time(s) t, each shaped (..., k)."""
        assert self.kind == "box"
        t = np.asarray(t, dtype=float)
        lo = np.stack([np.broadcast_to(ex.evaluate(e, {"t": t}), t.shape) for e in self.lower], axis=-1)
        hi = np.stack([np.broadcast_to(ex.evaluate(e, {"t": t}), t.shape) for e in self.upper], axis=-1)
        return lo, hi

    def contains(self, t, u, tol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=float)
        if self.kind == "finite":
            return bool(np.any(np.all(np.abs(self.points - u) <= tol, axis=1)))
        lo, hi = self.bounds_at(t)
        return bool(np.all(u >= lo - tol) and np.all(u <= hi + tol))


def _box_control_set(lower_src, upper_src) -> ControlSet:
    lo = tuple(ex.parse(s, ("t",)) for s in lower_src)
    hi = tuple(ex.parse(s, ("t",)) for s in upper_src)
    return ControlSet(
        kind="box",
        lower=lo,
        upper=hi,
        lower_src=tuple(lower_src),
        upper_src=tuple(upper_src),
    )


def _finite_control_set(points) -> ControlSet:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.size == 0:
        raise ProblemConfigError("control.points", "finite control set is empty")
    return ControlSet(kind="finite", points=pts)


# ---------------------------------------------------------------------------
# Reference control
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceControl:
    """Candidate control: piecewise-constant on a grid, or closed-loop exprs.

    Closed-loop expressions may reference ``t`` and the state variables, so a
    constant reference is just the expression string of the constant.
    """

    kind: str  # "piecewise" | "closed-loop"
    grid: np.ndarray | None = None  # piecewise: (M+1,) nodes
    values: np.ndarray | None = None  # piecewise: (M, k), constant on [t_i, t_{i+1})
    exprs: tuple = ()  # closed-loop: Expr per control coordinate
    exprs_src: tuple = ()

    def eval(self, t, x=None) -> np.ndarray:
        """Control value(s) at time(s) t; shape (k,) for scalar t, (n, k) for arrays."""
        if self.kind == "piecewise" and np.ndim(t) == 0:
            idx = int(np.searchsorted(self.grid, t, side="right")) - 1
            if idx < 0:
                idx = 0
            elif idx >= len(self.values):
                idx = len(self.values) - 1
            return self.values[idx]
        t_arr = np.asarray(t, dtype=float)
        scalar = t_arr.ndim == 0
        ts = np.atleast_1d(t_arr)
        if self.kind == "piecewise":
            idx = np.searchsorted(self.grid, ts, side="right") - 1
            idx = np.clip(idx, 0, len(self.values) - 1)
            out = self.values[idx]
        else:
            env = {"t": ts}
            if x is not None:
                x_arr = np.atleast_2d(np.asarray(x, dtype=float))
                for j in range(x_arr.shape[1]):
                    env[f"x{j + 1}"] = x_arr[:, j]
            cols = [np.broadcast_to(ex.evaluate(e, env), ts.shape) for e in self.exprs]
            out = np.stack(cols, axis=-1)
        return out[0] if scalar else out

    def breakpoints(self, t0: float, t1: float) -> np.ndarray:
        """Interior discontinuity nodes within (t0, t1), ascending."""
        if self.kind != "piecewise":
            return np.empty(0)
        lo, hi = min(t0, t1), max(t0, t1)
        inner = self.grid[(self.grid > lo + 1e-12) & (self.grid < hi - 1e-12)]
        return np.asarray(inner, dtype=float)

    def frozen_on(self, a: float, b: float) -> np.ndarray | None:
        """The constant value on a breakpoint-free segment, or None if the
        control varies inside it (closed-loop expressions)."""
        if self.kind != "piecewise":
            return None
        return self.eval(0.5 * (a + b))

    @property
    def control_dim(self) -> int:
        if self.kind == "piecewise":
            return self.values.shape[1]
        return len(self.exprs)


def piecewise_control(grid, values) -> ReferenceControl:
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if len(grid) != len(values) + 1:
        raise ProblemConfigError("reference.grid", "grid must have len(values)+1 nodes")
    if np.any(np.diff(grid) <= 0):
        raise ProblemConfigError("reference.grid", "grid must be strictly increasing")
    return ReferenceControl(kind="piecewise", grid=grid, values=values)


def closed_loop_control(sources, state_dim: int) -> ReferenceControl:
    syms = ("t",) + tuple(f"x{i + 1}" for i in range(state_dim))
    exprs = tuple(ex.parse(s, syms) for s in sources)
    return ReferenceControl(kind="closed-loop", exprs=exprs, exprs_src=tuple(sources))


# ---------------------------------------------------------------------------
# Control problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlProblem:
    state_dim: int
    control_dim: int
    dynamics: tuple  # Expr per state coordinate
    dynamics_src: tuple
    payoff: ex.Expr
    payoff_src: str
    control_set: ControlSet
    x0: np.ndarray
    label: str = ""
    reference: ReferenceControl | None = None

    @property
    def symbols(self) -> tuple[str, ...]:
        return (
            ("t",)
            + tuple(f"x{i + 1}" for i in range(self.state_dim))
            + tuple(f"u{i + 1}" for i in range(self.control_dim))
        )

    def env(self, t, x, u) -> dict:
        e = {"t": t}
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        for i in range(self.state_dim):
            e[f"x{i + 1}"] = x[..., i] if x.ndim else x
        for i in range(self.control_dim):
            e[f"u{i + 1}"] = u[..., i] if u.ndim else u
        return e

    # pointwise evaluation helpers used by the integrators -----------------
    # compiled kernels do the arithmetic; on a non-finite result the
    # interpreted evaluator re-runs to raise the precise domain error

    def _check(self, out: np.ndarray, t, x, u, exprs) -> np.ndarray:
        if np.isfinite(out.sum()):
            return out
        env = self.env(t, x, u)
        for e in exprs:
            ex.evaluate(e, env)  # raises with the offending node
        raise ex.ExprDomainError("non-finite result", exprs[0])

    def f(self, t: float, x, u) -> np.ndarray:
        kn = kernels(self)
        out = np.array(kn.f(t, *np.asarray(x, dtype=float), *np.atleast_1d(np.asarray(u, dtype=float))), dtype=float)
        return self._check(out, t, x, u, self.dynamics)

    def g(self, t, x, u) -> float:
        kn = kernels(self)
        out = kn.g(t, *np.asarray(x, dtype=float), *np.atleast_1d(np.asarray(u, dtype=float)))[0]
        return float(self._check(np.asarray(out, dtype=float), t, x, u, (self.payoff,)))

    def f_with_payoff(self, t: float, x, u) -> np.ndarray:
        """(f_1..f_m, g) in one compiled call (forward-sweep hot path)."""
        kn = kernels(self)
        out = np.array(kn.fg(t, *x, *u), dtype=float)
        return self._check(out, t, x, u, self.dynamics + (self.payoff,))

    def f_jacobian_x(self, t: float, x, u) -> np.ndarray:
        """J[i, j] = d f_i / d x_j at (t, x, u)."""
        m = self.state_dim
        kn = kernels(self)
        out = np.array(kn.fjac(t, *np.asarray(x, dtype=float), *np.atleast_1d(np.asarray(u, dtype=float))), dtype=float)
        return self._check(out, t, x, u, self.dynamics).reshape(m, m)

    def g_gradient_x(self, t, x, u) -> np.ndarray:
        """Row vector d g / d x at (t, x, u)."""
        kn = kernels(self)
        out = np.array(kn.ggrad(t, *np.asarray(x, dtype=float), *np.atleast_1d(np.asarray(u, dtype=float))), dtype=float)
        return self._check(out, t, x, u, (self.payoff,))

    def adjoint_coeffs(self, t: float, x, u) -> tuple[np.ndarray, np.ndarray]:
        """(df/dx, dg/dx) in one compiled call (adjoint/accumulate hot path)."""
        m = self.state_dim
        kn = kernels(self)
        out = np.array(kn.jac_grad(t, *x, *u), dtype=float)
        out = self._check(out, t, x, u, self.dynamics + (self.payoff,))
        return out[: m * m].reshape(m, m), out[m * m:]


@dataclass(frozen=True)
class _Kernels:
    f: object
    g: object
    fg: object
    fjac: object
    ggrad: object
    jac_grad: object


@lru_cache(maxsize=None)
def _build_kernels(dynamics: tuple, payoff, m: int, k: int) -> _Kernels:
    syms = ("t",) + tuple(f"x{i + 1}" for i in range(m)) + tuple(f"u{i + 1}" for i in range(k))
    vals = [("value", e) for e in dynamics]
    jac = [("deriv", e, f"x{j + 1}") for e in dynamics for j in range(m)]
    grad = [("deriv", payoff, f"x{j + 1}") for j in range(m)]
    return _Kernels(
        f=ex.compile_kernel(vals, syms),
        g=ex.compile_kernel([("value", payoff)], syms),
        fg=ex.compile_kernel(vals + [("value", payoff)], syms),
        fjac=ex.compile_kernel(jac, syms),
        ggrad=ex.compile_kernel(grad, syms),
        jac_grad=ex.compile_kernel(jac + grad, syms),
    )


def kernels(p: ControlProblem) -> _Kernels:
    """Compiled evaluation kernels for a problem (cached on the instance)."""
    try:
        return p._kernel_cache
    except AttributeError:
        kn = _build_kernels(p.dynamics, p.payoff, p.state_dim, p.control_dim)
        object.__setattr__(p, "_kernel_cache", kn)
        return kn


# ---------------------------------------------------------------------------
# Loading / saving
# ---------------------------------------------------------------------------


def _require(cfg: dict, key: str, path: str = ""):
    if key not in cfg:
        raise ProblemConfigError(f"{path}{key}", "missing field")
    return cfg[key]


def load_problem(config) -> ControlProblem:
    """Build a validated :class:`ControlProblem` from a dict, JSON text or path."""
    if isinstance(config, (str, Path)):
        p = Path(config)
        if p.exists():
            text = p.read_text()
        elif isinstance(config, Path):
            raise FileNotFoundError(f"problem file not found: {config}")
        else:
            text = config
        try:
            config = json.loads(text)
        except json.JSONDecodeError as err:
            raise ProblemConfigError("<document>", f"not valid JSON: {err}") from None
    if not isinstance(config, dict):
        raise ProblemConfigError("<document>", "expected a JSON object")

    m = int(_require(config, "state_dim"))
    k = int(_require(config, "control_dim"))
    if m < 1 or k < 1:
        raise ProblemConfigError("state_dim", "dimensions must be >= 1")

    dyn_src = _require(config, "dynamics")
    if not isinstance(dyn_src, (list, tuple)) or len(dyn_src) != m:
        raise ProblemConfigError("dynamics", f"expected {m} expression strings")
    payoff_src = _require(config, "payoff")

    syms = ("t",) + tuple(f"x{i + 1}" for i in range(m)) + tuple(f"u{i + 1}" for i in range(k))

    def parse_field(src, fieldpath):
        try:
            return ex.parse(src, syms)
        except ex.ExprError as err:
            raise ProblemConfigError(fieldpath, str(err)) from None

    dynamics = tuple(parse_field(s, f"dynamics[{i}]") for i, s in enumerate(dyn_src))
    payoff = parse_field(payoff_src, "payoff")

    ctl = _require(config, "control")
    kind = _require(ctl, "kind", "control.")
    if kind == "box":
        lo = _require(ctl, "lower", "control.")
        hi = _require(ctl, "upper", "control.")
        if len(lo) != k or len(hi) != k:
            raise ProblemConfigError("control.lower", f"expected {k} bound expressions")
        try:
            control_set = _box_control_set([str(s) for s in lo], [str(s) for s in hi])
        except ex.ExprError as err:
            raise ProblemConfigError("control.lower/upper", str(err)) from None
    elif kind == "finite":
        control_set = _finite_control_set(_require(ctl, "points", "control."))
        if control_set.points.shape[1] != k:
            raise ProblemConfigError("control.points", f"points must have {k} coordinates")
    else:
        raise ProblemConfigError("control.kind", f"unknown kind '{kind}'")

    x0 = np.asarray(config.get("x0", np.zeros(m)), dtype=float)
    if x0.shape != (m,):
        raise ProblemConfigError("x0", f"expected length {m}, got shape {x0.shape}")

    reference = None
    if "reference" in config and config["reference"] is not None:
        ref = config["reference"]
        rkind = _require(ref, "kind", "reference.")
        if rkind == "closed-loop":
            srcs = _require(ref, "exprs", "reference.")
            if len(srcs) != k:
                raise ProblemConfigError("reference.exprs", f"expected {k} expressions")
            try:
                reference = closed_loop_control([str(s) for s in srcs], m)
            except ex.ExprError as err:
                raise ProblemConfigError("reference.exprs", str(err)) from None
        elif rkind == "piecewise":
            reference = piecewise_control(_require(ref, "grid", "reference."), _require(ref, "values", "reference."))
            if reference.control_dim != k:
                raise ProblemConfigError("reference.values", f"values must have {k} coordinates")
        else:
            raise ProblemConfigError("reference.kind", f"unknown kind '{rkind}'")

    return ControlProblem(
        state_dim=m,
        control_dim=k,
        dynamics=dynamics,
        dynamics_src=tuple(str(s) for s in dyn_src),
        payoff=payoff,
        payoff_src=str(payoff_src),
        control_set=control_set,
        x0=x0,
        label=str(config.get("label", "")),
        reference=reference,
    )


def save_problem(p: ControlProblem) -> dict:
    """Canonical config dict; ``load_problem(save_problem(p))`` rebuilds p."""
    cfg = {
        "state_dim": p.state_dim,
        "control_dim": p.control_dim,
        "dynamics": list(p.dynamics_src),
        "payoff": p.payoff_src,
        "x0": [float(v) for v in p.x0],
        "label": p.label,
    }
    if p.control_set.kind == "box":
        cfg["control"] = {
            "kind": "box",
            "lower": list(p.control_set.lower_src),
            "upper": list(p.control_set.upper_src),
        }
    else:
        cfg["control"] = {"kind": "finite", "points": p.control_set.points.tolist()}
    if p.reference is not None:
        if p.reference.kind == "closed-loop":
            cfg["reference"] = {"kind": "closed-loop", "exprs": list(p.reference.exprs_src)}
        else:
            cfg["reference"] = {
                "kind": "piecewise",
                "grid": p.reference.grid.tolist(),
                "values": p.reference.values.tolist(),
            }
    return cfg


# ---------------------------------------------------------------------------
# Builtin benchmark registry
# ---------------------------------------------------------------------------

# Each builtin documents its closed forms along the reference control, used as
# oracles throughout the test suite.  All four have x(0) = 0 and a fundamental
# matrix A(t) = exp(a*t) with constant a, so every limit below is elementary.
_BUILTINS: dict[str, tuple[str, dict]] = {
    "scalar-exp": (
        "scalar discounted problem with interior optimum u=0; "
        "along it g_x = exp(-t), I(T) -> 1, multiplier 1/2, costate exp(-T)/2",
        {
            "state_dim": 1,
            "control_dim": 1,
            "dynamics": ["u1"],
            "payoff": "exp(-t)*(x1 - x1*x1 - u1 - u1*u1/2)",
            "control": {"kind": "box", "lower": ["-1"], "upper": ["1"]},
            "x0": [0.0],
            "label": "scalar-exp",
            "reference": {"kind": "closed-loop", "exprs": ["0"]},
        },
    ),
    "halkin": (
        "bounded-payoff problem whose costate is the constant -1/2: the plain "
        "limit condition fails while the matrix-weighted one holds",
        {
            "state_dim": 1,
            "control_dim": 1,
            "dynamics": ["(1 - x1)*u1"],
            "payoff": "(1 - x1)*u1",
            "control": {"kind": "box", "lower": ["0"], "upper": ["1"]},
            "x0": [0.0],
            "label": "halkin",
            "reference": {"kind": "closed-loop", "exprs": ["1"]},
        },
    ),
    "lq-discounted": (
        "stable linear dynamics with quadratic control cost; interior optimum "
        "u=2/3, multiplier 3/5, costate (2/5)exp(-T)",
        {
            "state_dim": 1,
            "control_dim": 1,
            "dynamics": ["-x1/2 + u1"],
            "payoff": "exp(-t)*(x1 - u1*u1/2)",
            "control": {"kind": "box", "lower": ["-2"], "upper": ["2"]},
            "x0": [0.0],
            "label": "lq-discounted",
            "reference": {"kind": "closed-loop", "exprs": ["2/3"]},
        },
    ),
    "monotone-growth": (
        "monotone case: g_x = exp(-t) > 0 and f_x = 0, bang reference u=1, "
        "sign-definite costate exp(-T)/2",
        {
            "state_dim": 1,
            "control_dim": 1,
            "dynamics": ["u1"],
            "payoff": "exp(-t)*x1",
            "control": {"kind": "box", "lower": ["0"], "upper": ["1"]},
            "x0": [0.0],
            "label": "monotone-growth",
            "reference": {"kind": "closed-loop", "exprs": ["1"]},
        },
    ),
}


def builtin_names() -> list[str]:
    return list(_BUILTINS.keys())


def builtin_descriptions() -> list[tuple[str, str]]:
    return [(name, desc) for name, (desc, _) in _BUILTINS.items()]


def builtin(name: str) -> ControlProblem:
    """Named benchmark problem with documented closed-form data."""
    if name not in _BUILTINS:
        raise UnknownBuiltinError(name)
    return load_problem(_BUILTINS[name][1])


# ---------------------------------------------------------------------------
# Structural validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    entries: list = field(default_factory=list)  # (check id, passed, detail)

    def add(self, check: str, passed: bool, detail: str = ""):
        self.entries.append((check, bool(passed), detail))

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.entries)

    def failures(self) -> list:
        return [e for e in self.entries if not e[1]]


def _probe_states(probe_box: np.ndarray) -> np.ndarray:
    """Corner/edge/center mesh of the probe box: 3 values per coordinate."""
    lo = probe_box[:, 0]
    hi = probe_box[:, 1]
    axes = [np.array([l, 0.5 * (l + h), h]) for l, h in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def validate(p: ControlProblem, probe_grid, probe_box) -> ValidationReport:
    """Numerically probe boundedness of f, g, their x-derivatives, and the
    compactness of the control set, on the given time grid and state box.

    These are desk-scale probes of the structural hypotheses, not proofs; the
    report carries every failure with its location instead of raising.
    """
    report = ValidationReport()
    probe_grid = np.asarray(probe_grid, dtype=float)
    probe_box = np.asarray(probe_box, dtype=float).reshape(p.state_dim, 2)

    # control-set compactness
    if p.control_set.kind == "finite":
        n = 0 if p.control_set.points is None else len(p.control_set.points)
        report.add("control-compact", n > 0, "finite control set is empty" if n == 0 else f"{n} points")
        controls = p.control_set.points if n else np.zeros((0, p.control_dim))
        controls_at = {float(t): controls for t in probe_grid}
    else:
        ok = True
        detail = "bounds finite and ordered on probe grid"
        controls_at = {}
        for t in probe_grid:
            try:
                lo, hi = p.control_set.bounds_at(float(t))
            except ex.ExprError as err:
                ok, detail = False, f"non-finite bound at t={t:g}: {err}"
                controls_at[float(t)] = np.zeros((0, p.control_dim))
                continue
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                ok, detail = False, f"non-finite bound at t={t:g}"
            elif np.any(lo > hi):
                ok, detail = False, f"lower > upper at t={t:g}"
            axes = [np.array([l, 0.5 * (l + h), h]) for l, h in zip(np.atleast_1d(lo), np.atleast_1d(hi))]
            mesh = np.meshgrid(*axes, indexing="ij")
            controls_at[float(t)] = np.stack([g.ravel() for g in mesh], axis=-1)
        report.add("control-compact", ok, detail)

    states = _probe_states(probe_box)

    def probe(label, fn):
        for t in probe_grid:
            for u in controls_at[float(t)]:
                for x in states:
                    try:
                        val = fn(float(t), x, u)
                    except ex.ExprError as err:
                        report.add(label, False, f"at t={t:g}, x={x}, u={u}: {err}")
                        return
                    if not np.all(np.isfinite(val)):
                        report.add(label, False, f"non-finite at t={t:g}, x={x}, u={u}")
                        return
        report.add(label, True, "finite on probe set")

    probe("dynamics-bounded", p.f)
    probe("payoff-bounded", p.g)
    probe("dynamics-jacobian", p.f_jacobian_x)
    probe("payoff-gradient", p.g_gradient_x)
    return report
