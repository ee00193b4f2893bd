"""Grid-sampled system descriptions shared by the kernel solvers and the simulator.

All coefficient functions live on a uniform grid over [0, 1] and are
interpolated linearly between nodes.  Types are immutable after construction;
the arrays they hold are marked read-only so instances can be shared freely.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


def _readonly(a) -> np.ndarray:
    # always copy: freezing a caller-owned array in place would be a surprise
    out = np.array(a, dtype=float, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on [0, 1] with nodes z_k = k*h, h = 1/n_cells."""

    n_cells: int

    def __post_init__(self):
        if self.n_cells < 2:
            raise ValueError("Grid1D needs n_cells >= 2, got %d" % self.n_cells)

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @property
    def nodes(self) -> np.ndarray:
        return _readonly(np.arange(self.n_nodes) * self.h)


def _interp_weights(grid: Grid1D, z: float):
    """Index pair and weight for linear interpolation at z, clipped to [0, 1]."""
    pos = min(max(z, 0.0), 1.0) / grid.h
    k = min(int(pos), grid.n_cells - 1)
    return k, pos - k


@dataclass(frozen=True)
class MatrixField1D:
    """Matrix-valued function of z, sampled at the grid nodes."""

    grid: Grid1D
    values: np.ndarray  # (n_nodes, r, c)

    def __post_init__(self):
        v = _readonly(self.values)
        if v.ndim != 3:
            raise ValueError("MatrixField1D values must be (n_nodes, r, c)")
        if v.shape[0] != self.grid.n_nodes:
            raise ValueError(
                "field has %d samples, grid has %d nodes" % (v.shape[0], self.grid.n_nodes)
            )
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape[1:]

    @classmethod
    def constant(cls, grid: Grid1D, matrix) -> "MatrixField1D":
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(grid, np.broadcast_to(m, (grid.n_nodes,) + m.shape))

    @classmethod
    def from_callable(cls, grid: Grid1D, fn: Callable[[float], np.ndarray]) -> "MatrixField1D":
        vals = np.stack([np.atleast_2d(np.asarray(fn(z), dtype=float)) for z in grid.nodes])
        return cls(grid, vals)

    def at(self, z: float) -> np.ndarray:
        k, w = _interp_weights(self.grid, z)
        a, b = self.values[k], self.values[k + 1]
        return a + w * (b - a)


def resample(field: MatrixField1D, target: Grid1D) -> MatrixField1D:
    """Linear interpolation of a field onto another grid; exact at shared nodes."""
    vals = np.stack([field.at(z) for z in target.nodes])
    return MatrixField1D(target, vals)


def cumulative_trapezoid_weights(n_nodes: int) -> np.ndarray:
    """Coefficient matrix for integrals over [0, z_k]: row k holds the trapezoid
    coefficients (0.5, 1, ..., 1, 0.5) on nodes 0..k, zeros beyond; the h factor
    is applied by the caller after summation."""
    w = np.tril(np.ones((n_nodes, n_nodes)))
    idx = np.arange(n_nodes)
    w[idx, idx] = 0.5
    w[:, 0] = 0.5
    w[0, 0] = 0.0
    return w


def tail_trapezoid_weights(n_nodes: int) -> np.ndarray:
    """Coefficient matrix for integrals over [z_k, 1]; row n_nodes-1 is zero."""
    w = np.triu(np.ones((n_nodes, n_nodes)))
    idx = np.arange(n_nodes)
    w[idx, idx] = 0.5
    w[:, -1] = 0.5
    w[-1, -1] = 0.0
    return w


def diag_profile(field: MatrixField1D) -> np.ndarray:
    """Diagonal entries of a square matrix field, shape (n_nodes, n)."""
    r, c = field.shape
    if r != c:
        raise ValueError("diag_profile needs a square field")
    return np.einsum("kii->ki", field.values).copy()


def field_from_diag(grid: Grid1D, diag) -> MatrixField1D:
    """Diagonal matrix field from per-component node samples (n_nodes, n) or (n,)."""
    d = np.asarray(diag, dtype=float)
    if d.ndim == 1:
        d = np.broadcast_to(d, (grid.n_nodes, d.shape[0]))
    vals = np.zeros((grid.n_nodes, d.shape[1], d.shape[1]))
    for i in range(d.shape[1]):
        vals[:, i, i] = d[:, i]
    return MatrixField1D(grid, vals)


class _KernelField:
    """Shared storage/validation for kernel samples on (z_k, zeta_j) node pairs."""

    def _init_values(self, values, zero_upper: bool):
        v = np.array(values, dtype=float)
        n = self.grid.n_nodes
        if v.ndim != 4 or v.shape[0] != n or v.shape[1] != n:
            raise ValueError("kernel values must be (n_nodes, n_nodes, r, c)")
        if zero_upper:
            # samples with zeta > z are outside the triangle; keep the storage clean
            iu = np.triu_indices(n, k=1)
            v[iu[0], iu[1]] = 0.0  # v[k, j] with j > k
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape[2:]


@dataclass(frozen=True)
class TriKernelField(_KernelField):
    """Kernel samples on the triangle 0 <= zeta <= z <= 1; values[k, j] = K(z_k, zeta_j)."""

    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        self._init_values(self.values, zero_upper=True)

    def node(self, k: int, j: int) -> np.ndarray:
        if j > k:
            raise IndexError("sample (z_%d, zeta_%d) lies outside the triangle" % (k, j))
        return self.values[k, j]


@dataclass(frozen=True)
class SqKernelField(_KernelField):
    """Kernel samples on the full square [0, 1]^2; values[k, j] = P(z_k, zeta_j)."""

    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        self._init_values(self.values, zero_upper=False)

    def node(self, k: int, j: int) -> np.ndarray:
        return self.values[k, j]


def _check_field(name, fld, grid, shape):
    if fld.grid != grid:
        raise ValueError("%s is sampled on a different grid" % name)
    if fld.shape != shape:
        raise ValueError("%s has shape %s, expected %s" % (name, fld.shape, shape))


@dataclass(frozen=True)
class HyperbolicSystem:
    """Two counter-propagating transport families with in-domain and boundary coupling.

    The x^- family (n_minus components) travels toward z = 0, the x^+ family
    (n_plus components) toward z = 1.  Couplings A_mm, A_mp act in the x^-
    equation, A_pm, A_pp in the x^+ equation.  Q closes the z = 0 boundary,
    R the z = 1 boundary where the input u enters.
    """

    n_minus: int
    n_plus: int
    lambda_minus: MatrixField1D
    lambda_plus: MatrixField1D
    A_mm: MatrixField1D
    A_mp: MatrixField1D
    A_pm: MatrixField1D
    A_pp: MatrixField1D
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        nm, npl = self.n_minus, self.n_plus
        if nm < 1 or npl < 1:
            raise ValueError("component counts must be positive")
        g = self.lambda_minus.grid
        _check_field("lambda_minus", self.lambda_minus, g, (nm, nm))
        _check_field("lambda_plus", self.lambda_plus, g, (npl, npl))
        _check_field("A_mm", self.A_mm, g, (nm, nm))
        _check_field("A_mp", self.A_mp, g, (nm, npl))
        _check_field("A_pm", self.A_pm, g, (npl, nm))
        _check_field("A_pp", self.A_pp, g, (npl, npl))
        q = _readonly(np.atleast_2d(self.Q))
        r = _readonly(np.atleast_2d(self.R))
        if q.shape != (npl, nm):
            raise ValueError("Q must be (n_plus, n_minus)")
        if r.shape != (nm, npl):
            raise ValueError("R must be (n_minus, n_plus)")
        object.__setattr__(self, "Q", q)
        object.__setattr__(self, "R", r)

    @property
    def grid(self) -> Grid1D:
        return self.lambda_minus.grid


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple

    @property
    def ok(self) -> bool:
        return not self.issues


def validate_system(sys: HyperbolicSystem) -> ValidationReport:
    """Check the semantic invariants of a system, returning all violations."""
    issues = []
    if sys.n_plus > sys.n_minus:
        issues.append("n_plus = %d exceeds n_minus = %d" % (sys.n_plus, sys.n_minus))
    for name, fld in (("lambda_minus", sys.lambda_minus), ("lambda_plus", sys.lambda_plus)):
        vals = fld.values
        off = vals - np.einsum("ki,ij->kij", np.einsum("kii->ki", vals), np.eye(vals.shape[1]))
        if np.any(off != 0.0):
            issues.append("%s is not diagonal" % name)
        d = np.einsum("kii->ki", vals)
        if np.any(d <= 0.0):
            issues.append("%s has non-positive entries" % name)
        if d.shape[1] > 1 and np.any(np.diff(d, axis=1) >= 0.0):
            issues.append("%s velocity ordering not strict" % name)
    for name, fld in (("A_mm", sys.A_mm), ("A_pp", sys.A_pp)):
        if np.any(np.einsum("kii->ki", fld.values) != 0.0):
            issues.append("nonzero diagonal of %s" % name)
    return ValidationReport(tuple(issues))


@dataclass(frozen=True)
class PdeOdeSystem:
    """Pure transports bidirectionally coupled with a finite-dimensional block.

    The ODE state xi is driven by the x^- exit trace; C feeds xi back into the
    z = 0 boundary condition of x^+.
    """

    base: HyperbolicSystem
    n0: int
    F: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        if self.n0 < 1:
            raise ValueError("n0 must be positive")
        for name in ("A_mm", "A_mp", "A_pm", "A_pp"):
            if np.any(getattr(self.base, name).values != 0.0):
                raise ValueError("PdeOdeSystem requires zero in-domain couplings (%s)" % name)
        f = _readonly(np.atleast_2d(self.F))
        b = _readonly(np.atleast_2d(self.B))
        c = _readonly(np.atleast_2d(self.C))
        if f.shape != (self.n0, self.n0):
            raise ValueError("F must be (n0, n0)")
        if b.shape != (self.n0, self.base.n_minus):
            raise ValueError("B must be (n0, n_minus)")
        if c.shape != (self.base.n_plus, self.n0):
            raise ValueError("C must be (n_plus, n0)")
        object.__setattr__(self, "F", f)
        object.__setattr__(self, "B", b)
        object.__setattr__(self, "C", c)

    @property
    def grid(self) -> Grid1D:
        return self.base.grid


@dataclass(frozen=True)
class StateSnapshot:
    """State at one time instant, sampled on the grid nodes."""

    t: float
    x_minus: np.ndarray  # (n_nodes, n_minus)
    x_plus: np.ndarray  # (n_nodes, n_plus)
    xi: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "x_minus", _readonly(self.x_minus))
        object.__setattr__(self, "x_plus", _readonly(self.x_plus))
        if self.xi is not None:
            object.__setattr__(self, "xi", _readonly(self.xi))


@dataclass(frozen=True)
class Trajectory:
    """Uniformly time-stamped sequence of state snapshots."""

    times: np.ndarray
    x_minus: np.ndarray  # (n_snapshots, n_nodes, n_minus)
    x_plus: np.ndarray
    xi: Optional[np.ndarray] = None  # (n_snapshots, n0)

    def __post_init__(self):
        object.__setattr__(self, "times", _readonly(self.times))
        object.__setattr__(self, "x_minus", _readonly(self.x_minus))
        object.__setattr__(self, "x_plus", _readonly(self.x_plus))
        if self.xi is not None:
            object.__setattr__(self, "xi", _readonly(self.xi))
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("snapshot times must increase")

    @property
    def n_snapshots(self) -> int:
        return len(self.times)

    def snapshot(self, m: int) -> StateSnapshot:
        xi = None if self.xi is None else self.xi[m]
        return StateSnapshot(float(self.times[m]), self.x_minus[m], self.x_plus[m], xi)


def _opt_matrix(m, shape, name):
    if m is None:
        return None
    a = _readonly(np.atleast_2d(m))
    if a.shape != shape:
        raise ValueError("%s has shape %s, expected %s" % (name, a.shape, shape))
    return a


@dataclass(frozen=True)
class GeneralizedCouplingSpec:
    """Simulator-facing description of one coupled transport(/ODE) system.

    Each optional term names the signal it multiplies.  Terms in the x^+
    equation: plus_local (x^+(z,t)), plus_trace0 (x^+(0,t)), plus_trace1
    (x^+(1,t)), plus_integral (integral of x^+ over [z, 1]), plus_from_minus_local
    (x^-(z,t)), plus_from_x2 (residual boundary components x2_selector @ x^-(0,t)).
    Terms in the x^- equation: minus_local, minus_trace0 (x^-(0,t)),
    minus_integral (over [0, z]), minus_from_plus_local, minus_from_plus_trace1,
    minus_from_plus_integral (over [z, 1]).  Boundary conditions:
    x^+(0) = q_bc x^-(0) + bc0_plus_integral-term + bc0_ode xi and
    x^-(1) = r_bc x^+(1) + u.  The optional ODE block drives
    xi' = ode_sys xi + ode_from_minus_trace0 x^-(0) + ode_from_plus_trace1 x^+(1)
    + ode_from_x2 (x2 signal).
    """

    n_minus: int
    n_plus: int
    grid: Grid1D
    lambda_minus: MatrixField1D
    lambda_plus: MatrixField1D
    q_bc: np.ndarray
    r_bc: Optional[np.ndarray] = None
    plus_local: Optional[MatrixField1D] = None
    plus_trace0: Optional[MatrixField1D] = None
    plus_trace1: Optional[MatrixField1D] = None
    plus_integral: Optional[SqKernelField] = None
    plus_from_minus_local: Optional[MatrixField1D] = None
    plus_from_x2: Optional[MatrixField1D] = None
    minus_local: Optional[MatrixField1D] = None
    minus_trace0: Optional[MatrixField1D] = None
    minus_integral: Optional[SqKernelField] = None
    minus_from_plus_local: Optional[MatrixField1D] = None
    minus_from_plus_trace1: Optional[MatrixField1D] = None
    minus_from_plus_integral: Optional[SqKernelField] = None
    bc0_plus_integral: Optional[MatrixField1D] = None
    x2_selector: Optional[np.ndarray] = None
    n_ode: int = 0
    ode_sys: Optional[np.ndarray] = None
    ode_from_minus_trace0: Optional[np.ndarray] = None
    ode_from_plus_trace1: Optional[np.ndarray] = None
    ode_from_x2: Optional[np.ndarray] = None
    bc0_ode: Optional[np.ndarray] = None

    def __post_init__(self):
        nm, npl, n0 = self.n_minus, self.n_plus, self.n_ode
        dn = nm - npl
        g = self.grid
        _check_field("lambda_minus", self.lambda_minus, g, (nm, nm))
        _check_field("lambda_plus", self.lambda_plus, g, (npl, npl))
        object.__setattr__(self, "q_bc", _opt_matrix(self.q_bc, (npl, nm), "q_bc"))
        object.__setattr__(self, "r_bc", _opt_matrix(self.r_bc, (nm, npl), "r_bc"))
        fields = {
            "plus_local": (npl, npl), "plus_trace0": (npl, npl), "plus_trace1": (npl, npl),
            "plus_from_minus_local": (npl, nm), "plus_from_x2": (npl, dn),
            "minus_local": (nm, nm), "minus_trace0": (nm, nm),
            "minus_from_plus_local": (nm, npl), "minus_from_plus_trace1": (nm, npl),
            "bc0_plus_integral": (npl, npl),
        }
        for name, shape in fields.items():
            fld = getattr(self, name)
            if fld is not None:
                _check_field(name, fld, g, shape)
        kernels = {
            "plus_integral": (npl, npl), "minus_integral": (nm, nm),
            "minus_from_plus_integral": (nm, npl),
        }
        for name, shape in kernels.items():
            ker = getattr(self, name)
            if ker is not None:
                if ker.grid != g or ker.shape != shape:
                    raise ValueError("%s kernel has wrong grid or shape" % name)
        object.__setattr__(self, "x2_selector", _opt_matrix(self.x2_selector, (dn, nm), "x2_selector"))
        if (self.plus_from_x2 is not None or self.ode_from_x2 is not None) and self.x2_selector is None:
            raise ValueError("x2 terms require x2_selector")
        if n0:
            object.__setattr__(self, "ode_sys", _opt_matrix(self.ode_sys, (n0, n0), "ode_sys"))
            object.__setattr__(self, "ode_from_minus_trace0",
                               _opt_matrix(self.ode_from_minus_trace0, (n0, nm), "ode_from_minus_trace0"))
            object.__setattr__(self, "ode_from_plus_trace1",
                               _opt_matrix(self.ode_from_plus_trace1, (n0, npl), "ode_from_plus_trace1"))
            object.__setattr__(self, "ode_from_x2", _opt_matrix(self.ode_from_x2, (n0, dn), "ode_from_x2"))
            object.__setattr__(self, "bc0_ode", _opt_matrix(self.bc0_ode, (npl, n0), "bc0_ode"))
        else:
            for name in ("ode_sys", "ode_from_minus_trace0", "ode_from_plus_trace1",
                         "ode_from_x2", "bc0_ode"):
                if getattr(self, name) is not None:
                    raise ValueError("%s given but n_ode = 0" % name)

    @property
    def has_ode(self) -> bool:
        return self.n_ode > 0
