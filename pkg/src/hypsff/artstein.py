"""Compensation of the finite-dimensional block through a boundary integral.

The moment kernel N(z) is integrated in the auxiliary variable M = N Lam+,
which obeys a matrix-valued initial value problem with the closed-loop-style
matrix F_bar = F - B Q_right C on the left; dividing by Lam+ only at output
nodes avoids ever differentiating the velocity profile.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctrl_algebra import BoundaryAlgebra, hautus_check
from .model import (
    GeneralizedCouplingSpec,
    Grid1D,
    MatrixField1D,
    PdeOdeSystem,
    _readonly,
    cumulative_trapezoid_weights,
    diag_profile,
    resample,
)


@dataclass(frozen=True)
class ArtsteinKernel:
    """Moment kernel and the matrices of the compensated ODE block."""

    N: MatrixField1D
    F_bar: np.ndarray
    B_bar: np.ndarray
    BQperp: np.ndarray

    def __post_init__(self):
        n0, n_plus = self.N.shape
        f = _readonly(np.atleast_2d(self.F_bar))
        b = _readonly(np.atleast_2d(self.B_bar))
        p = _readonly(np.atleast_2d(self.BQperp))
        if f.shape != (n0, n0):
            raise ValueError("F_bar must be (n0, n0)")
        if b.shape != (n0, n_plus):
            raise ValueError("B_bar must be (n0, n_plus)")
        if p.shape[0] != n0:
            raise ValueError("BQperp must have n0 rows")
        object.__setattr__(self, "F_bar", f)
        object.__setattr__(self, "B_bar", b)
        object.__setattr__(self, "BQperp", p)

    @property
    def grid(self) -> Grid1D:
        return self.N.grid

    @property
    def n0(self) -> int:
        return self.N.shape[0]


def solve_N(sys: PdeOdeSystem, algebra: BoundaryAlgebra,
            grid: Grid1D = None) -> ArtsteinKernel:
    """Integrate the moment kernel across the domain.

    Classical 4-stage one-step integration of dM/dz = F_bar M Lam+(z)^{-1}
    from M(0) = B Q_right; half-step velocities are node averages.  Callers
    are expected to have checked controllability of (F, B) and full row rank
    of Q beforehand.
    """
    g = grid or sys.base.grid
    lam = diag_profile(resample(sys.base.lambda_plus, g))
    F_bar = sys.F - sys.B @ algebra.Q_right @ sys.C
    h = g.h
    M = sys.B @ algebra.Q_right
    samples = [M]
    for k in range(g.n_cells):
        l0, l1 = lam[k], lam[k + 1]
        lh = 0.5 * (l0 + l1)
        k1 = F_bar @ (M / l0[None, :])
        k2 = F_bar @ ((M + 0.5 * h * k1) / lh[None, :])
        k3 = F_bar @ ((M + 0.5 * h * k2) / lh[None, :])
        k4 = F_bar @ ((M + h * k3) / l1[None, :])
        M = M + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        samples.append(M)
    Mv = np.stack(samples)
    N = MatrixField1D(g, Mv / lam[:, None, :])
    return ArtsteinKernel(N=N, F_bar=F_bar, B_bar=Mv[-1],
                          BQperp=sys.B @ algebra.Q_perp)


def controllability_preserved(kernel: ArtsteinKernel) -> bool:
    """Eigenvalue-wise rank test of the compensated pair.

    True whenever the original ODE pair is controllable and the reflection
    matrix has full row rank; a false verdict flags a precondition breach.
    """
    inputs = np.hstack([kernel.B_bar, kernel.BQperp])
    return hautus_check(kernel.F_bar, inputs)


def _moment_integral(kernel: ArtsteinKernel, x_plus: np.ndarray) -> np.ndarray:
    g = kernel.grid
    w = cumulative_trapezoid_weights(g.n_nodes)[-1]
    return g.h * np.einsum("k,kab,kb->a", w, kernel.N.values,
                           np.asarray(x_plus, dtype=float))


def apply_artstein(kernel: ArtsteinKernel, xi: np.ndarray,
                   x_plus: np.ndarray) -> np.ndarray:
    """xi_bar = xi minus the moment integral of the co-propagating state."""
    return np.asarray(xi, dtype=float) - _moment_integral(kernel, x_plus)


def invert_artstein(kernel: ArtsteinKernel, xi_bar: np.ndarray,
                    x_plus: np.ndarray) -> np.ndarray:
    """Additive inverse of apply_artstein under the same quadrature."""
    return np.asarray(xi_bar, dtype=float) + _moment_integral(kernel, x_plus)


def assemble_pdeode_sff(sys: PdeOdeSystem, kernel: ArtsteinKernel,
                        algebra: BoundaryAlgebra) -> GeneralizedCouplingSpec:
    """Simulator description of the compensated cascade.

    Pure transports; the ODE block sees x^+(1) through B_bar and the residual
    boundary components through B Q_perp; the z = 0 boundary condition picks
    up the moment integral of x^+ next to the usual reflection.
    """
    base = sys.base
    g = kernel.grid
    CN = np.einsum("ab,kbc->kac", sys.C, kernel.N.values)
    dn = algebra.n_residual
    return GeneralizedCouplingSpec(
        n_minus=base.n_minus, n_plus=base.n_plus, grid=g,
        lambda_minus=resample(base.lambda_minus, g),
        lambda_plus=resample(base.lambda_plus, g),
        q_bc=base.Q, r_bc=base.R,
        bc0_plus_integral=MatrixField1D(g, CN),
        bc0_ode=sys.C,
        x2_selector=algebra.Q_perp_left if dn else None,
        n_ode=sys.n0,
        ode_sys=kernel.F_bar,
        ode_from_plus_trace1=kernel.B_bar,
        ode_from_x2=kernel.BQperp if dn else None,
    )
