"""Secondary transformation that lower-triangularizes the in-domain coupling.

The kernel P_I is strictly lower triangular at every sample, which makes the
transformation invertible by plain forward substitution over the component
index: component 1 is copied, every later component only sees already-known
ones under the integral.  The same substitution yields the transformed
coupling matrices without solving any integral equation iteratively.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    Grid1D,
    MatrixField1D,
    SqKernelField,
    cumulative_trapezoid_weights,
    diag_profile,
    resample,
)


def _strictly_lower_or_raise(values: np.ndarray, name: str):
    n = values.shape[1]
    iu = np.triu_indices(n)
    if np.any(values[:, iu[0], iu[1]] != 0.0):
        raise ValueError("%s must be strictly lower triangular" % name)


@dataclass(frozen=True)
class SffCoefficients:
    """Coupling matrices of the strict-feedback form.

    A0_minus rides along because the final form keeps the boundary-trace
    coupling of the counter-propagating family unchanged.
    """

    A0_tilde_plus: MatrixField1D
    B0_tilde_plus: MatrixField1D
    A0_minus: MatrixField1D

    def __post_init__(self):
        _strictly_lower_or_raise(self.A0_tilde_plus.values, "A0_tilde_plus")
        _strictly_lower_or_raise(self.A0_minus.values, "A0_minus")


@dataclass(frozen=True)
class FredholmKernel:
    """Strictly lower triangular kernel of the secondary transformation.

    The z = 0 row vanishes away from the corner; the corner sample sits on
    the dividing characteristic and carries the zeta = 0 side value.
    """

    P_I: SqKernelField

    def __post_init__(self):
        v = self.P_I.values
        iu = np.triu_indices(self.n_plus)
        if np.any(v[:, :, iu[0], iu[1]] != 0.0):
            raise ValueError("P_I must be strictly lower triangular")
        if np.any(v[0, 1:] != 0.0):
            raise ValueError("P_I must vanish on the z = 0 edge")

    @property
    def grid(self) -> Grid1D:
        return self.P_I.grid

    @property
    def n_plus(self) -> int:
        return self.P_I.values.shape[2]


def _travel_time(lam: np.ndarray, h: float) -> np.ndarray:
    inv = 1.0 / lam
    phi = np.zeros_like(lam)
    phi[1:] = np.cumsum(0.5 * h * (inv[:-1] + inv[1:]), axis=0)
    return phi


def solve_PI(A0_plus: MatrixField1D, lambda_plus: MatrixField1D,
             grid: Grid1D) -> FredholmKernel:
    """Trace each strictly-lower kernel component back to its inflow edge.

    P_ij(z,zeta) * lam_j(zeta) is constant along the characteristic through
    (z, zeta), so every sample is read off directly at the foot point: zero
    when the path leaves through z = 0, the in-domain coupling over the foot
    velocity when it leaves through zeta = 0.  Samples on the dividing
    characteristic through the corner take the zeta = 0 side.
    """
    a0 = resample(A0_plus, grid).values
    lam = diag_profile(resample(lambda_plus, grid))
    n_pl = lam.shape[1]
    iu = np.triu_indices(n_pl)
    if np.any(a0[:, iu[0], iu[1]] != 0.0):
        raise ValueError("in-domain coupling must be strictly lower triangular")
    n = grid.n_nodes
    z = grid.nodes
    phi = _travel_time(lam, grid.h)
    P = np.zeros((n, n, n_pl, n_pl))
    for i in range(n_pl):
        for j in range(i):
            c = phi[:, i][:, None] - phi[:, j][None, :]
            # round-off ties sit on the dividing characteristic; snap them so
            # node-aligned curves deterministically take the zeta = 0 side
            c[np.abs(c) < 1e-12] = 0.0
            foot = np.interp(np.maximum(c, 0.0).ravel(), phi[:, i], z).reshape(n, n)
            val = np.interp(foot.ravel(), z, a0[:, i, j]).reshape(n, n)
            P[:, :, i, j] = np.where(c >= 0.0, val / lam[None, :, j], 0.0)
    return FredholmKernel(SqKernelField(grid, P))


def _solve_rows(P_I: FredholmKernel, rhs: np.ndarray) -> np.ndarray:
    """Solve X(z) + integral of P_I(z,zeta) X(zeta) over zeta = rhs(z).

    Strict triangularity closes the system row by row: row i of X only needs
    rows < i under the integral.
    """
    g = P_I.grid
    w = cumulative_trapezoid_weights(g.n_nodes)[-1]
    P = P_I.P_I.values
    X = np.zeros_like(rhs)
    for i in range(P_I.n_plus):
        coupled = g.h * np.einsum("l,klm,lmj->kj", w, P[:, :, i, :i], X[:, :i, :])
        X[:, i, :] = rhs[:, i, :] - coupled
    return X


def compute_tilde_A0(P_I: FredholmKernel, lambda_plus: MatrixField1D) -> MatrixField1D:
    """Transformed in-domain coupling; strictly lower triangular, first row zero."""
    g = P_I.grid
    lam1 = diag_profile(resample(lambda_plus, g))[-1]
    rhs = P_I.P_I.values[:, -1] * lam1[None, None, :]
    return MatrixField1D(g, _solve_rows(P_I, rhs))


def compute_tilde_B0(P_I: FredholmKernel, B0_plus: MatrixField1D) -> MatrixField1D:
    """Transformed residual-input coupling, same substitution as compute_tilde_A0."""
    b0 = resample(B0_plus, P_I.grid)
    if b0.shape[1] == 0:
        return b0
    return MatrixField1D(P_I.grid, _solve_rows(P_I, b0.values))


def sff_coefficients(P_I: FredholmKernel, lambda_plus: MatrixField1D,
                     B0_plus: MatrixField1D, A0_minus: MatrixField1D) -> SffCoefficients:
    """Bundle the strict-feedback coupling matrices for one kernel."""
    g = P_I.grid
    return SffCoefficients(
        A0_tilde_plus=compute_tilde_A0(P_I, lambda_plus),
        B0_tilde_plus=compute_tilde_B0(P_I, B0_plus),
        A0_minus=resample(A0_minus, g))


def apply_fredholm(P_I: FredholmKernel, x_tilde_plus: np.ndarray) -> np.ndarray:
    """Map the new co-propagating state back to the previous coordinates."""
    g = P_I.grid
    x = np.asarray(x_tilde_plus, dtype=float)
    w = cumulative_trapezoid_weights(g.n_nodes)[-1]
    return x + g.h * np.einsum("l,klab,lb->ka", w, P_I.P_I.values, x)


def invert_fredholm(P_I: FredholmKernel, x_bar_plus: np.ndarray) -> np.ndarray:
    """Forward substitution over components; exact inverse at quadrature level."""
    g = P_I.grid
    xb = np.asarray(x_bar_plus, dtype=float)
    w = cumulative_trapezoid_weights(g.n_nodes)[-1]
    P = P_I.P_I.values
    x = np.zeros_like(xb)
    for i in range(P_I.n_plus):
        coupled = g.h * np.einsum("l,klm,lm->k", w, P[:, :, i, :i], x[:, :i])
        x[:, i] = xb[:, i] - coupled
    return x
