"""Volterra kernels that strip the in-domain coupling from the transport system.

The four kernel blocks live on the triangle 0 <= zeta <= z <= 1 and satisfy
first-order transport equations coupled through their source terms, with data
on the diagonal (trace conditions), on zeta = 0 (a balance that cancels the
boundary trace coupling for indices i <= j), and one extra closure for the
i > j components selectable via bc_mode.  The plus-family blocks are obtained
by re-running the minus-family solver on substituted data; the symmetry is
structural, not re-derived.

The solver iterates: freeze the coupling sources at the previous iterate,
re-solve the transports exactly along characteristics (one-step midpoint
backtracing, foot-value source quadrature), repeat until the sup-norm update
is below iter_tol.  Second-order local steps, first-order global error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctrl_algebra import BoundaryAlgebra, right_inverse
from .model import (
    Grid1D,
    HyperbolicSystem,
    MatrixField1D,
    StateSnapshot,
    TriKernelField,
    cumulative_trapezoid_weights,
    diag_profile,
    resample,
)

HU_Z1_ZERO = "hu"
REMARK2_TAIL = "remark2"
_BC_MODES = (HU_Z1_ZERO, REMARK2_TAIL)

ITER_TOL = 1e-10
MAX_ITER = 200


class DegenerateVelocities(Exception):
    """A trace-condition denominator vanished; velocities are not admissible."""


class NoConvergence(Exception):
    """Fixed-point iteration did not reach iter_tol within max_iter sweeps."""


class SingularStep(Exception):
    """A local inversion factor of the discrete Volterra equation is singular."""


@dataclass(frozen=True)
class VolterraKernelSet:
    """The four kernel blocks of one converged solve, all on the same grid."""

    K_mm: TriKernelField
    K_mp: TriKernelField
    K_pm: TriKernelField
    K_pp: TriKernelField
    bc_mode: str

    def __post_init__(self):
        if self.bc_mode not in _BC_MODES:
            raise ValueError("bc_mode must be one of %s" % (_BC_MODES,))
        g = self.K_mm.grid
        nm = self.K_mm.shape[0]
        npl = self.K_pp.shape[0]
        expected = {
            "K_mm": (nm, nm), "K_mp": (nm, npl), "K_pm": (npl, nm), "K_pp": (npl, npl),
        }
        for name, shape in expected.items():
            blk = getattr(self, name)
            if blk.grid != g:
                raise ValueError("%s lives on a different grid" % name)
            if blk.shape != shape:
                raise ValueError("%s has shape %s, expected %s" % (name, blk.shape, shape))

    @property
    def grid(self) -> Grid1D:
        return self.K_mm.grid

    @property
    def n_minus(self) -> int:
        return self.K_mm.shape[0]

    @property
    def n_plus(self) -> int:
        return self.K_pp.shape[0]


@dataclass(frozen=True)
class TransformedCoefficients:
    """Boundary-trace couplings of the transformed system.

    A0_minus and A0_plus are strictly lower triangular with the zero entries
    set exactly; B0_plus couples the residual part of the z = 0 trace into the
    x^+ family and has zero width when the reflection matrix is square.
    """

    A0_minus: MatrixField1D
    A0_plus: MatrixField1D
    B0_plus: MatrixField1D

    def __post_init__(self):
        for name in ("A0_minus", "A0_plus"):
            v = getattr(self, name).values
            if np.any(np.triu(v) != 0.0):
                raise ValueError("%s must be strictly lower triangular (exact zeros)" % name)


def _degenerate(msg):
    raise DegenerateVelocities(msg)


def diagonal_conditions(sys: HyperbolicSystem):
    """Node-wise diagonal traces of all four kernel blocks.

    Same-family blocks divide by velocity gaps, cross-family blocks by
    velocity sums; the same-family diagonal entries are 0 by convention.
    """
    lam_m = diag_profile(sys.lambda_minus)
    lam_p = diag_profile(sys.lambda_plus)
    tr_mm = _trace_same(sys.A_mm.values, lam_m)
    tr_pp = _trace_same(np.negative(sys.A_pp.values), lam_p)
    tr_mp = _trace_cross(np.negative(sys.A_mp.values), lam_m, lam_p)
    tr_pm = _trace_cross(sys.A_pm.values, lam_p, lam_m)
    g = sys.grid
    return (MatrixField1D(g, tr_mm), MatrixField1D(g, tr_mp),
            MatrixField1D(g, tr_pm), MatrixField1D(g, tr_pp))


def _trace_same(A, lam):
    """K_ij(z,z) = A_ij/(lam_j - lam_i) off-diagonal, 0 on the diagonal."""
    den = lam[:, None, :] - lam[:, :, None]  # den[k, i, j] = lam_j - lam_i
    n = lam.shape[1]
    off = ~np.eye(n, dtype=bool)
    used = off & (np.abs(A) > 0.0)
    if np.any(np.abs(den[used]) < 1e-12):
        _degenerate("coinciding velocities within one family")
    out = np.zeros_like(A)
    np.divide(A, den, out=out, where=off & (np.abs(den) >= 1e-12))
    return out


def _trace_cross(A, lam_row, lam_col):
    """K_ij(z,z) = A_ij/(lam_row_i + lam_col_j)."""
    den = lam_row[:, :, None] + lam_col[:, None, :]
    if np.any(np.abs(den) < 1e-12):
        _degenerate("vanishing velocity sum across families")
    return A / den


def _phi(lam_cols: np.ndarray, h: float) -> np.ndarray:
    """Characteristic travel time: cumulative trapezoid of 1/lam per component."""
    inv = 1.0 / lam_cols
    out = np.zeros_like(inv)
    out[1:] = np.cumsum(0.5 * h * (inv[:-1] + inv[1:]), axis=0)
    return out


def _lin(arr, pos, hi):
    """Linear interpolation at fractional index pos with floor clipped to [0, hi]."""
    jf = np.clip(np.floor(pos).astype(int), 0, hi)
    w = pos - jf
    a = arr[jf]
    b = arr[jf + 1]
    return a + w * (b - a)


def _lin_oneside(arr, pos, hi, row_above, target_above):
    """Linear interpolation that never averages across a kernel discontinuity.

    Where the bracketing nodes disagree about the region, take the node on the
    same side as the target instead of blending.
    """
    jf = np.clip(np.floor(pos).astype(int), 0, hi)
    w = pos - jf
    a = arr[jf]
    b = arr[jf + 1]
    val = a + w * (b - a)
    straddle = row_above[jf] != row_above[jf + 1]
    return np.where(straddle, np.where(row_above[jf] == target_above, a, b), val)


def _march_counter(S, lam_row, lam_col, trace, h):
    """Ascending march of one counter-propagating block component.

    Characteristics run down-right; every backward trace meets the diagonal,
    so the trace condition is the only data.  Returns W = K * lam_col(zeta).
    """
    N = lam_row.shape[0]
    zk = np.arange(N) * h
    Wdiag = trace * lam_col
    S_diag = S.diagonal()
    W = np.zeros((N, N))
    W[0, 0] = Wdiag[0]
    for k in range(1, N):
        W[k, k] = Wdiag[k]
        jn = np.arange(0, k)
        zeta = jn * h
        sig0 = lam_col[jn] / lam_row[k]
        zeta_mid = np.minimum(zeta + sig0 * (h / 2), 1.0)
        lr_mid = 0.5 * (lam_row[k - 1] + lam_row[k])
        sig = _lin(lam_col, zeta_mid / h, N - 2) / lr_mid
        zeta_prev = zeta + sig * h
        cross = zeta_prev > zk[k - 1]
        hi = max(k - 2, 0)
        pos = np.minimum(zeta_prev, zk[k - 1]) / h
        W_prev = _lin(W[k - 1], pos, hi)
        g_prev = (_lin(lam_col, pos, N - 2) / lam_row[k - 1]) * _lin(S[k - 1], pos, hi)
        W_nocross = W_prev + h * g_prev
        z_c = (zeta + sig * zk[k]) / (1.0 + sig)
        pos_c = z_c / h
        W_c = _lin(Wdiag, pos_c, N - 2)
        g_c = (_lin(lam_col, pos_c, N - 2) / _lin(lam_row, pos_c, N - 2)) * _lin(S_diag, pos_c, N - 2)
        W_cross = W_c + (zk[k] - z_c) * g_c
        W[k, jn] = np.where(cross, W_cross, W_nocross)
    return W


def _march_co_up(S, lam_row, lam_col, h, W_bot, trace=None, above=None):
    """Ascending march of one co-propagating component fed from zeta = 0.

    With `trace` given (components above the same-family diagonal) the
    diagonal nodes are pinned to the trace and interpolation is one-sided
    across the characteristic through the corner; without it (the tangent
    component) the diagonal evolves as an ordinary characteristic.
    """
    N = lam_row.shape[0]
    zk = np.arange(N) * h
    S_bot = S[:, 0]
    Wdiag = None if trace is None else trace * lam_col
    W = np.zeros((N, N))
    W[0, 0] = W_bot[0]
    for k in range(1, N):
        W[k, 0] = W_bot[k]
        if Wdiag is None:
            jn = np.arange(1, k + 1)
        else:
            W[k, k] = Wdiag[k]
            jn = np.arange(1, k)
        if jn.size == 0:
            continue
        zeta = jn * h
        sig0 = lam_col[jn] / lam_row[k]
        zeta_mid = np.maximum(zeta - sig0 * (h / 2), 0.0)
        lr_mid = 0.5 * (lam_row[k - 1] + lam_row[k])
        sig = _lin(lam_col, zeta_mid / h, N - 2) / lr_mid
        zeta_prev = zeta - sig * h
        if Wdiag is None:
            zeta_prev = np.minimum(zeta_prev, zk[k - 1])
        cross = zeta_prev < 0.0
        hi = max(k - 2, 0)
        pos = np.maximum(zeta_prev, 0.0) / h
        if above is None:
            W_prev = _lin(W[k - 1], pos, hi)
        else:
            W_prev = _lin_oneside(W[k - 1], pos, hi, above[k - 1], above[k, jn])
        g_prev = (_lin(lam_col, pos, N - 2) / lam_row[k - 1]) * _lin(S[k - 1], pos, hi)
        W_nocross = W_prev + h * g_prev
        z_c = zk[k] - zeta / sig
        pos_c = np.maximum(z_c, 0.0) / h
        W_c = _lin(W_bot, pos_c, N - 2)
        g_c = (lam_col[0] / _lin(lam_row, pos_c, N - 2)) * _lin(S_bot, pos_c, N - 2)
        W_cross = W_c + (zk[k] - z_c) * g_c
        W[k, jn] = np.where(cross, W_cross, W_nocross)
    return W


def _march_co_down(S, lam_row, lam_col, h, trace, above, all_nodes):
    """Descending march of one co-propagating component below the diagonal.

    Values are carried backward from their outflow data: the diagonal trace
    and, when `all_nodes` is set, zero data on the z = 1 edge.  With
    `all_nodes` False only the nodes flagged `above` are filled.
    """
    N = lam_row.shape[0]
    zk = np.arange(N) * h
    Wdiag = trace * lam_col
    S_diag = S.diagonal()
    W = np.zeros((N, N))
    W[N - 1, N - 1] = Wdiag[N - 1]
    for k in range(N - 2, -1, -1):
        W[k, k] = Wdiag[k]
        if all_nodes:
            jn = np.arange(0, k)
        else:
            jn = np.nonzero(above[k, :k])[0]
        if jn.size == 0:
            continue
        zeta = jn * h
        sig0 = lam_col[jn] / lam_row[k]
        zeta_mid = np.minimum(zeta + sig0 * (h / 2), 1.0)
        lr_mid = 0.5 * (lam_row[k] + lam_row[k + 1])
        sig = _lin(lam_col, zeta_mid / h, N - 2) / lr_mid
        zeta_next = zeta + sig * h
        cross = zeta_next > zk[k + 1]
        pos = np.minimum(zeta_next, zk[k + 1]) / h
        W_next = _lin_oneside(W[k + 1], pos, k, above[k + 1], above[k, jn])
        g_next = (_lin(lam_col, pos, N - 2) / lam_row[k + 1]) * _lin(S[k + 1], pos, k)
        W_nocross = W_next - h * g_next
        den = np.where(cross, sig - 1.0, 1.0)
        z_c = np.where(cross, (sig * zk[k] - zeta) / den, zk[k])
        pos_c = z_c / h
        W_c = _lin(Wdiag, pos_c, N - 2)
        g_c = (_lin(lam_col, pos_c, N - 2) / _lin(lam_row, pos_c, N - 2)) * _lin(S_diag, pos_c, N - 2)
        W_cross = W_c - (z_c - zk[k]) * g_c
        W[k, jn] = np.where(cross, W_cross, W_nocross)
    return W


def _march_co_up_tail(W, S, lam_row, lam_col, h, W_bot, above, z_star):
    """Fill the remaining nodes of an i > j component from tail balance data.

    Ascending pass over the nodes below the separatrix through (1,1); the
    zeta = 0 data is active for z >= z_star and characteristic feet are
    clamped there.
    """
    N = lam_row.shape[0]
    zk = np.arange(N) * h
    S_bot = S[:, 0]
    for k in range(1, N):
        if not above[k, 0]:
            W[k, 0] = W_bot[k]
        jn = np.nonzero(~above[k, 1:k])[0] + 1
        if jn.size == 0:
            continue
        zeta = jn * h
        sig0 = lam_col[jn] / lam_row[k]
        zeta_mid = np.maximum(zeta - sig0 * (h / 2), 0.0)
        lr_mid = 0.5 * (lam_row[k - 1] + lam_row[k])
        sig = _lin(lam_col, zeta_mid / h, N - 2) / lr_mid
        zeta_prev = zeta - sig * h
        cross = zeta_prev < 0.0
        hi = max(k - 2, 0)
        pos = np.maximum(zeta_prev, 0.0) / h
        W_prev = _lin_oneside(W[k - 1], pos, hi, above[k - 1], above[k, jn])
        g_prev = (_lin(lam_col, pos, N - 2) / lam_row[k - 1]) * _lin(S[k - 1], pos, hi)
        W_nocross = W_prev + h * g_prev
        z_c = np.maximum(zk[k] - zeta / sig, z_star)
        pos_c = z_c / h
        W_c = _lin(W_bot, pos_c, N - 2)
        g_c = (lam_col[0] / _lin(lam_row, pos_c, N - 2)) * _lin(S_bot, pos_c, N - 2)
        W_cross = W_c + (zk[k] - z_c) * g_c
        W[k, jn] = np.where(cross, W_cross, W_nocross)
    return W


class _MinusCore:
    """One minus-family kernel problem on raw node arrays.

    Deliberately takes raw data so the substituted plus-family problem, whose
    component counts violate the public n_plus <= n_minus convention, runs
    through the identical code path.
    """

    def __init__(self, lam_m, lam_p, A_mm, A_mp, A_pm, A_pp, Q, h, bc_mode):
        if np.any(lam_m <= 1e-12) or np.any(lam_p <= 1e-12):
            _degenerate("velocities must be strictly positive")
        self.lam_m, self.lam_p = lam_m, lam_p
        self.A_mm, self.A_mp, self.A_pm, self.A_pp = A_mm, A_mp, A_pm, A_pp
        self.Q, self.h, self.bc_mode = Q, h, bc_mode
        self.N, self.nm = lam_m.shape
        self.npl = lam_p.shape[1]
        self.trace_mm = _trace_same(A_mm, lam_m)
        self.trace_mp = _trace_cross(np.negative(A_mp), lam_m, lam_p)
        phi = _phi(lam_m, h)
        # region flags per i > j pair: True above the separatrix through (1,1)
        self.above = {}
        self.z_star = {}
        for i in range(self.nm):
            for j in range(self.nm):
                if i == j:
                    continue
                pr, pc = phi[:, i], phi[:, j]
                if i < j:
                    self.above[i, j] = pc[None, :] > pr[:, None]
                else:
                    mask = (pr[-1] - pr[:, None]) > (pc[-1] - pc[None, :])
                    np.fill_diagonal(mask, True)  # diagonal nodes carry trace data
                    self.above[i, j] = mask
                    c_star = pr[-1] - pc[-1]
                    idx = int(np.clip(np.searchsorted(pr, c_star), 1, self.N - 1))
                    frac = (c_star - pr[idx - 1]) / (pr[idx] - pr[idx - 1])
                    self.z_star[i, j] = (idx - 1 + frac) * h

    def sweep(self, K_mm, K_mp):
        S_mm = (np.einsum("kjab,jbc->kjac", K_mm, self.A_mm)
                + np.einsum("kjab,jbc->kjac", K_mp, self.A_pm))
        S_mp = (np.einsum("kjab,jbc->kjac", K_mm, self.A_mp)
                + np.einsum("kjab,jbc->kjac", K_mp, self.A_pp))
        h = self.h
        K_mp_new = np.zeros_like(K_mp)
        for i in range(self.nm):
            for j in range(self.npl):
                W = _march_counter(S_mp[:, :, i, j], self.lam_m[:, i], self.lam_p[:, j],
                                   self.trace_mp[:, i, j], h)
                K_mp_new[:, :, i, j] = W / self.lam_p[:, j][None, :]
        # zeta = 0 balance, fed by the kernels just updated
        balance = (K_mp_new[:, 0] * self.lam_p[0][None, :]) @ self.Q  # (N, nm, nm)
        K_mm_new = np.zeros_like(K_mm)
        for i in range(self.nm):
            for j in range(self.nm):
                S_ij = S_mm[:, :, i, j]
                lr, lc = self.lam_m[:, i], self.lam_m[:, j]
                W_bot = balance[:, i, j]
                if i < j:
                    W = _march_co_up(S_ij, lr, lc, h, W_bot,
                                     trace=self.trace_mm[:, i, j], above=self.above[i, j])
                elif i == j:
                    W = _march_co_up(S_ij, lr, lc, h, W_bot)
                elif self.bc_mode == HU_Z1_ZERO:
                    W = _march_co_down(S_ij, lr, lc, h, self.trace_mm[:, i, j],
                                       self.above[i, j], all_nodes=True)
                else:
                    W = _march_co_down(S_ij, lr, lc, h, self.trace_mm[:, i, j],
                                       self.above[i, j], all_nodes=False)
                    W = _march_co_up_tail(W, S_ij, lr, lc, h, W_bot,
                                          self.above[i, j], self.z_star[i, j])
                K_mm_new[:, :, i, j] = W / lc[None, :]
        return K_mm_new, K_mp_new

    def solve(self, iter_tol, max_iter):
        K_mm = np.zeros((self.N, self.N, self.nm, self.nm))
        K_mp = np.zeros((self.N, self.N, self.nm, self.npl))
        updates = []
        for _ in range(max_iter):
            K_mm_new, K_mp_new = self.sweep(K_mm, K_mp)
            delta = max(np.max(np.abs(K_mm_new - K_mm)), np.max(np.abs(K_mp_new - K_mp)))
            updates.append(float(delta))
            K_mm, K_mp = K_mm_new, K_mp_new
            if delta <= iter_tol:
                info = {"iterations": len(updates), "final_update": float(delta),
                        "updates": updates, "bc_mode": self.bc_mode}
                return K_mm, K_mp, info
        raise NoConvergence(
            "no convergence after %d sweeps (last update %.3e); refine the grid or "
            "reduce coupling magnitudes" % (max_iter, updates[-1]))


def _system_nodes(sys: HyperbolicSystem, grid: Grid1D):
    """Node samples of all coefficient fields on the requested grid."""
    fields = (sys.lambda_minus, sys.lambda_plus, sys.A_mm, sys.A_mp, sys.A_pm, sys.A_pp)
    if grid != sys.grid:
        fields = tuple(resample(f, grid) for f in fields)
    lam_m = np.einsum("kii->ki", fields[0].values)
    lam_p = np.einsum("kii->ki", fields[1].values)
    return (lam_m, lam_p) + tuple(f.values for f in fields[2:])


def solve_minus_kernels(sys: HyperbolicSystem, grid: Grid1D = None, bc_mode: str = HU_Z1_ZERO,
                        iter_tol: float = ITER_TOL, max_iter: int = MAX_ITER):
    """Solve for the K_mm, K_mp blocks on the given grid."""
    grid = grid or sys.grid
    lam_m, lam_p, A_mm, A_mp, A_pm, A_pp = _system_nodes(sys, grid)
    core = _MinusCore(lam_m, lam_p, A_mm, A_mp, A_pm, A_pp, sys.Q, grid.h, bc_mode)
    K_mm, K_mp, _ = core.solve(iter_tol, max_iter)
    return TriKernelField(grid, K_mm), TriKernelField(grid, K_mp)


def solve_plus_kernels(sys: HyperbolicSystem, grid: Grid1D = None, bc_mode: str = HU_Z1_ZERO,
                       iter_tol: float = ITER_TOL, max_iter: int = MAX_ITER):
    """Solve for the K_pm, K_pp blocks via the substituted minus-family problem.

    The substitution swaps the velocity families (keeping them positive),
    negates the couplings and replaces the reflection matrix by its right
    inverse; the minus-family solver then produces K_pp as its K_mm and K_pm
    as its K_mp.
    """
    grid = grid or sys.grid
    K_pp, K_pm, _ = _plus_core(sys, grid, bc_mode).solve(iter_tol, max_iter)
    return TriKernelField(grid, K_pm), TriKernelField(grid, K_pp)


def _plus_core(sys, grid, bc_mode) -> _MinusCore:
    lam_m, lam_p, A_mm, A_mp, A_pm, A_pp = _system_nodes(sys, grid)
    return _MinusCore(lam_p, lam_m,
                      np.negative(A_pp), np.negative(A_pm),
                      np.negative(A_mp), np.negative(A_mm),
                      right_inverse(sys.Q), grid.h, bc_mode)


def solve_kernel_set(sys: HyperbolicSystem, grid: Grid1D = None, bc_mode: str = HU_Z1_ZERO,
                     iter_tol: float = ITER_TOL, max_iter: int = MAX_ITER):
    """Solve all four blocks; returns the kernel set and per-family solve info."""
    grid = grid or sys.grid
    lam_m, lam_p, A_mm, A_mp, A_pm, A_pp = _system_nodes(sys, grid)
    core_m = _MinusCore(lam_m, lam_p, A_mm, A_mp, A_pm, A_pp, sys.Q, grid.h, bc_mode)
    K_mm, K_mp, info_m = core_m.solve(iter_tol, max_iter)
    K_pp, K_pm, info_p = _plus_core(sys, grid, bc_mode).solve(iter_tol, max_iter)
    kernels = VolterraKernelSet(
        K_mm=TriKernelField(grid, K_mm), K_mp=TriKernelField(grid, K_mp),
        K_pm=TriKernelField(grid, K_pm), K_pp=TriKernelField(grid, K_pp),
        bc_mode=bc_mode)
    return kernels, {"minus": info_m, "plus": info_p}


def _strict_lower(values):
    n = values.shape[-1]
    mask = np.tril(np.ones((n, n), dtype=bool), k=-1)
    return np.where(mask, values, 0.0)


def extract_coupling_matrices(kernels: VolterraKernelSet, sys: HyperbolicSystem,
                              algebra: BoundaryAlgebra) -> TransformedCoefficients:
    """Boundary-trace coupling matrices of the transformed system.

    Only the i > j entries of the brackets survive; the rest vanish by the
    balance conditions and are set to exact zeros rather than left as solver
    noise.
    """
    lam_m0 = np.diag(sys.lambda_minus.values[0])
    lam_p0 = np.diag(sys.lambda_plus.values[0])
    Kmm0 = kernels.K_mm.values[:, 0]
    Kmp0 = kernels.K_mp.values[:, 0]
    Kpm0 = kernels.K_pm.values[:, 0]
    Kpp0 = kernels.K_pp.values[:, 0]
    a0_minus = _strict_lower((Kmm0 * lam_m0[None, :]) - (Kmp0 * lam_p0[None, :]) @ sys.Q)
    a0_plus = _strict_lower((Kpm0 * lam_m0[None, :]) @ algebra.Q_right - Kpp0 * lam_p0[None, :])
    b0_plus = (Kpm0 * lam_m0[None, :]) @ algebra.Q_perp
    g = kernels.grid
    return TransformedCoefficients(
        A0_minus=MatrixField1D(g, a0_minus),
        A0_plus=MatrixField1D(g, a0_plus),
        B0_plus=MatrixField1D(g, b0_plus))


def c0_plus_diagnostic(kernels: VolterraKernelSet, sys: HyperbolicSystem) -> MatrixField1D:
    """Untriangularized coupling of the z = 0 trace into x^+ (diagnostic only)."""
    lam_m0 = np.diag(sys.lambda_minus.values[0])
    lam_p0 = np.diag(sys.lambda_plus.values[0])
    vals = (kernels.K_pm.values[:, 0] * lam_m0[None, :]
            - (kernels.K_pp.values[:, 0] * lam_p0[None, :]) @ sys.Q)
    return MatrixField1D(kernels.grid, vals)


def _stacked(kernels: VolterraKernelSet):
    """Full kernel blocks assembled on the stacked (x^-, x^+) state."""
    top = np.concatenate([kernels.K_mm.values, kernels.K_mp.values], axis=3)
    bottom = np.concatenate([kernels.K_pm.values, kernels.K_pp.values], axis=3)
    return np.concatenate([top, bottom], axis=2)


def apply_volterra(kernels: VolterraKernelSet, snapshot: StateSnapshot) -> StateSnapshot:
    """Map a state into transformed coordinates (trapezoid quadrature)."""
    g = kernels.grid
    wt = cumulative_trapezoid_weights(g.n_nodes)
    xm, xp = snapshot.x_minus, snapshot.x_plus
    new_m = xm - g.h * (np.einsum("kj,kjab,jb->ka", wt, kernels.K_mm.values, xm)
                        + np.einsum("kj,kjab,jb->ka", wt, kernels.K_mp.values, xp))
    new_p = xp - g.h * (np.einsum("kj,kjab,jb->ka", wt, kernels.K_pm.values, xm)
                        + np.einsum("kj,kjab,jb->ka", wt, kernels.K_pp.values, xp))
    return StateSnapshot(snapshot.t, new_m, new_p, snapshot.xi)


def invert_volterra(kernels: VolterraKernelSet, snapshot_bar: StateSnapshot) -> StateSnapshot:
    """Recover the original state by forward substitution in the z-node index."""
    g = kernels.grid
    h = g.h
    wt = cumulative_trapezoid_weights(g.n_nodes)
    nm = kernels.n_minus
    K = _stacked(kernels)
    y_bar = np.concatenate([snapshot_bar.x_minus, snapshot_bar.x_plus], axis=1)
    y = np.empty_like(y_bar)
    y[0] = y_bar[0]
    eye = np.eye(y.shape[1])
    for k in range(1, y.shape[0]):
        rhs = y_bar[k] + h * np.einsum("j,jab,jb->a", wt[k, :k], K[k, :k], y[:k])
        try:
            y[k] = np.linalg.solve(eye - (h / 2) * K[k, k], rhs)
        except np.linalg.LinAlgError:
            raise SingularStep("local Volterra factor singular at node %d" % k) from None
    return StateSnapshot(snapshot_bar.t, y[:, :nm], y[:, nm:], snapshot_bar.xi)


def feedback_u(kernels: VolterraKernelSet, R: np.ndarray, snapshot: StateSnapshot,
               u_bar: np.ndarray) -> np.ndarray:
    """Boundary input that renders the transformed z = 1 condition equal to u_bar."""
    g = kernels.grid
    w = cumulative_trapezoid_weights(g.n_nodes)[-1]
    xm, xp = snapshot.x_minus, snapshot.x_plus
    integral = (np.einsum("j,jab,jb->a", w, kernels.K_mm.values[-1], xm)
                + np.einsum("j,jab,jb->a", w, kernels.K_mp.values[-1], xp))
    return g.h * integral - np.atleast_2d(R) @ xp[-1] + np.asarray(u_bar, dtype=float)
