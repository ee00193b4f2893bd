"""Correctness checks for the transform pipeline.

Kernel residuals by centered differences, strict-feedback structure of
simulator specs, cross-form simulation consistency, and grid refinement
studies.  Every check returns a CheckReport with the numbers that decided
it; reports are deterministic given the same inputs and seeds.

The kernel fields are only piecewise smooth: their defining conditions meet
incompatibly at the corners of the domain, and the mismatch travels along
characteristics of the same row family.  Residuals are therefore evaluated
away from these separatrix curves (stencil crossings plus a fixed spatial
band) and away from the one-cell rim at zeta = z, zeta = 0 and z = 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .artstein import ArtsteinKernel, apply_artstein, assemble_pdeode_sff
from .ctrl_algebra import BoundaryAlgebra, right_inverse
from .fredholm import FredholmKernel, SffCoefficients, invert_fredholm, solve_PI
from .model import (
    GeneralizedCouplingSpec,
    HyperbolicSystem,
    MatrixField1D,
    PdeOdeSystem,
    StateSnapshot,
    diag_profile,
    resample,
)
from .sim import SimConfig, _input_fn, as_intermediate_spec, as_pdeode_spec, as_sff_spec, as_spec, simulate
from .volterra import TransformedCoefficients, VolterraKernelSet, apply_volterra, feedback_u

# half-width (in z units) of the exclusion band around each separatrix curve;
# marching smears a jump over a few cells, so crossings alone are not enough
SEPARATRIX_BAND = 0.04
RESIDUAL_FLOOR = 1e-12


class InsufficientGrids(Exception):
    """A refinement study needs at least two grids."""


@dataclass(frozen=True)
class CheckReport:
    """Outcome of one verification job.

    passed holds only if every measured value stays within its tolerance
    (for observed orders the tolerance is a lower bound, keyed order_min).
    """

    name: str
    passed: bool
    measured: Dict[str, float]
    tolerances: Dict[str, float]
    metadata: Dict[str, object] = field(default_factory=dict)


def format_report(report: CheckReport) -> str:
    lines = ["[%s] %s" % ("PASS" if report.passed else "FAIL", report.name)]
    for key, val in report.measured.items():
        if key == "order":
            lines.append("  order = %.3f  (min %.3f)" % (val, report.tolerances["order_min"]))
            continue
        tol = report.tolerances.get(key)
        if tol is None:
            lines.append("  %s = %.6e" % (key, val))
        else:
            lines.append("  %s = %.6e  (tol %.6e)" % (key, val, tol))
    if "order_min" in report.tolerances and "order" not in report.measured:
        lines.append("  order_min = %.3f" % report.tolerances["order_min"])
    for key, val in report.metadata.items():
        lines.append("  %s: %s" % (key, val))
    return "\n".join(lines)


def fourier_initial(rng: np.random.Generator, n_comp: int, modes: int = 3) -> Callable:
    """Smooth random profile from a few sine modes, vanishing at both ends."""
    amp = rng.uniform(-0.5, 0.5, size=(n_comp, modes)) / np.arange(1, modes + 1)

    def profile(z: float) -> np.ndarray:
        return amp @ np.sin(np.pi * np.arange(1, modes + 1) * z)

    return profile


def _travel_times(lam_diag: np.ndarray, h: float) -> np.ndarray:
    """phi[k, i] = integral over [0, z_k] of 1/lambda_i, trapezoid rule."""
    f = 1.0 / lam_diag
    phi = np.zeros_like(f)
    phi[1:] = np.cumsum(0.5 * h * (f[1:] + f[:-1]), axis=0)
    return phi


def _stencil_crossing(level: np.ndarray) -> np.ndarray:
    """True where the zero set of level crosses the 5-point difference cross."""
    out = np.zeros(level.shape, dtype=bool)
    c = level[1:-1, 1:-1]
    stack = np.stack([c, level[2:, 1:-1], level[:-2, 1:-1],
                      level[1:-1, 2:], level[1:-1, :-2]])
    out[1:-1, 1:-1] = (stack.min(axis=0) <= 0.0) & (stack.max(axis=0) >= 0.0)
    return out


def _curve_mask(level: np.ndarray, spatial: np.ndarray) -> np.ndarray:
    return _stencil_crossing(level) | (np.abs(spatial) <= SEPARATRIX_BAND)


def _row_masks(phi: np.ndarray, lam_diag: np.ndarray) -> List[np.ndarray]:
    """Per-row exclusion fields over (z_k, zeta_j) node pairs.

    Row i collects the curves along which its own entries, and through the
    source terms every same-row entry, lose smoothness: characteristics of
    column family l through (0, 0) for l > i, and for every faster row l < i
    the characteristics of each column family j emanating from the point on
    zeta = 0 where the row's z = 1 data meets its diagonal data (the j = l
    member passes through (1, 1); the others are its reflections carried
    back into the domain by the boundary coupling).
    """
    n, n_comp = phi.shape
    masks = []
    for i in range(n_comp):
        m = np.zeros((n, n), dtype=bool)
        for l in range(i + 1, n_comp):
            level = phi[None, :, l] - phi[:, None, i]
            m |= _curve_mask(level, level * lam_diag[None, :, l])
        for l in range(i):
            shift = phi[-1, i] - phi[-1, l]
            for j in range(n_comp):
                level = phi[None, :, j] - phi[:, None, i] + shift
                m |= _curve_mask(level, level * lam_diag[None, :, j])
        masks.append(m)
    return masks


def _pde_residual(V, lam_row, E_col, S, h, sign_z, sign_zeta):
    """Windowed centered-difference residual of one transport block.

    Returns the residual on evaluation nodes k, j in [1, n-2]; the caller
    masks out invalid and excluded points.
    """
    Dz = (V[2:, 1:-1] - V[:-2, 1:-1]) / (2.0 * h)
    Dzeta = (E_col[1:-1, 2:] - E_col[1:-1, :-2]) / (2.0 * h)
    return (sign_z * lam_row[1:-1, None, :, None] * Dz
            + sign_zeta * Dzeta - S[1:-1, 1:-1])


def _masked_max(R: np.ndarray, valid0: np.ndarray, row_masks: List[np.ndarray]) -> float:
    worst = 0.0
    for i, rm in enumerate(row_masks):
        sel = valid0 & ~rm[1:-1, 1:-1]
        if sel.any():
            worst = max(worst, float(np.abs(R[sel][:, i, :]).max()))
    return worst


def kernel_residual_volterra(kernels: VolterraKernelSet, sys: HyperbolicSystem) -> CheckReport:
    """Centered-difference residuals of all four kernel blocks plus their
    trace and balance conditions, away from the separatrix curves."""
    g = kernels.grid
    n, h = g.n_nodes, g.h
    lam_m = diag_profile(resample(sys.lambda_minus, g))
    lam_p = diag_profile(resample(sys.lambda_plus, g))
    A_mm = resample(sys.A_mm, g).values
    A_mp = resample(sys.A_mp, g).values
    A_pm = resample(sys.A_pm, g).values
    A_pp = resample(sys.A_pp, g).values
    V_mm, V_mp = kernels.K_mm.values, kernels.K_mp.values
    V_pm, V_pp = kernels.K_pm.values, kernels.K_pp.values

    max_a = max(np.abs(a).max() for a in (A_mm, A_mp, A_pm, A_pp))
    res_tol = 10.0 * h * (1.0 + max_a)

    masks_minus = _row_masks(_travel_times(lam_m, h), lam_m)
    masks_plus = _row_masks(_travel_times(lam_p, h), lam_p)
    K = np.arange(1, n - 1)[:, None]
    J = np.arange(1, n - 1)[None, :]
    valid0 = (K - J) >= 2

    S_mm = np.einsum("kjab,jbc->kjac", V_mm, A_mm) + np.einsum("kjab,jbc->kjac", V_mp, A_pm)
    S_mp = np.einsum("kjab,jbc->kjac", V_mm, A_mp) + np.einsum("kjab,jbc->kjac", V_mp, A_pp)
    S_pp = np.einsum("kjab,jbc->kjac", V_pp, A_pp) + np.einsum("kjab,jbc->kjac", V_pm, A_mp)
    S_pm = np.einsum("kjab,jbc->kjac", V_pp, A_pm) + np.einsum("kjab,jbc->kjac", V_pm, A_mm)

    measured = {
        "pde_K_mm": _masked_max(
            _pde_residual(V_mm, lam_m, V_mm * lam_m[None, :, None, :], S_mm, h, 1.0, 1.0),
            valid0, masks_minus),
        "pde_K_mp": _masked_max(
            _pde_residual(V_mp, lam_m, V_mp * lam_p[None, :, None, :], S_mp, h, 1.0, -1.0),
            valid0, masks_minus),
        "pde_K_pp": _masked_max(
            _pde_residual(V_pp, lam_p, V_pp * lam_p[None, :, None, :], S_pp, h, -1.0, -1.0),
            valid0, masks_plus),
        "pde_K_pm": _masked_max(
            _pde_residual(V_pm, lam_p, V_pm * lam_m[None, :, None, :], S_pm, h, -1.0, 1.0),
            valid0, masks_plus),
    }

    # diagonal conditions; the corner node keeps the zeta = 0 limit for the
    # above-diagonal entries of the co-directional blocks, so skip it there
    idx = np.arange(n)
    d_mm, d_mp = V_mm[idx, idx], V_mp[idx, idx]
    d_pm, d_pp = V_pm[idx, idx], V_pp[idx, idx]
    t_mm = d_mm * (lam_m[:, None, :] - lam_m[:, :, None]) - A_mm
    t_mp = -d_mp * (lam_m[:, :, None] + lam_p[:, None, :]) - A_mp
    t_pp = d_pp * (lam_p[:, :, None] - lam_p[:, None, :]) - A_pp
    t_pm = d_pm * (lam_p[:, :, None] + lam_m[:, None, :]) - A_pm
    off_m = ~np.eye(sys.n_minus, dtype=bool)
    off_p = ~np.eye(sys.n_plus, dtype=bool)
    upper_m = np.triu(np.ones((sys.n_minus,) * 2, dtype=bool), k=1)
    upper_p = np.triu(np.ones((sys.n_plus,) * 2, dtype=bool), k=1)
    t_mm[0][upper_m] = 0.0
    t_pp[0][upper_p] = 0.0
    measured["trace"] = max(
        float(np.abs(t_mm[:, off_m]).max()) if off_m.any() else 0.0,
        float(np.abs(t_pp[:, off_p]).max()) if off_p.any() else 0.0,
        float(np.abs(t_mp).max()),
        float(np.abs(t_pm).max()),
    )

    Q_right = right_inverse(sys.Q)
    bal_m = (V_mm[:, 0] * lam_m[0][None, None, :]
             - np.einsum("kab,bc->kac", V_mp[:, 0] * lam_p[0][None, None, :], sys.Q))
    bal_p = (-V_pp[:, 0] * lam_p[0][None, None, :]
             + np.einsum("kab,bc->kac", V_pm[:, 0] * lam_m[0][None, None, :], Q_right))
    keep_m = np.triu(np.ones((sys.n_minus,) * 2, dtype=bool))
    keep_p = np.triu(np.ones((sys.n_plus,) * 2, dtype=bool))
    measured["balance"] = max(float(np.abs(bal_m[:, keep_m]).max()),
                              float(np.abs(bal_p[:, keep_p]).max()))

    tolerances = {key: res_tol for key in measured}
    passed = all(measured[k] <= tolerances[k] for k in measured)
    metadata = {"n_cells": g.n_cells, "bc_mode": kernels.bc_mode, "max_coupling": max_a}
    pde_bad = any(measured[k] > res_tol for k in measured if k.startswith("pde"))
    if pde_bad and measured["trace"] <= res_tol and measured["balance"] <= res_tol:
        metadata["note"] = ("trace and balance hold; kernel value jumps seeded by "
                            "incompatible corner data smear under refinement and stall "
                            "pointwise residuals; rely on transform_consistency there")
    return CheckReport("kernel_residual_volterra", passed, measured, tolerances, metadata)


def kernel_residual_fredholm(P_I: FredholmKernel, A0_plus: MatrixField1D,
                             lambda_plus: MatrixField1D) -> CheckReport:
    """Transport residual of the square-domain kernel plus its boundary data,
    away from the value-jump curves carried in from the zeta = 0 data."""
    g = P_I.grid
    n, h = g.n_nodes, g.h
    npl = P_I.n_plus
    lam_p = diag_profile(resample(lambda_plus, g))
    A0 = resample(A0_plus, g).values
    V = P_I.P_I.values
    phi = _travel_times(lam_p, h)

    max_a = float(np.abs(A0).max())
    res_tol = 10.0 * h * (1.0 + max_a)

    E = V * lam_p[None, :, None, :]
    Dz = (V[2:, 1:-1] - V[:-2, 1:-1]) / (2.0 * h)
    Dzeta = (E[1:-1, 2:] - E[1:-1, :-2]) / (2.0 * h)
    R = lam_p[1:-1, None, :, None] * Dz + Dzeta

    interior = 0.0
    for i in range(npl):
        for jc in range(npl):
            level = phi[:, None, i] - phi[None, :, jc]
            excl = _curve_mask(level, level * lam_p[None, :, jc])
            for l in range(i):
                shifted = level - (phi[-1, i] - phi[-1, l])
                excl |= _curve_mask(shifted, shifted * lam_p[None, :, jc])
            sel = ~excl[1:-1, 1:-1]
            if sel.any():
                interior = max(interior, float(np.abs(R[sel][:, i, jc]).max()))

    bc_data = float(np.abs(V[:, 0] * lam_p[0][None, None, :] - A0).max())
    bc_zero = float(np.abs(V[0, 1:]).max()) if n > 1 else 0.0

    measured = {"interior": interior, "bc_data": bc_data, "bc_zero": bc_zero}
    tolerances = {key: res_tol for key in measured}
    passed = all(measured[k] <= tolerances[k] for k in measured)
    return CheckReport("kernel_residual_fredholm", passed, measured, tolerances,
                       {"n_cells": g.n_cells, "max_coupling": max_a})


def _outside_triangle(values: Optional[np.ndarray], strict: bool) -> float:
    """Largest magnitude outside the allowed (lower) triangle of a sampled
    matrix field; strict additionally forbids the diagonal."""
    if values is None:
        return 0.0
    r, c = values.shape[-2:]
    ii = np.arange(r)[:, None]
    jj = np.arange(c)[None, :]
    bad = (jj >= ii) if strict else (jj > ii)
    if not bad.any():
        return 0.0
    return float(np.abs(values[..., bad]).max())


def _magnitude(field) -> float:
    if field is None:
        return 0.0
    values = field.values if hasattr(field, "values") else np.asarray(field)
    return float(np.abs(values).max()) if values.size else 0.0


def structure_check_sff(spec: GeneralizedCouplingSpec, algebra: BoundaryAlgebra) -> CheckReport:
    """Structural test of the strict-feedback pattern.

    The x^+ family may only be fed by its own exit trace, itself, tail
    integrals of itself and the residual boundary channel; the x^- family by
    its own entry trace, itself, lead integrals of itself and anything from
    x^+.  Trace and integral couplings must be lower triangular, in-domain
    couplings strictly so.  The reflection term at z = 1, if present, counts
    as part of the input channel.
    """
    measured = {
        "plus_trace1_upper": _outside_triangle(
            None if spec.plus_trace1 is None else spec.plus_trace1.values, strict=False),
        "plus_local_upper": _outside_triangle(
            None if spec.plus_local is None else spec.plus_local.values, strict=True),
        "plus_integral_upper": _outside_triangle(
            None if spec.plus_integral is None else spec.plus_integral.values, strict=False),
        "minus_trace0_upper": _outside_triangle(
            None if spec.minus_trace0 is None else spec.minus_trace0.values, strict=False),
        "minus_local_upper": _outside_triangle(
            None if spec.minus_local is None else spec.minus_local.values, strict=True),
        "minus_integral_upper": _outside_triangle(
            None if spec.minus_integral is None else spec.minus_integral.values, strict=False),
        "plus_from_minus_in_domain": _magnitude(spec.plus_from_minus_local),
        "plus_entry_trace_feedback": _magnitude(spec.plus_trace0),
        "ode_from_entry_trace": _magnitude(spec.ode_from_minus_trace0),
        "q_rank_defect": float(spec.n_plus - np.linalg.matrix_rank(spec.q_bc)),
    }
    if spec.x2_selector is not None:
        measured["x2_selector_mismatch"] = float(
            np.abs(spec.x2_selector - algebra.Q_perp_left).max())
    tolerances = {key: 0.0 for key in measured}
    passed = all(measured[k] <= tolerances[k] for k in measured)
    return CheckReport("structure_check_sff", passed, measured, tolerances,
                       {"n_minus": spec.n_minus, "n_plus": spec.n_plus, "n_ode": spec.n_ode,
                        "integral_ranges": "x+ kernels act on [z, 1], the x- kernel on [0, z],"
                                           " fixed by the representation",
                        "reflection": "an x+(1) reflection at z = 1 is absorbed into the input",
                        "triangle_convention": "strict zero diagonals only for in-domain couplings"})


def _scenario(cfg: SimConfig, rng: np.random.Generator, n_minus: int, n_plus: int):
    xm0 = cfg.x_minus0 if cfg.x_minus0 is not None else fourier_initial(rng, n_minus)
    xp0 = cfg.x_plus0 if cfg.x_plus0 is not None else fourier_initial(rng, n_plus)
    return xm0, xp0


def transform_consistency(sys: HyperbolicSystem, kernels: VolterraKernelSet,
                          coeffs: TransformedCoefficients, sff: SffCoefficients,
                          algebra: BoundaryAlgebra, cfg: SimConfig,
                          seed: int = 0) -> CheckReport:
    """Simulate the untransformed system under the substituted input law and
    compare its mapped snapshots against direct runs of the two transformed
    forms."""
    if kernels.grid.n_cells != sys.grid.n_cells:
        raise ValueError("kernels were solved on %d cells but the system has %d"
                         % (kernels.grid.n_cells, sys.grid.n_cells))
    rng = np.random.default_rng(seed)
    xm0, xp0 = _scenario(cfg, rng, sys.n_minus, sys.n_plus)
    u_bar = _input_fn(cfg.input_signal, sys.n_minus)

    def input_law(t, xm, xp, xi):
        return feedback_u(kernels, sys.R, StateSnapshot(t, xm, xp), u_bar(t))

    run = dict(t_end=cfg.t_end, cfl=cfg.cfl, stride=cfg.stride)
    orig = simulate(as_spec(sys), SimConfig(x_minus0=xm0, x_plus0=xp0, **run),
                    feedback=input_law)
    mapped = [apply_volterra(kernels, orig.snapshot(m)) for m in range(orig.n_snapshots)]
    data_norm = max(float(np.abs(orig.x_minus).max()), float(np.abs(orig.x_plus).max()))

    g = coeffs.A0_minus.grid
    mid = simulate(as_intermediate_spec(coeffs, sys, algebra),
                   SimConfig(input_signal=cfg.input_signal, x_minus0=mapped[0].x_minus,
                             x_plus0=mapped[0].x_plus, **run))
    d_mid = max(
        max(float(np.abs(s.x_minus - mid.x_minus[m]).max()) for m, s in enumerate(mapped)),
        max(float(np.abs(s.x_plus - mid.x_plus[m]).max()) for m, s in enumerate(mapped)))

    P_I = solve_PI(coeffs.A0_plus, resample(sys.lambda_plus, g), g)
    tilde = [invert_fredholm(P_I, s.x_plus) for s in mapped]
    sff_run = simulate(as_sff_spec(sff, sys, algebra),
                       SimConfig(input_signal=cfg.input_signal, x_minus0=mapped[0].x_minus,
                                 x_plus0=tilde[0], **run))
    d_sff = max(
        max(float(np.abs(s.x_minus - sff_run.x_minus[m]).max()) for m, s in enumerate(mapped)),
        max(float(np.abs(tilde[m] - sff_run.x_plus[m]).max()) for m in range(len(tilde))))

    tol = 20.0 * g.h * (1.0 + data_norm)
    measured = {"volterra_vs_intermediate": d_mid, "fredholm_vs_sff": d_sff}
    tolerances = {key: tol for key in measured}
    passed = all(measured[k] <= tolerances[k] for k in measured)
    return CheckReport("transform_consistency", passed, measured, tolerances,
                       {"n_cells": g.n_cells, "t_end": cfg.t_end, "seed": seed,
                        "snapshots": orig.n_snapshots, "data_norm": data_norm})


def artstein_consistency(sys: PdeOdeSystem, kernel: ArtsteinKernel,
                         algebra: BoundaryAlgebra, cfg: SimConfig,
                         seed: int = 0) -> CheckReport:
    """Check the compensated cascade two ways: the mapped finite-dimensional
    state must follow its stated dynamics, and a direct run of the assembled
    form must reproduce the mapped trajectory."""
    base = sys.base
    rng = np.random.default_rng(seed)
    xm0, xp0 = _scenario(cfg, rng, base.n_minus, base.n_plus)
    xi0 = cfg.xi0 if cfg.xi0 is not None else rng.uniform(-0.5, 0.5, size=sys.n0)

    run = dict(t_end=cfg.t_end, cfl=cfg.cfl, stride=cfg.stride,
               input_signal=cfg.input_signal)
    orig = simulate(as_pdeode_spec(sys), SimConfig(x_minus0=xm0, x_plus0=xp0, xi0=xi0, **run))
    xi_bar = np.stack([apply_artstein(kernel, orig.xi[m], orig.x_plus[m])
                       for m in range(orig.n_snapshots)])

    dn = algebra.n_residual
    rhs = xi_bar @ kernel.F_bar.T + orig.x_plus[:, -1] @ kernel.B_bar.T
    if dn:
        rhs = rhs + (orig.x_minus[:, 0] @ algebra.Q_perp_left.T) @ kernel.BQperp.T
    dts = np.diff(orig.times)[:, None]
    deriv = (xi_bar[1:] - xi_bar[:-1]) / dts - rhs[:-1]
    # the first step reconciles raw initial data with the z = 0 closure; the
    # moment integral sees that one-node jump as an O(h/dt) spike, so start
    # the derivative comparison on the second interval
    deriv_res = float(np.abs(deriv[1:]).max()) if len(deriv) > 1 else float(np.abs(deriv).max())

    direct = simulate(assemble_pdeode_sff(sys, kernel, algebra),
                      SimConfig(x_minus0=orig.x_minus[0], x_plus0=orig.x_plus[0],
                                xi0=xi_bar[0], **run))
    d_map = max(float(np.abs(xi_bar - direct.xi).max()),
                float(np.abs(orig.x_minus - direct.x_minus).max()),
                float(np.abs(orig.x_plus - direct.x_plus).max()))

    h = base.grid.h
    dt = float(orig.times[1] - orig.times[0]) if orig.n_snapshots > 1 else cfg.t_end
    data_norm = max(float(np.abs(orig.x_minus).max()), float(np.abs(orig.x_plus).max()),
                    float(np.abs(orig.xi).max()))
    tol = 20.0 * (h + dt) * (1.0 + data_norm)
    measured = {"xi_bar_derivative": deriv_res, "mapped_vs_direct": d_map}
    tolerances = {key: tol for key in measured}
    passed = all(measured[k] <= tolerances[k] for k in measured)
    return CheckReport("artstein_consistency", passed, measured, tolerances,
                       {"n_cells": base.grid.n_cells, "t_end": cfg.t_end, "seed": seed,
                        "dt": dt, "data_norm": data_norm})


def convergence_study(check: Callable[[int], CheckReport], grids: Sequence[int],
                      floor: float = RESIDUAL_FLOOR) -> CheckReport:
    """Rerun a check over nested grids and fit the observed order of the
    dominant measured value against h."""
    grids = list(grids)
    if len(grids) < 2:
        raise InsufficientGrids("need at least two grids, got %d" % len(grids))
    residuals, subs = [], []
    for n_cells in grids:
        rep = check(n_cells)
        subs.append(rep)
        residuals.append(max(rep.measured.values()) if rep.measured else 0.0)
    meta = {
        "check": subs[0].name,
        "grids": grids,
        "residuals": "[" + ", ".join("%.6e" % r for r in residuals) + "]",
        "sub_passed": [rep.passed for rep in subs],
    }
    points = [(1.0 / n_cells, r) for n_cells, r in zip(grids, residuals) if r > floor]
    if len(points) < 2:
        meta["note"] = "residuals at rounding floor; order fit skipped"
        return CheckReport("convergence_study", True, {}, {"order_min": 0.8}, meta)
    slope = np.polyfit(np.log([p[0] for p in points]), np.log([p[1] for p in points]), 1)[0]
    order = float(slope)
    return CheckReport("convergence_study", order >= 0.8, {"order": order},
                       {"order_min": 0.8}, meta)
