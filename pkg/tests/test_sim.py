"""Upwind simulator tests: exact transport, oracles, convergence, plumbing."""
from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from hypsff.ctrl_algebra import build_boundary_algebra
from hypsff.fredholm import sff_coefficients, solve_PI
from hypsff.model import (
    GeneralizedCouplingSpec,
    Grid1D,
    HyperbolicSystem,
    MatrixField1D,
    PdeOdeSystem,
    cumulative_trapezoid_weights,
    field_from_diag,
)
from hypsff.sim import (
    SimConfig,
    UnstableStep,
    as_intermediate_spec,
    as_pdeode_spec,
    as_sff_spec,
    as_spec,
    simulate,
)
from hypsff.volterra import extract_coupling_matrices, solve_kernel_set
from systems import constant_system, random_pdeode, random_system


def transport_spec(n_cells, n_minus=1, n_plus=1, q=None, **terms):
    grid = Grid1D(n_cells)
    if q is None:
        q = np.zeros((n_plus, n_minus))
    return GeneralizedCouplingSpec(
        n_minus=n_minus, n_plus=n_plus, grid=grid,
        lambda_minus=field_from_diag(grid, np.ones(n_minus)),
        lambda_plus=field_from_diag(grid, np.ones(n_plus)),
        q_bc=q, **terms)


def varying_2x2(n_cells):
    """One component per family, z-dependent cross couplings."""
    grid = Grid1D(n_cells)
    z = grid.nodes
    a_mp = (0.6 + 0.2 * z).reshape(-1, 1, 1)
    a_pm = (0.5 - 0.3 * z).reshape(-1, 1, 1)
    zero = np.zeros((grid.n_nodes, 1, 1))
    return HyperbolicSystem(
        n_minus=1, n_plus=1,
        lambda_minus=field_from_diag(grid, np.full(1, 1.2)),
        lambda_plus=field_from_diag(grid, np.full(1, 0.7)),
        A_mm=MatrixField1D(grid, zero), A_mp=MatrixField1D(grid, a_mp),
        A_pm=MatrixField1D(grid, a_pm), A_pp=MatrixField1D(grid, zero),
        Q=[[0.8]], R=[[0.3]])


def test_unit_cfl_transport_is_an_exact_shift():
    n_cells = 40
    sys = constant_system(n_cells, [1.0], [1.0], Q=[[1.0]])
    z = sys.grid.nodes
    xm0 = np.sin(np.pi * z)
    xp0 = 0.5 * np.sin(np.pi * z)
    cfg = SimConfig(t_end=0.5, cfl=1.0, input_signal=("sine", 0.8, 1.0),
                    x_minus0=xm0[:, None], x_plus0=xp0[:, None])
    traj = simulate(as_spec(sys), cfg)
    t = 0.5
    # characteristics: x^- rides left from the IC until the input takes over,
    # x^+ rides right from the IC until the z = 0 reflection takes over
    exp_m = np.where(z + t <= 1.0, np.sin(np.pi * (z + t)),
                     0.8 * np.sin(2.0 * np.pi * (t - (1.0 - z))))
    exp_p = np.where(z >= t, 0.5 * np.sin(np.pi * (z - t)), np.sin(np.pi * (t - z)))
    assert np.abs(traj.x_minus[-1][:, 0] - exp_m).max() <= 1e-12
    assert np.abs(traj.x_plus[-1][:, 0] - exp_p).max() <= 1e-12


def test_zero_state_is_an_exact_equilibrium():
    rng = np.random.default_rng(3)
    traj = simulate(as_spec(random_system(rng, 2, 2, 25)), SimConfig(t_end=0.7))
    assert np.all(traj.x_minus == 0.0)
    assert np.all(traj.x_plus == 0.0)
    casc = simulate(as_pdeode_spec(random_pdeode(rng, 2, 2, 1, 25)), SimConfig(t_end=0.7))
    assert np.all(casc.x_plus == 0.0)
    assert np.all(casc.xi == 0.0)


def test_superposition_of_runs():
    rng = np.random.default_rng(11)
    spec = as_spec(random_system(rng, 2, 1, 30))
    z = spec.grid.nodes
    ic1 = {"x_minus0": np.stack([np.sin(2.0 * z), np.cos(z)], axis=1),
           "x_plus0": (0.4 * z * (1.0 - z))[:, None]}
    ic2 = {"x_minus0": np.stack([z ** 2, -z], axis=1),
           "x_plus0": np.cos(3.0 * z)[:, None]}
    in1 = [("sine", 0.3, 1.1), ("zero",)]
    in2 = [("step", 0.5, 0.2), ("table", [0.0, 1.0], [0.2, -0.4])]

    def in_sum(t):
        a = 0.3 * math.sin(2.0 * math.pi * 1.1 * t)
        b = (0.5 if t >= 0.2 else 0.0)
        return [a + b, b * 0.0 + float(np.interp(t, [0.0, 1.0], [0.2, -0.4]))]

    t1 = simulate(spec, SimConfig(t_end=0.6, input_signal=in1, **ic1))
    t2 = simulate(spec, SimConfig(t_end=0.6, input_signal=in2, **ic2))
    t3 = simulate(spec, SimConfig(t_end=0.6, input_signal=in_sum,
                                  x_minus0=ic1["x_minus0"] + ic2["x_minus0"],
                                  x_plus0=ic1["x_plus0"] + ic2["x_plus0"]))
    assert np.abs(t3.x_minus - (t1.x_minus + t2.x_minus)).max() <= 1e-10
    assert np.abs(t3.x_plus - (t1.x_plus + t2.x_plus)).max() <= 1e-10


def test_matches_hand_rolled_integrator():
    n_cells, t_end, cfl = 37, 0.83, 0.85
    sys = varying_2x2(n_cells)
    z = sys.grid.nodes
    xm0 = np.sin(2.1 * z) + 0.3
    xp0 = np.cos(1.7 * z)
    traj = simulate(as_spec(sys), SimConfig(t_end=t_end, cfl=cfl,
                                            input_signal=("sine", 0.8, 1.3),
                                            x_minus0=xm0[:, None], x_plus0=xp0[:, None]))

    # same scheme written out by hand on plain 1d arrays
    h = 1.0 / n_cells
    a_mp = 0.6 + 0.2 * z
    a_pm = 0.5 - 0.3 * z
    n_steps = max(1, math.ceil(t_end / (cfl * h / 1.2) - 1e-9))
    dt = t_end / n_steps
    xm, xp = xm0.copy(), xp0.copy()
    for step in range(n_steps):
        xp_n, xm_n = xp.copy(), xm.copy()
        xp_n[1:] = xp[1:] - (dt / h) * 0.7 * (xp[1:] - xp[:-1]) + dt * (a_pm * xm)[1:]
        xm_n[:-1] = xm[:-1] + (dt / h) * 1.2 * (xm[1:] - xm[:-1]) + dt * (a_mp * xp)[:-1]
        t = (step + 1) * dt
        xm_n[-1] = 0.3 * xp_n[-1] + 0.8 * math.sin(2.0 * math.pi * 1.3 * t)
        xp_n[0] = 0.8 * xm_n[0]
        xm, xp = xm_n, xp_n
    assert traj.times.shape[0] == n_steps + 1
    assert np.abs(traj.x_minus[-1][:, 0] - xm).max() <= 1e-12
    assert np.abs(traj.x_plus[-1][:, 0] - xp).max() <= 1e-12


def test_matches_hand_rolled_cascade():
    n_cells, t_end, cfl = 25, 1.1, 0.8
    base = constant_system(n_cells, [1.0], [1.4], Q=[[1.0]], R=[[0.2]])
    sys = PdeOdeSystem(base=base, n0=1, F=[[-0.4]], B=[[0.9]], C=[[0.6]])
    z = base.grid.nodes
    xm0 = np.sin(np.pi * z) + 0.2
    xp0 = 0.3 * np.cos(2.0 * z)
    traj = simulate(as_pdeode_spec(sys),
                    SimConfig(t_end=t_end, cfl=cfl, input_signal=("step", 0.6, 0.25),
                              x_minus0=xm0[:, None], x_plus0=xp0[:, None], xi0=[0.5]))

    h = 1.0 / n_cells
    n_steps = max(1, math.ceil(t_end / (cfl * h / 1.4) - 1e-9))
    dt = t_end / n_steps
    xm, xp, xi = xm0.copy(), xp0.copy(), 0.5
    xi_path = [xi]
    for step in range(n_steps):
        xi = xi + dt * (-0.4 * xi + 0.9 * xm[0])
        xp_n, xm_n = xp.copy(), xm.copy()
        xp_n[1:] = xp[1:] - (dt / h) * 1.4 * (xp[1:] - xp[:-1])
        xm_n[:-1] = xm[:-1] + (dt / h) * 1.0 * (xm[1:] - xm[:-1])
        t = (step + 1) * dt
        xm_n[-1] = 0.2 * xp_n[-1] + (0.6 if t >= 0.25 else 0.0)
        xp_n[0] = 1.0 * xm_n[0] + 0.6 * xi
        xm, xp = xm_n, xp_n
        xi_path.append(xi)
    assert np.abs(traj.xi[:, 0] - np.asarray(xi_path)).max() <= 1e-12
    assert np.abs(traj.x_minus[-1][:, 0] - xm).max() <= 1e-12
    assert np.abs(traj.x_plus[-1][:, 0] - xp).max() <= 1e-12


def test_first_order_self_convergence():
    def run(n_cells):
        sys = constant_system(n_cells, [1.0], [1.2], A_mp=[[0.8]], A_pm=[[-0.6]],
                              Q=[[1.0]], R=[[0.4]])
        cfg = SimConfig(t_end=0.8, cfl=0.9,
                        input_signal=lambda t: [0.35 * (1.0 - math.cos(2.0 * math.pi * t))],
                        x_minus0=lambda z: [math.sin(math.pi * z) ** 3],
                        x_plus0=lambda z: [0.5 * math.sin(math.pi * z) ** 3])
        traj = simulate(as_spec(sys), cfg)
        return traj.x_minus[-1][:, 0], traj.x_plus[-1][:, 0]

    ref_m, ref_p = run(640)
    errs = []
    for n in (40, 80):
        xm, xp = run(n)
        s = 640 // n
        errs.append(max(np.abs(xm - ref_m[::s]).max(), np.abs(xp - ref_p[::s]).max()))
    ratio = errs[0] / errs[1]
    assert 1.6 <= ratio <= 2.4


def test_self_referential_boundary_condition_is_solved_exactly():
    n_cells = 30
    grid = Grid1D(n_cells)
    z = grid.nodes
    spec = transport_spec(n_cells, q=[[1.0]],
                          bc0_plus_integral=MatrixField1D.constant(grid, [[0.4]]))
    traj = simulate(spec, SimConfig(t_end=0.5, x_minus0=np.sin(np.pi * z)[:, None]))
    w = cumulative_trapezoid_weights(grid.n_nodes)[-1]
    for s in range(1, traj.n_snapshots):
        xp_s = traj.x_plus[s][:, 0]
        resid = xp_s[0] - (traj.x_minus[s][0, 0] + grid.h * (w * 0.4 * xp_s).sum())
        assert abs(resid) <= 1e-13


def test_input_generators_arrive_at_the_boundary():
    n_cells, t_end = 20, 0.3
    cases = [
        (("zero",), lambda t: 0.0),
        (("step", 1.5, 0.12), lambda t: 1.5 if t >= 0.12 else 0.0),
        (("sine", 2.0, 1.0), lambda t: 2.0 * math.sin(2.0 * math.pi * t)),
        (("table", [0.0, 0.3], [0.0, 3.0]), lambda t: float(np.interp(t, [0.0, 0.3], [0.0, 3.0]))),
        (lambda t: [0.7 * t], lambda t: 0.7 * t),
    ]
    for signal, expected in cases:
        traj = simulate(transport_spec(n_cells), SimConfig(t_end=t_end, input_signal=signal))
        for s in range(1, traj.n_snapshots):
            assert abs(traj.x_minus[s][-1, 0] - expected(traj.times[s])) <= 1e-14


def test_feedback_adds_to_the_configured_input():
    traj = simulate(transport_spec(20), SimConfig(t_end=0.2, input_signal=("step", 0.5, 0.0)),
                    feedback=lambda t, xm, xp, xi: np.array([0.25]))
    assert np.abs(traj.x_minus[1:, -1, 0] - 0.75).max() <= 1e-15


def test_initial_condition_forms():
    spec = transport_spec(10, n_minus=2)
    traj = simulate(spec, SimConfig(t_end=0.05, x_minus0=[0.3, -0.1], x_plus0=0.25))
    assert_array_equal(traj.x_minus[0], np.tile([0.3, -0.1], (11, 1)))
    assert np.all(traj.x_plus[0] == 0.25)
    with pytest.raises(ValueError, match="x_minus0"):
        simulate(spec, SimConfig(t_end=0.05, x_minus0=np.zeros((11, 3))))
    with pytest.raises(ValueError, match="x_plus0"):
        simulate(spec, SimConfig(t_end=0.05, x_plus0=lambda z: [1.0, 2.0]))


def test_config_and_signal_validation():
    with pytest.raises(ValueError):
        SimConfig(t_end=0.0)
    with pytest.raises(ValueError):
        SimConfig(t_end=1.0, cfl=1.5)
    with pytest.raises(ValueError):
        SimConfig(t_end=1.0, cfl=0.0)
    with pytest.raises(ValueError):
        SimConfig(t_end=1.0, stride=0)
    spec = transport_spec(10, n_minus=2)
    with pytest.raises(ValueError, match="one input signal per channel"):
        simulate(spec, SimConfig(t_end=0.1, input_signal=[("zero",)]))
    with pytest.raises(ValueError, match="unknown input signal"):
        simulate(spec, SimConfig(t_end=0.1, input_signal=("ramp", 1.0)))


def test_runaway_growth_raises():
    spec = transport_spec(20, plus_local=MatrixField1D.constant(Grid1D(20), [[40.0]]))
    with pytest.raises(UnstableStep):
        simulate(spec, SimConfig(t_end=5.0, x_plus0=1.0))


def test_stride_thins_the_record():
    spec = transport_spec(20, q=[[1.0]])
    z = spec.grid.nodes
    cfg = dict(t_end=0.5, x_minus0=np.cos(z)[:, None])
    dense = simulate(spec, SimConfig(stride=1, **cfg))
    n_steps = dense.times.shape[0] - 1
    thin = simulate(spec, SimConfig(stride=5, **cfg))
    kept = list(range(0, n_steps + 1, 5))
    if kept[-1] != n_steps:
        kept.append(n_steps)
    assert_array_equal(thin.times, dense.times[kept])
    assert_array_equal(thin.x_minus, dense.x_minus[kept])
    assert_array_equal(thin.x_plus, dense.x_plus[kept])


def test_original_spec_reuses_system_fields():
    sys = constant_system(12, [1.0, 0.5], [2.0], A_mp=[[0.1], [0.2]], Q=[[1.0, 0.3]],
                          R=[[0.4], [0.0]])
    spec = as_spec(sys)
    assert spec.plus_local is sys.A_pp
    assert spec.minus_from_plus_local is sys.A_mp
    assert_array_equal(spec.q_bc, sys.Q)
    assert_array_equal(spec.r_bc, sys.R)
    assert spec.lambda_minus is sys.lambda_minus


def test_transformed_spec_structure():
    rng = np.random.default_rng(21)
    sys = random_system(rng, 2, 1, 40)
    alg = build_boundary_algebra(sys.Q)
    kernels, _ = solve_kernel_set(sys)
    co = extract_coupling_matrices(kernels, sys, alg)

    mid = as_intermediate_spec(co, sys, alg)
    assert mid.r_bc is None
    assert mid.plus_trace0 is co.A0_plus
    assert mid.minus_trace0 is co.A0_minus
    assert mid.plus_from_x2 is co.B0_plus and mid.x2_selector.shape == (1, 2)
    assert mid.plus_local is None and mid.minus_local is None
    assert mid.minus_from_plus_local is None

    P_I = solve_PI(co.A0_plus, sys.lambda_plus, sys.grid)
    sff = sff_coefficients(P_I, sys.lambda_plus, co.B0_plus, co.A0_minus)
    tail = as_sff_spec(sff, sys, alg)
    assert tail.plus_trace0 is None and tail.plus_trace1 is sff.A0_tilde_plus
    # a single x^+ component has no lower-triangular part left to feed back
    assert np.all(tail.plus_trace1.values == 0.0)
    assert tail.plus_from_x2 is sff.B0_tilde_plus

    square = random_system(rng, 2, 2, 30)
    alg2 = build_boundary_algebra(square.Q)
    co2 = extract_coupling_matrices(solve_kernel_set(square)[0], square, alg2)
    mid2 = as_intermediate_spec(co2, square, alg2)
    assert mid2.plus_from_x2 is None and mid2.x2_selector is None
