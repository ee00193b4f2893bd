from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from hypsff.artstein import (
    ArtsteinKernel,
    apply_artstein,
    assemble_pdeode_sff,
    controllability_preserved,
    invert_artstein,
    solve_N,
)
from hypsff.ctrl_algebra import build_boundary_algebra, kalman_check
from hypsff.model import Grid1D, MatrixField1D, PdeOdeSystem
from systems import constant_system, random_pdeode


def scalar_cascade(n_cells, f, lam, b, q, c=0.0):
    base = constant_system(n_cells, [1.0], [lam], Q=[[q]])
    return PdeOdeSystem(base=base, n0=1, F=[[f]], B=[[b]], C=[[c]])


def test_scalar_exponential_oracle():
    f, lam, b, q = 0.8, 1.3, 0.7, 2.0
    sys = scalar_cascade(100, f, lam, b, q)
    alg = build_boundary_algebra(sys.base.Q)
    ker = solve_N(sys, alg)
    z = ker.grid.nodes
    M = ker.N.values[:, 0, 0] * lam
    exact = np.exp(f * z / lam) * b / q
    assert np.abs(M - exact).max() <= 1e-8
    assert abs(ker.B_bar[0, 0] - np.exp(f / lam) * b / q) <= 1e-8
    assert ker.F_bar[0, 0] == f
    assert controllability_preserved(ker)


def test_fourth_order_convergence():
    f, lam, b, q = 0.8, 1.3, 0.7, 2.0
    errs = []
    for n_cells in (25, 50):
        sys = scalar_cascade(n_cells, f, lam, b, q)
        ker = solve_N(sys, build_boundary_algebra(sys.base.Q))
        z = ker.grid.nodes
        exact = np.exp(f * z / lam) * b / (q * lam)
        errs.append(np.abs(ker.N.values[:, 0, 0] - exact).max())
    ratio = errs[0] / errs[1]
    assert 12.0 <= ratio <= 20.0


def test_frozen_kernel_when_compensated_matrix_vanishes():
    # F = B Q_right C makes F_bar zero, so M never moves
    base = constant_system(20, [1.0, 0.5], [2.0], Q=[[1.0, 0.0]])
    alg = build_boundary_algebra(base.Q)
    B = np.array([[0.3, 0.1]])
    C = np.array([[2.0]])
    F = B @ alg.Q_right @ C
    sys = PdeOdeSystem(base=base, n0=1, F=F, B=B, C=C)
    ker = solve_N(sys, alg)
    assert np.all(ker.F_bar == 0.0)
    M0 = B @ alg.Q_right
    assert_allclose(ker.N.values * 2.0, np.broadcast_to(M0, ker.N.values.shape), atol=1e-14)
    assert_allclose(ker.B_bar, M0, atol=1e-14)


def eig_expm(A, t):
    w, v = np.linalg.eig(A)
    return (v @ np.diag(np.exp(w * t)) @ np.linalg.inv(v)).real


def test_constant_velocity_eigen_oracle():
    rng = np.random.default_rng(12)
    base = constant_system(100, [3.0, 2.0, 1.0], [2.0, 1.0],
                           Q=rng.standard_normal((2, 3)))
    alg = build_boundary_algebra(base.Q)
    F = rng.standard_normal((2, 2))
    B = rng.standard_normal((2, 3))
    C = 0.5 * rng.standard_normal((2, 2))
    sys = PdeOdeSystem(base=base, n0=2, F=F, B=B, C=C)
    ker = solve_N(sys, alg)
    F_bar = F - B @ alg.Q_right @ C
    M0 = B @ alg.Q_right
    lam = np.array([2.0, 1.0])
    for k in (25, 60, 100):
        z = ker.grid.nodes[k]
        exact = np.stack([eig_expm(F_bar, z / lam[j]) @ M0[:, j] for j in range(2)], axis=1)
        got = ker.N.values[k] * lam[None, :]
        assert np.abs(got - exact).max() < 1e-9


def test_lemma_two_statistical():
    rng = np.random.default_rng(77)
    for _ in range(20):
        n0 = int(rng.integers(1, 4))
        n_minus = int(rng.integers(1, 4))
        n_plus = int(rng.integers(1, n_minus + 1))
        sys = random_pdeode(rng, n0, n_minus, n_plus, 12)
        alg = build_boundary_algebra(sys.base.Q)
        assert kalman_check(sys.F, sys.B)
        assert controllability_preserved(solve_N(sys, alg))


def test_uncontrollable_pair_still_evaluates():
    base = constant_system(10, [1.0], [2.0], Q=[[1.0]])
    alg = build_boundary_algebra(base.Q)
    # second ODE state is unreachable from the input column
    sys = PdeOdeSystem(base=base, n0=2, F=np.diag([1.0, 1.0]),
                       B=[[1.0], [0.0]], C=[[0.0, 0.0]])
    assert not kalman_check(sys.F, sys.B)
    verdict = controllability_preserved(solve_N(sys, alg))
    assert verdict in (True, False)
    assert not verdict


def test_transform_round_trip_and_trivial_cases():
    rng = np.random.default_rng(5)
    g = Grid1D(40)
    N = MatrixField1D(g, rng.standard_normal((g.n_nodes, 2, 1)))
    ker = ArtsteinKernel(N=N, F_bar=np.eye(2), B_bar=np.ones((2, 1)),
                         BQperp=np.zeros((2, 0)))
    xi = rng.standard_normal(2)
    xp = rng.standard_normal((g.n_nodes, 1))
    assert np.abs(invert_artstein(ker, apply_artstein(ker, xi, xp), xp) - xi).max() <= 1e-12
    assert_allclose(apply_artstein(ker, xi, np.zeros_like(xp)), xi, atol=0)

    zero = ArtsteinKernel(N=MatrixField1D(g, np.zeros((g.n_nodes, 2, 1))),
                          F_bar=np.eye(2), B_bar=np.ones((2, 1)), BQperp=np.zeros((2, 0)))
    assert_allclose(apply_artstein(zero, xi, xp), xi, atol=0)

    const = ArtsteinKernel(N=MatrixField1D(g, np.tile(np.array([[2.0], [0.5]]), (g.n_nodes, 1, 1))),
                           F_bar=np.eye(2), B_bar=np.ones((2, 1)), BQperp=np.zeros((2, 0)))
    ones = np.ones((g.n_nodes, 1))
    assert_allclose(apply_artstein(const, xi, ones), xi - np.array([2.0, 0.5]), atol=1e-14)


def test_assemble_shapes_and_reductions():
    rng = np.random.default_rng(8)
    sys = random_pdeode(rng, 2, 3, 2, 16)
    alg = build_boundary_algebra(sys.base.Q)
    ker = solve_N(sys, alg)
    spec = assemble_pdeode_sff(sys, ker, alg)
    assert spec.n_ode == 2
    assert spec.ode_sys.shape == (2, 2)
    assert spec.ode_from_plus_trace1.shape == (2, 2)
    assert spec.ode_from_x2.shape == (2, 1)
    assert spec.x2_selector.shape == (1, 3)
    assert spec.bc0_plus_integral.shape == (2, 2)
    assert spec.plus_local is None and spec.minus_local is None

    # square reflection: no residual components, C = 0 decouples the bc
    base = constant_system(12, [1.0], [2.0], Q=[[1.5]])
    alg1 = build_boundary_algebra(base.Q)
    sys1 = PdeOdeSystem(base=base, n0=1, F=[[0.3]], B=[[1.0]], C=[[0.0]])
    spec1 = assemble_pdeode_sff(sys1, solve_N(sys1, alg1), alg1)
    assert spec1.ode_from_x2 is None and spec1.x2_selector is None
    assert np.all(spec1.bc0_plus_integral.values == 0.0)
