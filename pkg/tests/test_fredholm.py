from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from hypsff.fredholm import (
    FredholmKernel,
    apply_fredholm,
    compute_tilde_A0,
    compute_tilde_B0,
    invert_fredholm,
    solve_PI,
)
from hypsff.model import Grid1D, MatrixField1D, SqKernelField, field_from_diag


def lower_coupling(grid, entry_fn):
    # 2 x 2 field with the single strictly-lower entry set per node
    n = grid.n_nodes
    a = np.zeros((n, 2, 2))
    a[:, 1, 0] = entry_fn(grid.nodes)
    return MatrixField1D(grid, a)


def test_two_speed_kernel_is_piecewise_constant():
    g = Grid1D(40)
    lam = field_from_diag(g, [2.0, 1.0])
    pk = solve_PI(lower_coupling(g, lambda z: np.ones_like(z)), lam, g)
    P = pk.P_I.values[:, :, 1, 0]
    z = g.nodes
    # the dividing characteristic is zeta = 2z; zeta = 0 side wins on it
    on_or_below = z[None, :] <= 2.0 * z[:, None] + 1e-12
    assert_allclose(P[on_or_below], 0.5, rtol=0, atol=1e-13)
    assert np.all(P[~on_or_below] == 0.0)


def test_edge_conditions():
    g = Grid1D(30)
    lam = field_from_diag(g, [2.0, 1.0])
    a0 = lower_coupling(g, lambda z: np.cos(2.0 * z))
    pk = solve_PI(a0, lam, g)
    assert np.abs(pk.P_I.values[0, 1:]).max() == 0.0
    balance = pk.P_I.values[:, 0, 1, 0] * 2.0 - a0.values[:, 1, 0]
    assert np.abs(balance).max() < 1e-12


def test_zero_coupling_and_single_component():
    g = Grid1D(10)
    pk = solve_PI(lower_coupling(g, np.zeros_like), field_from_diag(g, [2.0, 1.0]), g)
    assert np.all(pk.P_I.values == 0.0)
    one = MatrixField1D(g, np.zeros((g.n_nodes, 1, 1)))
    pk1 = solve_PI(one, field_from_diag(g, [1.0]), g)
    assert np.all(pk1.P_I.values == 0.0)


def test_rejects_non_triangular_input():
    g = Grid1D(8)
    n = g.n_nodes
    a = np.zeros((n, 2, 2))
    a[:, 0, 1] = 1.0
    with pytest.raises(ValueError):
        solve_PI(MatrixField1D(g, a), field_from_diag(g, [2.0, 1.0]), g)
    bad = np.zeros((n, n, 2, 2))
    bad[3, 2, 0, 0] = 1.0
    with pytest.raises(ValueError):
        FredholmKernel(SqKernelField(g, bad))


def varying_kernel(n_cells):
    g = Grid1D(n_cells)
    z = g.nodes
    lam = field_from_diag(g, np.stack([2.0 + 0.3 * np.sin(np.pi * z),
                                       1.0 + 0.2 * z], axis=1))
    a0 = lower_coupling(g, lambda s: 1.0 + 0.5 * np.sin(2.0 * s))
    return g, lam, solve_PI(a0, lam, g)


def transport_residual(g, lam, pk):
    """Centered residual of the kernel transport equation away from the
    dividing characteristic (one-cell margin on the region flags)."""
    h = g.h
    P = pk.P_I.values[:, :, 1, 0]
    l1 = lam.values[:, 0, 0]
    l2 = lam.values[:, 1, 1]
    dl1 = np.gradient(l1, h)
    fed = np.abs(P) > 0.0
    worst = 0.0
    n = g.n_nodes
    for k in range(1, n - 1):
        for l in range(1, n - 1):
            block = fed[k - 1:k + 2, l - 1:l + 2]
            if block.all() != block.any():   # stencil straddles the curve
                continue
            dz = (P[k + 1, l] - P[k - 1, l]) / (2 * h)
            dzeta = (P[k, l + 1] - P[k, l - 1]) / (2 * h)
            r = l2[k] * dz + l1[l] * dzeta + dl1[l] * P[k, l]
            worst = max(worst, abs(r))
    return worst


def test_transport_residual_first_order():
    worst = {}
    for n_cells in (25, 50, 100):
        g, lam, pk = varying_kernel(n_cells)
        worst[n_cells] = transport_residual(g, lam, pk)
    g50 = Grid1D(50)
    assert worst[50] <= 5.0 * g50.h
    order = np.log2(worst[25] / worst[50])
    order2 = np.log2(worst[50] / worst[100])
    assert min(order, order2) >= 0.8


def test_tilde_A0_structure_and_back_substitution():
    g, lam, pk = varying_kernel(50)
    ta = compute_tilde_A0(pk, lam)
    assert np.all(ta.values[:, 0, :] == 0.0)
    assert np.all(ta.values[:, 1, 1] == 0.0)
    # substitute back: tilde A0 + integral P_I tilde A0 = P_I(z,1) Lam(1)
    w = np.ones(g.n_nodes)
    w[0] = w[-1] = 0.5
    lhs = ta.values + g.h * np.einsum("l,klab,lbc->kac", w, pk.P_I.values, ta.values)
    rhs = pk.P_I.values[:, -1] * np.array([lam.values[-1, 0, 0], lam.values[-1, 1, 1]])[None, None, :]
    assert np.abs(lhs - rhs).max() < 1e-10


def test_tilde_B0_cases():
    g, lam, pk = varying_kernel(40)
    empty = MatrixField1D(g, np.zeros((g.n_nodes, 2, 0)))
    assert compute_tilde_B0(pk, empty).values.shape == (g.n_nodes, 2, 0)

    rng = np.random.default_rng(2)
    b0 = MatrixField1D(g, rng.standard_normal((g.n_nodes, 2, 1)))
    tb = compute_tilde_B0(pk, b0)
    w = np.ones(g.n_nodes)
    w[0] = w[-1] = 0.5
    lhs = tb.values + g.h * np.einsum("l,klab,lbc->kac", w, pk.P_I.values, tb.values)
    assert np.abs(lhs - b0.values).max() < 1e-10

    zero = FredholmKernel(SqKernelField(g, np.zeros((g.n_nodes, g.n_nodes, 2, 2))))
    assert_allclose(compute_tilde_B0(zero, b0).values, b0.values, atol=0)


def test_apply_identity_and_linearity():
    g = Grid1D(20)
    n = g.n_nodes
    zero = FredholmKernel(SqKernelField(g, np.zeros((n, n, 2, 2))))
    rng = np.random.default_rng(4)
    x = rng.standard_normal((n, 2))
    assert_allclose(apply_fredholm(zero, x), x, atol=0)

    _, _, pk = varying_kernel(20)
    y = rng.standard_normal((n, 2))
    fx, fy = apply_fredholm(pk, x), apply_fredholm(pk, y)
    assert np.all(fx[:, 0] == x[:, 0])   # first component never coupled
    assert_allclose(apply_fredholm(pk, x + 3.0 * y), fx + 3.0 * fy, atol=1e-12)


def test_round_trip_three_components():
    g = Grid1D(100)
    n = g.n_nodes
    z = g.nodes
    lam = field_from_diag(g, np.stack([3.0 + 0.2 * z, 2.0 - 0.3 * z,
                                       1.0 + 0.1 * np.sin(3.0 * z)], axis=1))
    a = np.zeros((n, 3, 3))
    a[:, 1, 0] = 1.0 + z
    a[:, 2, 0] = np.cos(4.0 * z)
    a[:, 2, 1] = -0.7
    pk = solve_PI(MatrixField1D(g, a), lam, g)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((n, 3))
    back = invert_fredholm(pk, apply_fredholm(pk, x))
    assert np.abs(back - x).max() < 1e-10
    assert np.all(invert_fredholm(pk, x)[:, 0] == x[:, 0])
