import math

import numpy as np
import pytest
from scipy.integrate import quad

from spde_mlmc import (
    NodalField,
    NumericalError,
    TridiagonalMatrix,
    UsageError,
    ZERO_DRIFT,
    assemble,
    euler_step,
    initial_field,
    make_level,
    run_deterministic,
    thomas_solve,
)
from spde_mlmc.fem import DriftSpec, mass_norm, step_operator
from spde_mlmc.metrics import exact_mean, fit_slope


def hat(level, i):
    """P1 basis function i (1-based) on a level, as a plain callable."""
    h = level.mesh_width
    xi = i * h

    def phi(x):
        return max(0.0, 1.0 - abs(x - xi) / h)

    return phi


def hat_derivative(level, i):
    h = level.mesh_width
    xi = i * h

    def dphi(x):
        if xi - h < x < xi:
            return 1.0 / h
        if xi < x < xi + h:
            return -1.0 / h
        return 0.0

    return dphi


@pytest.mark.parametrize("level_index", [1, 2, 3])
def test_assembly_against_quadrature(level_index):
    level = make_level(level_index)
    mass, stiffness = assemble(level)
    for i in range(1, level.dofs + 1):
        phi_i, dphi_i = hat(level, i), hat_derivative(level, i)
        for j in (i, i + 1):
            if j > level.dofs:
                continue
            phi_j, dphi_j = hat(level, j), hat_derivative(level, j)
            m_ref = quad(lambda x: phi_i(x) * phi_j(x), 0, 1, limit=200)[0]
            k_ref = quad(lambda x: dphi_i(x) * dphi_j(x), 0, 1, limit=200)[0]
            m_val = mass.diag[i - 1] if i == j else mass.sup[i - 1]
            k_val = stiffness.diag[i - 1] if i == j else stiffness.sup[i - 1]
            assert m_val == pytest.approx(m_ref, abs=1e-12)
            assert k_val == pytest.approx(k_ref, abs=1e-10)


def test_assembly_frozen_values():
    mass, stiffness = assemble(make_level(1))
    np.testing.assert_allclose(mass.diag, [1.0 / 3.0])
    np.testing.assert_allclose(stiffness.diag, [4.0])
    mass2, stiffness2 = assemble(make_level(2))
    np.testing.assert_allclose(mass2.diag, 1.0 / 6.0)
    np.testing.assert_allclose(mass2.sup, 1.0 / 24.0)
    np.testing.assert_allclose(stiffness2.diag, 8.0)
    np.testing.assert_allclose(stiffness2.sup, -4.0)


def test_stiffness_interior_row_sums_vanish():
    _, stiffness = assemble(make_level(5))
    dense = stiffness.dense()
    sums = dense.sum(axis=1)
    np.testing.assert_allclose(sums[1:-1], 0.0, atol=1e-12)


def test_assembly_empty_space():
    with pytest.raises(UsageError):
        assemble(make_level(0))


def test_thomas_identity():
    m = TridiagonalMatrix(np.zeros(3), np.ones(4), np.zeros(3))
    rhs = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(thomas_solve(m, rhs), rhs)


def test_thomas_hand_checked():
    m = TridiagonalMatrix(np.array([-1.0]), np.array([2.0, 2.0]), np.array([-1.0]))
    np.testing.assert_allclose(thomas_solve(m, np.array([1.0, 1.0])), [1.0, 1.0])


def test_thomas_residual_random_system():
    rng = np.random.default_rng(42)
    n = 50
    sub = rng.uniform(-1, 1, n - 1)
    sup = rng.uniform(-1, 1, n - 1)
    diag = 3.0 + rng.uniform(0, 1, n)  # diagonally dominant
    m = TridiagonalMatrix(sub, diag, sup)
    rhs = rng.standard_normal(n)
    x = thomas_solve(m, rhs)
    residual = np.max(np.abs(m.matvec(x) - rhs))
    assert residual <= 1e-12 * np.max(np.abs(rhs))


def test_thomas_zero_pivot():
    m = TridiagonalMatrix(np.array([1.0]), np.array([0.0, 1.0]), np.array([1.0]))
    with pytest.raises(NumericalError):
        thomas_solve(m, np.array([1.0, 1.0]))


def test_initial_field_values():
    np.testing.assert_allclose(initial_field(make_level(1)).values, [1.0])
    np.testing.assert_allclose(
        initial_field(make_level(2)).values,
        [math.sin(math.pi / 4), 1.0, math.sin(3 * math.pi / 4)],
    )


@pytest.mark.parametrize("level_index", range(1, 7))
def test_initial_field_symmetric(level_index):
    v = initial_field(make_level(level_index)).values
    np.testing.assert_allclose(v, v[::-1], atol=1e-15)


def test_euler_step_zero_fixed_point():
    level = make_level(3)
    mass, stiffness = assemble(level)
    state = NodalField(level, np.zeros(7))
    out = euler_step(level, mass, stiffness, state, ZERO_DRIFT, np.zeros(7))
    assert np.all(out.values == 0.0)


def test_euler_step_single_dof_value():
    level = make_level(1)
    mass, stiffness = assemble(level)
    out = euler_step(level, mass, stiffness, NodalField(level, np.array([1.0])),
                     ZERO_DRIFT, np.zeros(1))
    assert out.values[0] == pytest.approx(0.25, abs=1e-15)


def test_euler_step_linearity_without_drift():
    level = make_level(4)
    mass, stiffness = assemble(level)
    rng = np.random.default_rng(3)
    u, v = rng.standard_normal((2, level.dofs))
    load_u, load_v = rng.standard_normal((2, level.dofs))

    def step(state, load):
        return euler_step(level, mass, stiffness, NodalField(level, state),
                          ZERO_DRIFT, load).values

    combined = step(2.0 * u + 3.0 * v, 2.0 * load_u + 3.0 * load_v)
    np.testing.assert_allclose(
        combined, 2.0 * step(u, load_u) + 3.0 * step(v, load_v), atol=1e-12
    )


def test_euler_step_with_drift():
    # explicit drift enters as dt * M F(x_prev) on the right-hand side
    level = make_level(1)
    mass, stiffness = assemble(level)
    drift = DriftSpec(func=lambda v: 2.0 * v, name="linear")
    out = euler_step(level, mass, stiffness, NodalField(level, np.array([1.0])),
                     drift, np.zeros(1))
    expected = ((1.0 / 3.0) * (1.0 + 0.25 * 2.0)) / (1.0 / 3.0 + 0.25 * 4.0)
    assert out.values[0] == pytest.approx(expected, rel=1e-14)


def test_deterministic_run_symmetric_and_monotone():
    previous_gap = None
    for level_index in range(3, 8):
        level = make_level(level_index)
        out = run_deterministic(level).values
        np.testing.assert_allclose(out, out[::-1], atol=1e-13)
        gap = out[level.dofs // 2] - math.exp(-math.pi**2)
        assert gap > 0.0
        if previous_gap is not None:
            assert gap < previous_gap
        previous_gap = gap


def test_deterministic_convergence_order():
    points = []
    for level_index in range(3, 8):
        level = make_level(level_index)
        mass, _ = assemble(level)
        diff = run_deterministic(level).values - exact_mean(1.0, level).values
        err = math.sqrt(diff @ mass.matvec(diff))
        points.append((level_index, math.log2(err)))
    slope = fit_slope(points)
    assert -2.2 <= slope <= -1.7


def test_norm_non_increasing_over_steps():
    level = make_level(3)
    op = step_operator(level)
    x = initial_field(level).values[:, None]
    loads = np.zeros_like(x)
    norms = [mass_norm(NodalField(level, x[:, 0]))]
    for _ in range(level.steps):
        x = op.step(x, loads, ZERO_DRIFT)
        norms.append(mass_norm(NodalField(level, x[:, 0])))
    assert all(b <= a + 1e-15 for a, b in zip(norms, norms[1:]))


def test_symmetric_loads_preserve_symmetry():
    level = make_level(4)
    mass, stiffness = assemble(level)
    rng = np.random.default_rng(6)
    state = initial_field(level)
    for _ in range(5):
        half = rng.standard_normal(level.dofs // 2)
        load = np.concatenate([half, rng.standard_normal(1), half[::-1]])
        state = euler_step(level, mass, stiffness, state, ZERO_DRIFT, load)
        np.testing.assert_allclose(state.values, state.values[::-1], atol=1e-13)


def test_step_operator_matches_euler_step():
    level = make_level(4)
    mass, stiffness = assemble(level)
    op = step_operator(level)
    rng = np.random.default_rng(11)
    states = rng.standard_normal((level.dofs, 6))
    loads = rng.standard_normal((level.dofs, 6))
    batched = op.step(states, loads, ZERO_DRIFT)
    for b in range(6):
        single = euler_step(level, mass, stiffness,
                            NodalField(level, states[:, b]), ZERO_DRIFT, loads[:, b])
        np.testing.assert_allclose(batched[:, b], single.values, atol=1e-13)
