"""Transcription checks: sizes, bounds, defect identity, Jacobian vs FD."""

import numpy as np
import pytest

from landopt.model import ModelParams, euler_step
from landopt.transcription import (
    NV,
    FallingCondition,
    KinBoxParams,
    TimeGrid,
    build_problem,
    default_time_grid,
    initial_height,
    kin_box_limits,
    post_process_joint_velocities,
)
from landopt.warmstart import nominal_guess

RNG = np.random.default_rng(7)


def _problem(**kw):
    z = kw.pop("z", FallingCondition([0.1, -0.2, 0.3], [0.2, -0.1, 0.05], [0.4, 0.2, -3.0]))
    return build_problem(z, **kw)


def test_grid_default():
    g = default_time_grid()
    assert g.n_knots == 16
    np.testing.assert_allclose(g.horizon, 0.8)
    assert g.times[0] == 0.0
    np.testing.assert_allclose(g.times[8], 0.2)
    with pytest.raises(ValueError):
        TimeGrid([0.075, 0.025])  # decreasing
    with pytest.raises(ValueError):
        TimeGrid([0.025, -0.025])


def test_sizes():
    p = _problem()
    assert p.n_vars == 16 * 48 == 768
    N = 16
    assert p.n_rows == (N - 1) * 12 + N * 12 + (N - 1) * 8 + N * 4 + N * 16 + N * 12 + N * 4 + N * 12


def test_initial_height_frozen():
    params = ModelParams()
    cases = [
        (FallingCondition([0, 0, 0], [0, 0, 0], [0, 0, -3.0]), 0.425),
        (FallingCondition([0, np.pi / 6, 0], [0, 0, 0], [0, 0, -4.0]), 0.545),
        (FallingCondition([0.4, -0.9, 0.3], [0, 0, 0], [1.0, 0.0, -6.0]), 0.6606933626761401),
    ]
    for z, expected in cases:
        np.testing.assert_allclose(initial_height(z, params, 0.025), expected, atol=1e-12)


def test_initial_height_first_step_clearance():
    # after one Euler step from x0, every foot within reach stays above ground;
    # the construction neglects body rotation over the step, so the exact
    # guarantee is stated for zero angular velocity
    params = ModelParams()
    for _ in range(20):
        z = FallingCondition(
            RNG.uniform(-0.9, 0.9, 3), np.zeros(3),
            np.array([RNG.uniform(-1.5, 1.5), RNG.uniform(-1.5, 1.5), RNG.uniform(-6, -2)]),
        )
        p = _problem(z=z)
        x1 = euler_step(p.x0, np.zeros((4, 3)), np.zeros((4, 3)), p.grid.dts[0], params)
        from landopt.rotation import rotation_from_rpy

        R1 = rotation_from_rpy(x1[0:3])
        hips = x1[3:6] + (R1 @ params.hip_offsets.T).T
        lowest_reach = hips[:, 2] - params.l_max
        assert np.all(lowest_reach >= -1e-9)
        # and at knot 0 every reachable foot is strictly airborne
        R0 = rotation_from_rpy(p.x0[0:3])
        hips0 = p.x0[3:6] + (R0 @ params.hip_offsets.T).T
        assert np.all(hips0[:, 2] - params.l_max > 1e-6)


def test_kin_box_limits():
    box = KinBoxParams(base_extent=[0.1, 0.06, 0.08], growth=[0.1, 0.08, 0.1],
                       v_max=[1.5, 1.5, 4.0])
    np.testing.assert_allclose(kin_box_limits([0, 0, 0], box), [0.1, 0.06, 0.08])
    # saturated
    np.testing.assert_allclose(kin_box_limits([-3.0, 2.0, -8.0], box), [0.2, 0.14, 0.18])
    # halfway on x
    np.testing.assert_allclose(kin_box_limits([0.75, 0, 0], box), [0.15, 0.06, 0.08])


def test_initial_variable_fixing():
    p = _problem()
    s = p.state_slice(0)
    np.testing.assert_allclose(p.var_lb[s], p.var_ub[s])
    np.testing.assert_allclose(p.var_lb[s], p.x0)
    f = p.feet_slice(0)
    np.testing.assert_allclose(p.var_lb[f], p.var_ub[f])
    # initial feet airborne
    assert np.all(p.r0[:, 2] > 0)


def test_defect_equals_euler_step_residual():
    # dynamics family rows are exactly x_{k+1} - euler_step(x_k, u_k)
    p = _problem()
    x = nominal_guess(p).pack()
    x += 0.01 * RNG.standard_normal(p.n_vars)  # arbitrary point, not a solution
    c = p.eval_constraints(x)
    dyn = c[p.family_slices["dynamics"]].reshape(p.n_knots - 1, 12)
    state, feet, lam, q = p.views(x)
    for k in range(p.n_knots - 1):
        stepped = euler_step(state[k], feet[k], lam[k], p.grid.dts[k], p.params)
        np.testing.assert_allclose(dyn[k], state[k + 1] - stepped, atol=1e-12)


def test_nominal_guess_feasible_families():
    # ballistic zero-force guess: dynamics, fk, ccc, no_slip, friction, torque all zero
    p = _problem()
    x = nominal_guess(p).pack()
    c = p.eval_constraints(x)
    for fam in ("dynamics", "fk", "no_slip", "ccc", "friction", "torque"):
        np.testing.assert_allclose(c[p.family_slices[fam]], 0.0, atol=1e-9, err_msg=fam)
    # box residuals centered
    box = c[p.family_slices["box"]]
    assert np.all(np.abs(box) <= p.box_extent.max() + 1e-9)


def test_jacobian_matches_fd():
    p = _problem()
    x = nominal_guess(p).pack()
    rng = np.random.default_rng(3)
    x = x + 0.02 * rng.standard_normal(p.n_vars)
    # make forces realistic so torque/ccc rows have signal
    _, _, lam, _ = p.views(x)
    lam += rng.uniform(-40, 80, lam.shape)
    J = p.eval_jacobian(x).toarray()
    h = 1e-6
    cols = rng.choice(p.n_vars, size=160, replace=False)
    for j in cols:
        e = np.zeros(p.n_vars)
        e[j] = h * max(1.0, abs(x[j]))
        fd = (p.eval_constraints(x + e) - p.eval_constraints(x - e)) / (2 * e[j])
        np.testing.assert_allclose(J[:, j], fd, atol=5e-5, rtol=2e-5,
                                   err_msg=f"column {j} (knot var {j % NV})")


def test_jacobian_pattern_fixed():
    p = _problem()
    x1 = nominal_guess(p).pack()
    x2 = x1 + 0.05 * RNG.standard_normal(p.n_vars)
    J1 = p.eval_jacobian(x1)
    J2 = p.eval_jacobian(x2)
    assert np.array_equal(J1.indices, J2.indices)
    assert np.array_equal(J1.indptr, J2.indptr)


def test_cost_terminal_only():
    p = _problem()
    x = nominal_guess(p).pack()
    c0 = p.cost(x)
    y = x.copy()
    y[p.state_slice(3)] += 1.0  # interior knot does not change the cost
    assert p.cost(y) == c0
    y2 = x.copy()
    y2[p.state_slice(p.n_knots - 1)] += 0.1
    assert p.cost(y2) != c0
    g = p.cost_grad(x)
    h = 1e-6
    for j in RNG.choice(p.n_vars, size=40, replace=False):
        e = np.zeros(p.n_vars)
        e[j] = h
        fd = (p.cost(x + e) - p.cost(x - e)) / (2 * h)
        np.testing.assert_allclose(g[j], fd, atol=1e-5)


def test_cost_ignores_yaw_and_xy():
    p = _problem()
    x = nominal_guess(p).pack()
    y = x.copy()
    s = p.state_slice(p.n_knots - 1)
    y[s.start + 2] += 0.7  # yaw
    y[s.start + 3] += 1.0  # px
    y[s.start + 4] -= 2.0  # py
    assert p.cost(y) == p.cost(x)


def test_post_process_joint_velocities():
    joints = np.zeros((4, 4, 3))
    joints[1] = 0.1
    joints[2] = 0.3
    joints[3] = 0.3
    dts = np.array([0.1, 0.1, 0.2, 0.2])
    v = post_process_joint_velocities(joints, dts)
    np.testing.assert_allclose(v[0], 1.0)
    np.testing.assert_allclose(v[1], 2.0)
    np.testing.assert_allclose(v[2], 0.0)
    np.testing.assert_allclose(v[3], v[2])


def test_translation_invariance_of_residuals():
    # shifting the world frame horizontally leaves all residuals unchanged
    p = _problem()
    x = nominal_guess(p).pack()
    x += 0.01 * RNG.standard_normal(p.n_vars)
    c1 = p.eval_constraints(x)
    shifted = x.copy()
    V = shifted.reshape(p.n_knots, NV)
    V[:, 3] += 1.7
    V[:, 4] -= 0.6
    feet = V[:, 12:24].reshape(p.n_knots, 4, 3)
    feet[:, :, 0] += 1.7
    feet[:, :, 1] -= 0.6
    c2 = p.eval_constraints(shifted)
    np.testing.assert_allclose(c2, c1, atol=1e-9)
