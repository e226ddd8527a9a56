"""Rotation map and rigid-body dynamics checks against independent oracles."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from landopt.model import ModelParams, euler_step, srbm_dynamics, srbm_dynamics_jacobians
from landopt.rotation import (
    omega_to_rpy_rates,
    omega_to_rpy_rates_partials,
    rotation_from_rpy,
    rotation_rpy_partials,
    skew,
)

RNG = np.random.default_rng(20260814)


def test_rotation_frozen_value():
    # scipy extrinsic x-y-z oracle, frozen
    R = rotation_from_rpy(np.array([0.3, -0.55, 1.2]))
    expected = np.array(
        [
            [0.30891887144978181, -0.94638240745591484, 0.09449587144494612],
            [0.79458617630498818, 0.20220650503464965, -0.57249046956843785],
            [0.52268722893065933, 0.25193822294288487, 0.81444778379781335],
        ]
    )
    np.testing.assert_allclose(R, expected, atol=1e-15)


def test_rotation_matches_scipy_batch():
    rpys = RNG.uniform(-1.4, 1.4, size=(50, 3))
    R_mine = rotation_from_rpy(rpys)
    R_scipy = Rotation.from_euler("xyz", rpys).as_matrix()
    np.testing.assert_allclose(R_mine, R_scipy, atol=1e-14)


def test_rotation_orthonormal_and_det_one():
    rpys = RNG.uniform(-np.pi, np.pi, size=(30, 3))
    R = rotation_from_rpy(rpys)
    eye = np.einsum("...ij,...kj->...ik", R, R)
    np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), eye.shape), atol=1e-14)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-14)


def test_rotation_partials_fd():
    h = 1e-7
    for _ in range(10):
        rpy = RNG.uniform(-1.3, 1.3, size=3)
        D = rotation_rpy_partials(rpy)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            fd = (rotation_from_rpy(rpy + e) - rotation_from_rpy(rpy - e)) / (2 * h)
            np.testing.assert_allclose(D[a], fd, atol=5e-9)


def test_rate_map_consistent_with_rotation_derivative():
    # R_dot = R [omega]_x with omega = E(rpy) rpy_dot; check M = E^-1
    h = 1e-7
    for _ in range(10):
        rpy = RNG.uniform(-1.2, 1.2, size=3)
        om = RNG.uniform(-2, 2, size=3)
        rates = omega_to_rpy_rates(rpy) @ om
        Rdot = (rotation_from_rpy(rpy + h * rates) - rotation_from_rpy(rpy - h * rates)) / (2 * h)
        W = rotation_from_rpy(rpy).T @ Rdot
        om_back = np.array([W[2, 1], W[0, 2], W[1, 0]])
        np.testing.assert_allclose(om_back, om, atol=1e-6)


def test_rate_map_partials_fd():
    h = 1e-7
    for _ in range(10):
        rpy = RNG.uniform(-1.2, 1.2, size=3)
        D = omega_to_rpy_rates_partials(rpy)
        for a in range(2):
            e = np.zeros(3)
            e[a] = h
            fd = (omega_to_rpy_rates(rpy + e) - omega_to_rpy_rates(rpy - e)) / (2 * h)
            np.testing.assert_allclose(D[a], fd, atol=5e-8)


def test_rate_map_level_identity():
    np.testing.assert_allclose(omega_to_rpy_rates(np.zeros(3)), np.eye(3), atol=1e-15)


def test_skew_matches_cross():
    a = RNG.uniform(-1, 1, size=(7, 3))
    b = RNG.uniform(-1, 1, size=(7, 3))
    np.testing.assert_allclose(
        np.einsum("...ij,...j->...i", skew(a), b), np.cross(a, b), atol=1e-15
    )


def _frozen_case():
    state = np.concatenate(
        [[0.2, -0.3, 0.7], [0.1, -0.2, 0.4], [0.5, -1.1, 0.3], [1.0, 0.5, -3.0]]
    )
    feet = np.array(
        [[0.25, 0.15, 0.0], [0.25, -0.12, 0.02], [-0.2, 0.18, 0.0], [-0.18, -0.2, 0.01]]
    )
    lam = np.array(
        [[5.0, -2.0, 40.0], [0.0, 0.0, 0.0], [-3.0, 1.0, 25.0], [2.0, 2.0, 60.0]]
    )
    return state, feet, lam


def test_dynamics_frozen_value():
    # oracle: per-foot np.cross loop + scipy rotation, frozen on 2026-08-14
    params = ModelParams()
    state, feet, lam = _frozen_case()
    xdot = srbm_dynamics(state, feet, lam, params)
    np.testing.assert_allclose(
        xdot[0:3], [0.4766501524035134, -1.1376740348638843, 0.0790126937859281], atol=1e-13
    )
    np.testing.assert_allclose(xdot[3:6], state[9:12], atol=0)
    np.testing.assert_allclose(
        xdot[6:9], [1008.01858553199270, -83.27574429513886, -167.29388402235361], rtol=1e-12
    )
    np.testing.assert_allclose(
        xdot[9:12], [0.4444444444444444, 0.1111111111111111, 4.0788888888888888], atol=1e-13
    )


def test_dynamics_zero_force_free_fall():
    params = ModelParams()
    state = np.zeros(12)
    state[9:12] = [0.3, 0.0, -2.0]
    xdot = srbm_dynamics(state, np.zeros((4, 3)), np.zeros((4, 3)), params)
    expected = np.zeros(12)
    expected[3:6] = state[9:12]
    expected[11] = -params.gravity
    np.testing.assert_allclose(xdot, expected, atol=1e-15)


def test_dynamics_weight_support_hover():
    # total vertical force = weight, symmetric feet -> zero accelerations
    params = ModelParams()
    state = np.zeros(12)
    state[5] = 0.3
    feet = params.hip_offsets + np.array([0.0, 0.0, -0.3])
    feet = feet + state[3:6]
    lam = np.zeros((4, 3))
    lam[:, 2] = params.weight / 4
    xdot = srbm_dynamics(state, feet, lam, params)
    np.testing.assert_allclose(xdot[6:12], 0.0, atol=1e-12)


def test_dynamics_moment_sign():
    # force at a foot ahead of COM pitches the body backward (negative wy_dot
    # about +y? cross((+x), (+z)) = -y) -- pins the lever-arm convention
    params = ModelParams()
    state = np.zeros(12)
    feet = np.zeros((4, 3))
    feet[0] = [0.2, 0.0, 0.0]
    lam = np.zeros((4, 3))
    lam[0] = [0.0, 0.0, 10.0]
    xdot = srbm_dynamics(state, feet, lam, params)
    assert xdot[7] < 0  # pitch rate derivative
    np.testing.assert_allclose(xdot[6], 0.0, atol=1e-12)


def test_euler_step_matches_definition():
    params = ModelParams()
    state, feet, lam = _frozen_case()
    dt = 0.025
    np.testing.assert_allclose(
        euler_step(state, feet, lam, dt, params),
        state + dt * srbm_dynamics(state, feet, lam, params),
        atol=0,
    )


def test_dynamics_jacobians_fd():
    params = ModelParams()
    h = 1e-6
    for _ in range(5):
        state = RNG.uniform(-1, 1, size=12)
        state[1] *= 0.8  # keep pitch clear of the rate-map singularity
        feet = RNG.uniform(-0.4, 0.4, size=(4, 3))
        lam = RNG.uniform(-60, 60, size=(4, 3))
        A, Bf, Bl = srbm_dynamics_jacobians(state, feet, lam, params)
        for j in range(12):
            e = np.zeros(12)
            e[j] = h
            fd = (srbm_dynamics(state + e, feet, lam, params)
                  - srbm_dynamics(state - e, feet, lam, params)) / (2 * h)
            np.testing.assert_allclose(A[:, j], fd, atol=2e-4, rtol=1e-5)
        for n in range(4):
            for j in range(3):
                e = np.zeros((4, 3))
                e[n, j] = h
                fd = (srbm_dynamics(state, feet + e, lam, params)
                      - srbm_dynamics(state, feet - e, lam, params)) / (2 * h)
                np.testing.assert_allclose(Bf[:, n, j], fd, atol=2e-4, rtol=1e-5)
                fd = (srbm_dynamics(state, feet, lam + e, params)
                      - srbm_dynamics(state, feet, lam - e, params)) / (2 * h)
                np.testing.assert_allclose(Bl[:, n, j], fd, atol=2e-4, rtol=1e-5)


def test_dynamics_batched_matches_loop():
    params = ModelParams()
    states = RNG.uniform(-0.8, 0.8, size=(9, 12))
    feet = RNG.uniform(-0.4, 0.4, size=(9, 4, 3))
    lam = RNG.uniform(-50, 50, size=(9, 4, 3))
    batched = srbm_dynamics(states, feet, lam, params)
    for k in range(9):
        np.testing.assert_allclose(
            batched[k], srbm_dynamics(states[k], feet[k], lam[k], params), atol=1e-14
        )


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(l_max=0.5)
    with pytest.raises(ValueError):
        ModelParams(mass=-1.0)
