"""Leg kinematics checks: transform-chain oracle, finite differences, torques."""

import numpy as np

from landopt.kinematics import (
    foot_jacobian,
    foot_jacobian_partials,
    joint_torques_from_force,
    leg_forward_kinematics,
)
from landopt.model import ModelParams
from landopt.rotation import rotation_from_rpy

RNG = np.random.default_rng(99)


def _fk_oracle(q_leg, hip, side, links):
    """Independent route: homogeneous transform chain."""
    l1, l2, l3 = links

    def trans(v):
        T = np.eye(4)
        T[:3, 3] = v
        return T

    def rotx(a):
        T = np.eye(4)
        c, s = np.cos(a), np.sin(a)
        T[1, 1], T[1, 2], T[2, 1], T[2, 2] = c, -s, s, c
        return T

    def roty(a):
        T = np.eye(4)
        c, s = np.cos(a), np.sin(a)
        T[0, 0], T[0, 2], T[2, 0], T[2, 2] = c, s, -s, c
        return T

    T = (trans(hip) @ rotx(q_leg[0]) @ trans([0, side * l1, 0])
         @ roty(q_leg[1]) @ trans([0, 0, -l2]) @ roty(q_leg[2]) @ trans([0, 0, -l3]))
    return T[:3, 3]


def test_fk_frozen_values():
    params = ModelParams()
    q = np.zeros((4, 3))
    q[0] = [0.3, 0.9, -1.8]
    feet = leg_forward_kinematics(q, params)
    np.testing.assert_allclose(
        feet[0], [0.17903342326521521, 0.18244497806537013, -0.22159180780304000], atol=1e-15
    )
    # straight legs: directly below the abducted hip
    np.testing.assert_allclose(feet[1], [0.19, -0.111, -0.404], atol=1e-15)
    q2 = np.zeros((4, 3))
    q2[2] = [0.0, 0.0, np.pi / 2]
    feet2 = leg_forward_kinematics(q2, params)
    np.testing.assert_allclose(feet2[2], [-0.19 - 0.195, 0.111, -0.209], atol=1e-15)
    # mirrored leg, same joint angles, frozen oracle value
    q3 = np.zeros((4, 3))
    q3[1] = [0.3, 0.9, -1.8]
    feet3 = leg_forward_kinematics(q3, params)
    np.testing.assert_allclose(
        feet3[1], [0.1790334232652152, -0.0340167465862050, -0.2582363134290461], atol=1e-15
    )


def test_fk_matches_transform_chain():
    params = ModelParams()
    for _ in range(20):
        q = RNG.uniform(-1.5, 1.5, size=(4, 3))
        feet = leg_forward_kinematics(q, params)
        for i in range(4):
            oracle = _fk_oracle(
                q[i], params.hip_offsets[i], params.leg_sides[i], params.link_lengths
            )
            np.testing.assert_allclose(feet[i], oracle, atol=1e-13)


def test_fk_hip_distance_independent_of_q1_q2():
    # ||foot - hip|| depends on the knee angle only
    params = ModelParams()
    knee = -1.1
    dists = []
    for _ in range(10):
        q = np.zeros((4, 3))
        q[:, 0] = RNG.uniform(-0.7, 0.7, size=4)
        q[:, 1] = RNG.uniform(-1.0, 1.0, size=4)
        q[:, 2] = knee
        feet = leg_forward_kinematics(q, params)
        dists.append(np.linalg.norm(feet - params.hip_offsets, axis=1))
    np.testing.assert_allclose(np.ptp(np.array(dists)), 0.0, atol=1e-12)


def test_jacobian_fd():
    params = ModelParams()
    h = 1e-7
    for _ in range(20):
        q = RNG.uniform(-1.5, 1.5, size=(4, 3))
        J = foot_jacobian(q, params)
        for j in range(3):
            e = np.zeros((4, 3))
            e[:, j] = h
            fd = (leg_forward_kinematics(q + e, params)
                  - leg_forward_kinematics(q - e, params)) / (2 * h)
            np.testing.assert_allclose(J[:, :, j], fd, atol=1e-8)


def test_jacobian_partials_fd():
    params = ModelParams()
    h = 1e-6
    for _ in range(10):
        q = RNG.uniform(-1.5, 1.5, size=(4, 3))
        D = foot_jacobian_partials(q, params)
        for l in range(3):
            e = np.zeros((4, 3))
            e[:, l] = h
            fd = (foot_jacobian(q + e, params) - foot_jacobian(q - e, params)) / (2 * h)
            np.testing.assert_allclose(D[:, l], fd, atol=1e-7)


def test_straight_leg_singularity():
    # fully stretched knee drops Jacobian rank below 3
    params = ModelParams()
    q = np.zeros((4, 3))
    J = foot_jacobian(q, params)
    for i in range(4):
        assert np.linalg.matrix_rank(J[i], tol=1e-10) == 2


def test_torques_zero_force():
    params = ModelParams()
    q = RNG.uniform(-1.0, 1.0, size=(4, 3))
    tau = joint_torques_from_force(q, np.array([0.1, 0.2, 0.3]), np.zeros((4, 3)), params)
    np.testing.assert_allclose(tau, 0.0, atol=0)


def test_torques_straight_leg_axial_force():
    # axial force along the straight leg produces (near-)zero hip/knee torque
    params = ModelParams()
    q = np.zeros((4, 3))
    lam = np.zeros((4, 3))
    lam[:, 2] = 200.0  # vertical, aligned with the straight leg at level attitude
    tau = joint_torques_from_force(q, np.zeros(3), lam, params)
    # abduction sees the l1 lateral offset; hip and knee see nothing
    np.testing.assert_allclose(tau[:, 1:], 0.0, atol=1e-12)


def test_torques_virtual_work():
    # tau^T dq == lam^T (R J dq): the projection does equal work
    params = ModelParams()
    for _ in range(10):
        q = RNG.uniform(-1.4, 1.4, size=(4, 3))
        rpy = RNG.uniform(-1.0, 1.0, size=3)
        lam = RNG.uniform(-80, 80, size=(4, 3))
        tau = joint_torques_from_force(q, rpy, lam, params)
        R = rotation_from_rpy(rpy)
        J = foot_jacobian(q, params)
        for i in range(4):
            dq = RNG.uniform(-1, 1, size=3)
            work_joint = tau[i] @ dq
            work_cart = lam[i] @ (R @ (J[i] @ dq))
            np.testing.assert_allclose(work_joint, work_cart, rtol=1e-12, atol=1e-12)
