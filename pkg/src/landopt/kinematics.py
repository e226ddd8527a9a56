"""3-DOF leg kinematics: abduction about x, hip and knee about y.

Joint convention: q = (q_ab, q_hip, q_knee), all zero puts the leg straight
down, foot at hip_offset + (0, side * l1, -(l2 + l3)) in the body frame.
Functions broadcast: q of shape (..., 4, 3) treats axis -2 as the leg index
and uses per-leg hip offsets and side signs from ModelParams.
"""

from __future__ import annotations

import numpy as np

from .model import ModelParams
from .rotation import rotation_from_rpy


def _chain_terms(q: np.ndarray, params: ModelParams):
    """Shared trig terms. q shape (..., 4, 3)."""
    l1, l2, l3 = params.link_lengths
    side = params.leg_sides
    s1, c1 = np.sin(q[..., 0]), np.cos(q[..., 0])
    s2, c2 = np.sin(q[..., 1]), np.cos(q[..., 1])
    q23 = q[..., 1] + q[..., 2]
    s23, c23 = np.sin(q23), np.cos(q23)
    # leg vector before the abduction roll, in the hip frame
    wx = -l2 * s2 - l3 * s23
    wy = side * l1 * np.ones_like(s1)
    wz = -l2 * c2 - l3 * c23
    return l3, s1, c1, s23, c23, wx, wy, wz


def leg_forward_kinematics(q: np.ndarray, params: ModelParams) -> np.ndarray:
    """Foot positions in the body frame (relative to COM), shape (..., 4, 3)."""
    q = np.asarray(q, dtype=float)
    l3, s1, c1, s23, c23, wx, wy, wz = _chain_terms(q, params)
    out = np.empty(q.shape, dtype=float)
    out[..., 0] = wx
    out[..., 1] = c1 * wy - s1 * wz
    out[..., 2] = s1 * wy + c1 * wz
    return out + params.hip_offsets


def foot_jacobian(q: np.ndarray, params: ModelParams) -> np.ndarray:
    """d(foot)/d(q) in the body frame, shape (..., 4, 3, 3)."""
    q = np.asarray(q, dtype=float)
    l3, s1, c1, s23, c23, wx, wy, wz = _chain_terms(q, params)
    J = np.empty(q.shape[:-1] + (3, 3), dtype=float)
    # column 0: rotation about x through the hip
    J[..., 0, 0] = 0.0
    J[..., 1, 0] = -(s1 * wy + c1 * wz)
    J[..., 2, 0] = c1 * wy - s1 * wz
    # column 1: rotation about the abducted y axis, thigh + shank
    J[..., 0, 1] = wz
    J[..., 1, 1] = s1 * wx
    J[..., 2, 1] = -c1 * wx
    # column 2: rotation about the abducted y axis, shank only
    J[..., 0, 2] = -l3 * c23
    J[..., 1, 2] = -s1 * l3 * s23
    J[..., 2, 2] = c1 * l3 * s23
    return J


def foot_jacobian_partials(q: np.ndarray, params: ModelParams) -> np.ndarray:
    """dJ/dq as shape (..., 4, 3, 3, 3): [..., leg, l, :, :] = dJ/dq_l."""
    q = np.asarray(q, dtype=float)
    l3, s1, c1, s23, c23, wx, wy, wz = _chain_terms(q, params)
    J = foot_jacobian(q, params)
    xhat = np.array([1.0, 0.0, 0.0])
    a = np.zeros(q.shape, dtype=float)  # abducted y axis in body frame
    a[..., 1] = c1
    a[..., 2] = s1
    m3 = np.empty(q.shape, dtype=float)  # shank vector in body frame
    m3[..., 0] = -l3 * s23
    m3[..., 1] = s1 * l3 * c23
    m3[..., 2] = -c1 * l3 * c23
    m = np.empty(q.shape, dtype=float)  # thigh + shank in body frame
    m[..., 0] = wx
    m[..., 1] = -s1 * wz
    m[..., 2] = c1 * wz

    col1 = J[..., :, 0]
    col2 = J[..., :, 1]
    col3 = J[..., :, 2]
    xa = np.cross(np.broadcast_to(xhat, a.shape), a)

    D = np.empty(q.shape[:-1] + (3, 3, 3), dtype=float)
    D[..., 0, :, 0] = np.cross(np.broadcast_to(xhat, col1.shape), col1)
    D[..., 1, :, 0] = np.cross(np.broadcast_to(xhat, col2.shape), col2)
    D[..., 2, :, 0] = np.cross(np.broadcast_to(xhat, col3.shape), col3)
    aam = np.cross(a, np.cross(a, m))
    aam3 = np.cross(a, np.cross(a, m3))
    D[..., 0, :, 1] = np.cross(xa, m) + np.cross(a, np.cross(np.broadcast_to(xhat, m.shape), m))
    D[..., 1, :, 1] = aam
    D[..., 2, :, 1] = aam3
    D[..., 0, :, 2] = np.cross(xa, m3) + np.cross(a, np.cross(np.broadcast_to(xhat, m3.shape), m3))
    D[..., 1, :, 2] = aam3
    D[..., 2, :, 2] = aam3
    return D


def joint_torques_from_force(
    q: np.ndarray, rpy: np.ndarray, lam_world: np.ndarray, params: ModelParams
) -> np.ndarray:
    """Per-joint load torques tau = J(q)^T R(rpy)^T lam, shape (..., 4, 3).

    The force is the world-frame ground reaction acting at the foot; the
    returned torque is its projection onto the joints (the load the
    actuators must hold, bounded by tau_max in the planner).
    """
    q = np.asarray(q, dtype=float)
    lam_world = np.asarray(lam_world, dtype=float)
    R = rotation_from_rpy(np.asarray(rpy, dtype=float))
    f_body = np.einsum("...ji,...nj->...ni", R, lam_world)
    J = foot_jacobian(q, params)
    return np.einsum("...nji,...nj->...ni", J, f_body)
