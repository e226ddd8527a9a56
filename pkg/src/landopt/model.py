"""Single-rigid-body quadruped model: parameters and centroidal dynamics.

State layout (12): [roll, pitch, yaw, px, py, pz, wx, wy, wz, vx, vy, vz]
with angular velocity in the body frame and position/velocity in world.
Contact inputs are per-foot world positions r (4, 3) and world ground
reaction forces lam (4, 3) acting on the robot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rotation import (
    omega_to_rpy_rates,
    omega_to_rpy_rates_partials,
    rotation_from_rpy,
    rotation_rpy_partials,
    skew,
)

GRAVITY = 9.81

# default geometry: Mini-Cheetah-class quadruped
_DEFAULT_INERTIA = np.diag([0.027, 0.055, 0.057])
_DEFAULT_HIPS = np.array(
    [
        [0.19, 0.049, 0.0],   # front left
        [0.19, -0.049, 0.0],  # front right
        [-0.19, 0.049, 0.0],  # rear left
        [-0.19, -0.049, 0.0], # rear right
    ]
)
_DEFAULT_LINKS = np.array([0.062, 0.209, 0.195])  # abduction offset, thigh, shank
_DEFAULT_JOINT_LIMITS = np.array(
    [
        [-0.8, 0.8],    # abduction
        [-1.2, 2.0],    # hip pitch
        [-2.6, -0.05],  # knee
    ]
)
_DEFAULT_NOMINAL = np.array([0.0, 0.9, -1.8])


@dataclass
class ModelParams:
    """Physical constants of the robot. Arrays are copied on construction."""

    mass: float = 9.0
    inertia: np.ndarray = field(default_factory=lambda: _DEFAULT_INERTIA.copy())
    hip_offsets: np.ndarray = field(default_factory=lambda: _DEFAULT_HIPS.copy())
    link_lengths: np.ndarray = field(default_factory=lambda: _DEFAULT_LINKS.copy())
    l_max: float = 0.35
    mu: float = 0.75
    tau_max: float = 17.0
    gravity: float = GRAVITY
    joint_limits: np.ndarray = field(
        default_factory=lambda: _DEFAULT_JOINT_LIMITS.copy()
    )
    nominal_joints: np.ndarray = field(default_factory=lambda: _DEFAULT_NOMINAL.copy())
    chassis_half_height: float = 0.05

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        if self.inertia.shape == (3,):
            self.inertia = np.diag(self.inertia)
        self.hip_offsets = np.asarray(self.hip_offsets, dtype=float).reshape(4, 3)
        self.link_lengths = np.asarray(self.link_lengths, dtype=float).reshape(3)
        self.joint_limits = np.asarray(self.joint_limits, dtype=float).reshape(3, 2)
        self.nominal_joints = np.asarray(self.nominal_joints, dtype=float).reshape(3)
        # abduction offset points away from the body centerline
        self.leg_sides = np.where(self.hip_offsets[:, 1] >= 0.0, 1.0, -1.0)
        self.inertia_inv = np.linalg.inv(self.inertia)
        if self.l_max > self.link_lengths[1] + self.link_lengths[2]:
            raise ValueError("l_max exceeds thigh+shank reach")
        if self.mass <= 0 or self.mu <= 0 or self.tau_max <= 0:
            raise ValueError("mass, mu, tau_max must be positive")

    @property
    def weight(self) -> float:
        return self.mass * self.gravity


def srbm_dynamics(
    state: np.ndarray, feet: np.ndarray, forces: np.ndarray, params: ModelParams
) -> np.ndarray:
    """Continuous-time state derivative. Broadcasts over leading axes."""
    state = np.asarray(state, dtype=float)
    feet = np.asarray(feet, dtype=float)
    forces = np.asarray(forces, dtype=float)
    rpy = state[..., 0:3]
    p = state[..., 3:6]
    om = state[..., 6:9]
    v = state[..., 9:12]

    R = rotation_from_rpy(rpy)
    M = omega_to_rpy_rates(rpy)

    total = forces.sum(axis=-2)
    lever = feet - p[..., None, :]
    moment = np.cross(lever, forces).sum(axis=-2)  # world frame about COM

    Iw = om @ params.inertia.T
    om_dot = (
        np.einsum("ij,...j->...i", params.inertia_inv,
                  np.einsum("...ji,...j->...i", R, moment) - np.cross(om, Iw))
    )
    out = np.empty_like(state)
    out[..., 0:3] = np.einsum("...ij,...j->...i", M, om)
    out[..., 3:6] = v
    out[..., 6:9] = om_dot
    out[..., 9:12] = total / params.mass
    out[..., 11] -= params.gravity
    return out


def euler_step(
    state: np.ndarray,
    feet: np.ndarray,
    forces: np.ndarray,
    dt: float,
    params: ModelParams,
) -> np.ndarray:
    """One explicit Euler step; matches the transcription's defect rule."""
    return state + dt * srbm_dynamics(state, feet, forces, params)


def srbm_dynamics_jacobians(
    state: np.ndarray, feet: np.ndarray, forces: np.ndarray, params: ModelParams
):
    """Analytic partials of srbm_dynamics.

    Returns (A, B_feet, B_forces) with shapes (..., 12, 12), (..., 12, 4, 3),
    (..., 12, 4, 3).
    """
    state = np.asarray(state, dtype=float)
    feet = np.asarray(feet, dtype=float)
    forces = np.asarray(forces, dtype=float)
    rpy = state[..., 0:3]
    p = state[..., 3:6]
    om = state[..., 6:9]

    R = rotation_from_rpy(rpy)
    dR = rotation_rpy_partials(rpy)  # (..., 3, 3, 3)
    M = omega_to_rpy_rates(rpy)
    dM = omega_to_rpy_rates_partials(rpy)  # (..., 2, 3, 3)

    lever = feet - p[..., None, :]
    moment = np.cross(lever, forces).sum(axis=-2)
    lam_sum_skew = skew(forces).sum(axis=-3)  # sum_i [lam_i]_x

    batch = state.shape[:-1]
    A = np.zeros(batch + (12, 12), dtype=float)
    Bf = np.zeros(batch + (12, 4, 3), dtype=float)
    Bl = np.zeros(batch + (12, 4, 3), dtype=float)

    # rpy_dot = M(roll, pitch) @ omega
    A[..., 0:3, 0] = np.einsum("...ij,...j->...i", dM[..., 0, :, :], om)
    A[..., 0:3, 1] = np.einsum("...ij,...j->...i", dM[..., 1, :, :], om)
    A[..., 0:3, 6:9] = M

    # p_dot = v
    A[..., 3:6, 9:12] = np.eye(3)

    # om_dot = I^-1 (R^T moment - om x I om)
    Iinv = params.inertia_inv
    for a in range(3):
        dRa_T_m = np.einsum("...ji,...j->...i", dR[..., a, :, :], moment)
        A[..., 6:9, a] = np.einsum("ij,...j->...i", Iinv, dRa_T_m)
    RT = np.swapaxes(R, -1, -2)
    A[..., 6:9, 3:6] = np.einsum("ij,...jk,...kl->...il", Iinv, RT, lam_sum_skew)
    Iw = om @ params.inertia.T
    gyro = skew(Iw) - skew(om) @ params.inertia
    A[..., 6:9, 6:9] = np.einsum("ij,...jk->...ik", Iinv, gyro)

    IinvRT = np.einsum("ij,...jk->...ik", Iinv, RT)
    lam_skew = skew(forces)          # (..., 4, 3, 3)
    lever_skew = skew(lever)
    # d om_dot / d r_i = -I^-1 R^T [lam_i]_x ; d om_dot / d lam_i = I^-1 R^T [r_i - p]_x
    Bf[..., 6:9, :, :] = -np.einsum("...ik,...nkj->...inj", IinvRT, lam_skew)
    Bl[..., 6:9, :, :] = np.einsum("...ik,...nkj->...inj", IinvRT, lever_skew)

    # v_dot = sum(lam) / m - g
    for i in range(3):
        Bl[..., 9 + i, :, i] = 1.0 / params.mass

    return A, Bf, Bl
