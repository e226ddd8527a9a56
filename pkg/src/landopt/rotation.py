"""Rotation and Euler-rate helpers for ZYX roll-pitch-yaw states.

All functions broadcast over leading axes: rpy inputs of shape (..., 3)
produce matrices of shape (..., 3, 3).  The rate map is singular at
|pitch| = pi/2; callers keep pitch inside bounds.
"""

from __future__ import annotations

import numpy as np


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b). Broadcasts."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=float)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotation_from_rpy(rpy: np.ndarray) -> np.ndarray:
    """World-from-body rotation Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    rpy = np.asarray(rpy, dtype=float)
    sr, cr = np.sin(rpy[..., 0]), np.cos(rpy[..., 0])
    sp, cp = np.sin(rpy[..., 1]), np.cos(rpy[..., 1])
    sy, cy = np.sin(rpy[..., 2]), np.cos(rpy[..., 2])
    R = np.empty(rpy.shape[:-1] + (3, 3), dtype=float)
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def rotation_rpy_partials(rpy: np.ndarray) -> np.ndarray:
    """Stack [dR/droll, dR/dpitch, dR/dyaw], shape (..., 3, 3, 3)."""
    rpy = np.asarray(rpy, dtype=float)
    sr, cr = np.sin(rpy[..., 0]), np.cos(rpy[..., 0])
    sp, cp = np.sin(rpy[..., 1]), np.cos(rpy[..., 1])
    sy, cy = np.sin(rpy[..., 2]), np.cos(rpy[..., 2])
    D = np.zeros(rpy.shape[:-1] + (3, 3, 3), dtype=float)
    # d/droll
    D[..., 0, 0, 1] = cy * sp * cr + sy * sr
    D[..., 0, 0, 2] = -cy * sp * sr + sy * cr
    D[..., 0, 1, 1] = sy * sp * cr - cy * sr
    D[..., 0, 1, 2] = -sy * sp * sr - cy * cr
    D[..., 0, 2, 1] = cp * cr
    D[..., 0, 2, 2] = -cp * sr
    # d/dpitch
    D[..., 1, 0, 0] = -cy * sp
    D[..., 1, 0, 1] = cy * cp * sr
    D[..., 1, 0, 2] = cy * cp * cr
    D[..., 1, 1, 0] = -sy * sp
    D[..., 1, 1, 1] = sy * cp * sr
    D[..., 1, 1, 2] = sy * cp * cr
    D[..., 1, 2, 0] = -cp
    D[..., 1, 2, 1] = -sp * sr
    D[..., 1, 2, 2] = -sp * cr
    # d/dyaw
    D[..., 2, 0, 0] = -sy * cp
    D[..., 2, 0, 1] = -sy * sp * sr - cy * cr
    D[..., 2, 0, 2] = -sy * sp * cr + cy * sr
    D[..., 2, 1, 0] = cy * cp
    D[..., 2, 1, 1] = cy * sp * sr - sy * cr
    D[..., 2, 1, 2] = cy * sp * cr + sy * sr
    return D


def omega_to_rpy_rates(rpy: np.ndarray) -> np.ndarray:
    """Map M with rpy_dot = M @ omega_body. Depends on roll and pitch only."""
    rpy = np.asarray(rpy, dtype=float)
    sr, cr = np.sin(rpy[..., 0]), np.cos(rpy[..., 0])
    cp = np.cos(rpy[..., 1])
    tp = np.tan(rpy[..., 1])
    M = np.zeros(rpy.shape[:-1] + (3, 3), dtype=float)
    M[..., 0, 0] = 1.0
    M[..., 0, 1] = sr * tp
    M[..., 0, 2] = cr * tp
    M[..., 1, 1] = cr
    M[..., 1, 2] = -sr
    M[..., 2, 1] = sr / cp
    M[..., 2, 2] = cr / cp
    return M


def omega_to_rpy_rates_partials(rpy: np.ndarray) -> np.ndarray:
    """Stack [dM/droll, dM/dpitch], shape (..., 2, 3, 3). dM/dyaw = 0."""
    rpy = np.asarray(rpy, dtype=float)
    sr, cr = np.sin(rpy[..., 0]), np.cos(rpy[..., 0])
    sp, cp = np.sin(rpy[..., 1]), np.cos(rpy[..., 1])
    tp = sp / cp
    D = np.zeros(rpy.shape[:-1] + (2, 3, 3), dtype=float)
    D[..., 0, 0, 1] = cr * tp
    D[..., 0, 0, 2] = -sr * tp
    D[..., 0, 1, 1] = -sr
    D[..., 0, 1, 2] = -cr
    D[..., 0, 2, 1] = cr / cp
    D[..., 0, 2, 2] = -sr / cp
    sec2 = 1.0 / cp**2
    D[..., 1, 0, 1] = sr * sec2
    D[..., 1, 0, 2] = cr * sec2
    D[..., 1, 2, 1] = sr * sp * sec2
    D[..., 1, 2, 2] = cr * sp * sec2
    return D
