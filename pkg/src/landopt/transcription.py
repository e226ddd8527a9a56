"""Direct transcription of the landing problem into a sparse NLP.

Decision vector: knot-major blocks of 48 variables,
    [state(12) | foot positions(4x3, world) | forces(4x3, world) | joints(4x3)]
so n_vars = 48 * N.  Constraint rows are grouped by family; every row is a
two-sided bound cl <= c(x) <= cu (equalities have cl == cu).  The Jacobian
sparsity pattern is fixed at build time; evaluations only refill values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .kinematics import foot_jacobian, foot_jacobian_partials, leg_forward_kinematics
from .model import ModelParams, srbm_dynamics, srbm_dynamics_jacobians
from .rotation import rotation_from_rpy, rotation_rpy_partials

NX = 12           # state block
NU = 24           # input block: 4 feet * 3 + 4 forces * 3
NQ = 12           # joint block
NV = NX + NU + NQ  # 48 per knot

# state sub-indices
I_RPY = slice(0, 3)
I_POS = slice(3, 6)
I_OMEGA = slice(6, 9)
I_VEL = slice(9, 12)


@dataclass
class TimeGrid:
    """Knot step durations. dts[k] spans knot k -> k+1; the last entry pads
    the grid out to the horizon and is not used by any defect."""

    dts: np.ndarray

    def __post_init__(self):
        self.dts = np.asarray(self.dts, dtype=float).reshape(-1)
        if len(self.dts) < 2 or np.any(self.dts <= 0):
            raise ValueError("need at least two positive step durations")
        if np.any(np.diff(self.dts) < -1e-12):
            raise ValueError("step durations must be nondecreasing")

    @property
    def n_knots(self) -> int:
        return len(self.dts)

    @property
    def times(self) -> np.ndarray:
        t = np.concatenate([[0.0], np.cumsum(self.dts)])
        return t[:-1]

    @property
    def horizon(self) -> float:
        return float(self.dts.sum())


def default_time_grid() -> TimeGrid:
    """Dense early steps through impact, coarse settle steps after."""
    return TimeGrid(np.concatenate([np.full(8, 0.025), np.full(8, 0.075)]))


@dataclass
class FallingCondition:
    """Touchdown-imminent body condition: attitude, body-frame angular
    velocity, world linear velocity. Horizontal position is irrelevant."""

    rpy: np.ndarray
    omega: np.ndarray
    vel: np.ndarray

    def __post_init__(self):
        self.rpy = np.asarray(self.rpy, dtype=float).reshape(3)
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        self.vel = np.asarray(self.vel, dtype=float).reshape(3)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.rpy, self.omega, self.vel])

    @staticmethod
    def from_vector(v) -> "FallingCondition":
        v = np.asarray(v, dtype=float).reshape(9)
        return FallingCondition(v[0:3], v[3:6], v[6:9])


@dataclass
class KinBoxParams:
    """Velocity-adaptive foot workspace box, body frame, centered on
    nominal_foot. Half-extent per axis: base + growth * min(|v|/v_max, 1)."""

    base_extent: np.ndarray = field(default_factory=lambda: np.array([0.10, 0.06, 0.08]))
    growth: np.ndarray = field(default_factory=lambda: np.array([0.10, 0.08, 0.10]))
    v_max: np.ndarray = field(default_factory=lambda: np.array([1.5, 1.5, 4.0]))
    nominal_foot: np.ndarray | None = None

    def __post_init__(self):
        self.base_extent = np.asarray(self.base_extent, dtype=float).reshape(3)
        self.growth = np.asarray(self.growth, dtype=float).reshape(3)
        self.v_max = np.asarray(self.v_max, dtype=float).reshape(3)
        if self.nominal_foot is not None:
            self.nominal_foot = np.asarray(self.nominal_foot, dtype=float).reshape(4, 3)


def kin_box_limits(vel_body: np.ndarray, box: KinBoxParams) -> np.ndarray:
    """Per-axis half-extents for the given body-frame velocity."""
    vel_body = np.asarray(vel_body, dtype=float).reshape(3)
    scale = np.minimum(np.abs(vel_body) / box.v_max, 1.0)
    return box.base_extent + box.growth * scale


@dataclass
class ProblemBounds:
    """Variable bound boxes. Angles rad, positions m, velocities m/s or rad/s."""

    rpy_lo: np.ndarray = field(default_factory=lambda: np.array([-np.pi, -1.5, -2 * np.pi]))
    rpy_hi: np.ndarray = field(default_factory=lambda: np.array([np.pi, 1.5, 2 * np.pi]))
    pos_z: tuple = (0.06, 3.0)
    pos_xy: float = 10.0
    omega_max: float = 12.0
    vel_xy: float = 6.0
    vel_z: tuple = (-16.0, 4.0)
    force_z_max: float = 1200.0
    force_xy_max: float = 900.0
    terminal_vel: float = 0.3


def initial_height(
    z: FallingCondition, params: ModelParams, dt0: float
) -> float:
    """Body height that keeps every reachable foot above ground through the
    first Euler step: l_max + lowest-hip drop + first-step fall distance."""
    R = rotation_from_rpy(z.rpy)
    hip_z = (R @ params.hip_offsets.T)[2]
    return params.l_max + abs(float(hip_z.min())) + abs(float(z.vel[2])) * dt0


def post_process_joint_velocities(joints: np.ndarray, dts: np.ndarray) -> np.ndarray:
    """Forward differences over the grid; the last knot repeats its
    predecessor's rate."""
    joints = np.asarray(joints, dtype=float)
    dts = np.asarray(dts, dtype=float)
    vels = np.zeros_like(joints)
    vels[:-1] = (joints[1:] - joints[:-1]) / dts[: len(joints) - 1, None, None]
    if len(joints) > 1:
        vels[-1] = vels[-2]
    return vels


@dataclass
class LandingTrajectory:
    """Solved (or guessed) trajectory on the grid, SI units, world frame."""

    times: np.ndarray
    states: np.ndarray       # (N, 12)
    feet: np.ndarray         # (N, 4, 3)
    forces: np.ndarray       # (N, 4, 3)
    joints: np.ndarray       # (N, 4, 3)
    joint_vels: np.ndarray   # (N, 4, 3)

    @property
    def n_knots(self) -> int:
        return len(self.times)

    def pack(self) -> np.ndarray:
        n = self.n_knots
        out = np.empty(n * NV, dtype=float)
        V = out.reshape(n, NV)
        V[:, 0:NX] = self.states
        V[:, NX:NX + 12] = self.feet.reshape(n, 12)
        V[:, NX + 12:NX + 24] = self.forces.reshape(n, 12)
        V[:, NX + 24:NV] = self.joints.reshape(n, 12)
        return out


_FAMILIES = ("dynamics", "fk", "no_slip", "ccc", "friction", "torque", "leg_len", "box")


class NlpProblem:
    """Immutable transcription instance. Use build_problem to construct."""

    def __init__(self, z, params, grid, box, bounds, q_weights, x_ref, r0,
                 initial_position=None):
        self.z = z
        self.params = params
        self.grid = grid
        self.box = box
        self.bounds_cfg = bounds
        self.n_knots = grid.n_knots
        self.n_vars = NV * self.n_knots
        self.q_weights = np.asarray(q_weights, dtype=float).reshape(NX)
        self.x_ref = np.asarray(x_ref, dtype=float).reshape(NX)

        N = self.n_knots
        dt0 = float(grid.dts[0])
        if initial_position is None:
            p0 = np.array([0.0, 0.0, initial_height(z, params, dt0)])
        else:
            p0 = np.asarray(initial_position, dtype=float).reshape(3)
        self.x0 = np.concatenate([z.rpy, p0, z.omega, z.vel])
        R0 = rotation_from_rpy(z.rpy)
        if r0 is None:
            q_nom = np.tile(params.nominal_joints, (4, 1))
            r0 = self.x0[3:6] + leg_forward_kinematics(q_nom, params) @ R0.T
        self.r0 = np.asarray(r0, dtype=float).reshape(4, 3)

        vel_body = R0.T @ z.vel
        self.box_extent = kin_box_limits(vel_body, box)
        if box.nominal_foot is None:
            nominal = leg_forward_kinematics(np.tile(params.nominal_joints, (4, 1)), params)
        else:
            nominal = box.nominal_foot
        self.box_center = nominal

        self._build_row_layout()
        self._build_var_bounds()
        self._build_jacobian_pattern()

    # ----- layout ------------------------------------------------------

    def state_slice(self, k):
        return slice(k * NV, k * NV + NX)

    def feet_slice(self, k):
        return slice(k * NV + NX, k * NV + NX + 12)

    def force_slice(self, k):
        return slice(k * NV + NX + 12, k * NV + NX + 24)

    def joint_slice(self, k):
        return slice(k * NV + NX + 24, (k + 1) * NV)

    def _build_row_layout(self):
        N = self.n_knots
        sizes = {
            "dynamics": (N - 1) * NX,
            "fk": N * 12,
            "no_slip": (N - 1) * 8,
            "ccc": N * 4,
            "friction": N * 16,
            "torque": N * 12,
            "leg_len": N * 4,
            "box": N * 12,
        }
        self.family_slices = {}
        at = 0
        for name in _FAMILIES:
            self.family_slices[name] = slice(at, at + sizes[name])
            at += sizes[name]
        self.n_rows = at

        cl = np.full(self.n_rows, -np.inf)
        cu = np.full(self.n_rows, np.inf)
        eq = lambda s: (cl.__setitem__(s, 0.0), cu.__setitem__(s, 0.0))
        eq(self.family_slices["dynamics"])
        eq(self.family_slices["fk"])
        eq(self.family_slices["no_slip"])
        cu[self.family_slices["ccc"]] = 0.0
        cu[self.family_slices["friction"]] = 0.0
        tq = self.family_slices["torque"]
        cl[tq] = -self.params.tau_max
        cu[tq] = self.params.tau_max
        cu[self.family_slices["leg_len"]] = self.params.l_max**2
        bx = self.family_slices["box"]
        ext = np.tile(self.box_extent, (self.n_knots * 4,))
        cl[bx] = -ext
        cu[bx] = ext
        self.row_lb = cl
        self.row_ub = cu

    def _build_var_bounds(self):
        N = self.n_knots
        b = self.bounds_cfg
        lb = np.full(self.n_vars, -np.inf)
        ub = np.full(self.n_vars, np.inf)
        L = lb.reshape(N, NV)
        U = ub.reshape(N, NV)
        L[:, 0:3] = b.rpy_lo
        U[:, 0:3] = b.rpy_hi
        L[:, 3:5] = -b.pos_xy
        U[:, 3:5] = b.pos_xy
        L[:, 5] = b.pos_z[0]
        U[:, 5] = b.pos_z[1]
        L[:, 6:9] = -b.omega_max
        U[:, 6:9] = b.omega_max
        L[:, 9:11] = -b.vel_xy
        U[:, 9:11] = b.vel_xy
        L[:, 11] = b.vel_z[0]
        U[:, 11] = b.vel_z[1]
        # feet: ground clearance on z only
        fz = NX + np.array([2, 5, 8, 11])
        L[:, fz] = 0.0
        # forces
        lz = NX + 12 + np.array([2, 5, 8, 11])
        lxy = NX + 12 + np.array([0, 1, 3, 4, 6, 7, 9, 10])
        L[:, lz] = 0.0
        U[:, lz] = b.force_z_max
        L[:, lxy] = -b.force_xy_max
        U[:, lxy] = b.force_xy_max
        # joints
        jl = np.tile(self.params.joint_limits[:, 0], 4)
        ju = np.tile(self.params.joint_limits[:, 1], 4)
        L[:, NX + 24:] = jl
        U[:, NX + 24:] = ju
        # terminal soft-landing velocity box
        L[N - 1, 9:12] = np.maximum(L[N - 1, 9:12], -b.terminal_vel)
        U[N - 1, 9:12] = np.minimum(U[N - 1, 9:12], b.terminal_vel)
        # initial state and initial feet are frozen variables
        L[0, 0:NX] = U[0, 0:NX] = self.x0
        L[0, NX:NX + 12] = U[0, NX:NX + 12] = self.r0.reshape(12)
        self.var_lb = lb
        self.var_ub = ub
        if np.any(self.var_lb > self.var_ub):
            raise ValueError("infeasible variable bounds (initial condition outside boxes)")

    # ----- views -------------------------------------------------------

    def views(self, x):
        V = x.reshape(self.n_knots, NV)
        state = V[:, 0:NX]
        feet = V[:, NX:NX + 12].reshape(self.n_knots, 4, 3)
        lam = V[:, NX + 12:NX + 24].reshape(self.n_knots, 4, 3)
        q = V[:, NX + 24:NV].reshape(self.n_knots, 4, 3)
        return state, feet, lam, q

    # ----- cost --------------------------------------------------------

    def cost(self, x) -> float:
        xe = x[self.state_slice(self.n_knots - 1)] - self.x_ref
        return float(xe @ (self.q_weights * xe))

    def cost_grad(self, x) -> np.ndarray:
        g = np.zeros(self.n_vars)
        s = self.state_slice(self.n_knots - 1)
        g[s] = 2.0 * self.q_weights * (x[s] - self.x_ref)
        return g

    def cost_hess_diag(self) -> np.ndarray:
        h = np.zeros(self.n_vars)
        h[self.state_slice(self.n_knots - 1)] = 2.0 * self.q_weights
        return h

    # ----- constraints -------------------------------------------------

    def eval_constraints(self, x: np.ndarray) -> np.ndarray:
        N = self.n_knots
        state, feet, lam, q = self.views(x)
        rpy = state[:, 0:3]
        p = state[:, 3:6]
        R = rotation_from_rpy(rpy)
        out = np.empty(self.n_rows)

        xdot = srbm_dynamics(state[:-1], feet[:-1], lam[:-1], self.params)
        defect = state[1:] - state[:-1] - self.grid.dts[: N - 1, None] * xdot
        out[self.family_slices["dynamics"]] = defect.reshape(-1)

        fkpos = leg_forward_kinematics(q, self.params)
        fk_res = feet - p[:, None, :] - np.einsum("kij,knj->kni", R, fkpos)
        out[self.family_slices["fk"]] = fk_res.reshape(-1)

        dxy = feet[1:, :, 0:2] - feet[:-1, :, 0:2]
        out[self.family_slices["no_slip"]] = (dxy * lam[:-1, :, 2:3]).reshape(-1)

        out[self.family_slices["ccc"]] = (lam[:, :, 2] * feet[:, :, 2]).reshape(-1)

        mu = self.params.mu
        fr = np.empty((N, 4, 4))
        fr[..., 0] = lam[..., 0] - mu * lam[..., 2]
        fr[..., 1] = -lam[..., 0] - mu * lam[..., 2]
        fr[..., 2] = lam[..., 1] - mu * lam[..., 2]
        fr[..., 3] = -lam[..., 1] - mu * lam[..., 2]
        out[self.family_slices["friction"]] = fr.reshape(-1)

        f_body = np.einsum("kji,knj->kni", R, lam)
        J = foot_jacobian(q, self.params)
        tau = np.einsum("knji,knj->kni", J, f_body)
        out[self.family_slices["torque"]] = tau.reshape(-1)

        hips_w = np.einsum("kij,nj->kni", R, self.params.hip_offsets)
        d = feet - p[:, None, :] - hips_w
        out[self.family_slices["leg_len"]] = np.sum(d * d, axis=-1).reshape(-1)

        rel = np.einsum("kji,knj->kni", R, feet - p[:, None, :]) - self.box_center
        out[self.family_slices["box"]] = rel.reshape(-1)
        return out

    # ----- jacobian ----------------------------------------------------

    def _pattern_add(self, rows, cols):
        self._pat_rows.append(np.asarray(rows, dtype=np.int32).reshape(-1))
        self._pat_cols.append(np.asarray(cols, dtype=np.int32).reshape(-1))

    def _build_jacobian_pattern(self):
        """Fixed fill order; values are recomputed in the same order."""
        N = self.n_knots
        self._pat_rows = []
        self._pat_cols = []
        base = np.arange(N) * NV

        # dynamics: rows (k, i) k<N-1
        r0 = self.family_slices["dynamics"].start
        dyn_rows = r0 + np.arange((N - 1) * NX).reshape(N - 1, NX)
        # wrt x_k block (12x12 dense)
        rr = np.repeat(dyn_rows[:, :, None], NX, axis=2)
        cc = np.broadcast_to((base[:-1, None, None] + np.arange(NX)[None, None, :]), rr.shape)
        self._pattern_add(rr, cc)
        # wrt feet_k (omega-dot rows 6:9 x 12)
        rr = np.repeat(dyn_rows[:, 6:9, None], 12, axis=2)
        cc = np.broadcast_to((base[:-1, None, None] + NX + np.arange(12)[None, None, :]), rr.shape)
        self._pattern_add(rr, cc)
        # wrt forces_k omega-dot rows
        cc = np.broadcast_to((base[:-1, None, None] + NX + 12 + np.arange(12)[None, None, :]), rr.shape)
        self._pattern_add(rr, cc)
        # wrt forces_k vel-dot rows: row 9+i, cols lam (n, i)
        rr = np.repeat(dyn_rows[:, 9:12, None], 4, axis=2)  # (N-1, 3, 4)
        cc = (base[:-1, None, None] + NX + 12 + (np.arange(4) * 3)[None, None, :]
              + np.arange(3)[None, :, None])
        self._pattern_add(rr, np.broadcast_to(cc, rr.shape))
        # wrt x_{k+1}: identity
        self._pattern_add(dyn_rows, base[1:, None] + np.arange(NX)[None, :])

        # fk rows (k, leg, axis)
        r0 = self.family_slices["fk"].start
        fk_rows = r0 + np.arange(N * 12).reshape(N, 4, 3)
        # wrt foot var (same leg, same axis)
        self._pattern_add(fk_rows, base[:, None, None] + NX + np.arange(12).reshape(1, 4, 3))
        # wrt p (minus identity on the axis)
        self._pattern_add(
            fk_rows,
            np.broadcast_to(base[:, None, None] + 3 + np.arange(3).reshape(1, 1, 3),
                            fk_rows.shape),
        )
        # wrt rpy (3 each)
        rr = np.repeat(fk_rows[:, :, :, None], 3, axis=3)
        cc = np.broadcast_to(base[:, None, None, None] + np.arange(3)[None, None, None, :], rr.shape)
        self._pattern_add(rr, cc)
        # wrt q_leg (3 each)
        cc = (base[:, None, None, None] + NX + 24 + (np.arange(4) * 3)[None, :, None, None]
              + np.arange(3)[None, None, None, :])
        self._pattern_add(rr, np.broadcast_to(cc, rr.shape))

        # no_slip rows (k, leg, a): wrt r_{k+1,a}, r_{k,a}, lam_z_k
        r0 = self.family_slices["no_slip"].start
        ns_rows = r0 + np.arange((N - 1) * 8).reshape(N - 1, 4, 2)
        foot_axis = NX + (np.arange(4) * 3)[None, :, None] + np.arange(2)[None, None, :]
        self._pattern_add(ns_rows, base[1:, None, None] + foot_axis)
        self._pattern_add(ns_rows, base[:-1, None, None] + foot_axis)
        lamz = NX + 12 + (np.arange(4) * 3)[None, :, None] + 2
        self._pattern_add(ns_rows, np.broadcast_to(base[:-1, None, None] + lamz, ns_rows.shape))

        # ccc rows (k, leg): wrt lam_z, r_z
        r0 = self.family_slices["ccc"].start
        ccc_rows = r0 + np.arange(N * 4).reshape(N, 4)
        self._pattern_add(ccc_rows, base[:, None] + NX + 12 + np.arange(4) * 3 + 2)
        self._pattern_add(ccc_rows, base[:, None] + NX + np.arange(4) * 3 + 2)

        # friction rows (k, leg, 4): wrt lam_x or lam_y, and lam_z
        r0 = self.family_slices["friction"].start
        fr_rows = r0 + np.arange(N * 16).reshape(N, 4, 4)
        lam0 = base[:, None, None] + NX + 12 + (np.arange(4) * 3)[None, :, None]
        tang = np.array([0, 0, 1, 1])[None, None, :]
        self._pattern_add(fr_rows, lam0 + tang)
        self._pattern_add(fr_rows, np.broadcast_to(lam0 + 2, fr_rows.shape))

        # torque rows (k, leg, j): wrt rpy(3), lam_leg(3), q_leg(3)
        r0 = self.family_slices["torque"].start
        tq_rows = r0 + np.arange(N * 12).reshape(N, 4, 3)
        rr = np.repeat(tq_rows[:, :, :, None], 3, axis=3)
        cc = np.broadcast_to(base[:, None, None, None] + np.arange(3)[None, None, None, :], rr.shape)
        self._pattern_add(rr, cc)
        cc = (base[:, None, None, None] + NX + 12 + (np.arange(4) * 3)[None, :, None, None]
              + np.arange(3)[None, None, None, :])
        self._pattern_add(rr, np.broadcast_to(cc, rr.shape))
        cc = (base[:, None, None, None] + NX + 24 + (np.arange(4) * 3)[None, :, None, None]
              + np.arange(3)[None, None, None, :])
        self._pattern_add(rr, np.broadcast_to(cc, rr.shape))

        # leg_len rows (k, leg): wrt r(3), p(3), rpy(3)
        r0 = self.family_slices["leg_len"].start
        ll_rows = r0 + np.arange(N * 4).reshape(N, 4)
        rr = np.repeat(ll_rows[:, :, None], 3, axis=2)
        cc = base[:, None, None] + NX + (np.arange(4) * 3)[None, :, None] + np.arange(3)[None, None, :]
        self._pattern_add(rr, np.broadcast_to(cc, rr.shape))
        cc = np.broadcast_to(base[:, None, None] + 3 + np.arange(3)[None, None, :], rr.shape)
        self._pattern_add(rr, cc)
        cc = np.broadcast_to(base[:, None, None] + np.arange(3)[None, None, :], rr.shape)
        self._pattern_add(rr, cc)

        # box rows (k, leg, a): wrt r(3), p(3), rpy(3)
        r0 = self.family_slices["box"].start
        bx_rows = r0 + np.arange(N * 12).reshape(N, 4, 3)
        rr = np.repeat(bx_rows[:, :, :, None], 3, axis=3)
        cc = (base[:, None, None, None] + NX + (np.arange(4) * 3)[None, :, None, None]
              + np.arange(3)[None, None, None, :])
        self._pattern_add(rr, np.broadcast_to(cc, rr.shape))
        cc = np.broadcast_to(base[:, None, None, None] + 3 + np.arange(3)[None, None, None, :], rr.shape)
        self._pattern_add(rr, cc)
        cc = np.broadcast_to(base[:, None, None, None] + np.arange(3)[None, None, None, :], rr.shape)
        self._pattern_add(rr, cc)

        rows = np.concatenate(self._pat_rows)
        cols = np.concatenate(self._pat_cols)
        del self._pat_rows, self._pat_cols
        self.jac_nnz = len(rows)
        order = np.arange(self.jac_nnz)
        coo = sp.coo_matrix((order.astype(float), (rows, cols)),
                            shape=(self.n_rows, self.n_vars))
        csr = coo.tocsr()
        csr.sum_duplicates()
        if csr.nnz != self.jac_nnz:
            raise AssertionError("duplicate jacobian coordinates in pattern")
        self._jac_perm = csr.data.astype(np.int64)
        self._jac_indices = csr.indices
        self._jac_indptr = csr.indptr

    def eval_jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        """Analytic constraint Jacobian as CSR with the fixed pattern."""
        N = self.n_knots
        state, feet, lam, q = self.views(x)
        rpy = state[:, 0:3]
        p = state[:, 3:6]
        R = rotation_from_rpy(rpy)
        dR = rotation_rpy_partials(rpy)  # (N, 3, 3, 3)
        vals = []

        # dynamics
        A, Bf, Bl = srbm_dynamics_jacobians(state[:-1], feet[:-1], lam[:-1], self.params)
        dts = self.grid.dts[: N - 1, None, None]
        blk = -dts * A
        idx = np.arange(NX)
        blk[:, idx, idx] -= 1.0
        vals.append(blk.reshape(-1))
        vals.append((-dts * Bf.reshape(N - 1, NX, 12))[:, 6:9, :].reshape(-1))
        Blr = (-dts * Bl.reshape(N - 1, NX, 12))
        vals.append(Blr[:, 6:9, :].reshape(-1))
        vals.append(np.broadcast_to(
            -self.grid.dts[: N - 1, None, None] / self.params.mass, (N - 1, 3, 4)).reshape(-1))
        vals.append(np.ones((N - 1) * NX))

        # fk
        fkpos = leg_forward_kinematics(q, self.params)
        Jleg = foot_jacobian(q, self.params)
        vals.append(np.ones(N * 12))
        vals.append(np.full(N * 4 * 3, -1.0))
        dR_fk = -np.einsum("kaij,knj->knia", dR, fkpos)  # d/drpy_a of -(R fk)_i
        vals.append(dR_fk.reshape(-1))
        RJ = -np.einsum("kij,knjl->knil", R, Jleg)
        vals.append(RJ.reshape(-1))

        # no_slip
        lamz = lam[:-1, :, 2]
        dxy = feet[1:, :, 0:2] - feet[:-1, :, 0:2]
        vals.append(np.repeat(lamz[..., None], 2, axis=2).reshape(-1))
        vals.append(np.repeat(-lamz[..., None], 2, axis=2).reshape(-1))
        vals.append(dxy.reshape(-1))

        # ccc
        vals.append(feet[:, :, 2].reshape(-1))
        vals.append(lam[:, :, 2].reshape(-1))

        # friction
        sgn = np.array([1.0, -1.0, 1.0, -1.0])
        vals.append(np.broadcast_to(sgn, (N, 4, 4)).reshape(-1))
        vals.append(np.full(N * 16, -self.params.mu))

        # torque: tau = J^T R^T lam
        f_body = np.einsum("kji,knj->kni", R, lam)
        Dj = foot_jacobian_partials(q, self.params)  # (N, 4, 3, 3, 3)
        # wrt rpy_a: J^T (dR_a)^T lam
        dtau_rpy = np.einsum("knjl,kaij,kni->knla", Jleg, dR, lam)
        vals.append(dtau_rpy.reshape(-1))
        # wrt lam: (R J)^T rows
        dtau_lam = np.einsum("kij,knjl->knli", R, Jleg)
        vals.append(dtau_lam.reshape(-1))
        # wrt q_l: (dJ/dq_l col j) . f_body
        dtau_q = np.einsum("knlij,kni->knjl", Dj, f_body)
        vals.append(dtau_q.reshape(-1))

        # leg_len
        hips_w = np.einsum("kij,nj->kni", R, self.params.hip_offsets)
        d = feet - p[:, None, :] - hips_w
        vals.append((2.0 * d).reshape(-1))
        vals.append((-2.0 * d).reshape(-1))
        dhip = np.einsum("kaij,nj->knia", dR, self.params.hip_offsets)
        vals.append((-2.0 * np.einsum("kni,knia->kna", d, dhip)).reshape(-1))

        # box
        RT_rows = np.broadcast_to(np.swapaxes(R, 1, 2)[:, None, :, :], (N, 4, 3, 3))
        vals.append(RT_rows.reshape(-1))
        vals.append((-RT_rows).reshape(-1))
        diff = feet - p[:, None, :]
        dbox = np.einsum("kaji,knj->knia", dR, diff)
        vals.append(dbox.reshape(-1))

        data = np.concatenate(vals)
        if len(data) != self.jac_nnz:
            raise AssertionError("jacobian fill size mismatch")
        return sp.csr_matrix(
            (data[self._jac_perm], self._jac_indices, self._jac_indptr),
            shape=(self.n_rows, self.n_vars),
        )

    # ----- trajectory available to callers ------------------------------

    def extract_trajectory(self, x: np.ndarray) -> LandingTrajectory:
        state, feet, lam, q = self.views(np.asarray(x, dtype=float))
        return LandingTrajectory(
            times=self.grid.times.copy(),
            states=state.copy(),
            feet=feet.copy(),
            forces=lam.copy(),
            joints=q.copy(),
            joint_vels=post_process_joint_velocities(q, self.grid.dts),
        )


def build_problem(
    z: FallingCondition,
    params: ModelParams | None = None,
    grid: TimeGrid | None = None,
    box: KinBoxParams | None = None,
    bounds: ProblemBounds | None = None,
    q_weights=None,
    x_ref=None,
    r0=None,
    initial_position=None,
) -> NlpProblem:
    """Assemble the landing NLP for one falling condition.

    initial_position overrides the computed drop pose; the default places
    the body at the height where no foot can reach the ground on the first
    step.
    """
    params = params or ModelParams()
    grid = grid or default_time_grid()
    box = box or KinBoxParams()
    bounds = bounds or ProblemBounds()
    if q_weights is None:
        q_weights = np.array([10.0, 10.0, 0.0, 0.0, 0.0, 10.0,
                              5.0, 5.0, 5.0, 5.0, 5.0, 5.0])
    if x_ref is None:
        x_ref = np.zeros(NX)
        x_ref[5] = 0.25
    return NlpProblem(z, params, grid, box, bounds, q_weights, x_ref, r0,
                      initial_position)
