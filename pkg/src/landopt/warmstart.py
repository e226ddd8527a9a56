"""Supervised warm starts: condition sampling, dataset build, MLP, guesses.

The regressor maps the 9-vector falling condition [rpy, omega, vel] to the
full decision vector of the landing NLP (N*48 values). Targets are z-scored
per dimension over the dataset; inputs are scaled to [-1, 1] by the fixed
sampling ranges. Network and training loop are plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams
from .runfiles import read_blocks, write_blocks
from .transcription import (
    NV,
    FallingCondition,
    LandingTrajectory,
    NlpProblem,
    post_process_joint_velocities,
)


@dataclass
class SampleRanges:
    """Uniform sampling box for falling conditions (angles rad, m/s)."""

    roll: tuple = (-np.pi / 4, np.pi / 4)
    pitch: tuple = (-np.pi / 3, np.pi / 3)
    yaw: tuple = (-np.pi / 2, np.pi / 2)
    omega: tuple = (-1.0, 1.0)
    vel_xy: tuple = (-1.5, 1.5)
    vel_z: tuple = (-6.0, -2.0)

    def lo_hi(self):
        lo = np.array([self.roll[0], self.pitch[0], self.yaw[0],
                       self.omega[0], self.omega[0], self.omega[0],
                       self.vel_xy[0], self.vel_xy[0], self.vel_z[0]])
        hi = np.array([self.roll[1], self.pitch[1], self.yaw[1],
                       self.omega[1], self.omega[1], self.omega[1],
                       self.vel_xy[1], self.vel_xy[1], self.vel_z[1]])
        return lo, hi


def sample_conditions(n: int, ranges: SampleRanges, seed: int) -> list:
    """n falling conditions drawn uniformly from the ranges, seeded."""
    lo, hi = ranges.lo_hi()
    rng = np.random.default_rng(seed)
    draws = rng.uniform(lo, hi, size=(n, 9))
    return [FallingCondition.from_vector(v) for v in draws]


def nominal_guess(problem: NlpProblem) -> LandingTrajectory:
    """Ballistic zero-force rollout holding the nominal pose.

    Dynamics defects and kinematic couplings hold exactly by construction;
    feet may pass below ground at late knots (the solver's projection step
    lifts them).
    """
    from .model import srbm_dynamics
    from .kinematics import leg_forward_kinematics
    from .rotation import rotation_from_rpy

    N = problem.n_knots
    params = problem.params
    states = np.zeros((N, 12))
    states[0] = problem.x0
    feet = np.zeros((N, 4, 3))
    forces = np.zeros((N, 4, 3))
    joints = np.tile(params.nominal_joints, (N, 4, 1))
    for k in range(N - 1):
        xdot = srbm_dynamics(states[k], feet[k], forces[k], params)
        states[k + 1] = states[k] + problem.grid.dts[k] * xdot
    fk = leg_forward_kinematics(joints, params)
    R = rotation_from_rpy(states[:, 0:3])
    feet[:] = states[:, None, 3:6] + np.einsum("kij,knj->kni", R, fk)
    feet[0] = problem.r0
    return LandingTrajectory(
        times=problem.grid.times.copy(),
        states=states,
        feet=feet,
        forces=forces,
        joints=joints,
        joint_vels=post_process_joint_velocities(joints, problem.grid.dts),
    )


def _torque_brake_cap(leg_len: float, params: ModelParams) -> float:
    """Largest vertical foot force the joint torque limits allow for a leg
    folded to the given hip-to-foot distance, assuming the foot sits midway
    between hip and knee so both pitch joints share the moment."""
    l2, l3 = params.link_lengths[1], params.link_lengths[2]
    target = float(np.clip(leg_len, 0.10, l2 + l3 - 1e-3))
    lo, hi = 0.02, min(1.35, np.arcsin(min(l3 / l2, 1.0)) - 0.02)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        s = l2 * np.sin(mid)
        reach = l2 * np.cos(mid) + np.sqrt(max(l3**2 - s**2, 1e-12))
        if reach > target:
            lo = mid
        else:
            hi = mid
    arm = max(l2 * np.sin(0.5 * (lo + hi)), 0.02)
    return 2.0 * 0.9 * params.tau_max / arm


def landing_guess(problem: NlpProblem) -> LandingTrajectory:
    """Contact-aware initializer for cold starts.

    Legs fly under the hips until their nominal foot crosses the ground,
    then stay planted where they landed. Once anything is planted the body
    follows a bounded recovery profile: vertical speed brakes as hard as
    the torque caps plausibly allow (but no harder than needed to stop
    above the leg workspace floor), lateral speed decays, and body rates
    slew toward levelling the chassis. Forces are recovered from the
    profile's finite-difference accelerations, split across planted legs
    so the net roll and pitch moments match, and the next state is stepped
    with the forces actually kept after the cap and cone clips. Dynamics
    defects are therefore exact everywhere except where the workspace
    floor guard overrides a physically hopeless braking segment, and the
    solver starts inside the intended contact pattern instead of having
    to discover it.
    """
    from .kinematics import foot_jacobian, leg_forward_kinematics
    from .model import euler_step
    from .rotation import omega_to_rpy_rates, rotation_from_rpy

    N = problem.n_knots
    params = problem.params
    dts = problem.grid.dts
    jl = params.joint_limits
    z_ref = float(problem.x_ref[5])
    z_floor = 0.105  # lowest body height with workspace margin to spare

    states = np.zeros((N, 12))
    states[0] = problem.x0
    feet = np.zeros((N, 4, 3))
    forces = np.zeros((N, 4, 3))
    joints = np.tile(params.nominal_joints, (N, 4, 1))
    planted = np.zeros(4, dtype=bool)
    anchor = np.zeros((4, 3))
    yaw_hold = float(problem.x0[2])

    reach_z = 0.93 * params.l_max
    for k in range(N):
        s = states[k]
        R = rotation_from_rpy(s[0:3])
        under_hip = s[3:6] + leg_forward_kinematics(joints[k], params) @ R.T
        hips_z = (s[3:6] + params.hip_offsets @ R.T)[:, 2]
        for i in range(4):
            # reach down and plant as soon as the ground is within stretch:
            # an early, extended touchdown buys braking stroke and stance
            # knots, and the straighter leg carries more force per torque
            can_reach = s[11] < -0.5 and hips_z[i] <= reach_z
            if not planted[i] and k > 0 and (under_hip[i, 2] <= 0.0
                                             or can_reach):
                planted[i] = True
                # plant below a point slightly outboard of the hip along the
                # body axis: the load then splits between hip pitch and knee
                # instead of stacking on whichever joint the foot sits under,
                # which roughly doubles the torque-feasible braking force,
                # and mirroring front/rear keeps the stance pitch-balanced
                off_x = 0.06 * np.sign(params.hip_offsets[i, 0])
                hip_w = s[3:6] + R @ (params.hip_offsets[i]
                                      + np.array([off_x, 0.0, 0.0]))
                rel = R.T @ (np.array([hip_w[0], hip_w[1], 0.0]) - s[3:6])
                rel = np.clip(rel,
                              problem.box_center[i] - problem.box_extent + 5e-3,
                              problem.box_center[i] + problem.box_extent - 5e-3)
                anchor[i] = s[3:6] + R @ rel
                anchor[i, 2] = 0.0
            feet[k, i] = anchor[i] if planted[i] else under_hip[i]
        if k == 0:
            feet[0] = problem.r0
        n_on = int(planted.sum())
        if n_on == 0:
            if k < N - 1:
                states[k + 1] = euler_step(s, feet[k], forces[k], dts[k], params)
            continue

        dt = float(dts[min(k, N - 2)])
        dt_next = float(dts[min(k + 1, N - 2)])
        frac = n_on / 4.0
        d = feet[k, planted] - s[3:6]
        hips_w = s[3:6] + params.hip_offsets @ R.T
        lens = np.linalg.norm(feet[k, planted] - hips_w[planted], axis=1)
        caps = np.array([
            min(_torque_brake_cap(L, params),
                0.8 * problem.bounds_cfg.force_z_max)
            for L in lens
        ])

        # desired next velocity: brake to a stop just above the workspace
        # floor, then track the reference height with a gentle crawl.
        # Braking is front-loaded: the caps shrink as the legs fold, so
        # force spent early is force that is actually available
        z_next = s[5] + dt * s[11]
        a_avail = max(0.9 * caps.sum() / params.mass - params.gravity, 0.0)
        if s[11] < -0.3:
            gap = z_next - z_floor
            a_req = s[11] ** 2 / (2.0 * gap) if gap > 1e-3 else a_avail
            if s[11] < -1.5:
                a_req = max(a_req, 0.8 * a_avail)
            vz_des = min(s[11] + dt * min(a_avail, a_req), 0.0)
        else:
            vz_des = float(np.clip(2.2 * (z_ref - z_next), -0.28, 0.28))
        # lateral braking leans on the friction cone while the normal
        # force spike is live, so it asks for a short stopping time and
        # lets the per-leg cone clip decide what is actually available
        vxy_des = s[9:11] * max(0.0, 1.0 - dt * frac / 0.06)

        # body rates slew toward levelling roll and pitch; slew and target
        # limits keep the requested moments small and bounded, and the
        # rate matrix is solved away from its pitch singularity
        rate = omega_to_rpy_rates(s[0:3]) @ s[6:9]
        err = s[0:3] - np.array([0.0, 0.0, yaw_hold])
        rate_des = np.clip(-6.0 * frac * err, -3.0, 3.0)
        rate_next = rate + np.clip(rate_des - rate,
                                   -30.0 * frac * dt, 30.0 * frac * dt)
        rpy_next = s[0:3] + dt * rate
        rp_safe = rpy_next.copy()
        rp_safe[1] = np.clip(rp_safe[1], -1.2, 1.2)
        om_next = np.clip(
            np.linalg.solve(omega_to_rpy_rates(rp_safe), rate_next), -6.0, 6.0)

        f_des = params.mass * np.array([
            (vxy_des[0] - s[9]) / dt,
            (vxy_des[1] - s[10]) / dt,
            (vz_des - s[11]) / dt + params.gravity,
        ])
        # angular impulse budget: the chassis inertia is small, so even a
        # modest unmatched moment held for one knot spins the body; any
        # request or residual beyond a couple rad/s per step is cut
        budget = np.diag(params.inertia) * 2.0 / dt
        mw_des = R @ (params.inertia @ (om_next - s[6:9]) / dt
                      + np.cross(s[6:9], params.inertia @ s[6:9]))
        mw_des = np.clip(mw_des, -budget, budget)
        fz = min(max(f_des[2], 0.0), caps.sum())
        uv = f_des[0:2] / n_on
        # split fz so the net roll/pitch torque matches the slewed rates
        # instead of tipping the asymmetric stance
        A = np.vstack([np.ones(n_on), d[:, 1], d[:, 0]])
        b = np.array([fz,
                      mw_des[0] + uv[1] * d[:, 2].sum(),
                      uv[0] * d[:, 2].sum() - mw_des[1]])
        w0 = np.full(n_on, fz / n_on)
        mu_lam = np.linalg.pinv(A @ A.T) @ (b - A @ w0)
        w = np.clip(w0 + A.T @ mu_lam, 0.0, caps)
        # the clip above can move the force total, which would feed straight
        # back into the height channel; hand the difference to whichever
        # legs still have headroom before giving up on the moment match
        for _ in range(3):
            deficit = fz - w.sum()
            if abs(deficit) < 1e-9:
                break
            room = caps - w if deficit > 0.0 else w
            if room.sum() <= 1e-12:
                break
            w = np.clip(w + deficit * room / room.sum(), 0.0, caps)
        cap = 0.7 * params.mu * w
        per = np.empty((n_on, 3))
        per[:, 0] = np.clip(uv[0], -cap, cap)
        per[:, 1] = np.clip(uv[1], -cap, cap)
        per[:, 2] = w
        # a lopsided stance twists the body when it brakes; friction has
        # real moment authority, so cancel what it can before giving up:
        # a tangential curl around the stance centroid takes the vertical
        # moment, a shared tangential shift (acting below the center of
        # mass) takes roll and pitch
        mw_ach = np.cross(d, per).sum(axis=0)
        c = d[:, 0:2] - d[:, 0:2].mean(axis=0)
        c2 = float((c * c).sum())
        if c2 > 1e-4:
            kappa = (mw_des[2] - mw_ach[2]) / c2
            per[:, 0] = np.clip(per[:, 0] - kappa * c[:, 1], -cap, cap)
            per[:, 1] = np.clip(per[:, 1] + kappa * c[:, 0], -cap, cap)
            mw_ach = np.cross(d, per).sum(axis=0)
        sz = d[:, 2].sum()
        if abs(sz) > 0.05:
            per[:, 0] = np.clip(per[:, 0] - (mw_ach[1] - mw_des[1]) / sz,
                                -cap, cap)
            per[:, 1] = np.clip(per[:, 1] + (mw_ach[0] - mw_des[0]) / sz,
                                -cap, cap)
            mw_ach = np.cross(d, per).sum(axis=0)
        # whatever moment the cone could not cancel gets scaled away:
        # brake less and let the floor guard carry the height error until
        # more legs land
        scale = 1.0
        for ax in range(3):
            lim = budget[ax] + abs(mw_des[ax])
            if abs(mw_ach[ax]) > lim:
                scale = min(scale, lim / abs(mw_ach[ax]))
        per *= scale
        forces[k, planted] = per
        # fit planted joints to the anchored feet
        rel = (feet[k] - s[3:6]) @ R
        q = joints[k].copy()
        for _ in range(8):
            err_q = rel - leg_forward_kinematics(q, params)
            J = foot_jacobian(q, params)
            JtJ = J.swapaxes(-1, -2) @ J + 1e-9 * np.eye(3)
            dq = np.linalg.solve(JtJ, (J.swapaxes(-1, -2) @ err_q[..., None]))[..., 0]
            q = np.clip(q + dq, jl[:, 0], jl[:, 1])
        joints[k, planted] = q[planted]
        if k < N - 1:
            # translation steps with the forces actually kept, so those
            # defect rows stay exact even when the caps clipped the
            # request; attitude follows the slewed profile instead, since
            # integrating clipped moments through the tiny inertia (plus
            # the explicit-Euler gyroscopic drift) spins the body apart.
            # The angular defect rows carry the difference, which the
            # moment budget keeps bounded.
            nxt = euler_step(s, feet[k], forces[k], dts[k], params)
            nxt[0:3] = rpy_next
            nxt[6:9] = om_next
            floor_vz = (z_floor - z_next) / dt_next
            if nxt[11] < floor_vz:
                nxt[11] = min(floor_vz, 0.5)
            states[k + 1] = nxt
    return LandingTrajectory(
        times=problem.grid.times.copy(),
        states=states,
        feet=feet,
        forces=forces,
        joints=joints,
        joint_vels=post_process_joint_velocities(joints, problem.grid.dts),
    )


def filter_trajectory(
    traj: LandingTrajectory,
    penetration_tol: float = 1e-4,
    force_threshold: float = 1.0,
):
    """Reject physically implausible solutions.

    Returns (ok, reason). reason is '' when ok, else 'penetration' (a foot
    below ground beyond tolerance) or 'restep' (a foot unloads and reloads,
    i.e. its contact-force pattern goes positive, zero, positive again).
    """
    if np.any(traj.feet[:, :, 2] < -penetration_tol):
        return False, "penetration"
    loaded = traj.forces[:, :, 2] > force_threshold
    for i in range(4):
        col = loaded[:, i]
        if not col.any():
            continue
        first = int(np.argmax(col))
        last = len(col) - 1 - int(np.argmax(col[::-1]))
        if not col[first : last + 1].all():
            return False, "restep"
    return True, ""


@dataclass
class Dataset:
    """Supervised pairs: condition vectors -> packed decision vectors."""

    inputs: np.ndarray    # (M, 9)
    targets: np.ndarray   # (M, n_vars), raw SI units
    norm_mean: np.ndarray
    norm_std: np.ndarray
    const_mask: np.ndarray  # dims with (near-)zero variance, std pinned to 1
    grid_dts: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.inputs)

    def normalize_targets(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.norm_mean) / self.norm_std

    def denormalize_targets(self, normed: np.ndarray) -> np.ndarray:
        return normed * self.norm_std + self.norm_mean


def _target_normalizer(targets: np.ndarray, const_tol: float = 1e-12):
    mean = targets.mean(axis=0)
    std = targets.std(axis=0)
    const = std <= const_tol
    std = np.where(const, 1.0, std)
    return mean, std, const


def make_dataset(inputs, targets, grid_dts, meta=None) -> Dataset:
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    mean, std, const = _target_normalizer(targets)
    return Dataset(inputs, targets, mean, std, const,
                   np.asarray(grid_dts, dtype=float), dict(meta or {}))


def _solve_one_condition(args):
    """Worker for dataset generation: one cold solve, pickled-friendly args."""
    from .solver import SolverOptions, solve
    from .transcription import KinBoxParams, ProblemBounds, TimeGrid, build_problem

    vec, params_kw, dts, opt_kw = args
    z = FallingCondition.from_vector(np.asarray(vec))
    problem = build_problem(
        z,
        params=ModelParams(**params_kw),
        grid=TimeGrid(np.asarray(dts)),
        box=KinBoxParams(),
        bounds=ProblemBounds(),
    )
    result = solve(problem, nominal_guess(problem), SolverOptions(**opt_kw))
    if not result.success:
        return None, result.status, result.iterations
    return problem.extract_trajectory(result.x).pack(), result.status, result.iterations


def build_dataset(
    n_attempts: int,
    seed: int,
    ranges: SampleRanges | None = None,
    params: ModelParams | None = None,
    grid=None,
    solver_options=None,
    n_workers: int = 1,
    log=None,
) -> Dataset:
    """Sample conditions, solve each cold, filter, and pack the survivors.

    Deterministic for a given seed: conditions are drawn up front and results
    merged by index regardless of worker scheduling.
    """
    from .solver import SolverOptions
    from .transcription import default_time_grid

    ranges = ranges or SampleRanges()
    params = params or ModelParams()
    grid = grid or default_time_grid()
    options = solver_options or SolverOptions()

    conditions = sample_conditions(n_attempts, ranges, seed)
    params_kw = dict(
        mass=params.mass, inertia=params.inertia, hip_offsets=params.hip_offsets,
        link_lengths=params.link_lengths, l_max=params.l_max, mu=params.mu,
        tau_max=params.tau_max, gravity=params.gravity,
        joint_limits=params.joint_limits, nominal_joints=params.nominal_joints,
        chassis_half_height=params.chassis_half_height,
    )
    jobs = [(z.to_vector(), params_kw, grid.dts, options.to_kwargs()) for z in conditions]

    if n_workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_solve_one_condition, jobs, chunksize=4))
    else:
        results = [_solve_one_condition(job) for job in jobs]

    inputs, targets = [], []
    counts = {"attempted": n_attempts, "solved": 0, "penetration": 0, "restep": 0, "failed": 0}
    problem_proto = None
    for z, (packed, status, iters) in zip(conditions, results):
        if packed is None:
            counts["failed"] += 1
            continue
        counts["solved"] += 1
        traj = _unpack_trajectory(packed, grid)
        ok, reason = filter_trajectory(traj)
        if not ok:
            counts[reason] += 1
            continue
        inputs.append(z.to_vector())
        targets.append(packed)
        if log:
            log(f"kept condition with status={status} iters={iters}")
    if log:
        log(f"dataset counts: {counts}")
    if not inputs:
        raise RuntimeError(f"no usable samples out of {n_attempts} attempts: {counts}")
    meta = {"seed": seed, "counts": counts, "ranges": _ranges_meta(ranges)}
    return make_dataset(np.array(inputs), np.array(targets), grid.dts, meta)


def _ranges_meta(r: SampleRanges) -> dict:
    return {
        "roll": list(r.roll), "pitch": list(r.pitch), "yaw": list(r.yaw),
        "omega": list(r.omega), "vel_xy": list(r.vel_xy), "vel_z": list(r.vel_z),
    }


def _unpack_trajectory(packed: np.ndarray, grid) -> LandingTrajectory:
    N = grid.n_knots
    V = packed.reshape(N, NV)
    joints = V[:, 36:48].reshape(N, 4, 3)
    return LandingTrajectory(
        times=grid.times.copy(),
        states=V[:, 0:12].copy(),
        feet=V[:, 12:24].reshape(N, 4, 3).copy(),
        forces=V[:, 24:36].reshape(N, 4, 3).copy(),
        joints=joints.copy(),
        joint_vels=post_process_joint_velocities(joints, grid.dts),
    )


# ----- the regressor ----------------------------------------------------


@dataclass
class MlpModel:
    """Two-hidden-layer tanh network with linear output, plus scalers."""

    weights: list          # [(W1, b1), (W2, b2), (W3, b3)]
    in_lo: np.ndarray
    in_hi: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    grid_dts: np.ndarray
    meta: dict = field(default_factory=dict)

    def scale_inputs(self, z: np.ndarray) -> np.ndarray:
        return 2.0 * (z - self.in_lo) / (self.in_hi - self.in_lo) - 1.0

    def forward(self, z: np.ndarray) -> np.ndarray:
        """Raw-unit prediction for condition vectors z of shape (..., 9)."""
        a = self.scale_inputs(np.asarray(z, dtype=float))
        (W1, b1), (W2, b2), (W3, b3) = self.weights
        h1 = np.tanh(a @ W1 + b1)
        h2 = np.tanh(h1 @ W2 + b2)
        out = h2 @ W3 + b3
        return out * self.out_std + self.out_mean


def _init_weights(sizes, rng):
    weights = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        W = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
        weights.append((W, np.zeros(n_out)))
    return weights


@dataclass
class TrainReport:
    train_mse: np.ndarray
    val_mse: np.ndarray
    best_epoch: int

    @property
    def final_val_mse(self) -> float:
        return float(self.val_mse[self.best_epoch])


def train(
    dataset: Dataset,
    seed: int,
    hidden: int = 128,
    epochs: int = 200,
    batch_size: int = 32,
    learning_rate: float = 0.01,
    momentum: float = 0.9,
    val_fraction: float = 0.1,
):
    """SGD-with-momentum on normalized-target MSE. Returns (model, report).

    Deterministic for a given (dataset, seed): init, split, and shuffles all
    come from one seeded generator. Keeps the best-validation weights.
    """
    rng = np.random.default_rng(seed)
    M = dataset.n_samples
    n_out = dataset.targets.shape[1]
    lo, hi = SampleRanges(**{}).lo_hi() if not dataset.meta.get("ranges") else _ranges_from_meta(dataset.meta["ranges"])

    X = 2.0 * (dataset.inputs - lo) / (hi - lo) - 1.0
    Y = dataset.normalize_targets(dataset.targets)

    perm = rng.permutation(M)
    n_val = max(1, int(round(val_fraction * M)))
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    if len(train_idx) == 0:
        raise ValueError("dataset too small to split")

    sizes = [9, hidden, hidden, n_out]
    weights = _init_weights(sizes, rng)
    velocity = [(np.zeros_like(W), np.zeros_like(b)) for W, b in weights]

    def forward_batch(xb):
        h1 = np.tanh(xb @ weights[0][0] + weights[0][1])
        h2 = np.tanh(h1 @ weights[1][0] + weights[1][1])
        out = h2 @ weights[2][0] + weights[2][1]
        return h1, h2, out

    def mse(idx):
        _, _, out = forward_batch(X[idx])
        return float(np.mean((out - Y[idx]) ** 2))

    train_curve = np.zeros(epochs)
    val_curve = np.zeros(epochs)
    best = (np.inf, None, -1)
    for epoch in range(epochs):
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), batch_size):
            idx = train_idx[order[start : start + batch_size]]
            xb, yb = X[idx], Y[idx]
            h1, h2, out = forward_batch(xb)
            B = len(idx)
            # d MSE / d out; MSE averages over batch and output dims
            g_out = 2.0 * (out - yb) / (B * n_out)
            gW3 = h2.T @ g_out
            gb3 = g_out.sum(axis=0)
            g_h2 = (g_out @ weights[2][0].T) * (1.0 - h2**2)
            gW2 = h1.T @ g_h2
            gb2 = g_h2.sum(axis=0)
            g_h1 = (g_h2 @ weights[1][0].T) * (1.0 - h1**2)
            gW1 = xb.T @ g_h1
            gb1 = g_h1.sum(axis=0)
            grads = [(gW1, gb1), (gW2, gb2), (gW3, gb3)]
            for li in range(3):
                vW, vb = velocity[li]
                gW, gb = grads[li]
                vW *= momentum
                vW -= learning_rate * gW
                vb *= momentum
                vb -= learning_rate * gb
                W, b = weights[li]
                weights[li] = (W + vW, b + vb)
        train_curve[epoch] = mse(train_idx)
        val_curve[epoch] = mse(val_idx)
        if val_curve[epoch] < best[0]:
            best = (val_curve[epoch], [(W.copy(), b.copy()) for W, b in weights], epoch)

    model = MlpModel(
        weights=best[1],
        in_lo=lo,
        in_hi=hi,
        out_mean=dataset.norm_mean.copy(),
        out_std=dataset.norm_std.copy(),
        grid_dts=dataset.grid_dts.copy(),
        meta={"seed": seed, "hidden": hidden, "epochs": epochs,
              "batch_size": batch_size, "learning_rate": learning_rate,
              "best_epoch": best[2]},
    )
    return model, TrainReport(train_curve, val_curve, best[2])


def _ranges_from_meta(meta: dict):
    r = SampleRanges(**{k: tuple(v) for k, v in meta.items()})
    return r.lo_hi()


def predict_guess(model: MlpModel, z: FallingCondition, problem: NlpProblem) -> LandingTrajectory:
    """Network guess for one condition, lightly sanitized for the solver:
    joints clamped into limits, vertical forces clamped nonnegative."""
    if model.grid_dts.shape != problem.grid.dts.shape or not np.allclose(
        model.grid_dts, problem.grid.dts
    ):
        raise ValueError("model was trained on a different time grid")
    packed = model.forward(z.to_vector())
    N = problem.n_knots
    V = packed.reshape(N, NV)
    params = problem.params
    joints = V[:, 36:48].reshape(N, 4, 3)
    np.clip(joints[..., 0], params.joint_limits[0, 0], params.joint_limits[0, 1], out=joints[..., 0])
    np.clip(joints[..., 1], params.joint_limits[1, 0], params.joint_limits[1, 1], out=joints[..., 1])
    np.clip(joints[..., 2], params.joint_limits[2, 0], params.joint_limits[2, 1], out=joints[..., 2])
    forces = V[:, 24:36].reshape(N, 4, 3)
    np.clip(forces[..., 2], 0.0, None, out=forces[..., 2])
    return LandingTrajectory(
        times=problem.grid.times.copy(),
        states=V[:, 0:12].copy(),
        feet=V[:, 12:24].reshape(N, 4, 3).copy(),
        forces=forces.copy(),
        joints=joints.copy(),
        joint_vels=post_process_joint_velocities(joints, problem.grid.dts),
    )


# ----- persistence ------------------------------------------------------

DATASET_SCHEMA = "landopt-dataset-v1"
MODEL_SCHEMA = "landopt-mlp-v1"


def save_dataset(path, dataset: Dataset) -> None:
    write_blocks(path, DATASET_SCHEMA, dataset.meta, {
        "inputs": dataset.inputs,
        "targets": dataset.targets,
        "norm_mean": dataset.norm_mean,
        "norm_std": dataset.norm_std,
        "const_mask": dataset.const_mask.astype(np.uint8),
        "grid_dts": dataset.grid_dts,
    })


def load_dataset(path) -> Dataset:
    schema, meta, blocks = read_blocks(path)
    if schema != DATASET_SCHEMA:
        raise ValueError(f"{path}: expected {DATASET_SCHEMA}, got {schema}")
    return Dataset(
        inputs=blocks["inputs"],
        targets=blocks["targets"],
        norm_mean=blocks["norm_mean"],
        norm_std=blocks["norm_std"],
        const_mask=blocks["const_mask"].astype(bool),
        grid_dts=blocks["grid_dts"],
        meta=meta,
    )


def save_model(path, model: MlpModel) -> None:
    blocks = {
        "in_lo": model.in_lo, "in_hi": model.in_hi,
        "out_mean": model.out_mean, "out_std": model.out_std,
        "grid_dts": model.grid_dts,
    }
    for i, (W, b) in enumerate(model.weights):
        blocks[f"W{i}"] = W
        blocks[f"b{i}"] = b
    write_blocks(path, MODEL_SCHEMA, model.meta, blocks)


def load_model(path) -> MlpModel:
    schema, meta, blocks = read_blocks(path)
    if schema != MODEL_SCHEMA:
        raise ValueError(f"{path}: expected {MODEL_SCHEMA}, got {schema}")
    weights = []
    i = 0
    while f"W{i}" in blocks:
        weights.append((blocks[f"W{i}"], blocks[f"b{i}"]))
        i += 1
    return MlpModel(
        weights=weights,
        in_lo=blocks["in_lo"], in_hi=blocks["in_hi"],
        out_mean=blocks["out_mean"], out_std=blocks["out_std"],
        grid_dts=blocks["grid_dts"], meta=meta,
    )
