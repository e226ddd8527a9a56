"""Continuation solver for the landing NLP.

Outer loop: augmented Lagrangian over all constraint rows, with two-sided
row bounds handled by clipping the shifted residual. Inner loop: projected
Gauss-Newton with Levenberg damping; the normal equations are banded
(coupling only reaches the neighboring knot) and are factorized with a
banded Cholesky. Variable bounds are enforced by freezing bound-active
variables out of the reduced system and projecting the line search.

The complementarity and no-slip rows are relaxed by a decreasing slack
schedule. After the last stage a polish pass pins each foot's contact mode
(ground-height feet pinned to the surface, force-free feet pinned to zero
force), which turns the bilinear rows into identities and lets the
equality families converge tightly. A short feasibility refinement then
drives the active residuals toward machine precision.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded
from scipy.optimize import minimize as _nlp_min

from .model import euler_step
from .rotation import rotation_from_rpy
from .transcription import NV, NX, LandingTrajectory, NlpProblem

# Accepted-solution tolerances per constraint family, in natural units
# (meters, newtons, newton-meters). The complementarity tolerance is the
# final slack of the default schedule.
FAMILY_TOLERANCES = {
    "dynamics": 1e-6,
    "fk": 1e-6,
    "no_slip": 1e-6,
    "ccc": 1e-4,
    "friction": 1e-8,
    "torque": 1e-6,
    "leg_len": 1e-6,
    "box": 1e-6,
}

BOUND_TOLERANCE = 1e-8


@dataclass
class SolverOptions:
    epsilon_schedule: tuple = (1e-1, 1e-2, 1e-3, 1e-4)
    kkt_tol: float = 1e-6
    max_iters: int = 1200         # inner-iteration cap per stage
    max_outer: int = 20
    inner_cap: int = 150          # iterations per inner call between updates
    time_budget_ms: float = 120000.0
    reg_floor: float = 1e-8
    rho0: float = 100.0
    rho_max: float = 1e5
    stage_feas_tol: float = 1e-4  # scaled residual gate for interim stages
    contact_force_cutoff: float = 1.0  # N, mode pinning threshold
    refine_iters: int = 8
    max_mode_repairs: int = 3     # contact flips tried when polish ends stuck
    repair_feas_gate: float = 1e-2  # only flip contacts when this close

    def __post_init__(self):
        sched = tuple(float(e) for e in self.epsilon_schedule)
        if not sched or any(e <= 0 for e in sched):
            raise ValueError("epsilon_schedule entries must be positive")
        if not all(b < a for a, b in zip(sched, sched[1:])):
            raise ValueError("epsilon_schedule must be strictly decreasing")
        self.epsilon_schedule = sched
        if self.time_budget_ms <= 0:
            raise ValueError("time_budget_ms must be positive")
        if self.kkt_tol <= 0 or self.reg_floor <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_mode_repairs < 0:
            raise ValueError("max_mode_repairs must be >= 0")

    def to_kwargs(self) -> dict:
        d = asdict(self)
        d["epsilon_schedule"] = list(self.epsilon_schedule)
        return d


@dataclass
class FeasibilityReport:
    """Max violation per constraint family at a point, natural units."""

    families: dict
    bound_violation: float
    cost: float

    @property
    def worst(self) -> float:
        return max(self.families.values())

    def ok(self, tolerances: dict | None = None) -> bool:
        tol = tolerances or FAMILY_TOLERANCES
        if self.bound_violation > BOUND_TOLERANCE:
            return False
        return all(self.families[k] <= tol[k] for k in self.families)


@dataclass
class SolveResult:
    status: str                   # solved | infeasible | timeout
    x: np.ndarray
    stage_iterations: list
    stage_names: list
    wall_ms: float
    max_residuals: dict
    cost: float
    message: str = ""

    @property
    def success(self) -> bool:
        return self.status == "solved"

    @property
    def iterations(self) -> int:
        return int(sum(self.stage_iterations))

    def records(self) -> list:
        """Per-stage iteration statistics as plain dicts."""
        return [
            {"stage": name, "iterations": int(k)}
            for name, k in zip(self.stage_names, self.stage_iterations)
        ]


def family_violations(problem: NlpProblem, x: np.ndarray) -> dict:
    """Max violation of each family against the problem's true row bounds."""
    c = problem.eval_constraints(x)
    viol = np.maximum(np.maximum(c - problem.row_ub, problem.row_lb - c), 0.0)
    return {name: float(viol[sl].max()) if sl.stop > sl.start else 0.0
            for name, sl in problem.family_slices.items()}


# per-knot row counts and whether a row also involves the next knot
_ROWS_PER_KNOT = {"dynamics": (12, True), "fk": (12, False),
                  "no_slip": (8, True), "ccc": (4, False),
                  "friction": (16, False), "torque": (12, False),
                  "leg_len": (4, False), "box": (12, False)}


def _row_knots(problem: NlpProblem, row: int) -> set:
    """Knot indices whose variables appear in the given constraint row."""
    for name, sl in problem.family_slices.items():
        if sl.start <= row < sl.stop:
            per, spans = _ROWS_PER_KNOT[name]
            k = (row - sl.start) // per
            return {k, k + 1} if spans else {k}
    return set()


def _zero_duals_at_knots(problem: NlpProblem, y: np.ndarray, knots) -> None:
    """Clear multiplier estimates on every row touching the given knots."""
    knots = np.asarray(sorted(knots), dtype=int)
    for name, sl in problem.family_slices.items():
        per, spans = _ROWS_PER_KNOT[name]
        ks = np.arange(sl.stop - sl.start) // per
        mask = np.isin(ks, knots)
        if spans:
            mask |= np.isin(ks + 1, knots)
        y[sl][mask] = 0.0


def feasibility_report(problem: NlpProblem, x: np.ndarray) -> FeasibilityReport:
    x = np.asarray(x, dtype=float)
    bound = max(
        float(np.max(problem.var_lb - x, initial=0.0)),
        float(np.max(x - problem.var_ub, initial=0.0)),
    )
    return FeasibilityReport(
        families=family_violations(problem, x),
        bound_violation=max(bound, 0.0),
        cost=float(problem.cost(x)),
    )


def check_derivatives(problem: NlpProblem, point: np.ndarray, h: float = 1e-6) -> float:
    """Max mixed absolute/relative error of the analytic Jacobian vs central
    finite differences over all entries."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(point, dtype=float).copy()
    Ja = problem.eval_jacobian(x).toarray()
    Jfd = np.empty_like(Ja)
    for j in range(problem.n_vars):
        x[j] += h
        cp = problem.eval_constraints(x)
        x[j] -= 2 * h
        cm = problem.eval_constraints(x)
        x[j] += h
        Jfd[:, j] = (cp - cm) / (2 * h)
    err = np.abs(Jfd - Ja) / np.maximum(1.0, np.abs(Ja))
    return float(err.max())


# ----- scaled workspace ---------------------------------------------------


class _Workspace:
    """Scaled view of the problem plus mutable stage bounds.

    Force variables are scaled by body weight and force-valued rows by its
    inverse, so Jacobian entries land near unity and the banded normal
    equations stay well conditioned.
    """

    def __init__(self, problem: NlpProblem):
        self.pb = problem
        n, m = problem.n_vars, problem.n_rows
        w = problem.params.weight

        dvar = np.ones(n)
        V = dvar.reshape(problem.n_knots, NV)
        V[:, NX + 12:NX + 24] = w
        self.dvar = dvar

        drow = np.ones(m)
        fs = problem.family_slices
        drow[fs["no_slip"]] = 1.0 / w
        drow[fs["ccc"]] = 1.0 / w
        drow[fs["friction"]] = 1.0 / w
        drow[fs["torque"]] = 1.0 / problem.params.tau_max
        drow[fs["leg_len"]] = 1.0 / problem.params.l_max**2
        self.drow = drow

        self.xl = problem.var_lb / dvar
        self.xu = problem.var_ub / dvar
        self._presolve_prefix_pins()
        # mode pinning edits xl/xu in place; keep the originals around so
        # pins can be recomputed, and remember feet forced to stay unloaded
        self.xl0 = self.xl.copy()
        self.xu0 = self.xu.copy()
        self.no_force = set()

        # fixed sparsity: nnz scaling vector and bandwidth of J^T J
        J = problem.eval_jacobian(np.zeros(n))
        indptr, indices = J.indptr, J.indices
        self._row_of_nnz = np.repeat(np.arange(m), np.diff(indptr))
        self._scl = drow[self._row_of_nnz] * dvar[indices]
        spans = (np.maximum.reduceat(indices, indptr[:-1])
                 - np.minimum.reduceat(indices, indptr[:-1]))
        self.bandwidth = int(spans.max())

        self._build_curvature_pairs()

    def _build_curvature_pairs(self):
        """Constant second derivatives of the bilinear rows (contact
        products and slip products) and of the quadratic leg-length rows,
        scaled. Each row contributes a handful of symmetric entries;
        storing them makes the inner model exact on those rows (up to the
        rotation coupling of the leg-length terms, which stays with the
        Gauss-Newton part)."""
        pb = self.pb
        N = pb.n_knots
        V = np.arange(pb.n_vars).reshape(N, NV)
        foot_z = V[:, NX + np.array([2, 5, 8, 11])]          # (N, 4)
        force_z = V[:, NX + 12 + np.array([2, 5, 8, 11])]    # (N, 4)
        foot_xy = V[:, NX:NX + 12].reshape(N, 4, 3)[:, :, 0:2]

        rows, ii, jj, cc = [], [], [], []

        ccc = pb.family_slices["ccc"].start + np.arange(N * 4).reshape(N, 4)
        rows.append(ccc.ravel())
        ii.append(foot_z.ravel())
        jj.append(force_z.ravel())
        cc.append(np.ones(N * 4))

        ns0 = pb.family_slices["no_slip"].start
        ns = ns0 + np.arange((N - 1) * 8).reshape(N - 1, 4, 2)
        # d2 / (d r_{k+1,a} d lam_z_k) = +1
        rows.append(ns.ravel())
        ii.append(foot_xy[1:].reshape(-1))
        jj.append(np.repeat(force_z[:-1].ravel(), 2))
        cc.append(np.ones((N - 1) * 8))
        # d2 / (d r_{k,a} d lam_z_k) = -1
        rows.append(ns.ravel())
        ii.append(foot_xy[:-1].reshape(-1))
        jj.append(np.repeat(force_z[:-1].ravel(), 2))
        cc.append(-np.ones((N - 1) * 8))

        # leg_len row (k, leg): sum_a (r_a - p_a - h_a)^2, h depends only
        # on orientation. Per axis: +2 on both diagonals, -2 on the cross.
        ll = pb.family_slices["leg_len"].start + np.arange(N * 4)
        ll3 = np.repeat(ll, 3)
        foot_all = V[:, NX:NX + 12].reshape(-1)                    # (N*4*3,)
        p_all = np.tile(V[:, 3:6], (1, 4)).reshape(-1)
        for vi, vj, s in ((foot_all, foot_all, 2.0),
                          (p_all, p_all, 2.0),
                          (foot_all, p_all, -2.0)):
            rows.append(ll3)
            ii.append(vi)
            jj.append(vj)
            cc.append(np.full(N * 12, s))

        rows = np.concatenate(rows)
        ri = np.concatenate(ii)
        rj = np.concatenate(jj)
        coef = np.concatenate(cc)
        coef = coef * self.drow[rows] * self.dvar[ri] * self.dvar[rj]
        lo = np.minimum(ri, rj)
        hi = np.maximum(ri, rj)
        self.curv_rows = rows
        self.curv_i = lo
        self.curv_j = hi
        self.curv_coef = coef

        self.rl = None
        self.ru = None
        self.set_row_bounds(None)

    # stage bound control

    def set_row_bounds(self, eps):
        """True bounds when eps is None; relaxed complementarity/no-slip
        rows otherwise."""
        lb = self.pb.row_lb.copy()
        ub = self.pb.row_ub.copy()
        if eps is not None:
            fs = self.pb.family_slices
            ub[fs["ccc"]] = eps
            lb[fs["no_slip"]] = -eps
            ub[fs["no_slip"]] = eps
        self.rl = lb * self.drow
        self.ru = ub * self.drow

    def _foot_var_indices(self):
        V = np.arange(self.pb.n_vars).reshape(self.pb.n_knots, NV)
        foot_z = V[:, NX + np.array([2, 5, 8, 11])]
        force_idx = V[:, NX + 12:NX + 24].reshape(self.pb.n_knots, 4, 3)
        return foot_z, force_idx

    def _presolve_prefix_pins(self):
        """Fix the part of the problem the initial condition already
        determines. While every foot of a knot is force-free, the next
        knot's state is a pure ballistic continuation of the frozen initial
        state: feet whose reach set stays above the ground there cannot be
        loaded, and the states themselves have a unique feasible value, so
        both get pinned. Without this the relaxed stages happily trade
        irreparable prefix defects against softer landings downstream."""
        pb = self.pb
        V = np.arange(pb.n_vars).reshape(pb.n_knots, NV)
        _, force_idx = self._foot_var_indices()
        state = pb.x0.copy()
        zero3 = np.zeros((4, 3))
        for k in range(pb.n_knots):
            if k > 0:
                state = euler_step(state, zero3, zero3,
                                   float(pb.grid.dts[k - 1]), pb.params)
                # forces at every earlier knot are pinned zero, so this
                # knot's state is forced
                self.xl[V[k, :NX]] = state / self.dvar[V[k, :NX]]
                self.xu[V[k, :NX]] = self.xl[V[k, :NX]]
            if k == 0:
                reach = pb.r0[:, 2] <= 5e-7
            else:
                R = rotation_from_rpy(state[0:3])
                reach = np.array([
                    self._min_foot_height(R, state[5], i) <= 5e-7
                    for i in range(4)
                ])
            for i in range(4):
                if not reach[i]:
                    for j in force_idx[k, i]:
                        self.xl[j] = 0.0
                        self.xu[j] = 0.0
            if reach.any():
                break

    def reset_mode_bounds(self):
        """Drop all pins, reapply the sticky no-force overrides."""
        self.xl[:] = self.xl0
        self.xu[:] = self.xu0
        _, force_idx = self._foot_var_indices()
        frozen = self.xl0 == self.xu0
        for (k, i) in self.no_force:
            for j in force_idx[k, i]:
                if not frozen[j]:
                    self.xl[j] = 0.0
                    self.xu[j] = 0.0

    def pin_contact_modes(self, x_scaled: np.ndarray, cutoff: float) -> np.ndarray:
        """Recompute every foot's mode from the current iterate: loaded feet
        get their height pinned to the ground, unloaded feet get zero force.
        Returns the iterate clipped into the tightened bounds."""
        pb = self.pb
        N = pb.n_knots
        self.reset_mode_bounds()
        x = x_scaled * self.dvar
        _, feet, lam, _ = pb.views(x)
        frozen = self.xl0 == self.xu0
        foot_z, force_idx = self._foot_var_indices()
        contact = lam[:, :, 2] > cutoff
        for k in range(N):
            for i in range(4):
                if (k, i) in self.no_force:
                    continue
                if contact[k, i]:
                    j = foot_z[k, i]
                    if not frozen[j]:
                        self.xl[j] = 0.0
                        self.xu[j] = 0.0
                else:
                    for j in force_idx[k, i]:
                        if not frozen[j]:
                            self.xl[j] = 0.0
                            self.xu[j] = 0.0
        return np.clip(x_scaled, self.xl, self.xu)

    def pin_contact_spans(self, x_scaled: np.ndarray, cutoff: float) -> np.ndarray:
        """Pin each leg's mode by its touchdown knot instead of per-knot
        force: before it the leg is force-free, from it onward the foot is
        ground-pinned with the force left free, so load timing inside the
        stance stays a solver decision. Returns the clipped iterate."""
        pb = self.pb
        N = pb.n_knots
        self.reset_mode_bounds()
        x = x_scaled * self.dvar
        _, feet, lam, _ = pb.views(x)
        frozen = self.xl0 == self.xu0
        foot_z, force_idx = self._foot_var_indices()
        for i in range(4):
            loaded = lam[:, i, 2] > cutoff
            k0 = int(np.argmax(loaded)) if loaded.any() else N
            for k in range(N):
                if (k, i) in self.no_force:
                    continue
                if k < k0:
                    for j in force_idx[k, i]:
                        if not frozen[j]:
                            self.xl[j] = 0.0
                            self.xu[j] = 0.0
                else:
                    j = foot_z[k, i]
                    if not frozen[j]:
                        self.xl[j] = 0.0
                        self.xu[j] = 0.0
        return np.clip(x_scaled, self.xl, self.xu)

    def release_contacts(self, x_scaled: np.ndarray, knots) -> tuple:
        """Flip pinned-in-contact feet at the given knots to the sticky
        no-force branch, leaving every other pin alone. Returns
        (clipped iterate, number of feet flipped)."""
        N = self.pb.n_knots
        foot_z, force_idx = self._foot_var_indices()
        frozen = self.xl0 == self.xu0
        x = x_scaled.copy()
        flipped = 0
        for k in knots:
            if not 0 <= k < N:
                continue
            for i in range(4):
                j = foot_z[k, i]
                if frozen[j] or (k, i) in self.no_force:
                    continue
                if self.xl[j] == self.xu[j] == 0.0:
                    self.no_force.add((k, i))
                    self.xl[j] = self.xl0[j]
                    self.xu[j] = self.xu0[j]
                    for jj in force_idx[k, i]:
                        if not frozen[jj]:
                            self.xl[jj] = 0.0
                            self.xu[jj] = 0.0
                            x[jj] = 0.0
                    flipped += 1
        return np.clip(x, self.xl, self.xu), flipped

    def _min_foot_height(self, R: np.ndarray, p_z: float, leg: int) -> float:
        """Lowest world height this leg's foot can reach for the given body
        pose, under the placement box and the leg length ball."""
        pb = self.pb
        hip = pb.params.hip_offsets[leg]
        lo = pb.box_center[leg] - pb.box_extent
        hi = pb.box_center[leg] + pb.box_extent
        cz = R[2, :]
        lsq = pb.params.l_max**2
        res = _nlp_min(
            lambda v: cz @ v, np.clip(hip, lo, hi),
            jac=lambda v: cz,
            bounds=list(zip(lo, hi)),
            constraints=[{"type": "ineq",
                          "fun": lambda v: lsq - (v - hip) @ (v - hip),
                          "jac": lambda v: -2.0 * (v - hip)}],
            method="SLSQP", options={"maxiter": 200, "ftol": 1e-14},
        )
        return p_z + float(res.fun)

    # scaled evaluations

    def to_unscaled(self, x_scaled):
        return x_scaled * self.dvar

    def to_scaled(self, x):
        return x / self.dvar

    def constraints(self, x_scaled):
        return self.drow * self.pb.eval_constraints(self.dvar * x_scaled)

    def jacobian(self, x_scaled):
        J = self.pb.eval_jacobian(self.dvar * x_scaled)
        J.data *= self._scl
        return J

    def cost(self, x_scaled):
        return self.pb.cost(self.dvar * x_scaled)

    def cost_grad(self, x_scaled):
        return self.dvar * self.pb.cost_grad(self.dvar * x_scaled)

    def cost_hess_diag(self):
        return self.dvar**2 * self.pb.cost_hess_diag()


# ----- inner loop ---------------------------------------------------------


def _projected_gradient(g, x, xl, xu):
    pg = np.where(x <= xl, np.minimum(g, 0.0), g)
    pg = np.where(x >= xu, np.maximum(pg, 0.0), pg)
    return pg


def _shifted_multipliers(c, y, rho, rl, ru):
    t = c + y / rho
    return rho * (t - np.clip(t, rl, ru))


def _assemble_banded(ws, S_coo_upper, rho, yhat, free_f):
    """Upper banded storage of rho*Ja'Ja plus the exact bilinear-row
    curvature, without the diagonal regularization."""
    bw = ws.bandwidth
    ab = np.zeros((bw + 1, ws.pb.n_vars))
    r, cc, d = S_coo_upper
    ab[bw + r - cc, cc] = rho * d
    w = (yhat[ws.curv_rows] * ws.curv_coef
         * free_f[ws.curv_i] * free_f[ws.curv_j])
    np.add.at(ab, (bw + ws.curv_i - ws.curv_j, ws.curv_j), w)
    return ab


def _inner(ws, x, y, rho, cost_w, tol, iter_budget, deadline, stop, nu,
           reg_floor, itrace=None):
    """Minimize the AL merit over the variable box.

    Returns (x, iterations_used, nu, status, pg) with status one of
    ok | maxiter | stall | timeout | stopped and pg the last projected
    gradient norm (inf if none was evaluated).
    """
    n = len(x)
    bw = ws.bandwidth
    c = ws.constraints(x)
    f = ws.cost(x) if cost_w else 0.0
    y_sq = y @ y
    stalls = 0
    it = 0
    pg_norm = np.inf
    merit_hist = []
    flat_pg = np.inf
    radius = 0.3  # step cap in scaled variable units
    while it < iter_budget:
        if stop is not None and stop.is_set():
            return x, it, nu, "stopped", pg_norm
        if time.perf_counter() > deadline:
            return x, it, nu, "timeout", pg_norm

        yhat = _shifted_multipliers(c, y, rho, ws.rl, ws.ru)
        J = ws.jacobian(x)
        g = J.T @ yhat
        if cost_w:
            g = g + cost_w * ws.cost_grad(x)
        pg = _projected_gradient(g, x, ws.xl, ws.xu)
        pg_norm = float(np.abs(pg).max())
        if pg_norm <= tol:
            return x, it, nu, "ok", pg_norm
        it += 1

        free = (ws.xl < ws.xu) & ~(
            ((x <= ws.xl) & (g > 0)) | ((x >= ws.xu) & (g < 0))
        )
        free_f = free.astype(float)

        # anchor the Gauss-Newton row set with the outer multipliers so
        # rows sitting exactly on their bound cannot flicker in and out
        active = (yhat != 0.0) | (y != 0.0)
        Ja = J[active]
        Ja.data *= free_f[Ja.indices]
        S = (Ja.T @ Ja).tocoo()
        upper = S.row <= S.col
        S_up = (S.row[upper], S.col[upper], S.data[upper])
        diagS = np.zeros(n)
        on_diag = S.row == S.col
        diagS[S.row[on_diag]] = S.data[on_diag]

        hd = cost_w * ws.cost_hess_diag() * free_f if cost_w else np.zeros(n)
        marq = np.maximum(1.0, rho * diagS + hd)

        merit0 = cost_w * f + (yhat @ yhat - y_sq) / (2 * rho)
        ab0 = _assemble_banded(ws, S_up, rho, yhat, free_f)
        moved = False
        while True:
            diag_extra = hd + free_f * np.maximum(nu * marq, reg_floor) \
                + (1.0 - free_f)
            ab = ab0.copy()
            ab[bw, :] += diag_extra
            try:
                cb = cholesky_banded(ab, lower=False, check_finite=False)
            except LinAlgError:
                nu = min(nu * 10, 1e10)
                if nu >= 1e10:
                    return x, it, nu, "stall", pg_norm
                continue
            step = cho_solve_banded((cb, False), -(g * free_f),
                                    check_finite=False)
            if not np.isfinite(step).all():
                nu = min(nu * 10, 1e10)
                if nu >= 1e10:
                    return x, it, nu, "stall", pg_norm
                continue
            # the quadratic model only holds locally; capping the step
            # keeps full Newton steps from overshooting into curvature
            sn = float(np.abs(step).max())
            if sn > radius:
                step = step * (radius / sn)

            alpha = 1.0
            accepted = False
            for _ in range(30):
                xn = np.clip(x + alpha * step, ws.xl, ws.xu)
                gstep = g @ (xn - x)
                if gstep < 0:
                    cn = ws.constraints(xn)
                    fn = ws.cost(xn) if cost_w else 0.0
                    yhn = _shifted_multipliers(cn, y, rho, ws.rl, ws.ru)
                    meritn = cost_w * fn + (yhn @ yhn - y_sq) / (2 * rho)
                    if meritn <= merit0 + 1e-4 * gstep:
                        stepnorm = float(np.abs(xn - x).max())
                        x, c, f = xn, cn, fn
                        accepted = True
                        break
                alpha *= 0.5
            if accepted:
                if itrace is not None:
                    itrace.append({"pg": float(np.abs(pg).max()),
                                   "alpha": alpha, "nu": nu,
                                   "active": int(active.sum()),
                                   "free": int(free.sum()),
                                   "merit": merit0,
                                   "step": stepnorm,
                                   "radius": radius, "gn": sn})
                stalls = 0
                if alpha == 1.0:
                    nu = max(nu / 3.0, reg_floor)
                    radius = min(radius * 1.6, 2.0)
                elif alpha < 0.25:
                    nu = min(nu * 3.0, 1e10)
                    radius = max(radius * 0.5, 1e-3)
                # bound chatter and curvature crawl both leave the merit
                # essentially flat over a window; the subproblem is done
                flat_pg = min(flat_pg, pg_norm)
                merit_hist.append(meritn)
                if len(merit_hist) > 15:
                    old = merit_hist.pop(0)
                    if meritn >= old - 1e-4 * (1.0 + abs(old)):
                        return x, it, nu, "flat", flat_pg
                    flat_pg = pg_norm
                moved = True
                break
            nu = min(nu * 10, 1e10)
            radius = max(radius * 0.25, 1e-3)
            stalls += 1
            if stalls >= 3 or nu >= 1e10:
                return x, it, nu, "stall", pg_norm
            break  # re-enter outer while with larger damping
        if not moved:
            continue
    return x, it, nu, "maxiter", pg_norm


# ----- stage driver -------------------------------------------------------


def _run_stage(ws, x, y, rho, opts, final, deadline, stop, nu, trace=None,
               stage=""):
    """One AL stage at the current row bounds. Returns
    (x, y, rho, nu, iterations, status)."""
    iters = 0
    feas_prev = np.inf
    no_progress = 0
    n_near = 0
    for outer in range(opts.max_outer):
        budget = min(opts.max_iters - iters, opts.inner_cap)
        if budget <= 0:
            return x, y, rho, nu, iters, "maxiter"
        base_tol = opts.kkt_tol if final else max(opts.kkt_tol, 1e-5)
        # the tolerance ladder steps down only after near-stationary
        # outers; a cut-short inner resumes at the same rung
        tol = max(base_tol, 1e-2 * 0.2**n_near)
        x, k, nu, st, pg = _inner(ws, x, y, rho, 1.0, tol, budget, deadline,
                                  stop, nu, opts.reg_floor)
        iters += k
        if st in ("timeout", "stopped"):
            return x, y, rho, nu, iters, st
        near = st in ("ok", "flat") or pg <= 30 * tol

        c = ws.constraints(x)
        viol = np.maximum(np.maximum(c - ws.ru, ws.rl - c), 0.0)
        feas = float(viol.max())
        if trace is not None:
            trace.append({"stage": stage, "outer": outer, "inner": k,
                          "status": st, "feas": feas, "rho": rho, "nu": nu,
                          "tol": tol, "pg": pg})
        if final:
            fams = family_violations(ws.pb, ws.to_unscaled(x))
            if st == "ok" and tol <= opts.kkt_tol and all(
                fams[name] <= FAMILY_TOLERANCES[name] for name in fams
            ):
                return x, y, rho, nu, iters, "ok"
        elif near and feas <= opts.stage_feas_tol:
            return x, y, rho, nu, iters, "ok"

        if not near:
            # the subproblem is unfinished: updating multipliers or the
            # penalty off a non-stationary point just corrupts both
            continue
        n_near += 1
        y = np.clip(_shifted_multipliers(c, y, rho, ws.rl, ws.ru), -1e10, 1e10)
        # standard safeguarded update: weak feasibility progress at a
        # solved subproblem means the penalty is too soft
        if feas > 0.3 * feas_prev:
            rho = min(rho * 10.0, opts.rho_max)
        # stationary outers that stop improving feasibility will not
        # start doing so on the next one either; hand the budget back
        if feas > 0.9 * feas_prev:
            no_progress += 1
            if no_progress >= 2:
                return x, y, rho, nu, iters, "stall"
        else:
            no_progress = 0
        feas_prev = feas
    return x, y, rho, nu, iters, "maxiter"


def _fill_guess(problem: NlpProblem, guess: LandingTrajectory) -> np.ndarray:
    """Pack a guess, filling any missing pieces from the nominal pose."""
    N = problem.n_knots
    params = problem.params
    states = guess.states
    if states is None:
        states = np.tile(problem.x0, (N, 1))
    joints = guess.joints
    if joints is None:
        joints = np.tile(params.nominal_joints, (N, 4, 1))
    feet = guess.feet
    if feet is None:
        from .kinematics import leg_forward_kinematics
        from .rotation import rotation_from_rpy

        R = rotation_from_rpy(states[:, 0:3])
        fk = leg_forward_kinematics(joints, params)
        feet = states[:, None, 3:6] + np.einsum("kij,knj->kni", R, fk)
    forces = guess.forces
    if forces is None:
        forces = np.zeros((N, 4, 3))
    traj = LandingTrajectory(
        times=problem.grid.times.copy(), states=states, feet=feet,
        forces=forces, joints=joints, joint_vels=None,
    )
    return traj.pack()


def solve(
    problem: NlpProblem,
    guess: LandingTrajectory,
    options: SolverOptions | None = None,
    stop=None,
    trace=None,
) -> SolveResult:
    """Solve the landing NLP from a guess.

    Deterministic for fixed (problem, guess, options) as long as the time
    budget does not expire; `stop` is a cooperative flag (anything with
    is_set()) checked once per inner iteration.
    """
    opts = options or SolverOptions()
    t0 = time.perf_counter()
    deadline = t0 + opts.time_budget_ms / 1000.0

    x_u = _fill_guess(problem, guess)
    if x_u.shape != (problem.n_vars,):
        raise ValueError("guess does not match the problem layout")
    if not np.isfinite(x_u).all():
        raise ValueError("guess has non-finite entries")

    ws = _Workspace(problem)
    x = np.clip(ws.to_scaled(x_u), ws.xl, ws.xu)
    y = np.zeros(problem.n_rows)
    rho = opts.rho0
    nu = 1e-3

    best_feasible = None   # (cost, x_unscaled)
    best_point = (np.inf, None)  # (violation, x_unscaled) fallback

    def consider(x_scaled):
        nonlocal best_feasible, best_point
        xu_ = ws.to_unscaled(x_scaled)
        rep = feasibility_report(problem, xu_)
        if rep.ok() and (best_feasible is None or rep.cost < best_feasible[0]):
            best_feasible = (rep.cost, xu_.copy())
        v = max(max(rep.families.values()), rep.bound_violation)
        if v < best_point[0]:
            best_point = (v, xu_.copy())
        return v

    consider(x)

    stage_iters = []
    stage_names = []
    interrupted = None

    # the initializer already constructs a contact pattern, so try it as a
    # fixed mode set first: pinned feet turn the complementarity rows into
    # identities and what remains is smooth. Continuation is the fallback
    # for guesses whose pattern does not support a feasible landing.
    ws.set_row_bounds(None)
    x_try = ws.pin_contact_spans(x, opts.contact_force_cutoff)
    x_try, y, rho, nu, k, st = _run_stage(ws, x_try, y, rho, opts, True,
                                          deadline, stop, nu, trace,
                                          "pinned")
    stage_iters.append(k)
    stage_names.append("pinned")
    if st in ("timeout", "stopped"):
        interrupted = st
    elif st == "ok":
        x = x_try
    else:
        consider(x_try)
        ws.reset_mode_bounds()
        y = np.zeros(problem.n_rows)
        rho = opts.rho0
        nu = 1e-3

        for eps in opts.epsilon_schedule:
            ws.set_row_bounds(eps)
            x = np.clip(x, ws.xl, ws.xu)
            x, y, rho, nu, k, st = _run_stage(ws, x, y, rho, opts, False,
                                              deadline, stop, nu, trace,
                                              f"eps={eps:g}")
            stage_iters.append(k)
            stage_names.append(f"eps={eps:g}")
            consider(x)
            if st in ("timeout", "stopped"):
                interrupted = st
                break

        if interrupted is None:
            ws.set_row_bounds(None)
            x = ws.pin_contact_modes(x, opts.contact_force_cutoff)
            x, y, rho, nu, k, st = _run_stage(ws, x, y, rho, opts, True,
                                              deadline, stop, nu, trace,
                                              "polish")
            stage_iters.append(k)
            stage_names.append("polish")
            consider(x)
            if st in ("timeout", "stopped"):
                interrupted = st

    # a pinned contact can be geometrically unreachable (the violation then
    # sits on rows next to it and no amount of penalty moves it); flip such
    # feet to the no-force branch and polish again. The other pins stay, so
    # the re-solve is smooth; duals are cleared only around the surgery.
    repairs = 0
    while (interrupted is None and st != "ok"
           and repairs < opts.max_mode_repairs):
        c = ws.constraints(x)
        viol = np.maximum(np.maximum(c - ws.ru, ws.rl - c), 0.0)
        worst_row = int(np.argmax(viol))
        if viol[worst_row] <= 0.0:
            break
        # contact surgery helps when one stuck row is all that remains;
        # applied to a broadly infeasible iterate it only tears it up
        if float(viol.max()) > opts.repair_feas_gate:
            break
        knots = _row_knots(problem, worst_row)
        pre = (x.copy(), y.copy(), rho, nu, float(viol.max()))
        x, flipped = ws.release_contacts(x, knots)
        if flipped == 0:
            break
        repairs += 1
        _zero_duals_at_knots(problem, y, knots)
        rho = min(rho, 1e4)
        nu = 1e-4
        x, y, rho, nu, k, st = _run_stage(ws, x, y, rho, opts, True,
                                          deadline, stop, nu, trace,
                                          f"repair{repairs}")
        stage_iters.append(k)
        stage_names.append(f"repair{repairs}")
        if st in ("timeout", "stopped"):
            interrupted = st
        elif consider(x) > pre[4]:
            # surgery made things worse; put the iterate back and stop
            x, y, rho, nu = pre[0], pre[1], pre[2], pre[3]
            break

    if interrupted is None:
        zero_y = np.zeros(problem.n_rows)
        x, k, _, st, _ = _inner(ws, x, zero_y, 1.0, 0.0, 1e-10,
                                opts.refine_iters, deadline, stop, 1e-8,
                                opts.reg_floor)
        stage_iters.append(k)
        stage_names.append("refine")
        if st in ("timeout", "stopped"):
            interrupted = st

    consider(x)
    x_out = ws.to_unscaled(x)
    report = feasibility_report(problem, x_out)
    if report.ok() and best_feasible is not None and best_feasible[0] < report.cost:
        x_out = best_feasible[1]
        report = feasibility_report(problem, x_out)
    elif not report.ok():
        if best_feasible is not None:
            x_out = best_feasible[1]
            report = feasibility_report(problem, x_out)
        elif best_point[1] is not None:
            v_now = max(max(report.families.values()), report.bound_violation)
            if best_point[0] < v_now:
                x_out = best_point[1]
                report = feasibility_report(problem, x_out)

    wall_ms = (time.perf_counter() - t0) * 1000.0
    if interrupted is not None:
        status = "timeout"
        message = "stopped by caller" if interrupted == "stopped" else \
            "time budget exhausted"
    elif report.ok():
        status = "solved"
        message = ""
    else:
        status = "infeasible"
        worst = max(report.families, key=report.families.get)
        message = f"residuals above tolerance (worst: {worst} " \
                  f"{report.families[worst]:.2e})"
    return SolveResult(
        status=status,
        x=x_out,
        stage_iterations=stage_iters,
        stage_names=stage_names,
        wall_ms=wall_ms,
        max_residuals=report.families,
        cost=report.cost,
        message=message,
    )
