"""Iterative convex refinement of hand pose and contact forces.

Each iteration evaluates the hand against the object (forward kinematics,
signed distances, Jacobians, optimal contact forces), Taylor-expands the
residual-plus-surface objective around the current point, and solves a
trust-region QP for the joint and force step. Surface normals are frozen
per iteration; the wrench linearization itself is exact in the sense that
the grasp map depends on the configuration only through the fingertip
positions. The dropped second-order torque curvature (proportional to the
force magnitudes) is re-injected as a Levenberg-style step penalty so large
internal forces cannot license wild steps.

Convergence requires the residual and fingertip-distance thresholds plus
clean penetration margins, all of which are re-checkable from scratch with
``verify_solution``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SolverFailure
from .geometry import OrientedPointCloud
from .kinematics import HandModel, JointConfig
from .qp import solve_qp
from .transforms import skew
from .wrench import (ContactForceSet, JointProjection, grasp_map,
                     is_force_closure, optimal_contact_forces, stacked_grasp_matrix)

STATUS_CONVERGED = "converged"
STATUS_ITERATION_LIMIT = "iteration_limit"
STATUS_SOLVER_FAILURE = "solver_failure"


@dataclass
class RefinementProblem:
    hand: HandModel
    cloud: OrientedPointCloud
    target: np.ndarray  # unit wrench (6,) or joint torque (d,) with projection set
    mu: float = 0.5
    projection: JointProjection | None = None
    max_iters: int = 100
    residual_tol: float = 1e-6
    surface_tol: float = 0.005
    penetration_tol: float = 1e-4
    trust_q: float = 0.05
    trust_f: float = 0.1
    facets: int = 8
    slack_weight: float = 1e3
    damping: float = 1e-6  # Levenberg term keeping the step QP positive definite
    # weight on the dropped second-order torque term |f| * ||J dq||^2; keeps
    # steps honest when the inner solve returns large internal forces
    curvature_weight: float = 1.0
    curvature_floor: float = 0.5

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)
        if self.projection is None and self.target.shape != (6,):
            raise ValueError("free-object target must be a 6-vector wrench")
        if self.projection is not None and len(self.target) != self.projection.dof:
            raise ValueError("torque target length must match the projection rows")

    @property
    def task_matrix(self) -> np.ndarray:
        if self.projection is None:
            return np.eye(6)
        return self.projection.matrix


@dataclass
class IterationRecord:
    residual_norm: float
    surface_error_sq: float  # sum of phi(p_i)^2
    max_penetration: float


@dataclass
class RefinementResult:
    q_star: JointConfig
    forces: ContactForceSet
    status: str
    history: list[IterationRecord] = field(default_factory=list)
    force_closure: bool | None = None

    @property
    def converged(self) -> bool:
        return self.status == STATUS_CONVERGED

    @property
    def iterations(self) -> int:
        return max(len(self.history) - 1, 0)


@dataclass
class StateEval:
    """Everything the subproblem needs about the current iterate."""

    q: JointConfig
    tips: np.ndarray
    tip_phis: np.ndarray
    tip_normals: np.ndarray
    tip_jacobians: list
    maps: list
    forces: ContactForceSet  # fresh optimal forces and their residual
    centers: np.ndarray
    center_phis: np.ndarray
    center_normals: np.ndarray
    center_jacobians: list
    pair_margins: np.ndarray

    @property
    def max_penetration(self) -> float:
        pen_surface = float(np.max(np.maximum(self.radii_gap, 0.0), initial=0.0))
        pen_pairs = float(np.max(np.maximum(-self.pair_margins, 0.0), initial=0.0))
        return max(pen_surface, pen_pairs)

    @property
    def radii_gap(self) -> np.ndarray:  # epsilon_k - phi(c_k), positive when penetrating
        return self._radii - self.center_phis

    def attach_radii(self, radii: np.ndarray):
        self._radii = radii
        return self


def evaluate_state(problem: RefinementProblem, q: JointConfig) -> StateEval:
    hand, cloud = problem.hand, problem.cloud
    poses = hand.forward_kinematics(q)
    tips = hand.fingertip_positions(q, poses)
    tip_jacobians = [hand.fingertip_jacobian(q, i, poses) for i in range(hand.num_fingertips)]
    tip_phis = np.empty(len(tips))
    tip_normals = np.empty((len(tips), 3))
    maps = []
    for i, p in enumerate(tips):
        query = cloud.nearest_surface_point(p)
        tip_phis[i] = query.signed_distance
        tip_normals[i] = query.outward_normal
        maps.append(grasp_map(p, cloud, problem.mu))
    forces = optimal_contact_forces(maps, problem.target, problem.facets,
                                    task_matrix=None if problem.projection is None
                                    else problem.projection.matrix)
    centers = hand.sphere_centers(q, poses)
    center_jacobians = [hand.sphere_jacobian(q, k, poses)
                        for k in range(len(hand.collision_spheres))]
    center_phis = np.empty(len(centers))
    center_normals = np.empty((len(centers), 3))
    for k, c in enumerate(centers):
        query = cloud.nearest_surface_point(c)
        center_phis[k] = query.signed_distance
        center_normals[k] = query.outward_normal
    radii = hand.sphere_radii()
    pairs = hand.nonadjacent_sphere_pairs()
    margins = np.array([np.linalg.norm(centers[i] - centers[j]) - (radii[i] + radii[j])
                        for i, j in pairs]) if pairs else np.zeros(0)
    state = StateEval(q=q, tips=tips, tip_phis=tip_phis, tip_normals=tip_normals,
                      tip_jacobians=tip_jacobians, maps=maps, forces=forces,
                      centers=centers, center_phis=center_phis,
                      center_normals=center_normals, center_jacobians=center_jacobians,
                      pair_margins=margins)
    return state.attach_radii(radii)


def _is_converged(problem: RefinementProblem, state: StateEval) -> bool:
    if state.forces.residual_norm >= problem.residual_tol:
        return False
    if np.max(np.abs(state.tip_phis), initial=0.0) >= problem.surface_tol:
        return False
    return state.max_penetration <= problem.penetration_tol


@dataclass
class ConvexSubproblem:
    """Trust-region QP model of one refinement step.

    Variables are [dq, df, slacks]; ``model_matrix`` and ``model_offset``
    define the least-squares objective ||offset + matrix @ [dq, df]||^2.
    ``step_curvature`` carries the re-injected second-order torque term.
    """

    n_q: int
    n_f: int
    n_slack: int
    model_matrix: np.ndarray
    model_offset: np.ndarray
    step_curvature: np.ndarray  # (n_q, n_q) PSD
    A: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    slack_weight: float
    damping: float
    feasible_start: np.ndarray = None  # zero step plus slacks covering violations

    @property
    def n_vars(self) -> int:
        return self.n_q + self.n_f + self.n_slack

    def objective_at(self, dq, df) -> float:
        z = np.concatenate([dq, df])
        r = self.model_offset + self.model_matrix @ z
        return float(r @ r)

    def gradient_at_zero(self) -> np.ndarray:
        return 2.0 * self.model_matrix.T @ self.model_offset

    def qp_terms(self):
        nz = self.n_q + self.n_f
        P = np.zeros((self.n_vars, self.n_vars))
        P[:nz, :nz] = 2.0 * (self.model_matrix.T @ self.model_matrix
                             + self.damping * np.eye(nz))
        P[:self.n_q, :self.n_q] += 2.0 * self.step_curvature
        q = np.zeros(self.n_vars)
        q[:nz] = 2.0 * self.model_matrix.T @ self.model_offset
        q[nz:] = self.slack_weight
        return P, q

    def solve(self):
        P, q = self.qp_terms()
        sol = solve_qp(P, q, self.A, self.lo, self.hi, x0=self.feasible_start)
        return sol.x[:self.n_q], sol.x[self.n_q:self.n_q + self.n_f]


def build_subproblem(problem: RefinementProblem, state: StateEval) -> ConvexSubproblem:
    hand = problem.hand
    n_q = hand.dof
    m = hand.num_fingertips
    n_f = 3 * m
    T = problem.task_matrix
    k_task = T.shape[0]

    # wrench model rows: r + sum_i d(G_i f_i)/dq dq + G_i df_i
    A_q = np.zeros((6, n_q))
    for i in range(m):
        A_q[3:, :] += -skew(state.forces.forces[i]) @ state.tip_jacobians[i]
    A_f = stacked_grasp_matrix(state.maps)
    model = np.zeros((k_task + m, n_q + n_f))
    model[:k_task, :n_q] = T @ A_q
    model[:k_task, n_q:] = T @ A_f
    offset = np.concatenate([state.forces.residual, state.tip_phis])
    for i in range(m):
        model[k_task + i, :n_q] = state.tip_normals[i] @ state.tip_jacobians[i]

    # second-order guard: the torque model drops terms of size |f_i| ||J dq||^2
    curvature = np.zeros((n_q, n_q))
    scale = problem.curvature_weight
    if scale > 0:
        for i in range(m):
            weight = np.linalg.norm(state.forces.forces[i]) + problem.curvature_floor
            curvature += scale * weight * (state.tip_jacobians[i].T @ state.tip_jacobians[i])

    radii = hand.sphere_radii()
    pairs = hand.nonadjacent_sphere_pairs()

    # slack columns go to penetration/separation rows violated at dq = 0
    pen_viol = state.center_phis < radii - 1e-12
    pair_viol = state.pair_margins < -1e-12 if len(pairs) else np.zeros(0, dtype=bool)
    n_slack = int(np.sum(pen_viol)) + int(np.sum(pair_viol))
    n_vars = n_q + n_f + n_slack

    rows, lows, highs = [], [], []

    # trust region and joint-limit boxes on dq
    lo_q = np.full(n_q, -problem.trust_q)
    hi_q = np.full(n_q, problem.trust_q)
    j_lo, j_hi = hand.joint_limits_vector()
    for j in range(len(j_lo)):
        lo_q[6 + j] = max(lo_q[6 + j], j_lo[j] - state.q.joint_values[j])
        hi_q[6 + j] = min(hi_q[6 + j], j_hi[j] - state.q.joint_values[j])
        if lo_q[6 + j] > hi_q[6 + j]:  # iterate pinned at a violated limit
            lo_q[6 + j] = hi_q[6 + j] = np.clip(0.0, lo_q[6 + j], hi_q[6 + j])
    box = np.zeros((n_q + n_f, n_vars))
    box[:, :n_q + n_f] = np.eye(n_q + n_f)
    rows.append(box)
    lows.append(np.concatenate([lo_q, np.full(n_f, -problem.trust_f)]))
    highs.append(np.concatenate([hi_q, np.full(n_f, problem.trust_f)]))

    if n_slack:
        sbox = np.zeros((n_slack, n_vars))
        sbox[:, n_q + n_f:] = np.eye(n_slack)
        rows.append(sbox)
        lows.append(np.zeros(n_slack))
        highs.append(np.full(n_slack, np.inf))

    # cone pyramids on f* + df
    for i, g in enumerate(state.maps):
        A_i, lo_i, hi_i = g.cone.pyramid_rows(problem.facets)
        block = np.zeros((A_i.shape[0], n_vars))
        block[:, n_q + 3 * i:n_q + 3 * i + 3] = A_i
        base = A_i @ state.forces.forces[i]
        rows.append(block)
        lows.append(lo_i - base)
        highs.append(hi_i - base)

    # linearized hand-object penetration: phi(c_k) + n . J dq >= eps_k
    slack_col = n_q + n_f
    if len(state.centers):
        pen = np.zeros((len(state.centers), n_vars))
        for k in range(len(state.centers)):
            pen[k, :n_q] = state.center_normals[k] @ state.center_jacobians[k]
            if pen_viol[k]:
                pen[k, slack_col] = 1.0
                slack_col += 1
        rows.append(pen)
        lows.append(radii - state.center_phis)
        highs.append(np.full(len(state.centers), np.inf))

    # linearized sphere-pair separation along the current center offset
    if pairs:
        sep = np.zeros((len(pairs), n_vars))
        sep_lo = np.empty(len(pairs))
        for idx, (i, j) in enumerate(pairs):
            d = state.centers[i] - state.centers[j]
            norm = np.linalg.norm(d)
            direction = d / norm if norm > 1e-9 else np.array([0.0, 0.0, 1.0])
            sep[idx, :n_q] = direction @ (state.center_jacobians[i] - state.center_jacobians[j])
            sep_lo[idx] = (radii[i] + radii[j]) - norm
            if pair_viol[idx]:
                sep[idx, slack_col] = 1.0
                slack_col += 1
        rows.append(sep)
        lows.append(sep_lo)
        highs.append(np.full(len(pairs), np.inf))

    start = np.zeros(n_vars)
    slack_values = np.concatenate([
        np.maximum(radii - state.center_phis, 0.0)[pen_viol],
        np.maximum(-state.pair_margins, 0.0)[pair_viol] if len(pairs) else np.zeros(0),
    ])
    start[n_q + n_f:] = slack_values
    return ConvexSubproblem(
        n_q=n_q, n_f=n_f, n_slack=n_slack,
        model_matrix=model, model_offset=offset, step_curvature=curvature,
        A=np.vstack(rows), lo=np.concatenate(lows), hi=np.concatenate(highs),
        slack_weight=problem.slack_weight, damping=problem.damping,
        feasible_start=start,
    )


def refine_grasp(problem: RefinementProblem, q0: JointConfig) -> RefinementResult:
    """Run the refinement loop from q0 (clamped into joint limits)."""
    q = problem.hand.clamp(q0)
    history: list[IterationRecord] = []
    state = None
    for it in range(problem.max_iters + 1):
        state = evaluate_state(problem, q)
        history.append(IterationRecord(
            residual_norm=state.forces.residual_norm,
            surface_error_sq=float(np.sum(state.tip_phis ** 2)),
            max_penetration=state.max_penetration,
        ))
        if _is_converged(problem, state):
            return RefinementResult(q, state.forces, STATUS_CONVERGED, history)
        if it == problem.max_iters:
            break
        sub = build_subproblem(problem, state)
        try:
            dq, _ = sub.solve()
        except SolverFailure:
            return RefinementResult(q, state.forces, STATUS_SOLVER_FAILURE, history)
        q = problem.hand.clamp(JointConfig.from_vector(q.as_vector() + dq))
    return RefinementResult(q, state.forces, STATUS_ITERATION_LIMIT, history)


def refine_articulated(problem: RefinementProblem, q0: JointConfig) -> RefinementResult:
    """Alias emphasizing joint-space targets; the loop is identical."""
    if problem.projection is None:
        raise ValueError("articulated refinement needs a joint projection")
    return refine_grasp(problem, q0)


def force_closure_refine(problem: RefinementProblem, q0: JointConfig) -> RefinementResult:
    """Refine with a zero target wrench, then certify closure by the 12-wrench test."""
    closure_problem = RefinementProblem(
        hand=problem.hand, cloud=problem.cloud, target=np.zeros(6), mu=problem.mu,
        max_iters=problem.max_iters, residual_tol=problem.residual_tol,
        surface_tol=problem.surface_tol, penetration_tol=problem.penetration_tol,
        trust_q=problem.trust_q, trust_f=problem.trust_f, facets=problem.facets,
        slack_weight=problem.slack_weight, damping=problem.damping,
        curvature_weight=problem.curvature_weight, curvature_floor=problem.curvature_floor)
    result = refine_grasp(closure_problem, q0)
    tips = problem.hand.fingertip_positions(result.q_star)
    maps = [grasp_map(p, problem.cloud, problem.mu) for p in tips]
    result.force_closure = is_force_closure(maps, problem.facets)
    return result


def verify_solution(hand: HandModel, cloud: OrientedPointCloud, q: JointConfig,
                    target, mu: float, projection: JointProjection | None = None,
                    facets: int = 8, residual_tol: float = 1e-6,
                    surface_tol: float = 0.005, penetration_tol: float = 1e-4) -> dict:
    """Recompute every convergence invariant from scratch (fresh FK and SDF)."""
    tips = hand.fingertip_positions(q)
    maps = [grasp_map(p, cloud, mu) for p in tips]
    forces = optimal_contact_forces(maps, np.asarray(target, dtype=float), facets,
                                    task_matrix=None if projection is None else projection.matrix)
    tip_phis = np.array([cloud.signed_distance(p) for p in tips])
    centers = hand.sphere_centers(q)
    radii = hand.sphere_radii()
    center_phis = np.array([cloud.signed_distance(c) for c in centers])
    pairs = hand.nonadjacent_sphere_pairs()
    margins = np.array([np.linalg.norm(centers[i] - centers[j]) - (radii[i] + radii[j])
                        for i, j in pairs]) if pairs else np.zeros(0)
    max_pen = float(np.max(np.maximum(radii - center_phis, 0.0), initial=0.0))
    min_pair = float(np.min(margins, initial=np.inf))
    report = {
        "residual_norm": forces.residual_norm,
        "max_tip_distance": float(np.max(np.abs(tip_phis), initial=0.0)),
        "max_penetration": max_pen,
        "min_pair_margin": min_pair,
        "residual_ok": forces.residual_norm < residual_tol,
        "surface_ok": bool(np.max(np.abs(tip_phis), initial=0.0) < surface_tol),
        "penetration_ok": bool(max_pen <= penetration_tol and min_pair >= -penetration_tol),
    }
    report["all_ok"] = bool(report["residual_ok"] and report["surface_ok"]
                            and report["penetration_ok"])
    return report
