"""Damped Gauss-Newton over keyframe states and the outer alternation
between voxel re-association and state refinement.

The normal equations are assembled block-sparse over the 15-dim state
tangents and solved with a sparse LU factorization (dense below a size
threshold). Steps are accepted only when the objective decreases;
Levenberg-Marquardt damping scales the diagonal.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import kernels
from .association import CorrespondenceSet, VerifiedLoop, build_world_grid, collect_correspondences
from .config import RunConfig
from .core import (
    Extrinsics,
    KeyframeState,
    RadarFrame,
    TANGENT_DIM,
    retract,
)
from .errors import SolverError, StructuralError
from .factors import (
    EgoVelocityMeasurement,
    PreintegratedImu,
    ego_velocity_residual,
    imu_residual,
    prior_factors,
)

_DENSE_THRESHOLD = 240  # solve dense below this many free tangent dims


@dataclass
class LMParams:
    initial_damping: float = 1e-4
    accept_factor: float = 0.5
    reject_factor: float = 10.0
    rel_decrease_tol: float = 1e-6
    step_norm_tol: float = 1e-8
    max_factorization_retries: int = 5

    @staticmethod
    def from_config(cfg: RunConfig) -> "LMParams":
        return LMParams(
            initial_damping=cfg.lm_initial_damping,
            accept_factor=cfg.lm_accept_factor,
            reject_factor=cfg.lm_reject_factor,
            rel_decrease_tol=cfg.rel_decrease_tol,
            step_norm_tol=cfg.step_norm_tol,
        )


@dataclass
class Problem:
    """Batch estimation problem over an ordered keyframe state sequence."""

    states: list[KeyframeState]
    ext: Extrinsics
    correspondences: CorrespondenceSet
    imu: list[tuple[int, int, PreintegratedImu]] = field(default_factory=list)
    ego: list[tuple[int, EgoVelocityMeasurement]] = field(default_factory=list)
    prior_pose: tuple | None = None  # (state_index, Pose, cov6)
    prior_bias: tuple | None = None  # (state_index, bias6, cov6)
    fixed: np.ndarray | None = None
    walk_gyro_density: float = 1e-5
    walk_accel_density: float = 1e-4
    huber_delta: float = 0.0

    def __post_init__(self):
        m = len(self.states)
        if self.fixed is None:
            self.fixed = np.zeros(m, dtype=bool)
        for a, b, _ in self.imu:
            if not (0 <= a < m and 0 <= b < m):
                raise StructuralError(f"IMU factor references missing state ({a},{b})")
        for a, _ in self.ego:
            if not (0 <= a < m):
                raise StructuralError(f"ego factor references missing state {a}")
        if len(self.correspondences) and (
            int(self.correspondences.idx_j.max(initial=0)) >= m
            or int(self.correspondences.idx_k.max(initial=0)) >= m
        ):
            raise StructuralError("correspondence references missing state")


@dataclass
class InnerReport:
    objectives: list[float]
    step_norms: list[float]
    gradient_norm: float
    accepted: int
    rejected: int
    termination: str


@dataclass
class SolveReport:
    """Per-iteration record of the optimization run."""

    inner_reports: list[InnerReport] = field(default_factory=list)
    correspondence_counts: list[int] = field(default_factory=list)
    wall_time: float = 0.0
    diagnostics: list[str] = field(default_factory=list)

    @property
    def objective_trace(self) -> list[float]:
        return [obj for rep in self.inner_reports for obj in rep.objectives]

    @property
    def final_objective(self) -> float:
        return self.inner_reports[-1].objectives[-1] if self.inner_reports else float("nan")


def _pack(states: Sequence[KeyframeState], ext: Extrinsics):
    R = np.stack([s.pose.rotation.matrix() for s in states])
    t = np.stack([s.pose.translation for s in states])
    R_cov = R @ ext.radar_in_body.rotation.matrix()
    return R, t, R_cov


def _small_factor_blocks(problem: Problem, states: Sequence[KeyframeState]):
    """Evaluate every non-geometric factor; yields (state_indices, block)."""
    gravity = problem.ext.gravity_w
    for a, b, pre in problem.imu:
        blk, bias_blk = imu_residual(
            pre, states[a], states[b], gravity,
            problem.walk_gyro_density, problem.walk_accel_density,
        )
        yield (a, b), blk
        yield (a, b), bias_blk
    for a, meas in problem.ego:
        yield (a,), ego_velocity_residual(states[a], meas, problem.ext)
    if problem.prior_pose is not None or problem.prior_bias is not None:
        if problem.prior_pose is None or problem.prior_bias is None:
            which = problem.prior_pose or problem.prior_bias
            idx = which[0]
        else:
            idx = problem.prior_pose[0]
        pose_prior = problem.prior_pose[1] if problem.prior_pose else states[idx].pose
        cov_pose = problem.prior_pose[2] if problem.prior_pose else np.eye(6) * 1e12
        bias_prior = problem.prior_bias[1] if problem.prior_bias else np.zeros(6)
        cov_bias = problem.prior_bias[2] if problem.prior_bias else np.eye(6) * 1e12
        pose_blk, bias_blk = prior_factors(states[idx], pose_prior, cov_pose, bias_prior, cov_bias)
        if problem.prior_pose is not None:
            yield (idx,), pose_blk
        if problem.prior_bias is not None:
            yield (idx,), bias_blk


def evaluate_objective(problem: Problem, states: Sequence[KeyframeState] | None = None) -> float:
    """Total objective: sum of squared whitened residuals of all factors."""
    states = problem.states if states is None else states
    corr = problem.correspondences
    R, t, R_cov = _pack(states, problem.ext)
    body_j, body_k = _body_points(problem)
    cost, _, _, _ = kernels.geometric_blocks(
        body_j, body_k, corr.C_fj, corr.C_fk, corr.idx_j, corr.idx_k, R, t, R_cov,
        with_jacobians=False, huber_delta=problem.huber_delta,
    )
    for _, blk in _small_factor_blocks(problem, states):
        cost += blk.cost()
    return float(cost)


def _body_points(problem: Problem):
    corr = problem.correspondences
    key = id(corr)
    cached = getattr(problem, "_body_cache", None)
    if cached is not None and cached[0] == key:
        return cached[1], cached[2]
    rb = problem.ext.radar_in_body
    body_j = rb.apply(corr.p_fj) if len(corr) else np.zeros((0, 3))
    body_k = rb.apply(corr.p_fk) if len(corr) else np.zeros((0, 3))
    problem._body_cache = (key, body_j, body_k)
    return body_j, body_k


def _linearize(problem: Problem, states: Sequence[KeyframeState]):
    """Build gradient, block-sparse normal matrix pieces, and the objective."""
    m = len(states)
    corr = problem.correspondences
    R, t, R_cov = _pack(states, problem.ext)
    body_j, body_k = _body_points(problem)
    cost, r_w, Jj, Jk = kernels.geometric_blocks(
        body_j, body_k, corr.C_fj, corr.C_fk, corr.idx_j, corr.idx_k, R, t, R_cov,
        with_jacobians=True, huber_delta=problem.huber_delta,
    )

    grad = np.zeros((m, TANGENT_DIM))
    diag = np.zeros((m, TANGENT_DIM, TANGENT_DIM))
    off: dict[tuple[int, int], np.ndarray] = {}

    n = len(corr)
    if n:
        gj = np.einsum("nij,ni->nj", Jj, r_w)
        gk = np.einsum("nij,ni->nj", Jk, r_w)
        np.add.at(grad[:, :6], corr.idx_j, gj)
        np.add.at(grad[:, :6], corr.idx_k, gk)
        np.add.at(diag[:, :6, :6], corr.idx_j, np.einsum("nij,nik->njk", Jj, Jj))
        np.add.at(diag[:, :6, :6], corr.idx_k, np.einsum("nij,nik->njk", Jk, Jk))
        codes = corr.idx_j * m + corr.idx_k
        uniq, inv = np.unique(codes, return_inverse=True)
        cross = np.zeros((len(uniq), 6, 6))
        np.add.at(cross, inv, np.einsum("nij,nik->njk", Jj, Jk))
        geo_pairs = (uniq // m, uniq % m, cross)
    else:
        geo_pairs = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 6, 6)))

    for indices, blk in _small_factor_blocks(problem, states):
        Jw = {i: blk.whitened_jacobian(pos) for pos, i in enumerate(indices)}
        rw = blk.whitened_residual()
        cost += float(rw @ rw)
        for i in indices:
            grad[i] += Jw[i].T @ rw
            diag[i] += Jw[i].T @ Jw[i]
        if len(indices) == 2:
            a, b = indices
            key = (a, b)
            if key not in off:
                off[key] = np.zeros((TANGENT_DIM, TANGENT_DIM))
            off[key] += Jw[a].T @ Jw[b]

    return float(cost), grad, diag, off, geo_pairs


def _assemble(problem: Problem, grad, diag, off, geo_pairs):
    """Sparse symmetric normal matrix over free states plus the rhs."""
    m = len(problem.states)
    free = ~problem.fixed
    free_idx = np.flatnonzero(free)
    offset = -np.ones(m, dtype=np.int64)
    offset[free_idx] = np.arange(len(free_idx)) * TANGENT_DIM
    dim = len(free_idx) * TANGENT_DIM
    if dim == 0:
        raise StructuralError("all states are fixed; nothing to optimize")

    rows, cols, vals = [], [], []
    base = np.arange(TANGENT_DIM)
    rr, cc = np.meshgrid(base, base, indexing="ij")

    for i in free_idx:
        rows.append((offset[i] + rr).ravel())
        cols.append((offset[i] + cc).ravel())
        vals.append(diag[i].ravel())

    for (a, b), blk in off.items():
        if problem.fixed[a] or problem.fixed[b]:
            continue
        rows.append((offset[a] + rr).ravel())
        cols.append((offset[b] + cc).ravel())
        vals.append(blk.ravel())
        rows.append((offset[b] + rr).ravel())
        cols.append((offset[a] + cc).ravel())
        vals.append(blk.T.ravel())

    ga, gb, cross = geo_pairs
    b6 = np.arange(6)
    r6, c6 = np.meshgrid(b6, b6, indexing="ij")
    for a, b, blk in zip(ga, gb, cross):
        if problem.fixed[a] or problem.fixed[b]:
            continue
        rows.append((offset[a] + r6).ravel())
        cols.append((offset[b] + c6).ravel())
        vals.append(blk.ravel())
        rows.append((offset[b] + r6).ravel())
        cols.append((offset[a] + c6).ravel())
        vals.append(blk.T.ravel())

    H = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)
    ).tocsc()
    rhs = grad[free_idx].ravel()
    return H, rhs, free_idx, offset


def _solve_damped(H, rhs, damping: float):
    """Solve (H + damping * diag) x = -rhs; diag floored to stay invertible."""
    d = np.asarray(H.diagonal()).ravel()
    floor = max(float(d.max(initial=0.0)) * 1e-12, 1e-12)
    d = np.maximum(d, floor)
    if H.shape[0] <= _DENSE_THRESHOLD:
        A = H.toarray() + damping * np.diag(d)
        return np.linalg.solve(A, -rhs)
    A = (H + damping * scipy.sparse.diags(d)).tocsc()
    lu = scipy.sparse.linalg.splu(A)
    x = lu.solve(-rhs)
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("sparse solve produced non-finite step")
    return x


def _apply_step(states, delta, free_idx, offset):
    out = list(states)
    for i in free_idx:
        out[i] = retract(out[i], delta[offset[i] : offset[i] + TANGENT_DIM])
    return out


def solve_inner(problem: Problem, max_iters: int = 6, lm: LMParams | None = None):
    """Levenberg-Marquardt on the current problem (fixed correspondences).

    Returns (states, InnerReport). Each iteration spends one step attempt;
    rejected steps raise the damping without relinearizing. Terminates early
    on small relative decrease, small step, or vanishing gradient.
    """
    lm = lm or LMParams()
    states = list(problem.states)
    cost, grad, diag, off, geo = _linearize(problem, states)
    H, rhs, free_idx, offset = _assemble(problem, grad, diag, off, geo)

    objectives = [cost]
    step_norms: list[float] = []
    damping = lm.initial_damping
    accepted = rejected = 0
    termination = "max_iterations"

    gnorm = float(np.linalg.norm(rhs, ord=np.inf)) if len(rhs) else 0.0
    if gnorm < 1e-14:
        report = InnerReport(objectives, step_norms, gnorm, 0, 0, "gradient_converged")
        return states, report

    it = 0
    while it < max_iters:
        it += 1
        delta = None
        for attempt in range(lm.max_factorization_retries + 1):
            try:
                delta = _solve_damped(H, rhs, damping)
                break
            except (np.linalg.LinAlgError, RuntimeError):
                if attempt == lm.max_factorization_retries:
                    raise SolverError(
                        f"normal-equations factorization failed after "
                        f"{lm.max_factorization_retries} damping retries (damping={damping:.3e})"
                    )
                damping *= lm.reject_factor

        step_norm = float(np.linalg.norm(delta))
        candidate = _apply_step(states, delta, free_idx, offset)
        new_cost = evaluate_objective(problem, candidate)

        if new_cost < cost:
            rel_decrease = (cost - new_cost) / max(cost, 1e-300)
            states = candidate
            accepted += 1
            objectives.append(new_cost)
            step_norms.append(step_norm)
            cost = new_cost
            damping = max(damping * lm.accept_factor, 1e-15)
            if it >= max_iters:
                break
            cost, grad, diag, off, geo = _linearize(problem, states)
            H, rhs, free_idx, offset = _assemble(problem, grad, diag, off, geo)
            gnorm = float(np.linalg.norm(rhs, ord=np.inf)) if len(rhs) else 0.0
            if rel_decrease < lm.rel_decrease_tol:
                termination = "relative_decrease"
                break
            if step_norm < lm.step_norm_tol:
                termination = "step_norm"
                break
            if gnorm < 1e-14:
                termination = "gradient_converged"
                break
        else:
            rejected += 1
            damping *= lm.reject_factor
            if step_norm < lm.step_norm_tol:
                termination = "step_norm"
                break

    gnorm = float(np.linalg.norm(rhs, ord=np.inf)) if len(rhs) else 0.0
    report = InnerReport(objectives, step_norms, gnorm, accepted, rejected, termination)
    return states, report


@dataclass
class KeyframeBundle:
    """Per-keyframe inputs to the batch problem."""

    frame: RadarFrame
    covariances: np.ndarray  # (N,3) diagonal point variances, radar frame
    imu_to_next: PreintegratedImu | None = None
    ego: EgoVelocityMeasurement | None = None


def build_problem(
    keyframes: Sequence[KeyframeBundle],
    states: Sequence[KeyframeState],
    ext: Extrinsics,
    cfg: RunConfig,
    fixed: np.ndarray | None = None,
    with_priors: bool = True,
) -> Problem:
    imu = []
    ego = []
    for i, kb in enumerate(keyframes):
        if kb.imu_to_next is not None and i + 1 < len(keyframes):
            imu.append((i, i + 1, kb.imu_to_next))
        if kb.ego is not None:
            ego.append((i, kb.ego))
    prior_pose = prior_bias = None
    if with_priors:
        cov_pose = np.diag([cfg.prior_pose_var_rot] * 3 + [cfg.prior_pose_var_trans] * 3)
        cov_bias = np.eye(6) * cfg.prior_bias_var
        prior_pose = (0, states[0].pose, cov_pose)
        prior_bias = (0, np.zeros(6), cov_bias)
    return Problem(
        states=list(states),
        ext=ext,
        correspondences=CorrespondenceSet.empty(),
        imu=imu,
        ego=ego,
        prior_pose=prior_pose,
        prior_bias=prior_bias,
        fixed=fixed,
        walk_gyro_density=cfg.gyro_walk_density,
        walk_accel_density=cfg.accel_walk_density,
        huber_delta=cfg.huber_delta,
    )


def solve_outer(
    keyframes: Sequence[KeyframeBundle],
    initial_states: Sequence[KeyframeState],
    loops: Sequence[VerifiedLoop],
    ext: Extrinsics,
    cfg: RunConfig,
    covariance_updater: Callable | None = None,
    fixed: np.ndarray | None = None,
    with_priors: bool = True,
) -> tuple[list[KeyframeState], SolveReport]:
    """Alternate correspondence rebuilding and inner refinement.

    Each outer iteration re-voxelizes the world under the current states,
    recollects valid correspondences, and runs an inner solve; IMU, ego, and
    prior factors persist across iterations. `covariance_updater`, when
    given, may refresh per-keyframe point covariances between iterations.
    """
    t_start = time.perf_counter()
    problem = build_problem(keyframes, initial_states, ext, cfg, fixed, with_priors)
    covariances = [np.asarray(kb.covariances, dtype=np.float64) for kb in keyframes]
    report = SolveReport()
    lm = LMParams.from_config(cfg)

    for outer in range(cfg.outer_iterations):
        if covariance_updater is not None and outer > 0:
            covariances = covariance_updater(problem.states, covariances)
        grid = build_world_grid(
            [(kb.frame, s, c) for kb, s, c in zip(keyframes, problem.states, covariances)],
            ext,
            cfg.voxel_size,
        )
        corr = collect_correspondences(grid, loops, cfg.tau_overlap, cfg.tau_time)
        if len(corr) == 0:
            raise SolverError(
                f"outer iteration {outer}: no valid correspondences "
                "(scene has no multi-frame overlap under the current gates)"
            )
        problem.correspondences = corr
        report.correspondence_counts.append(len(corr))

        states, inner = solve_inner(problem, cfg.inner_iterations, lm)
        problem.states = states
        report.inner_reports.append(inner)

    for i, s in enumerate(problem.states):
        if np.linalg.norm(s.bias_gyro) > cfg.bias_gyro_bound:
            report.diagnostics.append(
                f"state {i}: gyro bias norm {np.linalg.norm(s.bias_gyro):.3f} exceeds bound"
            )
        if np.linalg.norm(s.bias_accel) > cfg.bias_accel_bound:
            report.diagnostics.append(
                f"state {i}: accel bias norm {np.linalg.norm(s.bias_accel):.3f} exceeds bound"
            )

    report.wall_time = time.perf_counter() - t_start
    return problem.states, report
