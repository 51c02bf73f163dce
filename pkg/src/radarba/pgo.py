"""Pose-graph optimization: recover all frame poses from optimized keyframe
poses (absolute constraints) plus consecutive-frame relative poses from the
front-end.

Keyframes are softly constrained with a large information weight rather than
frozen, so a single solver path covers every node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from scipy.sparse.csgraph import connected_components

from .core import (
    Pose,
    Rotation,
    exp_so3_batch,
    log_so3_batch,
    right_jacobian_inv_batch,
    skew_batch,
)
from .errors import DataError, SolverError, StructuralError

_DENSE_THRESHOLD = 240


@dataclass
class PoseGraph:
    """Nodes are per-frame poses; edges carry 6x6 square-root information in
    [rot, trans] residual order."""

    initial: list[Pose]
    rel_ia: np.ndarray  # (E,)
    rel_ib: np.ndarray
    rel_Zr: np.ndarray  # (E,3,3) measured relative rotation (b in a)
    rel_Zt: np.ndarray  # (E,3)
    rel_sqrt_info: np.ndarray  # (E,6,6)
    abs_idx: np.ndarray  # (K,)
    abs_Zr: np.ndarray
    abs_Zt: np.ndarray
    abs_sqrt_info: np.ndarray
    keyframe_positions: list[int] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.initial)

    def check_connected(self) -> None:
        n = self.num_nodes
        if n == 0:
            raise StructuralError("pose graph has no nodes")
        adj = scipy.sparse.coo_matrix(
            (np.ones(len(self.rel_ia)), (self.rel_ia, self.rel_ib)), shape=(n, n)
        )
        ncomp, _ = connected_components(adj, directed=False)
        if ncomp != 1:
            raise StructuralError(f"pose graph is disconnected ({ncomp} components)")


def build_pose_graph(
    initial_poses: Sequence[Pose],
    keyframe_constraints: dict[int, Pose],
    odometry_relpose: Sequence[Pose],
    abs_info: float = 1e6,
    rel_info_rot: float = 1e4,
    rel_info_trans: float = 1e4,
) -> PoseGraph:
    """Chain graph over all frames with absolute constraints on keyframes.

    `keyframe_constraints` maps frame position -> optimized pose;
    `odometry_relpose[i]` is the front-end pose of frame i+1 in frame i and
    must exist for every consecutive pair.
    """
    n = len(initial_poses)
    if n == 0:
        raise DataError("no frames to build a pose graph from")
    if len(odometry_relpose) != n - 1:
        raise DataError(
            f"need {n - 1} consecutive relative poses, got {len(odometry_relpose)}"
        )
    for pos in keyframe_constraints:
        if not (0 <= pos < n):
            raise DataError(f"keyframe constraint position {pos} out of range")

    rel_ia = np.arange(n - 1, dtype=np.int64)
    rel_ib = rel_ia + 1
    rel_Zr = np.stack([z.rotation.matrix() for z in odometry_relpose]) if n > 1 else np.zeros((0, 3, 3))
    rel_Zt = np.stack([z.translation for z in odometry_relpose]) if n > 1 else np.zeros((0, 3))
    sq = np.sqrt(np.array([rel_info_rot] * 3 + [rel_info_trans] * 3))
    rel_S = np.tile(np.diag(sq), (n - 1, 1, 1))

    kf_pos = sorted(keyframe_constraints)
    abs_idx = np.array(kf_pos, dtype=np.int64)
    abs_Zr = (
        np.stack([keyframe_constraints[i].rotation.matrix() for i in kf_pos])
        if kf_pos
        else np.zeros((0, 3, 3))
    )
    abs_Zt = (
        np.stack([keyframe_constraints[i].translation for i in kf_pos])
        if kf_pos
        else np.zeros((0, 3))
    )
    abs_S = np.tile(np.eye(6) * np.sqrt(abs_info), (len(kf_pos), 1, 1))

    g = PoseGraph(
        list(initial_poses), rel_ia, rel_ib, rel_Zr, rel_Zt, rel_S,
        abs_idx, abs_Zr, abs_Zt, abs_S, kf_pos,
    )
    g.check_connected()
    return g


def _evaluate(g: PoseGraph, R: np.ndarray, t: np.ndarray, with_jacobians: bool):
    """Whitened residuals (and Jacobian blocks) for all edges."""
    out = {}
    ia, ib = g.rel_ia, g.rel_ib
    if len(ia):
        Ri, Rj = R[ia], R[ib]
        RiT_Rj = np.einsum("eji,ejk->eik", Ri, Rj)
        ER = np.einsum("eji,ejk->eik", g.rel_Zr, RiT_Rj)
        r_R = log_so3_batch(ER)
        dt = t[ib] - t[ia]
        Ri_dt = np.einsum("eji,ej->ei", Ri, dt)
        E_t = np.einsum("eji,ej->ei", g.rel_Zr, Ri_dt - g.rel_Zt)
        r6 = np.concatenate([r_R, E_t], axis=1)
        rw = np.einsum("eij,ej->ei", g.rel_sqrt_info, r6)
        out["rel_rw"] = rw
        if with_jacobians:
            Jri = right_jacobian_inv_batch(r_R)
            A = np.einsum("eij,ekj->eik", Jri, Rj)  # Jr^-1 Rj^T
            P = np.einsum("eij,ejk->eik", Ri, g.rel_Zr)  # Ri Zr; P^T = Zr^T Ri^T
            PT = np.transpose(P, (0, 2, 1))
            B = np.einsum("eij,ejk->eik", PT, skew_batch(dt))
            Ji = np.zeros((len(ia), 6, 6))
            Jj = np.zeros((len(ia), 6, 6))
            Ji[:, 0:3, 0:3] = -A
            Ji[:, 3:6, 0:3] = B
            Ji[:, 3:6, 3:6] = -PT
            Jj[:, 0:3, 0:3] = A
            Jj[:, 3:6, 3:6] = PT
            out["rel_Ji"] = np.einsum("eij,ejk->eik", g.rel_sqrt_info, Ji)
            out["rel_Jj"] = np.einsum("eij,ejk->eik", g.rel_sqrt_info, Jj)
    else:
        out["rel_rw"] = np.zeros((0, 6))

    k = g.abs_idx
    if len(k):
        Rk = R[k]
        ER = np.einsum("eji,ejk->eik", g.abs_Zr, Rk)
        r_R = log_so3_batch(ER)
        E_t = np.einsum("eji,ej->ei", g.abs_Zr, t[k] - g.abs_Zt)
        r6 = np.concatenate([r_R, E_t], axis=1)
        out["abs_rw"] = np.einsum("eij,ej->ei", g.abs_sqrt_info, r6)
        if with_jacobians:
            Jri = right_jacobian_inv_batch(r_R)
            A = np.einsum("eij,ekj->eik", Jri, Rk)
            ZrT = np.transpose(g.abs_Zr, (0, 2, 1))
            J = np.zeros((len(k), 6, 6))
            J[:, 0:3, 0:3] = A
            J[:, 3:6, 3:6] = ZrT
            out["abs_J"] = np.einsum("eij,ejk->eik", g.abs_sqrt_info, J)
    else:
        out["abs_rw"] = np.zeros((0, 6))
    return out


def _objective(g: PoseGraph, R, t) -> float:
    ev = _evaluate(g, R, t, with_jacobians=False)
    return float(np.sum(ev["rel_rw"] ** 2) + np.sum(ev["abs_rw"] ** 2))


def _normal_equations(g: PoseGraph, R, t):
    n = g.num_nodes
    ev = _evaluate(g, R, t, with_jacobians=True)
    cost = float(np.sum(ev["rel_rw"] ** 2) + np.sum(ev["abs_rw"] ** 2))
    grad = np.zeros((n, 6))
    diag = np.zeros((n, 6, 6))
    rows, cols, vals = [], [], []
    b6 = np.arange(6)
    rr, cc = np.meshgrid(b6, b6, indexing="ij")

    if len(g.rel_ia):
        Ji, Jj, rw = ev["rel_Ji"], ev["rel_Jj"], ev["rel_rw"]
        np.add.at(grad, g.rel_ia, np.einsum("eij,ei->ej", Ji, rw))
        np.add.at(grad, g.rel_ib, np.einsum("eij,ei->ej", Jj, rw))
        np.add.at(diag, g.rel_ia, np.einsum("eij,eik->ejk", Ji, Ji))
        np.add.at(diag, g.rel_ib, np.einsum("eij,eik->ejk", Jj, Jj))
        cross = np.einsum("eij,eik->ejk", Ji, Jj)
        for e in range(len(g.rel_ia)):
            a, b = g.rel_ia[e], g.rel_ib[e]
            rows.append((a * 6 + rr).ravel())
            cols.append((b * 6 + cc).ravel())
            vals.append(cross[e].ravel())
            rows.append((b * 6 + rr).ravel())
            cols.append((a * 6 + cc).ravel())
            vals.append(cross[e].T.ravel())

    if len(g.abs_idx):
        J, rw = ev["abs_J"], ev["abs_rw"]
        np.add.at(grad, g.abs_idx, np.einsum("eij,ei->ej", J, rw))
        np.add.at(diag, g.abs_idx, np.einsum("eij,eik->ejk", J, J))

    for i in range(n):
        rows.append((i * 6 + rr).ravel())
        cols.append((i * 6 + cc).ravel())
        vals.append(diag[i].ravel())

    H = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(6 * n, 6 * n),
    ).tocsc()
    return cost, H, grad.ravel()


def _solve_damped(H, rhs, damping):
    d = np.asarray(H.diagonal()).ravel()
    floor = max(float(d.max(initial=0.0)) * 1e-12, 1e-12)
    d = np.maximum(d, floor)
    if H.shape[0] <= _DENSE_THRESHOLD:
        return np.linalg.solve(H.toarray() + damping * np.diag(d), -rhs)
    lu = scipy.sparse.linalg.splu((H + damping * scipy.sparse.diags(d)).tocsc())
    x = lu.solve(-rhs)
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("non-finite pose-graph step")
    return x


def solve_pose_graph(
    g: PoseGraph,
    max_iters: int = 50,
    rel_decrease_tol: float = 1e-9,
) -> tuple[list[Pose], list[float]]:
    """LM minimization of all edge residuals; returns (poses, objective trace)."""
    g.check_connected()
    R = np.stack([p.rotation.matrix() for p in g.initial])
    t = np.stack([p.translation for p in g.initial])

    cost, H, rhs = _normal_equations(g, R, t)
    objectives = [cost]
    damping = 1e-6

    for _ in range(max_iters):
        if float(np.linalg.norm(rhs, ord=np.inf)) < 1e-14:
            break
        delta = None
        for attempt in range(6):
            try:
                delta = _solve_damped(H, rhs, damping)
                break
            except (np.linalg.LinAlgError, RuntimeError):
                if attempt == 5:
                    raise SolverError("pose-graph factorization failed after damping retries")
                damping *= 10.0
        d = delta.reshape(-1, 6)
        R_new = np.einsum("nij,njk->nik", exp_so3_batch(d[:, :3]), R)
        t_new = t + d[:, 3:]
        new_cost = _objective(g, R_new, t_new)
        if new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            R, t = R_new, t_new
            objectives.append(new_cost)
            cost = new_cost
            damping = max(damping * 0.5, 1e-15)
            cost, H, rhs = _normal_equations(g, R, t)
            if rel < rel_decrease_tol or float(np.linalg.norm(d)) < 1e-12:
                break
        else:
            damping *= 10.0
            if float(np.linalg.norm(d)) < 1e-14:
                break

    poses = [Pose(Rotation.from_matrix(R[i]), t[i]) for i in range(g.num_nodes)]
    return poses, objectives
