"""Vectorized numpy implementation of the hot per-correspondence kernel.

Used as the fallback when the compiled extension is unavailable and as the
reference the extension is checked against.
"""

import numpy as np


def _forward_substitute(L, b):
    """Solve L x = b for batched lower-triangular L (N,3,3), b (N,3,k)."""
    x0 = b[:, 0] / L[:, 0, 0, None]
    x1 = (b[:, 1] - L[:, 1, 0, None] * x0) / L[:, 1, 1, None]
    x2 = (b[:, 2] - L[:, 2, 0, None] * x0 - L[:, 2, 1, None] * x1) / L[:, 2, 2, None]
    return np.stack([x0, x1, x2], axis=1)


def geometric_blocks(
    body_j,
    body_k,
    var_j,
    var_k,
    idx_j,
    idx_k,
    R,
    t,
    R_cov,
    with_jacobians=True,
    huber_delta=0.0,
):
    """Whitened residuals and Jacobians for point-pair constraints.

    Each row pairs a point from state idx_j with one from state idx_k that
    share a voxel. Points are pre-mapped to the body frame; var_* hold the
    diagonal point variances in the covariance reference frame, which R_cov
    (per state) rotates into the world frame. Whitening uses the inverse
    Cholesky factor of the summed world covariances, so the squared norm of
    the whitened residual is the Mahalanobis cost of the pair.

    Returns (cost, r_w (N,3), J_j (N,3,6) or None, J_k or None). Jacobian
    columns are [rotation, translation] tangent blocks of each state, with
    the rotation applied by left composition.
    """
    body_j = np.asarray(body_j, dtype=np.float64)
    body_k = np.asarray(body_k, dtype=np.float64)
    var_j = np.asarray(var_j, dtype=np.float64)
    var_k = np.asarray(var_k, dtype=np.float64)
    idx_j = np.asarray(idx_j, dtype=np.int64)
    idx_k = np.asarray(idx_k, dtype=np.int64)

    n = body_j.shape[0]
    if n == 0:
        e = np.zeros((0, 3))
        ej = np.zeros((0, 3, 6)) if with_jacobians else None
        return 0.0, e, ej, (ej.copy() if with_jacobians else None)

    Rj = R[idx_j]
    Rk = R[idx_k]
    rot_j = np.einsum("nij,nj->ni", Rj, body_j)
    rot_k = np.einsum("nij,nj->ni", Rk, body_k)
    pw_j = rot_j + t[idx_j]
    pw_k = rot_k + t[idx_k]
    r = pw_j - pw_k

    Cj = R_cov[idx_j]
    Ck = R_cov[idx_k]
    # world covariance sum: Cj diag(vj) Cj^T + Ck diag(vk) Ck^T
    S = np.einsum("nij,nj,nkj->nik", Cj, var_j, Cj) + np.einsum("nij,nj,nkj->nik", Ck, var_k, Ck)
    L = np.linalg.cholesky(S)

    r_w = _forward_substitute(L, r[:, :, None])[:, :, 0]

    if with_jacobians:
        # d r / d tangent_j = [-skew(R_j a_j) | I], d r / d tangent_k = [skew(R_k a_k) | -I]
        J = np.zeros((n, 3, 12))
        J[:, 0, 1] = rot_j[:, 2]
        J[:, 0, 2] = -rot_j[:, 1]
        J[:, 1, 0] = -rot_j[:, 2]
        J[:, 1, 2] = rot_j[:, 0]
        J[:, 2, 0] = rot_j[:, 1]
        J[:, 2, 1] = -rot_j[:, 0]
        J[:, 0, 3] = 1.0
        J[:, 1, 4] = 1.0
        J[:, 2, 5] = 1.0
        J[:, 0, 7] = -rot_k[:, 2]
        J[:, 0, 8] = rot_k[:, 1]
        J[:, 1, 6] = rot_k[:, 2]
        J[:, 1, 8] = -rot_k[:, 0]
        J[:, 2, 6] = -rot_k[:, 1]
        J[:, 2, 7] = rot_k[:, 0]
        J[:, 0, 9] = -1.0
        J[:, 1, 10] = -1.0
        J[:, 2, 11] = -1.0
        J_w = _forward_substitute(L, J)
        Jj = np.ascontiguousarray(J_w[:, :, :6])
        Jk = np.ascontiguousarray(J_w[:, :, 6:])
    else:
        Jj = Jk = None

    sq = np.einsum("ni,ni->n", r_w, r_w)
    if huber_delta > 0.0:
        s = np.sqrt(sq)
        outlier = s > huber_delta
        cost = float(np.sum(np.where(outlier, 2.0 * huber_delta * s - huber_delta**2, sq)))
        w = np.where(outlier, np.sqrt(huber_delta / np.maximum(s, 1e-300)), 1.0)
        r_w = r_w * w[:, None]
        if with_jacobians:
            Jj = Jj * w[:, None, None]
            Jk = Jk * w[:, None, None]
    else:
        cost = float(np.sum(sq))

    return cost, r_w, Jj, Jk
