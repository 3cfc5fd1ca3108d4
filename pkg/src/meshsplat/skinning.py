"""Linear blend skinning of Gaussian means and covariances.

Consumes realized per-bone rigid transforms; forward kinematics lives in
the synthetic scene generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binding import retract


@dataclass
class Pose:
    """Per-bone rigid transforms mapping canonical bones to observation."""

    rotations: np.ndarray     # (B, 3, 3)
    translations: np.ndarray  # (B, 3)

    @property
    def n_bones(self):
        return len(self.rotations)

    @classmethod
    def identity(cls, n_bones):
        return cls(np.tile(np.eye(3), (n_bones, 1, 1)), np.zeros((n_bones, 3)))

    def validate(self, tol=1e-9):
        for b, R in enumerate(self.rotations):
            if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1) > tol:
                raise ValueError(f"bone {b} rotation is not in SO(3)")


def gaussian_blend_weights(binding, mesh):
    """Per-Gaussian convex blend weights from the bound triangle.

    Barycentric interpolation of the three vertex weight vectors; the
    cached barycentrics are retracted onto the simplex first.
    """
    if mesh.skin_weights is None:
        raise ValueError("mesh has no skin weights")
    bary = retract(binding.bary)
    vw = mesh.skin_weights[mesh.faces[binding.face]]  # (n, 3, B)
    return np.einsum("ni,nib->nb", bary, vw)


def blend(weights, pose: Pose):
    """Blend bone transforms: A = sum w_b R_b, b = sum w_b t_b.

    weights: (B,) or (n, B). Returns (A, b) matching the batch shape.
    """
    w = np.asarray(weights, dtype=np.float64)
    single = w.ndim == 1
    if single:
        w = w[None]
    A = np.einsum("nb,bij->nij", w, pose.rotations)
    t = np.einsum("nb,bj->nj", w, pose.translations)
    return (A[0], t[0]) if single else (A, t)


def warp_gaussians(centers, covs, A, b):
    """x_o = A x + b, Sigma_o = A Sigma A^T, batched."""
    x_o = np.einsum("nij,nj->ni", A, centers) + b
    cov_o = np.einsum("nij,njk,nlk->nil", A, covs, A)
    return x_o, cov_o


def warp_backward(centers, covs, A, d_x_o, d_cov_o):
    """Adjoint of warp_gaussians.

    Returns gradients w.r.t. canonical centers, covariances, A and b.
    """
    d_center = np.einsum("nji,nj->ni", A, d_x_o)
    d_A = np.einsum("ni,nj->nij", d_x_o, centers)
    d_b = d_x_o.copy()
    G = d_cov_o
    d_cov = np.einsum("nji,njk,nkl->nil", A, G, A)
    d_A += np.einsum("nij,njk,nkl->nil", G + np.swapaxes(G, 1, 2), A, covs)
    return d_center, d_cov, d_A, d_b


def blend_backward(weights, pose: Pose, d_A, d_b):
    """Adjoint of blend: gradients w.r.t. weights and bone transforms."""
    d_w = np.einsum("nij,bij->nb", d_A, pose.rotations) \
        + np.einsum("nj,bj->nb", d_b, pose.translations)
    d_R = np.einsum("nb,nij->bij", weights, d_A)
    d_t = np.einsum("nb,nj->bj", weights, d_b)
    return d_w, d_R, d_t


# ---------------------------------------------------------------------- #
# pose sequence file format


def save_pose_sequence(path, poses):
    """ASCII blocks: per frame, B lines of 12 floats (row-major R | t)."""
    with open(path, "w") as fh:
        for i, pose in enumerate(poses):
            if i:
                fh.write("\n")
            for R, t in zip(pose.rotations, pose.translations):
                vals = np.concatenate([R.reshape(-1), t])
                fh.write(" ".join(f"{x:.17g}" for x in vals) + "\n")


def load_pose_sequence(path, n_bones):
    poses = []
    block = []
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    for ln in lines + [""]:
        if ln:
            vals = [float(x) for x in ln.split()]
            if len(vals) != 12:
                raise ValueError(f"{path}: pose line needs 12 floats")
            block.append(vals)
        elif block:
            if len(block) != n_bones:
                raise ValueError(
                    f"{path}: pose block has {len(block)} bones, expected {n_bones}")
            arr = np.array(block)
            poses.append(Pose(
                rotations=arr[:, :9].reshape(-1, 3, 3).copy(),
                translations=arr[:, 9:].copy(),
            ))
            block = []
    return poses
