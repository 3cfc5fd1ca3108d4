"""Adhered and detached Gaussian parameterizations with analytic adjoints.

Adhered Gaussians live on the mesh: center from barycentrics, normal locked
to the bound face, one in-plane rotation angle and two tangential scales.
Detached Gaussians carry free center/scales/quaternion plus a cached
binding refreshed by the walking tracker.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binding import Bindings
from .rotation import (
    normalize_quats,
    quat_backward_through_normalization,
    quat_to_rotmat,
    quat_to_rotmat_backward,
    rotmat_to_quat,
)

FLAT_EPS = 1e-4          # fixed minimal scale of an adhered (surfel) Gaussian
ADHERED_SCALE_MIN = 10 * FLAT_EPS
DETACHED_SCALE_MIN = 1e-6
SCALE_MAX = 1.0


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return np.log(p / (1 - p))


@dataclass
class AdheredGaussians:
    """Stage-1 Gaussians, structure-of-arrays."""

    face: np.ndarray          # (n,) int64 bound face
    bary: np.ndarray          # (n, 3) barycentric center coordinates
    log_s: np.ndarray         # (n, 2) log tangential scales
    beta: np.ndarray          # (n,) in-plane angle, radians
    opacity_logit: np.ndarray  # (n,)
    color_logit: np.ndarray   # (n, 3)

    @property
    def n(self):
        return len(self.face)

    def bindings(self):
        return Bindings(
            face=self.face.copy(), bary=self.bary.copy(),
            signed_height=np.zeros(self.n),
        )

    def copy(self):
        return AdheredGaussians(*(getattr(self, f).copy() for f in (
            "face", "bary", "log_s", "beta", "opacity_logit", "color_logit")))


@dataclass
class DetachedGaussians:
    """Stage-2 Gaussians with free parameters and cached bindings."""

    center: np.ndarray        # (n, 3)
    log_s: np.ndarray         # (n, 3)
    quat: np.ndarray          # (n, 4) (w, x, y, z); renormalized each step
    opacity_logit: np.ndarray
    color_logit: np.ndarray
    binding: Bindings = field(default=None)

    @property
    def n(self):
        return len(self.center)

    def copy(self):
        g = DetachedGaussians(
            self.center.copy(), self.log_s.copy(), self.quat.copy(),
            self.opacity_logit.copy(), self.color_logit.copy(),
        )
        g.binding = self.binding.copy() if self.binding is not None else None
        return g


def covariance(scales, rotation):
    """Sigma = R diag(s)^2 R^T for a batch (n,3)/(n,3,3) or a single pair."""
    s = np.asarray(scales, dtype=np.float64)
    R = np.asarray(rotation, dtype=np.float64)
    single = R.ndim == 2
    if single:
        s, R = s[None], R[None]
    D = s[:, None, :] ** 2 * np.eye(3)
    out = np.einsum("nij,njk,nlk->nil", R, D, R)
    return out[0] if single else out


# ---------------------------------------------------------------------- #
# per-face tangent frames


def face_frames(mesh):
    """Deterministic orthonormal frame (n, t1, t2) per face with caches.

    t1 is the Gram-Schmidt of the first edge against the normal; t2 closes
    a right-handed triad. Returns a dict of (F, 3) arrays plus the
    intermediates needed by face_frames_backward.
    """
    v = mesh.vertices
    f = mesh.faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    n_raw = np.cross(e1, e2)
    n_norm = np.linalg.norm(n_raw, axis=1)
    n = n_raw / n_norm[:, None]
    t1_raw = e1 - np.einsum("ij,ij->i", e1, n)[:, None] * n
    t1_norm = np.linalg.norm(t1_raw, axis=1)
    t1 = t1_raw / t1_norm[:, None]
    t2 = np.cross(n, t1)
    return dict(e1=e1, e2=e2, n_raw_norm=n_norm, n=n,
                t1_raw_norm=t1_norm, t1=t1, t2=t2)


def face_frames_backward(mesh, fr, dn, dt1, dt2):
    """Adjoint of face_frames: accumulate (F,3) cotangents into vertex grads."""
    n, t1, t2 = fr["n"], fr["t1"], fr["t2"]
    e1, e2 = fr["e1"], fr["e2"]

    dn = dn.copy()
    dt1 = dt1.copy()
    # t2 = n x t1
    dn += np.cross(t1, dt2)
    dt1 += np.cross(dt2, n)
    # t1 = t1_raw / |t1_raw|
    dt1_raw = (dt1 - t1 * np.einsum("ij,ij->i", t1, dt1)[:, None]) \
        / fr["t1_raw_norm"][:, None]
    # t1_raw = e1 - (e1.n) n
    de1 = dt1_raw - n * np.einsum("ij,ij->i", n, dt1_raw)[:, None]
    dn += -np.einsum("ij,ij->i", n, dt1_raw)[:, None] * e1 \
        - np.einsum("ij,ij->i", e1, n)[:, None] * dt1_raw
    # n = n_raw / |n_raw|
    dn_raw = (dn - n * np.einsum("ij,ij->i", n, dn)[:, None]) \
        / fr["n_raw_norm"][:, None]
    # n_raw = e1 x e2
    de1 += np.cross(e2, dn_raw)
    de2 = np.cross(dn_raw, e1)

    grad_v = np.zeros_like(mesh.vertices)
    f = mesh.faces
    np.add.at(grad_v, f[:, 0], -(de1 + de2))
    np.add.at(grad_v, f[:, 1], de1)
    np.add.at(grad_v, f[:, 2], de2)
    return grad_v


# ---------------------------------------------------------------------- #
# adhered forward / backward


def adhered_forward(g: AdheredGaussians, mesh):
    """Reconstruct world-space Gaussian parameters from the adhered form."""
    fr = face_frames(mesh)
    tri = mesh.vertices[mesh.faces[g.face]]           # (n, 3, 3)
    centers = np.einsum("ni,nij->nj", g.bary, tri)

    s12 = np.exp(g.log_s)
    clamped = (s12 < ADHERED_SCALE_MIN) | (s12 > SCALE_MAX)
    s12 = np.clip(s12, ADHERED_SCALE_MIN, SCALE_MAX)
    scales = np.concatenate([np.full((g.n, 1), FLAT_EPS), s12], axis=1)

    nf = fr["n"][g.face]
    t1 = fr["t1"][g.face]
    t2 = fr["t2"][g.face]
    c, s = np.cos(g.beta)[:, None], np.sin(g.beta)[:, None]
    col1 = c * t1 + s * t2
    col2 = -s * t1 + c * t2
    R = np.stack([nf, col1, col2], axis=2)

    cov = covariance(scales, R)
    opacity = sigmoid(g.opacity_logit)
    color = sigmoid(g.color_logit)
    return dict(frames=fr, centers=centers, scales=scales, R=R, cov=cov,
                opacity=opacity, color=color, scale_clamped=clamped,
                nf=nf, t1=t1, t2=t2, cos=c, sin=s)


def _cov_backward(d_cov, R, scales):
    """Adjoint of Sigma = R diag(s)^2 R^T. Returns (dR, ds)."""
    G = d_cov
    D = scales[:, None, :] ** 2 * np.eye(3)
    dR = np.einsum("nij,njk,nkl->nil", G + np.swapaxes(G, 1, 2), R, D)
    RtGR = np.einsum("nji,njk,nkl->nil", R, G, R)
    ds = 2.0 * scales * np.einsum("nii->ni", RtGR)
    return dR, ds


def adhered_backward(g: AdheredGaussians, mesh, cache, d_center, d_cov,
                     d_opacity, d_color):
    """Adjoint of adhered_forward.

    Returns a dict with gradients for bary, vertices, log_s, beta,
    opacity_logit, color_logit.
    """
    tri = mesh.vertices[mesh.faces[g.face]]
    # center = bary . tri
    d_bary = np.einsum("nj,nij->ni", d_center, tri)
    grad_v = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(grad_v, mesh.faces[g.face, k],
                  g.bary[:, k:k + 1] * d_center)

    dR, ds = _cov_backward(d_cov, cache["R"], cache["scales"])
    d_log_s = ds[:, 1:] * cache["scales"][:, 1:]
    d_log_s[cache["scale_clamped"]] = 0.0

    # R columns -> (beta, frame vectors)
    t1, t2 = cache["t1"], cache["t2"]
    c, s = cache["cos"], cache["sin"]
    dcol0, dcol1, dcol2 = dR[:, :, 0], dR[:, :, 1], dR[:, :, 2]
    col1 = c * t1 + s * t2
    col2 = -s * t1 + c * t2
    d_beta = np.einsum("ni,ni->n", dcol1, col2) \
        - np.einsum("ni,ni->n", dcol2, col1)
    dt1_g = c * dcol1 - s * dcol2
    dt2_g = s * dcol1 + c * dcol2
    dn_g = dcol0

    F = len(mesh.faces)
    dn = np.zeros((F, 3))
    dt1 = np.zeros((F, 3))
    dt2 = np.zeros((F, 3))
    np.add.at(dn, g.face, dn_g)
    np.add.at(dt1, g.face, dt1_g)
    np.add.at(dt2, g.face, dt2_g)
    grad_v += face_frames_backward(mesh, cache["frames"], dn, dt1, dt2)

    op = cache["opacity"]
    col = cache["color"]
    return dict(
        bary=d_bary,
        vertices=grad_v,
        log_s=d_log_s,
        beta=d_beta,
        opacity_logit=d_opacity * op * (1 - op),
        color_logit=d_color * col * (1 - col),
    )


# ---------------------------------------------------------------------- #
# detached forward / backward


def detached_forward(g: DetachedGaussians):
    q_unit, q_norm = normalize_quats(g.quat)
    R = quat_to_rotmat(q_unit)
    s = np.exp(g.log_s)
    clamped = (s < DETACHED_SCALE_MIN) | (s > SCALE_MAX)
    s = np.clip(s, DETACHED_SCALE_MIN, SCALE_MAX)
    cov = covariance(s, R)
    return dict(centers=g.center.copy(), scales=s, R=R, cov=cov,
                q_unit=q_unit, q_norm=q_norm, scale_clamped=clamped,
                opacity=sigmoid(g.opacity_logit), color=sigmoid(g.color_logit))


def detached_backward(g: DetachedGaussians, cache, d_center, d_cov,
                      d_opacity, d_color, d_R_extra=None):
    """Adjoint of detached_forward; d_R_extra lets losses inject rotation
    cotangents (e.g. through the Gaussian normal)."""
    dR, ds = _cov_backward(d_cov, cache["R"], cache["scales"])
    if d_R_extra is not None:
        dR = dR + d_R_extra
    d_log_s = ds * cache["scales"]
    d_log_s[cache["scale_clamped"]] = 0.0

    dq_unit = quat_to_rotmat_backward(cache["q_unit"], dR)
    d_quat = quat_backward_through_normalization(
        cache["q_unit"], cache["q_norm"], dq_unit)

    op = cache["opacity"]
    col = cache["color"]
    return dict(
        center=d_center.copy(),
        log_s=d_log_s,
        quat=d_quat,
        opacity_logit=d_opacity * op * (1 - op),
        color_logit=d_color * col * (1 - col),
    )


# ---------------------------------------------------------------------- #
# conversion and normals


def detach(g: AdheredGaussians, mesh) -> DetachedGaussians:
    """Convert adhered Gaussians to the detached parameterization.

    The rendered image is preserved: centers, covariances, opacity and
    color all carry over exactly.
    """
    cache = adhered_forward(g, mesh)
    log_s = np.log(cache["scales"])
    quat = rotmat_to_quat(cache["R"])
    det = DetachedGaussians(
        center=cache["centers"].copy(),
        log_s=log_s,
        quat=quat,
        opacity_logit=g.opacity_logit.copy(),
        color_logit=g.color_logit.copy(),
    )
    det.binding = Bindings(
        face=g.face.copy(), bary=g.bary.copy(), signed_height=np.zeros(g.n),
    )
    return det


def gaussian_normal(g: DetachedGaussians, cache=None):
    """Unit normal of each Gaussian: rotation column of the smallest scale.

    Ties break to the lowest axis index (np.argmin convention).
    """
    if cache is None:
        cache = detached_forward(g)
    j = np.argmin(cache["scales"], axis=1)
    return np.take_along_axis(
        cache["R"], j[:, None, None].repeat(3, axis=1), axis=2
    )[:, :, 0], j
