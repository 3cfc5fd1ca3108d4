"""Training losses with analytic gradients: appearance (L1 + mask +
structural term), Gaussian-mesh alignment, smoothness aggregate and the
total objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .binding import closest_point_on_triangles
from .gaussians import face_frames, face_frames_backward
from .renderer import render, render_backward
from .rotation import (
    quat_backward_through_normalization,
    quat_to_rotmat_backward,
)


@dataclass
class LossWeights:
    mask: float = 0.1
    ssim: float = 0.2
    pa: float = 1.0
    na: float = 0.05
    lap: float = 10.0
    normal: float = 0.1

    def __post_init__(self):
        for f in ("mask", "ssim", "pa", "na", "lap", "normal"):
            v = getattr(self, f)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f} must be finite and >= 0")


# ---------------------------------------------------------------------- #
# SSIM (differentiable, 11x11 Gaussian window, valid region)

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_WIN = 11
_HALF = _WIN // 2


def _ssim_kernel():
    x = np.arange(_WIN) - _HALF
    k = np.exp(-(x ** 2) / (2 * 1.5 ** 2))
    return k / k.sum()


_K = _ssim_kernel()


def _filt(img):
    """Separable window filter, valid region only. img: (H, W[, C])."""
    out = convolve1d(img, _K, axis=0, mode="constant")
    out = convolve1d(out, _K, axis=1, mode="constant")
    return out[_HALF:-_HALF, _HALF:-_HALF]


def _filt_adjoint(g, shape):
    """Adjoint of _filt: zero-pad the valid-region cotangent and refilter."""
    pad = np.zeros(shape)
    pad[_HALF:-_HALF, _HALF:-_HALF] = g
    out = convolve1d(pad, _K, axis=0, mode="constant")
    return convolve1d(out, _K, axis=1, mode="constant")


def ssim(x, y, with_grad=False):
    """Mean SSIM over the valid window region (and gradient w.r.t. x).

    Accepts (H, W) or (H, W, C) images in [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a = _filt(x)
    b = _filt(y)
    cxx = _filt(x * x)
    cyy = _filt(y * y)
    cxy = _filt(x * y)
    sx = cxx - a * a
    sy = cyy - b * b
    sxy = cxy - a * b
    u1 = 2 * a * b + _SSIM_C1
    u2 = 2 * sxy + _SSIM_C2
    v1 = a * a + b * b + _SSIM_C1
    v2 = sx + sy + _SSIM_C2
    S = (u1 * u2) / (v1 * v2)
    mean = float(S.mean())
    if not with_grad:
        return mean

    N = S.size
    dS = np.full_like(S, 1.0 / N)
    dd = dS / (v1 * v2)
    da = dd * (2 * b * u2 - 2 * b * u1) - dS * S * (2 * a / v1 - 2 * a / v2)
    dcxx = -dS * S / v2
    dcxy = dd * 2 * u1
    gx = _filt_adjoint(da, x.shape) \
        + 2 * x * _filt_adjoint(dcxx, x.shape) \
        + y * _filt_adjoint(dcxy, x.shape)
    return mean, gx


# ---------------------------------------------------------------------- #
# appearance


def appearance_loss(fb, target_rgb, target_mask, w: LossWeights):
    """L1(rgb) + w.mask * L1(alpha, mask) + w.ssim * (1 - SSIM).

    Returns (loss, grad_rgb, grad_alpha).
    """
    rgb = fb.rgb
    if rgb.shape != target_rgb.shape or fb.alpha.shape != target_mask.shape:
        raise ValueError("rendered/target shape mismatch")
    diff = rgb - target_rgb
    l1 = float(np.abs(diff).mean())
    g_rgb = np.sign(diff) / diff.size

    mdiff = fb.alpha - target_mask
    l_mask = float(np.abs(mdiff).mean())
    g_alpha = w.mask * np.sign(mdiff) / mdiff.size

    loss = l1 + w.mask * l_mask
    if w.ssim > 0:
        s, gs = ssim(rgb, target_rgb, with_grad=True)
        loss += w.ssim * (1.0 - s)
        g_rgb = g_rgb - w.ssim * gs
    return loss, g_rgb, g_alpha


# ---------------------------------------------------------------------- #
# Gaussian-mesh alignment


def position_alignment_loss(centers, mesh, bindings):
    """Mean squared point-to-closed-triangle distance to the bound faces.

    Returns (loss, grad_centers, grad_vertices). Gradients flow through the
    region-selected closest point to both ends.
    """
    centers = np.asarray(centers, dtype=np.float64)
    n = len(centers)
    if n == 0:
        return 0.0, np.zeros((0, 3)), np.zeros_like(mesh.vertices)
    tri = mesh.vertices[mesh.faces[bindings.face]]
    d, closest, bary = closest_point_on_triangles(centers, tri)
    loss = float(np.mean(d ** 2))
    resid = centers - closest
    g_c = 2.0 * resid / n
    g_v = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(g_v, mesh.faces[bindings.face, k],
                  -bary[:, k:k + 1] * g_c)
    return loss, g_c, g_v


def orientation_alignment_loss(g, mesh, gcache):
    """Mean (1 - |cos|) between Gaussian normals and bound-face normals.

    g is a DetachedGaussians batch with current bindings; gcache is the
    detached_forward cache. Returns (loss, grad_quat, grad_vertices).
    """
    n = g.n
    if n == 0:
        return 0.0, np.zeros((0, 4)), np.zeros_like(mesh.vertices)
    fr = face_frames(mesh)
    nf = fr["n"][g.binding.face]
    j = np.argmin(gcache["scales"], axis=1)
    nG = np.take_along_axis(
        gcache["R"], j[:, None, None].repeat(3, axis=1), axis=2)[:, :, 0]
    cosv = np.einsum("ni,ni->n", nG, nf)
    loss = float(np.mean(1.0 - np.abs(cosv)))

    dcos = -np.sign(cosv) / n
    d_nG = dcos[:, None] * nf
    d_nf = dcos[:, None] * nG

    dR = np.zeros((n, 3, 3))
    np.put_along_axis(dR, j[:, None, None].repeat(3, axis=1),
                      d_nG[:, :, None], axis=2)
    dq_unit = quat_to_rotmat_backward(gcache["q_unit"], dR)
    d_quat = quat_backward_through_normalization(
        gcache["q_unit"], gcache["q_norm"], dq_unit)

    F = len(mesh.faces)
    dn = np.zeros((F, 3))
    np.add.at(dn, g.binding.face, d_nf)
    g_v = face_frames_backward(mesh, fr, dn, np.zeros((F, 3)),
                               np.zeros((F, 3)))
    return loss, d_quat, g_v


# ---------------------------------------------------------------------- #
# total objective


def total_loss(gaussians, mesh, frame, w: LossWeights, stage,
               background=(0.0, 0.0, 0.0)):
    """Render a frame and assemble the stage objective with all gradients.

    frame: dict with 'rgb', 'mask', 'camera', 'pose'.
    stage: 'adhered' (appearance + smoothness) or 'detached' (all terms).
    Returns (components dict incl. 'total', grads dict, framebuffer).
    """
    fb, rcache = render(gaussians, mesh, frame["pose"], frame["camera"],
                        background)
    app, g_rgb, g_alpha = appearance_loss(fb, frame["rgb"], frame["mask"], w)
    grads = render_backward(rcache, g_rgb, g_alpha)

    lap, g_lap = mesh.laplacian_loss()
    nsm, g_nsm = mesh.normal_smoothness_loss()
    smooth = w.lap * lap + w.normal * nsm
    if "vertices" not in grads:
        grads["vertices"] = np.zeros_like(mesh.vertices)
    grads["vertices"] += w.lap * g_lap + w.normal * g_nsm

    comps = {"app": app, "lap": lap, "normal": nsm}
    total = app + smooth

    if stage == "detached":
        pa, g_pc, g_pv = position_alignment_loss(
            gaussians.center, mesh, gaussians.binding)
        gcache = rcache["gcache"] if not rcache["empty"] else None
        if gcache is None:
            from .gaussians import detached_forward
            gcache = detached_forward(gaussians)
        na, g_q, g_nv = orientation_alignment_loss(gaussians, mesh, gcache)
        comps.update({"pa": pa, "na": na})
        total += w.pa * pa + w.na * na
        grads["center"] = grads.get("center", 0) + w.pa * g_pc
        grads["quat"] = grads.get("quat", 0) + w.na * g_q
        grads["vertices"] += w.pa * g_pv + w.na * g_nv
    elif stage != "adhered":
        raise ValueError(f"unknown stage {stage!r}")

    comps["total"] = total
    return comps, grads, fb
