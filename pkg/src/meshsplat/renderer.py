"""Differentiable CPU splat renderer: perspective projection, tile-based
depth-sorted alpha compositing, and the analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .binding import retract
from .gaussians import (
    AdheredGaussians,
    DetachedGaussians,
    adhered_backward,
    adhered_forward,
    detached_backward,
    detached_forward,
)
from .skinning import (
    Pose,
    blend,
    blend_backward,
    warp_backward,
    warp_gaussians,
)

NEAR_PLANE = 0.01
DILATION = 0.3  # px^2 floor added to the 2D covariance diagonal
ALPHA_VALID = 1e-4


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # (3,3) world-to-camera rotation
    t: np.ndarray  # (3,) world-to-camera translation

    def __post_init__(self):
        assert self.fx > 0 and self.fy > 0
        assert self.width >= 1 and self.height >= 1
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fx=128.0, fy=None,
                width=128, height=128):
        """Camera at eye with +z optical axis through target."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx=fx, fy=fy if fy is not None else fx,
                   cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height, R=R, t=-R @ eye)


@dataclass
class FrameBuffer:
    rgb: np.ndarray    # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), alpha-normalized expected z; 0 where empty


# ---------------------------------------------------------------------- #
# projection


def project(means, covs, cam: Camera):
    """Project 3D Gaussians to 2D splats; returns a cache for backward.

    Gaussians behind the near plane are culled (valid mask False).
    """
    means = np.asarray(means, dtype=np.float64)
    t = means @ cam.R.T + cam.t
    valid = t[:, 2] > NEAR_PLANE
    tz = np.where(valid, t[:, 2], 1.0)
    mean2d = np.stack([
        cam.fx * t[:, 0] / tz + cam.cx,
        cam.fy * t[:, 1] / tz + cam.cy,
    ], axis=1)

    n = len(means)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * t[:, 0] / tz ** 2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * t[:, 1] / tz ** 2
    M = J @ cam.R
    cov2d = np.einsum("nij,njk,nlk->nil", M, covs, M)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    return dict(cam=cam, t=t, valid=valid, mean2d=mean2d, cov2d=cov2d,
                depth=t[:, 2].copy(), J=J, M=M, covs=covs)


def project_backward(cache, d_mean2d, d_cov2d, d_depth=None):
    """Adjoint of project: gradients w.r.t. 3D means and covariances."""
    cam = cache["cam"]
    t = cache["t"]
    valid = cache["valid"]
    M = cache["M"]
    covs = cache["covs"]
    tz = np.where(valid, t[:, 2], 1.0)

    G = d_cov2d
    d_cov3d = np.einsum("nji,njk,nkl->nil", M, G, M)
    dM = np.einsum("nij,njk,nkl->nil", G + np.swapaxes(G, 1, 2), M, covs)
    dJ = np.einsum("nij,kj->nik", dM, cam.R)

    dt = np.zeros_like(t)
    dt[:, 0] = d_mean2d[:, 0] * cam.fx / tz
    dt[:, 1] = d_mean2d[:, 1] * cam.fy / tz
    dt[:, 2] = (-d_mean2d[:, 0] * cam.fx * t[:, 0] / tz ** 2
                - d_mean2d[:, 1] * cam.fy * t[:, 1] / tz ** 2)
    # J's dependence on the camera-space mean
    dt[:, 0] += dJ[:, 0, 2] * (-cam.fx / tz ** 2)
    dt[:, 1] += dJ[:, 1, 2] * (-cam.fy / tz ** 2)
    dt[:, 2] += (dJ[:, 0, 0] * (-cam.fx / tz ** 2)
                 + dJ[:, 1, 1] * (-cam.fy / tz ** 2)
                 + dJ[:, 0, 2] * (2 * cam.fx * t[:, 0] / tz ** 3)
                 + dJ[:, 1, 2] * (2 * cam.fy * t[:, 1] / tz ** 3))
    if d_depth is not None:
        dt[:, 2] += d_depth

    bad = ~valid
    dt[bad] = 0.0
    d_cov3d[bad] = 0.0
    d_mean3d = dt @ cam.R
    return d_mean3d, d_cov3d


# ---------------------------------------------------------------------- #
# rasterization


def _conics_and_radii(cov2d, opacities):
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    lam_max = 0.5 * ((a + c) + np.sqrt((a - c) ** 2 + 4 * b * b))
    radii = np.ceil(3.0 * np.sqrt(lam_max)).astype(np.int64)
    radii[opacities < kernels.ALPHA_MIN] = 0  # can never contribute
    return conics, radii


def rasterize(mean2d, cov2d, depths, opacities, colors, cam: Camera,
              background):
    """Tile-based front-to-back compositing. Returns (FrameBuffer, cache)."""
    for name, arr in (("mean2d", mean2d), ("cov2d", cov2d), ("depth", depths),
                      ("opacity", opacities), ("color", colors)):
        finite = np.isfinite(arr).reshape(len(arr), -1).all(axis=1)
        if not finite.all():
            raise ValueError(
                f"non-finite {name} at splat {int(np.argmin(finite))}")

    background = np.asarray(background, dtype=np.float64)
    H, W = cam.height, cam.width
    order = np.argsort(depths, kind="stable")
    m2 = np.ascontiguousarray(mean2d[order])
    c2 = cov2d[order]
    dep = np.ascontiguousarray(depths[order])
    op = np.ascontiguousarray(opacities[order])
    col = np.ascontiguousarray(colors[order])
    conics, radii = _conics_and_radii(c2, op)
    conics = np.ascontiguousarray(conics)

    counts = kernels.count_tiles(m2, radii, W, H)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    tile_ids = np.empty(total, dtype=np.int64)
    splat_ids = np.empty(total, dtype=np.int64)
    kernels.fill_tile_keys(m2, radii, W, H, offsets[:-1], tile_ids, splat_ids)
    tiles_x = (W + kernels.TILE - 1) // kernels.TILE
    tiles_y = (H + kernels.TILE - 1) // kernels.TILE
    n_tiles = tiles_x * tiles_y
    perm = np.argsort(tile_ids, kind="stable")
    tile_splats = np.ascontiguousarray(splat_ids[perm])
    tile_ptr = np.searchsorted(tile_ids[perm], np.arange(n_tiles + 1))

    rgb = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    depth_acc = np.zeros((H, W))
    kernels.forward_kernel(m2, conics, op, col, dep, tile_ptr, tile_splats,
                           W, H, background, rgb, alpha, depth_acc)
    depth = np.where(alpha >= ALPHA_VALID, depth_acc / np.maximum(alpha, 1e-300), 0.0)
    fb = FrameBuffer(rgb=rgb, alpha=alpha, depth=depth)
    cache = dict(order=order, m2=m2, conics=conics, op=op, col=col, dep=dep,
                 tile_ptr=tile_ptr, tile_splats=tile_splats, cam=cam,
                 background=background, alpha=alpha, depth_acc=depth_acc,
                 n=len(mean2d))
    return fb, cache


def rasterize_backward(cache, grad_rgb, grad_alpha=None, grad_depth=None):
    """Gradients w.r.t. every splat field, in the caller's splat order.

    grad_depth is taken w.r.t. the alpha-normalized depth channel.
    """
    cam = cache["cam"]
    H, W = cam.height, cam.width
    n = cache["n"]
    g_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64)
    g_alpha = np.zeros((H, W)) if grad_alpha is None \
        else np.array(grad_alpha, dtype=np.float64)
    g_acc = np.zeros((H, W))
    if grad_depth is not None:
        alpha = cache["alpha"]
        m = alpha >= ALPHA_VALID
        safe = np.where(m, alpha, 1.0)
        g_acc[m] = (grad_depth / safe)[m]
        g_alpha[m] -= (grad_depth * cache["depth_acc"] / safe ** 2)[m]

    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_color = np.zeros((n, 3))
    d_depth = np.zeros(n)
    kernels.backward_kernel(
        cache["m2"], cache["conics"], cache["op"], cache["col"], cache["dep"],
        cache["tile_ptr"], cache["tile_splats"], W, H, cache["background"],
        g_rgb, g_alpha, g_acc,
        d_mean2d, d_conic, d_opacity, d_color, d_depth)

    # conic -> cov2d: Q = C^-1, dC = -Q dQ Q with dQ from (a, b, c) grads
    Q = np.zeros((n, 2, 2))
    Q[:, 0, 0] = cache["conics"][:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = cache["conics"][:, 1]
    Q[:, 1, 1] = cache["conics"][:, 2]
    dQ = np.zeros((n, 2, 2))
    dQ[:, 0, 0] = d_conic[:, 0]
    dQ[:, 0, 1] = dQ[:, 1, 0] = 0.5 * d_conic[:, 1]
    dQ[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -np.einsum("nij,njk,nkl->nil", Q, dQ, Q)

    # back to the caller's ordering
    inv = np.empty_like(cache["order"])
    inv[cache["order"]] = np.arange(n)
    return dict(
        mean2d=d_mean2d[inv], cov2d=d_cov2d[inv], opacity=d_opacity[inv],
        color=d_color[inv], depth=d_depth[inv],
    )


# ---------------------------------------------------------------------- #
# full differentiable pipeline


def render(gaussians, mesh, pose, cam: Camera, background=(0.0, 0.0, 0.0)):
    """Canonical params -> LBS warp -> projection -> rasterization.

    pose may be None for a canonical-space render. Returns
    (FrameBuffer, cache); pass the cache to render_backward.
    """
    background = np.asarray(background, dtype=np.float64)
    adhered = isinstance(gaussians, AdheredGaussians)
    if gaussians.n == 0:
        H, W = cam.height, cam.width
        fb = FrameBuffer(rgb=np.tile(background, (H, W, 1)),
                         alpha=np.zeros((H, W)), depth=np.zeros((H, W)))
        return fb, dict(empty=True, adhered=adhered)

    gcache = adhered_forward(gaussians, mesh) if adhered \
        else detached_forward(gaussians)
    centers, covs = gcache["centers"], gcache["cov"]

    wcache = None
    if pose is not None:
        if adhered:
            raw = gaussians.bary
        else:
            raw = gaussians.binding.bary
        rbary = retract(raw)
        vw = mesh.skin_weights[mesh.faces[
            gaussians.face if adhered else gaussians.binding.face]]
        weights = np.einsum("ni,nib->nb", rbary, vw)
        A, b = blend(weights, pose)
        x_o, cov_o = warp_gaussians(centers, covs, A, b)
        wcache = dict(weights=weights, A=A, b=b, raw_bary=raw, rbary=rbary,
                      vw=vw, centers=centers, covs=covs)
    else:
        x_o, cov_o = centers, covs

    pcache = project(x_o, covs if pose is None else cov_o, cam)
    valid = pcache["valid"]
    idx = np.nonzero(valid)[0]
    fb, rcache = rasterize(
        pcache["mean2d"][idx], pcache["cov2d"][idx], pcache["depth"][idx],
        gcache["opacity"][idx], gcache["color"][idx], cam, background)
    return fb, dict(empty=False, adhered=adhered, gaussians=gaussians,
                    mesh=mesh, pose=pose, gcache=gcache, wcache=wcache,
                    pcache=pcache, rcache=rcache, idx=idx)


def render_backward(cache, grad_rgb, grad_alpha=None, grad_depth=None):
    """Compose module backward passes down to every learnable class.

    Returns a dict of gradients keyed by parameter name; includes
    'vertices' and, when a pose was supplied, 'bone_rotations' and
    'bone_translations'.
    """
    if cache["empty"]:
        return {}
    g = cache["gaussians"]
    mesh = cache["mesh"]
    idx = cache["idx"]
    n = g.n

    rgrads = rasterize_backward(cache["rcache"], grad_rgb, grad_alpha,
                                grad_depth)
    d_mean2d = np.zeros((n, 2))
    d_cov2d = np.zeros((n, 2, 2))
    d_opacity = np.zeros(n)
    d_color = np.zeros((n, 3))
    d_zdepth = np.zeros(n)
    d_mean2d[idx] = rgrads["mean2d"]
    d_cov2d[idx] = rgrads["cov2d"]
    d_opacity[idx] = rgrads["opacity"]
    d_color[idx] = rgrads["color"]
    d_zdepth[idx] = rgrads["depth"]

    d_xo, d_covo = project_backward(cache["pcache"], d_mean2d, d_cov2d,
                                    d_zdepth)

    out = {}
    wcache = cache["wcache"]
    if wcache is not None:
        d_center, d_cov, d_A, d_b = warp_backward(
            wcache["centers"], wcache["covs"], wcache["A"], d_xo, d_covo)
        d_w, d_R, d_t = blend_backward(wcache["weights"], cache["pose"],
                                       d_A, d_b)
        out["bone_rotations"] = d_R
        out["bone_translations"] = d_t
        d_bary_w = _weights_bary_backward(wcache, d_w) if cache["adhered"] \
            else None
    else:
        d_center, d_cov = d_xo, d_covo
        d_bary_w = None
    # world-space positional gradient, used for densification statistics
    out["_center_grad"] = d_center

    if cache["adhered"]:
        grads = adhered_backward(g, mesh, cache["gcache"], d_center, d_cov,
                                 d_opacity, d_color)
        if d_bary_w is not None:
            grads["bary"] = grads["bary"] + d_bary_w
    else:
        grads = detached_backward(g, cache["gcache"], d_center, d_cov,
                                  d_opacity, d_color)
        grads["vertices"] = np.zeros_like(mesh.vertices)
    out.update(grads)
    return out


def _weights_bary_backward(wcache, d_w):
    """Adjoint of bary -> retract -> barycentric weight interpolation."""
    d_rbary = np.einsum("nb,nib->ni", d_w, wcache["vw"])
    raw = wcache["raw_bary"]
    rb = wcache["rbary"]
    clamped_sum = np.clip(raw, 0.0, 1.0).sum(axis=1, keepdims=True)
    mask = ((raw > 0.0) & (raw < 1.0)).astype(np.float64)
    inner = np.einsum("ni,ni->n", rb, d_rbary)[:, None]
    return mask * (d_rbary - inner) / clamped_sum
