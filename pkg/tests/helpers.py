"""Shared test oracles: finite differences, a naive per-pixel renderer,
reference geometry builders and independent distance oracles."""

from __future__ import annotations

import numpy as np

from meshsplat.kernels import ALPHA_MAX, ALPHA_MIN, Q_CUTOFF, T_MIN
from meshsplat.mesh import TriangleMesh

# ---------------------------------------------------------------------- #
# finite differences


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-12):
    na = np.linalg.norm(np.asarray(a).ravel())
    nb = np.linalg.norm(np.asarray(b).ravel())
    return np.linalg.norm((np.asarray(a) - np.asarray(b)).ravel()) \
        / max(na, nb, floor)


def check_grad(f, x, analytic, rel=1e-4, h=1e-5, floor=1e-12):
    """Compare an analytic gradient against central differences.

    Components where two FD step sizes disagree are excluded: the forward
    map is only piecewise smooth (depth-sort order, compositing cutoffs,
    closest-point regions), and an FD stencil straddling such a boundary
    measures a jump, not a derivative.
    """
    fd1 = fd_grad(f, x, h)
    fd2 = fd_grad(f, x, h / 2)
    scale = np.maximum(np.abs(fd1), np.abs(fd2))
    smooth = np.abs(fd1 - fd2) <= 0.02 * np.maximum(scale, 1e-8)
    assert smooth.mean() > 0.5, "FD unstable on most components"
    e = rel_err(np.asarray(analytic)[smooth], fd2[smooth], floor)
    assert e < rel, f"gradient rel err {e:.3e} >= {rel}"
    return e


# ---------------------------------------------------------------------- #
# naive per-pixel rasterizer oracle (full sort, no tiling)


def naive_rasterize(mean2d, cov2d, depths, opacities, colors, cam,
                    background=(0.0, 0.0, 0.0)):
    """Direct transcription of the compositing rules: full depth sort, no
    tiling, every splat visited at every pixel in order. Vectorized over
    the pixel grid for speed; per-pixel control flow is reproduced with
    masks (a pixel whose transmittance fell below the stop threshold
    ignores all later splats, exactly like a scalar break)."""
    H, W = cam.height, cam.width
    background = np.asarray(background, dtype=np.float64)
    order = np.argsort(depths, kind="stable")
    conic = np.linalg.inv(cov2d)
    px, py = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64))
    T = np.ones((H, W))
    rgb = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    depth_acc = np.zeros((H, W))
    for s in order:
        if opacities[s] < ALPHA_MIN:
            continue
        dx = px - mean2d[s, 0]
        dy = py - mean2d[s, 1]
        q = (conic[s, 0, 0] * dx * dx + (conic[s, 0, 1] + conic[s, 1, 0])
             * dx * dy + conic[s, 1, 1] * dy * dy)
        a = np.minimum(opacities[s] * np.exp(-0.5 * q), ALPHA_MAX)
        hit = (q >= 0.0) & (q <= Q_CUTOFF) & (a >= ALPHA_MIN) & (T >= T_MIN)
        w = np.where(hit, T * a, 0.0)
        rgb += w[..., None] * colors[s]
        alpha += w
        depth_acc += w * depths[s]
        T = np.where(hit, T * (1.0 - a), T)
    rgb += T[..., None] * background
    return rgb, alpha, depth_acc


# ---------------------------------------------------------------------- #
# geometry


def icosphere(subdiv=2, radius=1.0):
    """Subdivided icosahedron as a TriangleMesh."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [tuple(x) for x in v]
    index = {w: i for i, w in enumerate(verts)}

    def midpoint(a, b):
        m = tuple((np.array(verts[a]) + np.array(verts[b])) / 2.0)
        if m not in index:
            index[m] = len(verts)
            verts.append(m)
        return index[m]

    for _ in range(subdiv):
        nf = []
        for (a, b, c) in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    v = np.array(verts)
    v = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    return TriangleMesh(v, np.array(f, dtype=np.int64))


def tetrahedron():
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                  [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
                 dtype=np.int64)
    return TriangleMesh(v, f)


# ---------------------------------------------------------------------- #
# independent point-triangle oracles


def enumeration_distance(x, tri):
    """Distance to a closed triangle by exhaustive candidate enumeration:
    the plane foot point (if inside), the three clamped edge projections
    and the three vertices. Independent of the region-classification code.
    """
    x = np.asarray(x, dtype=np.float64)
    a, b, c = tri
    cands = [a, b, c]
    for p, q in ((a, b), (b, c), (c, a)):
        e = q - p
        t = np.clip(np.dot(x - p, e) / np.dot(e, e), 0.0, 1.0)
        cands.append(p + t * e)
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    foot = x - np.dot(x - a, n) * n
    # inside test via consistent cross-product orientation
    s = [np.dot(np.cross(q - p, foot - p), n)
         for p, q in ((a, b), (b, c), (c, a))]
    if min(s) >= -1e-12:
        cands.append(foot)
    return min(np.linalg.norm(x - p) for p in cands)


def dense_sample_distance(x, tri, n=400):
    """Lower-resolution oracle: min distance to a dense barycentric grid."""
    us = np.linspace(0.0, 1.0, n)
    pts = []
    for u in us:
        vs = np.linspace(0.0, 1.0 - u, max(int((1.0 - u) * n), 1))
        for v in vs:
            pts.append((1 - u - v) * tri[0] + u * tri[1] + v * tri[2])
    pts = np.array(pts)
    return float(np.linalg.norm(pts - x, axis=1).min())


def random_camera(rng, width=64, height=64):
    from meshsplat.renderer import Camera
    eye = rng.normal(0.0, 0.2, 3) + np.array([0.0, 0.0, -3.0])
    return Camera.look_at(eye, rng.normal(0.0, 0.1, 3), fx=60.0,
                          width=width, height=height)


def random_splats(rng, n, width=64, height=64, spread=20.0):
    """Random 2D splat inputs for rasterizer-level tests."""
    mean2d = rng.uniform(-5, width + 5, (n, 2))
    A = rng.normal(0.0, 2.0, (n, 2, 2))
    cov2d = np.einsum("nij,nkj->nik", A, A) + 0.5 * np.eye(2)
    depths = rng.uniform(1.0, 5.0, n)
    opacities = rng.uniform(0.05, 1.0, n)
    colors = rng.uniform(0.0, 1.0, (n, 3))
    return mean2d, cov2d, depths, opacities, colors
