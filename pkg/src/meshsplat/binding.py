"""Gaussian-to-triangle binding: barycentric projection, retraction,
exact point-triangle distance and the single-hop walking tracker."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np


@dataclass
class Bindings:
    """Structure-of-arrays binding records for a batch of Gaussians."""

    face: np.ndarray          # (n,) int64
    bary: np.ndarray          # (n, 3) float64
    signed_height: np.ndarray  # (n,) float64, 0 in the adhered stage

    @classmethod
    def zeros(cls, n):
        return cls(
            face=np.zeros(n, dtype=np.int64),
            bary=np.zeros((n, 3)),
            signed_height=np.zeros(n),
        )

    def copy(self):
        return Bindings(self.face.copy(), self.bary.copy(), self.signed_height.copy())


# ---------------------------------------------------------------------- #
# barycentric projection


def project_points_to_faces(x, mesh, faces):
    """Barycentric coordinates of the orthogonal foot points of x.

    x: (n, 3) points; faces: (n,) face ids. Components may be negative,
    sum is always 1.
    """
    tri = mesh.vertices[mesh.faces[faces]]  # (n, 3, 3)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    r = np.asarray(x) - tri[:, 0]
    a = np.einsum("ij,ij->i", e1, e1)
    b = np.einsum("ij,ij->i", e1, e2)
    c = np.einsum("ij,ij->i", e2, e2)
    p = np.einsum("ij,ij->i", e1, r)
    q = np.einsum("ij,ij->i", e2, r)
    det = a * c - b * b
    u = (c * p - b * q) / det
    w = (a * q - b * p) / det
    return np.stack([1.0 - u - w, u, w], axis=1)


def project_to_triangle(x, mesh, f):
    """Single-point convenience wrapper around project_points_to_faces."""
    return project_points_to_faces(
        np.asarray(x, dtype=np.float64)[None], mesh, np.array([f])
    )[0]


def out_of_triangle(a):
    """True iff any normalized barycentric component is negative.

    Accepts a single coordinate triple or an (n, 3) batch.
    """
    a = np.asarray(a, dtype=np.float64)
    s = a.sum(axis=-1)
    if np.any(s == 0.0):
        raise ValueError("barycentric coordinates sum to zero")
    return np.any(a / s[..., None] < 0.0, axis=-1)


def retract(a):
    """Clamp barycentrics into [0, 1] and renormalize onto the simplex."""
    a = np.asarray(a, dtype=np.float64)
    clamped = np.clip(a, 0.0, 1.0)
    s = clamped.sum(axis=-1, keepdims=True)
    assert np.all(s > 0.0), "all-zero barycentrics after clamping"
    return clamped / s


# ---------------------------------------------------------------------- #
# exact point-triangle distance (Voronoi region classification)


def closest_point_on_triangles(x, tri):
    """Closest points on closed triangles, vectorized.

    x: (n, 3); tri: (n, 3, 3). Returns (dist, closest, bary) where bary are
    the barycentrics of the closest point (all in [0, 1]).
    """
    x = np.asarray(x, dtype=np.float64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = x - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = x - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = x - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    n = len(x)
    bary = np.empty((n, 3))
    done = np.zeros(n, dtype=bool)

    def assign(mask, u, v, w):
        m = mask & ~done
        bary[m, 0] = u[m] if isinstance(u, np.ndarray) else u
        bary[m, 1] = v[m] if isinstance(v, np.ndarray) else v
        bary[m, 2] = w[m] if isinstance(w, np.ndarray) else w
        done[m] = True

    zeros = np.zeros(n)
    assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)                 # vertex a
    assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)                # vertex b
    assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)                # vertex c

    vc = d1 * d4 - d3 * d2
    with np.errstate(invalid="ignore", divide="ignore"):
        t_ab = d1 / (d1 - d3)
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    assign(m, 1.0 - np.where(m, t_ab, 0.0), np.where(m, t_ab, 0.0), zeros)

    vb = d5 * d2 - d1 * d6
    with np.errstate(invalid="ignore", divide="ignore"):
        t_ac = d2 / (d2 - d6)
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    assign(m, 1.0 - np.where(m, t_ac, 0.0), zeros, np.where(m, t_ac, 0.0))

    va = d3 * d6 - d5 * d4
    with np.errstate(invalid="ignore", divide="ignore"):
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    assign(m, zeros, 1.0 - np.where(m, t_bc, 0.0), np.where(m, t_bc, 0.0))

    denom = va + vb + vc
    with np.errstate(invalid="ignore", divide="ignore"):
        v = vb / denom
        w = vc / denom
    m = ~done
    bary[m, 0] = 1.0 - v[m] - w[m]
    bary[m, 1] = v[m]
    bary[m, 2] = w[m]

    closest = np.einsum("ni,nij->nj", bary, tri)
    dist = np.linalg.norm(x - closest, axis=1)
    return dist, closest, bary


def point_triangle_distance(x, mesh, f):
    """Distance and closest point from x to the closed triangle f."""
    tri = mesh.vertices[mesh.faces[[f]]]
    d, cp, _ = closest_point_on_triangles(
        np.asarray(x, dtype=np.float64)[None], tri
    )
    return float(d[0]), cp[0]


# ---------------------------------------------------------------------- #
# walking on mesh


def walk_to_nearest(x_new, mesh, f_current):
    """Single-hop bound-face update for one Gaussian center.

    Returns f_current if the projection of x_new stays inside it, else the
    adjacent face with minimal point-triangle distance (ties broken by
    smallest face id).
    """
    a = project_to_triangle(x_new, mesh, f_current)
    if not out_of_triangle(a):
        return f_current
    cand = mesh.adj_faces[f_current][: mesh.adj_counts[f_current]]
    if len(cand) == 0:
        return f_current
    tri = mesh.vertices[mesh.faces[cand]]
    d, _, _ = closest_point_on_triangles(
        np.repeat(np.asarray(x_new, dtype=np.float64)[None], len(cand), axis=0), tri
    )
    return int(cand[np.argmin(d)])  # cand sorted ascending -> smallest-id ties


@numba.njit(cache=True)
def _tri_distance(px, py, pz, tri):
    """Scalar point-to-closed-triangle distance (region classification,
    mirroring closest_point_on_triangles)."""
    ax, ay, az = tri[0, 0], tri[0, 1], tri[0, 2]
    bx, by, bz = tri[1, 0], tri[1, 1], tri[1, 2]
    cx, cy, cz = tri[2, 0], tri[2, 1], tri[2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz

    u, v, w = 1.0, 0.0, 0.0
    if d1 <= 0.0 and d2 <= 0.0:
        pass
    elif d3 >= 0.0 and d4 <= d3:
        u, v, w = 0.0, 1.0, 0.0
    elif d6 >= 0.0 and d5 <= d6:
        u, v, w = 0.0, 0.0, 1.0
    else:
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            t = d1 / (d1 - d3)
            u, v, w = 1.0 - t, t, 0.0
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            t = d2 / (d2 - d6)
            u, v, w = 1.0 - t, 0.0, t
        elif va <= 0.0 and d4 - d3 >= 0.0 and d5 - d6 >= 0.0:
            t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            u, v, w = 0.0, 1.0 - t, t
        else:
            denom = va + vb + vc
            v = vb / denom
            w = vc / denom
            u = 1.0 - v - w
    qx = u * ax + v * bx + w * cx
    qy = u * ay + v * by + w * cy
    qz = u * az + v * bz + w * cz
    return np.sqrt((px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2)


@numba.njit(cache=True)
def _walk_kernel(centers, vertices, mesh_faces, adj_faces, adj_counts,
                 normals, faces, bary, height):
    """Per-point walking loop; pure per element, so results are bitwise
    independent of any batch partitioning."""
    n = centers.shape[0]
    for i in range(n):
        px, py, pz = centers[i, 0], centers[i, 1], centers[i, 2]
        f = faces[i]
        for attempt in range(2):
            va = mesh_faces[f, 0]
            vb = mesh_faces[f, 1]
            vc = mesh_faces[f, 2]
            ax, ay, az = vertices[va, 0], vertices[va, 1], vertices[va, 2]
            e1x = vertices[vb, 0] - ax
            e1y = vertices[vb, 1] - ay
            e1z = vertices[vb, 2] - az
            e2x = vertices[vc, 0] - ax
            e2y = vertices[vc, 1] - ay
            e2z = vertices[vc, 2] - az
            rx, ry, rz = px - ax, py - ay, pz - az
            a = e1x * e1x + e1y * e1y + e1z * e1z
            b = e1x * e2x + e1y * e2y + e1z * e2z
            c = e2x * e2x + e2y * e2y + e2z * e2z
            p = e1x * rx + e1y * ry + e1z * rz
            q = e2x * rx + e2y * ry + e2z * rz
            det = a * c - b * b
            u = (c * p - b * q) / det
            w = (a * q - b * p) / det
            a1 = 1.0 - u - w
            inside = a1 >= 0.0 and u >= 0.0 and w >= 0.0
            if inside or attempt == 1:
                bary[i, 0] = a1
                bary[i, 1] = u
                bary[i, 2] = w
                break
            # hop: nearest among the vertex-sharing neighbors (candidates
            # are stored in ascending id order, so a strict < keeps the
            # smallest face id on ties)
            best = f
            best_d = np.inf
            for k in range(adj_counts[f]):
                g = adj_faces[f, k]
                d = _tri_distance(px, py, pz, vertices[mesh_faces[g]])
                if d < best_d:
                    best_d = d
                    best = g
            if best == f:
                bary[i, 0] = a1
                bary[i, 1] = u
                bary[i, 2] = w
                break
            f = best
        faces[i] = f
        v0 = mesh_faces[f, 0]
        height[i] = ((px - vertices[v0, 0]) * normals[f, 0]
                     + (py - vertices[v0, 1]) * normals[f, 1]
                     + (pz - vertices[v0, 2]) * normals[f, 2])


def walk_batch(centers, mesh, bindings):
    """Walking + binding refresh for a batch of Gaussians.

    Only out-of-triangle Gaussians consider a face change (one hop); every
    binding gets its barycentrics and signed height refreshed against the
    (possibly new) bound face. Returns a new Bindings instance.
    """
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    faces = bindings.face.copy()
    n = len(centers)
    bary = np.empty((n, 3))
    height = np.empty(n)
    _walk_kernel(centers, mesh.vertices, mesh.faces, mesh.adj_faces,
                 mesh.adj_counts, mesh.face_normals, faces, bary, height)
    return Bindings(face=faces, bary=bary, signed_height=height)
