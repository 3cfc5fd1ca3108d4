"""TSDF fusion of rendered depth maps and mesh extraction.

Depth maps are fused into a truncated signed distance volume by
projecting voxel centers into each view; the zero level set is extracted
with marching cubes (scikit-image).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _marching_cubes

from .binding import closest_point_on_triangles
from .renderer import Camera

DEPTH_ALPHA_MIN = 0.5  # pixels with lower coverage carry no depth


@dataclass
class TsdfVolume:
    origin: np.ndarray          # (3,) world position of voxel (0,0,0) center
    voxel_size: float
    dims: tuple                 # (nx, ny, nz)
    truncation: float = 0.0     # world units; default set in __post_init__
    tsdf: np.ndarray = field(default=None, repr=False)
    weight: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if any(d < 1 for d in self.dims):
            raise ValueError("dims must be >= 1")
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.truncation <= 0:
            self.truncation = 4.0 * self.voxel_size
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims)
        if self.weight is None:
            self.weight = np.zeros(self.dims)

    @classmethod
    def for_bounds(cls, lo, hi, resolution=256, margin=0.10):
        """Cube volume covering [lo, hi] expanded by a relative margin."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo).max() * (1.0 + margin)
        vs = 2.0 * half / (resolution - 1)
        return cls(origin=center - half, voxel_size=vs,
                   dims=(resolution, resolution, resolution))

    def voxel_centers(self):
        ii = [np.arange(d) for d in self.dims]
        g = np.stack(np.meshgrid(*ii, indexing="ij"), axis=-1)
        return self.origin + g * self.voxel_size


def sample_sphere_cameras(count, radius, target=(0.0, 0.0, 0.0), fx=256.0,
                          width=256, height=256):
    """Evenly spread view points on a sphere around the target.

    Uses a Fibonacci lattice; a single camera sits at the +z pole. Every
    camera's optical axis passes through the target.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    target = np.asarray(target, dtype=np.float64)
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(count):
        z = 1.0 if count == 1 else 1.0 - 2.0 * i / (count - 1)
        z = np.clip(z, -1.0, 1.0)
        r = np.sqrt(max(1.0 - z * z, 0.0))
        th = golden * i
        eye = target + radius * np.array([r * np.cos(th), r * np.sin(th), z])
        up = (0.0, 1.0, 0.0) if abs(z) > 0.99 else (0.0, 0.0, 1.0)
        cams.append(Camera.look_at(eye, target, up=up, fx=fx,
                                   width=width, height=height))
    return cams


def integrate(vol: TsdfVolume, depth, cam: Camera, alpha=None):
    """Fuse one depth map into the volume (running average, weight 1).

    Pixels with depth 0 (or alpha below threshold) are treated as empty
    observations and skipped. Voxels more than one truncation band behind
    the surface are left untouched.
    """
    depth = np.asarray(depth, dtype=np.float64)
    centers = vol.voxel_centers().reshape(-1, 3)
    t = centers @ cam.R.T + cam.t
    z = t[:, 2]
    ok = z > 1e-6
    u = np.full(len(t), -1.0)
    v = np.full(len(t), -1.0)
    u[ok] = cam.fx * t[ok, 0] / z[ok] + cam.cx
    v[ok] = cam.fy * t[ok, 1] / z[ok] + cam.cy
    ui = np.round(u).astype(np.int64)
    vi = np.round(v).astype(np.int64)
    ok &= (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)

    d_obs = np.zeros(len(t))
    d_obs[ok] = depth[vi[ok], ui[ok]]
    ok &= d_obs > 0
    if alpha is not None:
        a_obs = np.zeros(len(t))
        a_obs[ok] = np.asarray(alpha, dtype=np.float64)[vi[ok], ui[ok]]
        ok &= a_obs >= DEPTH_ALPHA_MIN

    sdf = d_obs - z
    ok &= sdf > -vol.truncation
    val = np.clip(sdf / vol.truncation, -1.0, 1.0)

    flat_t = vol.tsdf.reshape(-1)
    flat_w = vol.weight.reshape(-1)
    w_old = flat_w[ok]
    flat_t[ok] = (flat_t[ok] * w_old + val[ok]) / (w_old + 1.0)
    flat_w[ok] = w_old + 1.0
    return vol


def extract_mesh(vol: TsdfVolume):
    """Zero level set of the fused volume as (vertices, faces) in world
    coordinates. Returns empty arrays when no surface crosses zero."""
    observed = vol.weight > 0
    field_vals = np.where(observed, vol.tsdf, 1.0)
    if field_vals.min() >= 0.0 or field_vals.max() <= 0.0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    verts, faces, _, _ = _marching_cubes(field_vals, level=0.0)
    verts = vol.origin + verts * vol.voxel_size
    faces = np.asarray(faces, dtype=np.int64)
    # drop degenerate triangles (repeated vertex indices)
    good = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
            & (faces[:, 0] != faces[:, 2]))
    return verts, faces[good]


def fuse_views(render_fn, cameras, bounds_lo, bounds_hi, resolution=256,
               margin=0.10):
    """Render depth from every camera with render_fn(cam) -> (depth, alpha)
    and fuse. Returns the volume."""
    vol = TsdfVolume.for_bounds(bounds_lo, bounds_hi, resolution, margin)
    for cam in cameras:
        depth, alpha = render_fn(cam)
        integrate(vol, depth, cam, alpha)
    return vol


def point_mesh_distance(points, mesh, k=48):
    """Unsigned distance from each point to a triangle mesh surface.

    Prunes candidate faces with a centroid KD-tree, then evaluates the
    exact point-to-closed-triangle distance on the k nearest candidates.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return np.zeros(0)
    cent = mesh.vertices[mesh.faces].mean(axis=1)
    k = min(k, len(cent))
    _, idx = cKDTree(cent).query(points, k=k)
    idx = np.atleast_2d(idx)
    best = np.full(len(points), np.inf)
    for j in range(k):
        tri = mesh.vertices[mesh.faces[idx[:, j]]]
        d, _, _ = closest_point_on_triangles(points, tri)
        best = np.minimum(best, d)
    return best
