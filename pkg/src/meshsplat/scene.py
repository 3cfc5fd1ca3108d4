"""Synthetic articulated-figure scenes: capsule meshes, forward
kinematics, a z-buffer ground-truth rasterizer and dataset IO."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .mesh import (
    TriangleMesh,
    auto_skin_weights,
    load_mesh,
    read_skin_weights,
    save_obj,
    save_skin_weights,
)
from .renderer import Camera
from .rotation import rotation_about_axis
from .skinning import Pose, load_pose_sequence, save_pose_sequence


# ---------------------------------------------------------------------- #
# geometry builders


def capsule(p0, p1, radius, n_theta=16, n_phi=6):
    """Capsule from p0 to p1: cylinder wall with hemispherical caps.

    n_phi is the ring count per hemisphere. Returns (vertices, faces).
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    z = axis / length
    # local tangent frame
    h = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 \
        else np.array([0.0, 1.0, 0.0])
    x = np.cross(z, h)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)

    # ring ladder: (height along axis, ring radius); phi = 0 appears once
    # at each capsule end, forming the cylinder wall between them
    rungs = []
    for phi in np.linspace(-np.pi / 2, 0.0, n_phi + 1)[1:]:
        rungs.append((radius * np.sin(phi), radius * np.cos(phi)))
    for phi in np.linspace(0.0, np.pi / 2, n_phi + 1)[:-1]:
        rungs.append((length + radius * np.sin(phi), radius * np.cos(phi)))

    thetas = np.linspace(0.0, 2 * np.pi, n_theta, endpoint=False)
    ct, st = np.cos(thetas), np.sin(thetas)
    verts = [p0 - radius * z]  # bottom pole
    for hgt, r in rungs:
        ring = p0 + hgt * z + r * (np.outer(ct, x) + np.outer(st, y))
        verts.append(ring)
    verts.append([p1 + radius * z])  # top pole
    verts = np.concatenate([np.atleast_2d(v) for v in verts])

    faces = []
    n_rungs = len(rungs)
    top = 1 + n_rungs * n_theta
    for j in range(n_theta):
        k = (j + 1) % n_theta
        faces.append([0, 1 + k, 1 + j])
        faces.append([top, top - n_theta + j, top - n_theta + k])
    for i in range(n_rungs - 1):
        a = 1 + i * n_theta
        b = a + n_theta
        for j in range(n_theta):
            k = (j + 1) % n_theta
            faces.append([a + j, a + k, b + j])
            faces.append([a + k, b + k, b + j])
    return verts, np.asarray(faces, dtype=np.int64)


@dataclass
class Skeleton:
    segments: np.ndarray  # (B, 2, 3) canonical bone endpoints
    parents: list         # parent index per bone, -1 for the root
    radii: np.ndarray     # (B,) capsule radii

    @property
    def n_bones(self):
        return len(self.segments)

    def fk(self, joint_rotations):
        """Compose per-joint local rotations (about each bone's start
        pivot) into world bone transforms."""
        B = self.n_bones
        R = np.zeros((B, 3, 3))
        t = np.zeros((B, 3))
        for b in range(B):
            pivot = self.segments[b, 0]
            Rl = joint_rotations[b]
            tl = pivot - Rl @ pivot
            p = self.parents[b]
            if p < 0:
                R[b], t[b] = Rl, tl
            else:
                R[b] = R[p] @ Rl
                t[b] = R[p] @ tl + t[p]
        return Pose(rotations=R, translations=t)


def figure_skeleton(n_bones=5):
    """Canonical capsule-figure skeletons used by the synthetic scenes."""
    if n_bones == 2:
        seg = [[[0, 0, -0.25], [0, 0, 0.20]],
               [[0, 0, 0.20], [0, 0, 0.55]]]
        parents = [-1, 0]
        radii = [0.10, 0.07]
    elif n_bones == 5:
        seg = [[[0, 0, -0.05], [0, 0, 0.40]],   # torso (root)
               [[0, 0, 0.40], [0, 0, 0.62]],    # head
               [[0.05, 0, 0.36], [0.34, 0, 0.30]],   # left arm
               [[-0.05, 0, 0.36], [-0.34, 0, 0.30]],  # right arm
               [[0, 0, -0.05], [0, 0, -0.40]]]  # leg
        parents = [-1, 0, 0, 0, 0]
        radii = [0.11, 0.085, 0.05, 0.05, 0.075]
    else:
        raise ValueError("supported figures: 2 or 5 bones")
    return Skeleton(segments=np.asarray(seg, dtype=np.float64),
                    parents=parents, radii=np.asarray(radii))


def build_figure(n_bones=5, n_theta=16, n_phi=6):
    """Capsule-per-bone figure mesh with distance-based skin weights.

    Returns (TriangleMesh with skin weights, Skeleton).
    """
    sk = figure_skeleton(n_bones)
    verts, faces = [], []
    off = 0
    for b in range(sk.n_bones):
        v, f = capsule(sk.segments[b, 0], sk.segments[b, 1], sk.radii[b],
                       n_theta, n_phi)
        verts.append(v)
        faces.append(f + off)
        off += len(v)
    verts = np.concatenate(verts)
    faces = np.concatenate(faces)
    w = auto_skin_weights(verts, sk.segments)
    return TriangleMesh(verts, faces, skin_weights=w), sk


def smooth_template(mesh: TriangleMesh, iters=10, lam=0.5):
    """Uniform Laplacian smoothing; the coarse training-time template."""
    v = mesh.vertices.copy()
    deg = np.zeros(len(v))
    pairs = mesh.edges
    np.add.at(deg, pairs[:, 0], 1.0)
    np.add.at(deg, pairs[:, 1], 1.0)
    for _ in range(iters):
        acc = np.zeros_like(v)
        np.add.at(acc, pairs[:, 0], v[pairs[:, 1]])
        np.add.at(acc, pairs[:, 1], v[pairs[:, 0]])
        v = v + lam * (acc / deg[:, None] - v)
    return TriangleMesh(v, mesh.faces.copy(),
                        skin_weights=mesh.skin_weights.copy())


# ---------------------------------------------------------------------- #
# appearance and poses


def face_albedo(mesh: TriangleMesh, cell=0.22, seed=0):
    """Procedural per-face soft checker/stripe albedo from canonical
    centroids.

    Band-limited on purpose: the ground-truth rasterizer is flat-shaded
    per face, so a hard color boundary would alias at the tessellation
    scale. Smooth palette bands along the body axis are modulated by a
    soft-edged checker, keeping high contrast without face-level noise.
    """
    rng = np.random.default_rng(seed)
    palette = rng.uniform(0.25, 0.95, (4, 3))
    cent = mesh.vertices[mesh.faces].mean(axis=1)
    # smooth palette interpolation along z
    u = (cent[:, 2] / (4 * cell)) % 1.0 * len(palette)
    i0 = np.floor(u).astype(np.int64) % len(palette)
    i1 = (i0 + 1) % len(palette)
    t = (u - np.floor(u))[:, None]
    base = (1 - t) * palette[i0] + t * palette[i1]
    # soft checker: product of two phase-shifted waves through a tanh edge
    s = np.sin(2 * np.pi * cent[:, 0] / cell) \
        * np.sin(2 * np.pi * (cent[:, 1] + cent[:, 2]) / cell)
    checker = np.tanh(1.8 * s)
    return base * (0.78 + 0.22 * checker)[:, None]


def vertex_albedo(mesh: TriangleMesh, cell=0.3, seed=0):
    """Smooth per-vertex albedo field, for Gouraud-shaded ground truth.

    Same construction as face_albedo (palette bands along the body axis
    modulated by a soft checker) but evaluated at vertices and
    interpolated inside triangles by the rasterizer, so the images carry
    no color steps at the tessellation scale: the signal is band-limited
    by the pattern wavelength, not by the face size.
    """
    rng = np.random.default_rng(seed)
    palette = rng.uniform(0.25, 0.95, (4, 3))
    p = mesh.vertices
    u = (p[:, 2] / (4 * cell)) % 1.0 * len(palette)
    i0 = np.floor(u).astype(np.int64) % len(palette)
    i1 = (i0 + 1) % len(palette)
    t = (u - np.floor(u))[:, None]
    base = (1 - t) * palette[i0] + t * palette[i1]
    s = np.sin(2 * np.pi * p[:, 0] / cell) \
        * np.sin(2 * np.pi * (p[:, 1] + p[:, 2]) / cell)
    checker = np.tanh(1.2 * s)
    return base * (0.75 + 0.25 * checker)[:, None]


def pose_sequence(sk: Skeleton, n_frames, swing=0.2, yaw_turns=1.0):
    """Root-yaw plus sinusoidal limb swing; frame 0 is near-canonical."""
    poses = []
    for f in range(n_frames):
        u = f / max(n_frames, 1)
        rots = np.tile(np.eye(3), (sk.n_bones, 1, 1))
        rots[0] = rotation_about_axis([0.0, 0.0, 1.0],
                                      2 * np.pi * yaw_turns * u)
        for b in range(1, sk.n_bones):
            ang = swing * np.sin(2 * np.pi * u * 2 + b)
            axis = [1.0, 0.0, 0.0] if b % 2 else [0.0, 1.0, 0.0]
            rots[b] = rotation_about_axis(axis, ang)
        poses.append(sk.fk(rots))
    return poses


def skin_vertices(mesh: TriangleMesh, pose: Pose):
    """Linear-blend-skinned vertex positions."""
    if pose is None:
        return mesh.vertices
    moved = np.einsum("bij,nj->nbi", pose.rotations, mesh.vertices) \
        + pose.translations[None]
    return np.einsum("nb,nbi->ni", mesh.skin_weights, moved)


# ---------------------------------------------------------------------- #
# ground-truth z-buffer rasterizer


def render_mesh(vertices, faces, colors, cam: Camera):
    """Z-buffer render. Returns (rgb, mask, depth).

    colors with one row per face gives flat shading; one row per vertex
    gives Gouraud (barycentric) shading.
    """
    per_vertex = len(colors) == len(vertices) and len(colors) != len(faces)
    H, W = cam.height, cam.width
    rgb = np.zeros((H, W, 3))
    mask = np.zeros((H, W))
    zbuf = np.full((H, W), np.inf)
    fid = np.full((H, W), -1, dtype=np.int64)
    abuf = np.zeros((H, W))
    bbuf = np.zeros((H, W))

    t = vertices @ cam.R.T + cam.t
    z = t[:, 2]
    u = cam.fx * t[:, 0] / np.maximum(z, 1e-9) + cam.cx
    v = cam.fy * t[:, 1] / np.maximum(z, 1e-9) + cam.cy

    for i, f in enumerate(faces):
        if z[f].min() <= 1e-6:
            continue
        us, vs, zs = u[f], v[f], z[f]
        x0 = max(int(np.ceil(us.min())), 0)
        x1 = min(int(np.floor(us.max())), W - 1)
        y0 = max(int(np.ceil(vs.min())), 0)
        y1 = min(int(np.floor(vs.max())), H - 1)
        if x1 < x0 or y1 < y0:
            continue
        px, py = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        d = np.stack([px - us[0], py - vs[0]], axis=-1)
        e1 = np.array([us[1] - us[0], vs[1] - vs[0]])
        e2 = np.array([us[2] - us[0], vs[2] - vs[0]])
        det = e1[0] * e2[1] - e1[1] * e2[0]
        if abs(det) < 1e-12:
            continue
        a = (d[..., 0] * e2[1] - d[..., 1] * e2[0]) / det
        b = (d[..., 1] * e1[0] - d[..., 0] * e1[1]) / det
        inside = (a >= 0) & (b >= 0) & (a + b <= 1)
        # perspective-correct depth via 1/z interpolation
        iz = (1 - a - b) / zs[0] + a / zs[1] + b / zs[2]
        zpix = 1.0 / np.maximum(iz, 1e-12)
        win = zbuf[y0:y1 + 1, x0:x1 + 1]
        upd = inside & (zpix < win)
        win[upd] = zpix[upd]
        fid[y0:y1 + 1, x0:x1 + 1][upd] = i
        abuf[y0:y1 + 1, x0:x1 + 1][upd] = a[upd]
        bbuf[y0:y1 + 1, x0:x1 + 1][upd] = b[upd]

    hit = fid >= 0
    mask[hit] = 1.0
    if per_vertex:
        c = colors[faces[fid[hit]]]          # (n, 3 verts, 3)
        aa = abuf[hit][:, None]
        bb = bbuf[hit][:, None]
        rgb[hit] = (1 - aa - bb) * c[:, 0] + aa * c[:, 1] + bb * c[:, 2]
    else:
        rgb[hit] = colors[fid[hit]]
    depth = np.where(hit, zbuf, 0.0)
    return rgb, mask, depth


# ---------------------------------------------------------------------- #
# dataset IO


def save_png(path, img):
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_depth_png(path, depth, scale=1000.0):
    arr = np.clip(np.asarray(depth) * scale + 0.5, 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def save_cameras(path, cams):
    with open(path, "w") as fh:
        fh.write("# fx fy cx cy width height R(9 row-major) t(3)\n")
        for c in cams:
            vals = [c.fx, c.fy, c.cx, c.cy, float(c.width), float(c.height)]
            vals += list(c.R.reshape(-1)) + list(c.t)
            fh.write(" ".join(f"{x:.17g}" for x in vals) + "\n")


def load_cameras(path):
    cams = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            v = [float(x) for x in line.split()]
            if len(v) != 18:
                raise ValueError(f"{path}: expected 18 values per camera")
            cams.append(Camera(
                fx=v[0], fy=v[1], cx=v[2], cy=v[3],
                width=int(v[4]), height=int(v[5]),
                R=np.array(v[6:15]).reshape(3, 3), t=np.array(v[15:18])))
    return cams


@dataclass
class Dataset:
    mesh: TriangleMesh       # training template
    gt_mesh: TriangleMesh    # ground-truth surface (for geometry eval)
    frames: list             # dicts: rgb, mask, camera, pose
    val_frames: list
    skeleton: Skeleton = None


def _render_split(mesh_gt, albedo, cams, poses):
    frames = []
    for cam, pose in zip(cams, poses):
        verts = skin_vertices(mesh_gt, pose)
        rgb, mask, depth = render_mesh(verts, mesh_gt.faces, albedo, cam)
        frames.append({"rgb": rgb, "mask": mask, "depth": depth,
                       "camera": cam, "pose": pose})
    return frames


def generate_dataset(n_bones=5, n_pose_frames=12, n_train_views=3,
                     n_val_views=8, image_size=128, n_theta=16, n_phi=6,
                     seed=0, cam_radius=1.6, template_smooth_iters=10):
    """Build the full synthetic dataset in memory.

    Training frames pair each pose with a camera from a small fixed ring
    (round-robin); validation frames are a held-out ring of views at the
    first pose.
    """
    gt_mesh, sk = build_figure(n_bones, n_theta, n_phi)
    template = smooth_template(gt_mesh, template_smooth_iters)
    albedo = vertex_albedo(gt_mesh, seed=seed)
    center = gt_mesh.vertices.mean(axis=0)
    fx = image_size * 1.3

    train_cams_ring = [
        Camera.look_at(center + cam_radius * np.array(
            [np.cos(a), np.sin(a), 0.25]), center, fx=fx,
            width=image_size, height=image_size)
        for a in np.linspace(0, 2 * np.pi, n_train_views, endpoint=False)]
    poses = pose_sequence(sk, n_pose_frames)
    train_cams = [train_cams_ring[i % n_train_views]
                  for i in range(n_pose_frames)]

    val_cams = [
        Camera.look_at(center + cam_radius * np.array(
            [np.cos(a), np.sin(a), 0.25]), center, fx=fx,
            width=image_size, height=image_size)
        for a in np.linspace(0.3, 0.3 + 2 * np.pi, n_val_views,
                             endpoint=False)]
    val_poses = [poses[0]] * n_val_views

    frames = _render_split(gt_mesh, albedo, train_cams, poses)
    val_frames = _render_split(gt_mesh, albedo, val_cams, val_poses)
    return Dataset(mesh=template, gt_mesh=gt_mesh, frames=frames,
                   val_frames=val_frames, skeleton=sk)


def write_dataset(out_dir, ds: Dataset, meta=None):
    os.makedirs(out_dir, exist_ok=True)
    save_obj(os.path.join(out_dir, "mesh.obj"), ds.mesh.vertices,
             ds.mesh.faces)
    save_obj(os.path.join(out_dir, "mesh_gt.obj"), ds.gt_mesh.vertices,
             ds.gt_mesh.faces)
    save_skin_weights(os.path.join(out_dir, "weights.txt"),
                      ds.mesh.skin_weights)
    for split, frames in (("train", ds.frames), ("val", ds.val_frames)):
        d = os.path.join(out_dir, split, "frames")
        os.makedirs(d, exist_ok=True)
        for i, fr in enumerate(frames):
            save_png(os.path.join(d, f"{i:04d}.rgb.png"), fr["rgb"])
            save_png(os.path.join(d, f"{i:04d}.mask.png"), fr["mask"])
        save_cameras(os.path.join(out_dir, split, "cameras.txt"),
                     [fr["camera"] for fr in frames])
        save_pose_sequence(os.path.join(out_dir, split, "poses.txt"),
                           [fr["pose"] for fr in frames])
    with open(os.path.join(out_dir, "meta.txt"), "w") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"{k}={v}\n")


def load_dataset(path):
    """Read a dataset directory written by write_dataset."""
    mesh = load_mesh(os.path.join(path, "mesh.obj"))
    mesh.set_skin_weights(read_skin_weights(
        os.path.join(path, "weights.txt")))
    gt_path = os.path.join(path, "mesh_gt.obj")
    gt_mesh = load_mesh(gt_path) if os.path.exists(gt_path) else None
    if gt_mesh is not None:
        gt_mesh.set_skin_weights(mesh.skin_weights)

    def read_split(split):
        base = os.path.join(path, split)
        if not os.path.isdir(base):
            return []
        cams = load_cameras(os.path.join(base, "cameras.txt"))
        poses = load_pose_sequence(os.path.join(base, "poses.txt"),
                                   mesh.skin_weights.shape[1])
        frames = []
        for i, (cam, pose) in enumerate(zip(cams, poses)):
            rgb = load_png(os.path.join(base, "frames", f"{i:04d}.rgb.png"))
            m = load_png(os.path.join(base, "frames", f"{i:04d}.mask.png"))
            if m.ndim == 3:
                m = m[..., 0]
            frames.append({"rgb": rgb, "mask": m, "camera": cam,
                           "pose": pose})
        return frames

    return Dataset(mesh=mesh, gt_mesh=gt_mesh, frames=read_split("train"),
                   val_frames=read_split("val"))
