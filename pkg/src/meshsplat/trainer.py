"""Two-stage optimization loop: Adam over all learnable fields, the
adhered -> detached schedule, binding maintenance and density control."""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .binding import Bindings, out_of_triangle, project_points_to_faces, retract, walk_batch
from .gaussians import (
    AdheredGaussians,
    DetachedGaussians,
    detach,
    detached_forward,
    logit,
    adhered_forward,
)
from .losses import LossWeights, total_loss


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_iters: int = 3000
    adhered_iters: int = 600
    # learning rates per parameter class
    lr_bary: float = 2e-3
    lr_vertices: float = 1e-4
    lr_beta: float = 1e-3
    lr_log_s: float = 5e-3
    lr_center: float = 1.6e-4
    lr_center_final: float = 1.6e-6
    lr_quat: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    weights: LossWeights = field(default_factory=LossWeights)
    # density control
    densify_interval: int = 300
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    clone_scale: float = 0.02
    max_gaussians: int = 60000
    n_init_gaussians: int = 6000
    # misc
    seed: int = 0
    snapshot_interval: int = 1000
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.adhered_iters > self.total_iters:
            raise ValueError("adhered_iters must be <= total_iters")
        for f in ("lr_bary", "lr_vertices", "lr_beta", "lr_log_s",
                  "lr_center", "lr_quat", "lr_opacity", "lr_color"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")


ADHERED_PARAMS = {"bary": "lr_bary", "log_s": "lr_log_s", "beta": "lr_beta",
                  "opacity_logit": "lr_opacity", "color_logit": "lr_color"}
DETACHED_PARAMS = {"center": "lr_center", "log_s": "lr_log_s",
                   "quat": "lr_quat", "opacity_logit": "lr_opacity",
                   "color_logit": "lr_color"}


class Adam:
    """Per-array Adam with support for growing/shrinking the population."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, name, param, grad, lr):
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
        self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad ** 2
        mh = self.m[name] / (1 - self.beta1 ** t)
        vh = self.v[name] / (1 - self.beta2 ** t)
        return param - lr * mh / (np.sqrt(vh) + self.eps)

    def select_rows(self, keep, skip=("vertices",)):
        """Row-subset the moment arrays after pruning."""
        for name in self.m:
            if name in skip:
                continue
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]

    def append_rows(self, counts, skip=("vertices",)):
        """Zero-extend moments for newly created Gaussians."""
        for name in self.m:
            if name in skip:
                continue
            pad = np.zeros((counts,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])

    def reset(self):
        self.m.clear()
        self.v.clear()
        self.t.clear()


# ---------------------------------------------------------------------- #
# initialization


def init_scene(mesh, budget, rng=None):
    """Area-proportional adhered Gaussian initialization.

    budget: total Gaussian count, or per-face count if < 1 per face makes
    no sense for your mesh use total counts. Deterministic under the rng.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    rng = rng or np.random.default_rng(0)
    probs = mesh.face_areas / mesh.face_areas.sum()
    counts = rng.multinomial(budget, probs)
    face = np.repeat(np.arange(len(mesh.faces)), counts)
    n = len(face)
    bary = rng.dirichlet(np.ones(3), n)
    s0 = np.sqrt(mesh.face_areas[face])
    return AdheredGaussians(
        face=face,
        bary=bary,
        log_s=np.log(np.clip(np.stack([s0, s0], axis=1), 2e-3, 0.5)),
        beta=rng.uniform(0.0, 2 * np.pi, n),
        opacity_logit=np.zeros(n),
        color_logit=np.full((n, 3), logit(0.5)),
    )


# ---------------------------------------------------------------------- #
# single step


def train_step(scene, mesh, frame, config: TrainConfig, stage, adam: Adam,
               iteration, grad_accum=None):
    """One optimize + maintenance step. Returns (scene, components)."""
    comps, grads, fb = total_loss(scene, mesh, frame, config.weights, stage,
                                  config.background)
    if not np.isfinite(comps["total"]):
        raise TrainingDiverged(
            f"non-finite loss at iteration {iteration}: {comps}")

    params = ADHERED_PARAMS if stage == "adhered" else DETACHED_PARAMS
    for name, lrname in params.items():
        if name not in grads:
            continue
        lr = getattr(config, lrname)
        if name == "center":
            # exponential decay over the detached phase
            span = max(config.total_iters - config.adhered_iters, 1)
            frac = min(max(iteration - config.adhered_iters, 0) / span, 1.0)
            lr = config.lr_center * (config.lr_center_final
                                     / config.lr_center) ** frac
        new = adam.step(name, getattr(scene, name), grads[name], lr)
        setattr(scene, name, new)
    if "vertices" in grads and config.lr_vertices > 0:
        mesh.set_vertices(adam.step("vertices", mesh.vertices,
                                    grads["vertices"], config.lr_vertices))

    if grad_accum is not None and "_center_grad" in grads:
        grad_accum["sum"] += np.linalg.norm(grads["_center_grad"], axis=1)
        grad_accum["count"] += 1

    # maintenance
    if stage == "adhered":
        scene.bary = retract(scene.bary)
    else:
        scene.quat = scene.quat / np.linalg.norm(scene.quat, axis=1,
                                                 keepdims=True)
        scene.binding = walk_batch(scene.center, mesh, scene.binding)
    return scene, comps


# ---------------------------------------------------------------------- #
# density control


def densify_and_prune(scene, mesh, adam: Adam, grad_accum,
                      config: TrainConfig):
    """Prune transparent Gaussians, split large high-gradient ones and
    clone small high-gradient ones. Works on both stages."""
    adhered = isinstance(scene, AdheredGaussians)
    n = scene.n
    opacity = 1.0 / (1.0 + np.exp(-scene.opacity_logit))
    mean_grad = grad_accum["sum"] / max(grad_accum["count"], 1)

    keep = opacity >= config.prune_opacity
    hot = (mean_grad > config.densify_grad_threshold) & keep
    if n >= config.max_gaussians:
        hot[:] = False

    cache = adhered_forward(scene, mesh) if adhered \
        else detached_forward(scene)
    smax = cache["scales"].max(axis=1)
    split = hot & (smax > config.clone_scale)
    clone = hot & ~split

    fields = ["face", "bary", "log_s", "beta", "opacity_logit",
              "color_logit"] if adhered else \
        ["center", "log_s", "quat", "opacity_logit", "color_logit"]

    def take(name, mask):
        return getattr(scene, name)[mask]

    new_parts = {f: [take(f, keep)] for f in fields}
    bind_parts = None
    if not adhered:
        bind_parts = {k: [getattr(scene.binding, k)[keep]]
                      for k in ("face", "bary", "signed_height")}

    # clones: exact copies (walk/retraction separates them next step)
    if clone.any():
        for f in fields:
            new_parts[f].append(take(f, clone))
        if bind_parts is not None:
            for k in bind_parts:
                bind_parts[k].append(getattr(scene.binding, k)[clone])

    # splits: two children offset along the largest axis, shrunken scales
    if split.any():
        idx = np.nonzero(split)[0]
        j = np.argmax(cache["scales"][idx], axis=1)
        axis = np.take_along_axis(
            cache["R"][idx], j[:, None, None].repeat(3, axis=1), axis=2
        )[:, :, 0]
        offset = 0.5 * smax[idx][:, None] * axis
        centers = cache["centers"][idx]
        for sgn in (1.0, -1.0):
            child_center = centers + sgn * offset
            if adhered:
                child_bary = retract(project_points_to_faces(
                    child_center, mesh, scene.face[idx]))
                new_parts["face"].append(scene.face[idx])
                new_parts["bary"].append(child_bary)
                new_parts["log_s"].append(scene.log_s[idx] - np.log(1.6))
                new_parts["beta"].append(scene.beta[idx])
            else:
                new_parts["center"].append(child_center)
                new_parts["log_s"].append(scene.log_s[idx] - np.log(1.6))
                new_parts["quat"].append(scene.quat[idx])
                for k in bind_parts:
                    bind_parts[k].append(getattr(scene.binding, k)[idx])
            new_parts["opacity_logit"].append(scene.opacity_logit[idx])
            new_parts["color_logit"].append(scene.color_logit[idx])
        # remove the split parents (they were copied into 'keep' part)
        parent_rows = np.nonzero(split[keep])[0] if keep.any() else []
        for f in fields:
            new_parts[f][0] = np.delete(new_parts[f][0], parent_rows, axis=0)
        if bind_parts is not None:
            for k in bind_parts:
                bind_parts[k][0] = np.delete(bind_parts[k][0], parent_rows,
                                             axis=0)

    for f in fields:
        setattr(scene, f, np.concatenate(new_parts[f]))
    if bind_parts is not None:
        scene.binding = Bindings(
            face=np.concatenate(bind_parts["face"]),
            bary=np.concatenate(bind_parts["bary"]),
            signed_height=np.concatenate(bind_parts["signed_height"]),
        )

    # realign optimizer state: drop pruned/split rows, pad for children
    keep2 = keep.copy()
    if split.any():
        keep2 &= ~split
    adam.select_rows(keep2)
    added = scene.n - int(keep2.sum())
    if added > 0:
        adam.append_rows(added)

    grad_accum["sum"] = np.zeros(scene.n)
    grad_accum["count"] = 0
    return scene


# ---------------------------------------------------------------------- #
# run loop with checkpointing


def run(config: TrainConfig, dataset, out_dir=None, scene=None, mesh=None,
        adam=None, start_iter=0, rng=None, callback=None,
        n_init_gaussians=None):
    """Full two-stage training over a frame dataset.

    dataset: object with .frames list of dicts (rgb, mask, camera, pose)
    and .mesh (training template TriangleMesh). Returns (scene, mesh,
    history list of component dicts).
    """
    if not dataset.frames:
        raise ValueError("dataset has no frames")
    if mesh is None:
        mesh = dataset.mesh
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if scene is None:
        scene = init_scene(mesh, n_init_gaussians or config.n_init_gaussians,
                           rng)
    if adam is None:
        adam = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)

    grad_accum = {"sum": np.zeros(scene.n), "count": 0}
    history = []
    csv_rows = []
    densify_stop = min(int(0.8 * config.total_iters),
                       config.total_iters - 600)

    for it in range(start_iter, config.total_iters):
        if it == config.adhered_iters and isinstance(scene, AdheredGaussians):
            scene = detach(scene, mesh)
            adam.reset()
            grad_accum = {"sum": np.zeros(scene.n), "count": 0}
        stage = "adhered" if isinstance(scene, AdheredGaussians) \
            else "detached"
        frame = dataset.frames[it % len(dataset.frames)]
        scene, comps = train_step(scene, mesh, frame, config, stage, adam,
                                  it, grad_accum)
        comps["iteration"] = it
        comps["n_gaussians"] = scene.n
        history.append(comps)
        csv_rows.append(comps)

        if (config.densify_interval > 0 and it > 0
                and it % config.densify_interval == 0 and it < densify_stop):
            scene = densify_and_prune(scene, mesh, adam, grad_accum, config)

        if callback is not None:
            callback(it, stage, scene, mesh, comps)

        if out_dir and config.snapshot_interval > 0 \
                and (it + 1) % config.snapshot_interval == 0:
            save_checkpoint(os.path.join(out_dir, f"ckpt_{it + 1:06d}.bin"),
                            scene, mesh, adam, it + 1, rng, config)

    if out_dir:
        save_checkpoint(os.path.join(out_dir, "ckpt_final.bin"),
                        scene, mesh, adam, config.total_iters, rng, config)
        write_loss_csv(os.path.join(out_dir, "loss.csv"), csv_rows)
    return scene, mesh, history


def write_loss_csv(path, rows):
    keys = ["iteration", "app", "lap", "normal", "pa", "na", "total",
            "n_gaussians"]
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(str(r.get(k, "")) for k in keys) + "\n")


# ---------------------------------------------------------------------- #
# checkpoint format: little-endian binary container of named arrays

_MAGIC = b"MSPLATCK"
_VERSION = 1


def _write_array(fh, name, arr):
    arr = np.ascontiguousarray(arr)
    nb = name.encode()
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    db = arr.dtype.str.encode()
    fh.write(struct.pack("<H", len(db)))
    fh.write(db)
    fh.write(struct.pack("<B", arr.ndim))
    for s in arr.shape:
        fh.write(struct.pack("<q", s))
    fh.write(arr.tobytes())


def _read_array(fh):
    nlen = struct.unpack("<H", fh.read(2))[0]
    name = fh.read(nlen).decode()
    dlen = struct.unpack("<H", fh.read(2))[0]
    dtype = np.dtype(fh.read(dlen).decode())
    ndim = struct.unpack("<B", fh.read(1))[0]
    shape = tuple(struct.unpack("<q", fh.read(8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
    return name, arr.reshape(shape).copy()


def save_checkpoint(path, scene, mesh, adam, iteration, rng, config):
    adhered = isinstance(scene, AdheredGaussians)
    arrays = {"vertices": mesh.vertices}
    fields = ("face", "bary", "log_s", "beta", "opacity_logit",
              "color_logit") if adhered else \
        ("center", "log_s", "quat", "opacity_logit", "color_logit")
    for f in fields:
        arrays[f"g.{f}"] = getattr(scene, f)
    if not adhered:
        arrays["b.face"] = scene.binding.face
        arrays["b.bary"] = scene.binding.bary
        arrays["b.height"] = scene.binding.signed_height
    for name in adam.m:
        arrays[f"adam.m.{name}"] = adam.m[name]
        arrays[f"adam.v.{name}"] = adam.v[name]
        arrays[f"adam.t.{name}"] = np.array([adam.t[name]], dtype=np.int64)
    st = rng.bit_generator.state
    arrays["rng.state"] = np.array(
        [st["state"]["state"] & ((1 << 64) - 1),
         st["state"]["state"] >> 64,
         st["state"]["inc"] & ((1 << 64) - 1),
         st["state"]["inc"] >> 64,
         st["has_uint32"], st["uinteger"]], dtype=np.uint64)

    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<IIB", _VERSION, iteration, 0 if adhered else 1))
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        _write_array(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, mesh, config: TrainConfig):
    """Load a checkpoint; returns (scene, mesh, adam, iteration, rng).

    The mesh's vertices are replaced by the checkpointed ones.
    """
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, iteration, stage = struct.unpack("<IIB", fh.read(9))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        count = struct.unpack("<I", fh.read(4))[0]
        arrays = dict(_read_array(fh) for _ in range(count))

    mesh.set_vertices(arrays["vertices"])
    if stage == 0:
        scene = AdheredGaussians(
            face=arrays["g.face"], bary=arrays["g.bary"],
            log_s=arrays["g.log_s"], beta=arrays["g.beta"],
            opacity_logit=arrays["g.opacity_logit"],
            color_logit=arrays["g.color_logit"])
    else:
        scene = DetachedGaussians(
            center=arrays["g.center"], log_s=arrays["g.log_s"],
            quat=arrays["g.quat"],
            opacity_logit=arrays["g.opacity_logit"],
            color_logit=arrays["g.color_logit"])
        scene.binding = Bindings(face=arrays["b.face"],
                                 bary=arrays["b.bary"],
                                 signed_height=arrays["b.height"])

    adam = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
    for name, arr in arrays.items():
        if name.startswith("adam.m."):
            adam.m[name[7:]] = arr
        elif name.startswith("adam.v."):
            adam.v[name[7:]] = arr
        elif name.startswith("adam.t."):
            adam.t[name[7:]] = int(arr[0])

    rng = np.random.default_rng(0)
    s = arrays["rng.state"]
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(s[0]) | (int(s[1]) << 64),
                  "inc": int(s[2]) | (int(s[3]) << 64)},
        "has_uint32": int(s[4]), "uinteger": int(s[5]),
    }
    return scene, mesh, adam, iteration, rng


# ---------------------------------------------------------------------- #
# invariant probes (used by tests and the acceptance suite)


def stage1_invariant_residuals(scene: AdheredGaussians, mesh):
    """(max on-plane residual, min |normal dot|) for an adhered scene."""
    cache = adhered_forward(scene, mesh)
    tri0 = mesh.vertices[mesh.faces[scene.face, 0]]
    nf = mesh.face_normals[scene.face]
    resid = np.abs(np.einsum("ij,ij->i", cache["centers"] - tri0, nf))
    lock = np.abs(np.einsum("ij,ij->i", cache["R"][:, :, 0], nf))
    return float(resid.max()), float(lock.min())
