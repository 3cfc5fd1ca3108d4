"""Command-line interface: dataset generation, training, rendering,
animation, mesh extraction, evaluation and the walking benchmark."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import metrics, scene, trainer, tsdf
from .losses import LossWeights
from .mesh import save_obj
from .renderer import render
from .skinning import load_pose_sequence
from .trainer import TrainConfig


def _parse_value(text, typ):
    if typ is bool:
        return text.lower() in ("1", "true", "yes")
    return typ(text)


def load_train_config(path=None, overrides=()):
    """Plain key=value config file with CLI overrides.

    Loss weights use dotted keys: weights.mask, weights.ssim, ...
    """
    entries = {}
    if path:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#")[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                k, v = line.split("=", 1)
                entries[k.strip()] = v.strip()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set {item!r}: expected key=value")
        k, v = item.split("=", 1)
        entries[k.strip()] = v.strip()

    cfg_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    w_fields = {f.name: f for f in dataclasses.fields(LossWeights)}
    kwargs, weights = {}, {}
    for k, v in entries.items():
        if k.startswith("weights."):
            wk = k[8:]
            if wk not in w_fields:
                raise ValueError(f"unknown loss weight {wk!r}")
            weights[wk] = float(v)
        elif k in cfg_fields:
            f = cfg_fields[k]
            typ = {"int": int, "float": float}.get(f.type, None)
            if typ is None:
                typ = float if isinstance(getattr(TrainConfig(), k), float) \
                    else int
            kwargs[k] = _parse_value(v, typ)
        else:
            raise ValueError(f"unknown config key {k!r}")
    if weights:
        kwargs["weights"] = LossWeights(**weights)
    return TrainConfig(**kwargs)


def _load_scene(args, ds):
    cfg = load_train_config(getattr(args, "config", None),
                            getattr(args, "set", None) or ())
    return trainer.load_checkpoint(args.checkpoint, ds.mesh, cfg)


# ---------------------------------------------------------------------- #
# subcommands


def cmd_generate(args):
    ds = scene.generate_dataset(
        n_bones=args.bones, n_pose_frames=args.frames,
        n_train_views=args.views, n_val_views=args.val_views,
        image_size=args.size, n_theta=args.theta, n_phi=args.phi,
        seed=args.seed)
    scene.write_dataset(args.out_dir, ds, meta={
        "seed": args.seed, "bones": args.bones, "frames": args.frames,
        "views": args.views, "val_views": args.val_views,
        "size": args.size})
    print(f"wrote {args.out_dir}: {len(ds.frames)} train / "
          f"{len(ds.val_frames)} val frames, "
          f"{len(ds.gt_mesh.faces)} gt faces")
    return 0


def cmd_train(args):
    cfg = load_train_config(args.config, args.set or ())
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    ds = scene.load_dataset(args.data)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.resume:
        sc, mesh, adam, it, rng = trainer.load_checkpoint(
            args.resume, ds.mesh, cfg)
        out = trainer.run(cfg, ds, out_dir=args.out_dir, scene=sc,
                          mesh=mesh, adam=adam, start_iter=it, rng=rng)
    else:
        out = trainer.run(cfg, ds, out_dir=args.out_dir)
    sc, mesh, history = out
    print(f"trained {cfg.total_iters} iterations, "
          f"{sc.n} gaussians, final loss {history[-1]['total']:.4f}")
    return 0


def _frames_of(ds, split):
    return ds.frames if split == "train" else ds.val_frames


def cmd_render(args):
    ds = scene.load_dataset(args.data)
    sc, mesh, _, _, _ = _load_scene(args, ds)
    frames = _frames_of(ds, args.split)
    ids = range(len(frames)) if args.frames is None else \
        [int(x) for x in args.frames.split(",")]
    os.makedirs(args.out_dir, exist_ok=True)
    for i in ids:
        fr = frames[i]
        fb, _ = render(sc, mesh, fr["pose"], fr["camera"])
        scene.save_png(os.path.join(args.out_dir, f"{i:04d}.rgb.png"),
                       fb.rgb)
        scene.save_png(os.path.join(args.out_dir, f"{i:04d}.alpha.png"),
                       fb.alpha)
        scene.save_depth_png(
            os.path.join(args.out_dir, f"{i:04d}.depth.png"), fb.depth)
    print(f"rendered {len(list(ids))} frames to {args.out_dir}")
    return 0


def cmd_animate(args):
    ds = scene.load_dataset(args.data)
    sc, mesh, _, _, _ = _load_scene(args, ds)
    cam = _frames_of(ds, args.split)[args.camera_frame]["camera"]
    if args.poses:
        poses = load_pose_sequence(args.poses, mesh.skin_weights.shape[1])
    else:
        poses = [fr["pose"] for fr in ds.frames]
    os.makedirs(args.out_dir, exist_ok=True)
    if not poses:
        print("warning: empty pose sequence, nothing to render",
              file=sys.stderr)
        return 0
    for i, pose in enumerate(poses):
        fb, _ = render(sc, mesh, pose, cam)
        scene.save_png(os.path.join(args.out_dir, f"{i:04d}.png"), fb.rgb)
    print(f"animated {len(poses)} frames to {args.out_dir}")
    return 0


def cmd_extract_mesh(args):
    ds = scene.load_dataset(args.data)
    sc, mesh, _, _, _ = _load_scene(args, ds)
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    radius = args.radius or 2.5 * float((hi - lo).max())
    cams = tsdf.sample_sphere_cameras(
        args.views, radius, center, fx=args.size * 1.3,
        width=args.size, height=args.size)

    def render_depth(cam):
        fb, _ = render(sc, mesh, None, cam)
        return fb.depth, fb.alpha

    vol = tsdf.fuse_views(render_depth, cams, lo, hi,
                          resolution=args.resolution)
    verts, faces = tsdf.extract_mesh(vol)
    save_obj(args.out, verts, faces)
    print(f"extracted {len(verts)} vertices / {len(faces)} faces "
          f"(voxel {vol.voxel_size:.5f} m) -> {args.out}")
    return 0


def cmd_eval(args):
    ds = scene.load_dataset(args.data)
    sc, mesh, _, _, _ = _load_scene(args, ds)
    frames = _frames_of(ds, args.split)
    pairs = []
    for fr in frames:
        fb, _ = render(sc, mesh, fr["pose"], fr["camera"])
        pairs.append((fb.rgb, fr["rgb"]))
    rows, mean = metrics.evaluate_frames(pairs)
    print(metrics.format_metrics_table(rows, mean))
    if args.csv:
        metrics.write_metrics_csv(args.csv, rows, mean)
    return 0


def cmd_bench_walk(args):
    from .binding import Bindings, closest_point_on_triangles, walk_batch

    rng = np.random.default_rng(args.seed)
    # ~13k faces at the defaults; capsule figure at higher tessellation
    mesh, _ = scene.build_figure(5, n_theta=args.theta, n_phi=args.phi)
    n = args.gaussians
    f = rng.integers(0, len(mesh.faces), n)
    bary = rng.dirichlet(np.ones(3), n)
    tri = mesh.vertices[mesh.faces[f]]
    centers = np.einsum("ni,nij->nj", bary, tri)
    k = int(args.outside * n)
    centers[:k] += (tri[:k, 1] - tri[:k, 0]) * 1.5
    b = Bindings(face=f, bary=bary, signed_height=np.zeros(n))

    walk_batch(centers[:64], mesh,
               Bindings(face=f[:64].copy(), bary=bary[:64],
                        signed_height=np.zeros(64)))  # compile warm-up
    ts = []
    for _ in range(args.reps):
        t0 = time.perf_counter()
        walk_batch(centers, mesh, b)
        ts.append(time.perf_counter() - t0)
    walk_ms = float(np.median(ts) * 1000)

    # exhaustive full-mesh nearest-face search, per-point rate measured on
    # a subsample and scaled to the full batch
    sub = centers[:args.exhaustive_points]
    t0 = time.perf_counter()
    best = np.full(len(sub), np.inf)
    for lo in range(0, len(mesh.faces), 512):
        for j in range(lo, min(lo + 512, len(mesh.faces))):
            tri_j = np.broadcast_to(mesh.vertices[mesh.faces[j]],
                                    (len(sub), 3, 3))
            d, _, _ = closest_point_on_triangles(sub, tri_j)
            np.minimum(best, d, out=best)
    ex_ms = (time.perf_counter() - t0) / len(sub) * n * 1000

    print(f"mesh faces: {len(mesh.faces)}  gaussians: {n}  "
          f"outside: {args.outside:.0%}")
    print(f"walk_batch median: {walk_ms:.3f} ms over {args.reps} reps")
    print(f"exhaustive (scaled from {len(sub)} points): {ex_ms:.1f} ms")
    print(f"speedup: {ex_ms / walk_ms:.0f}x")
    return 0


# ---------------------------------------------------------------------- #


def build_parser():
    p = argparse.ArgumentParser(prog="meshsplat")
    p.add_argument("--threads", type=int,
                   help="numba thread count (results are identical for any "
                        "value; compute kernels are sequential)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bones", type=int, default=5, choices=(2, 5))
    g.add_argument("--frames", type=int, default=60)
    g.add_argument("--views", type=int, default=1)
    g.add_argument("--val-views", type=int, default=8)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--theta", type=int, default=16)
    g.add_argument("--phi", type=int, default=6)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the two-stage optimization")
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    def scene_args(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE")

    r = sub.add_parser("render", help="render dataset frames")
    scene_args(r)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--split", default="val", choices=("train", "val"))
    r.add_argument("--frames", help="comma-separated frame ids")
    r.set_defaults(func=cmd_render)

    a = sub.add_parser("animate", help="render a pose sequence")
    scene_args(a)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--poses", help="pose sequence file (defaults to the "
                                   "training poses)")
    a.add_argument("--split", default="val", choices=("train", "val"))
    a.add_argument("--camera-frame", type=int, default=0)
    a.set_defaults(func=cmd_animate)

    e = sub.add_parser("extract-mesh", help="TSDF fusion + marching cubes")
    scene_args(e)
    e.add_argument("--out", required=True)
    e.add_argument("--resolution", type=int, default=192)
    e.add_argument("--views", type=int, default=24)
    e.add_argument("--size", type=int, default=256)
    e.add_argument("--radius", type=float)
    e.set_defaults(func=cmd_extract_mesh)

    v = sub.add_parser("eval", help="PSNR/SSIM against dataset frames")
    scene_args(v)
    v.add_argument("--split", default="val", choices=("train", "val"))
    v.add_argument("--csv")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-walk", help="walking performance benchmark")
    b.add_argument("--gaussians", type=int, default=30000)
    b.add_argument("--theta", type=int, default=36)
    b.add_argument("--phi", type=int, default=18)
    b.add_argument("--outside", type=float, default=0.05)
    b.add_argument("--reps", type=int, default=50)
    b.add_argument("--exhaustive-points", type=int, default=2000)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench_walk)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads:
        import numba
        numba.set_num_threads(
            max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        print(json.dumps({"error": type(exc).__name__,
                          "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
