"""Numba kernels for the tile rasterizer (forward + backward).

Kernels are sequential and accumulate in fixed tile order, so output is
bitwise independent of any outer threading.
"""

from __future__ import annotations

import numba
import numpy as np

TILE = 16
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
Q_CUTOFF = 9.0  # 3-sigma ellipse cutoff, applied identically in oracles


@numba.njit(cache=True)
def count_tiles(means2d, radii, width, height):
    n = means2d.shape[0]
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    counts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        r = radii[i]
        if r <= 0:
            continue
        x0 = max(0, int(np.floor((means2d[i, 0] - r) / TILE)))
        x1 = min(tiles_x - 1, int(np.floor((means2d[i, 0] + r) / TILE)))
        y0 = max(0, int(np.floor((means2d[i, 1] - r) / TILE)))
        y1 = min(tiles_y - 1, int(np.floor((means2d[i, 1] + r) / TILE)))
        if x1 < x0 or y1 < y0:
            continue
        counts[i] = (x1 - x0 + 1) * (y1 - y0 + 1)
    return counts


@numba.njit(cache=True)
def fill_tile_keys(means2d, radii, width, height, offsets, tile_ids, splat_ids):
    """Emit (tile, splat) pairs; splats must already be depth-sorted so the
    per-tile order after a stable sort on tile id is front-to-back."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    for i in range(means2d.shape[0]):
        r = radii[i]
        if r <= 0:
            continue
        x0 = max(0, int(np.floor((means2d[i, 0] - r) / TILE)))
        x1 = min(tiles_x - 1, int(np.floor((means2d[i, 0] + r) / TILE)))
        y0 = max(0, int(np.floor((means2d[i, 1] - r) / TILE)))
        y1 = min(tiles_y - 1, int(np.floor((means2d[i, 1] + r) / TILE)))
        if x1 < x0 or y1 < y0:
            continue
        k = offsets[i]
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                tile_ids[k] = ty * tiles_x + tx
                splat_ids[k] = i
                k += 1


@numba.njit(cache=True)
def forward_kernel(means2d, conics, opacities, colors, depths,
                   tile_ptr, tile_splats, width, height, background,
                   rgb, alpha, depth_acc):
    tiles_x = (width + TILE - 1) // TILE
    n_tiles = tile_ptr.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        lo, hi = tile_ptr[tile], tile_ptr[tile + 1]
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                av = 0.0
                dv = 0.0
                for k in range(lo, hi):
                    s = tile_splats[k]
                    dx = px - means2d[s, 0]
                    dy = py - means2d[s, 1]
                    q = (conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy
                         + conics[s, 2] * dy * dy)
                    if q > Q_CUTOFF or q < 0.0:
                        continue
                    a = opacities[s] * np.exp(-0.5 * q)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    w = T * a
                    cr += w * colors[s, 0]
                    cg += w * colors[s, 1]
                    cb += w * colors[s, 2]
                    av += w
                    dv += w * depths[s]
                    T *= 1.0 - a
                    if T < T_MIN:
                        break
                rgb[py, px, 0] = cr + T * background[0]
                rgb[py, px, 1] = cg + T * background[1]
                rgb[py, px, 2] = cb + T * background[2]
                alpha[py, px] = av
                depth_acc[py, px] = dv


@numba.njit(cache=True)
def backward_kernel(means2d, conics, opacities, colors, depths,
                    tile_ptr, tile_splats, width, height, background,
                    g_rgb, g_alpha, g_depth_acc,
                    d_mean2d, d_conic, d_opacity, d_color, d_depth):
    """Recompute-forward backward pass; accumulates per-splat gradients."""
    tiles_x = (width + TILE - 1) // TILE
    n_tiles = tile_ptr.shape[0] - 1
    max_len = 0
    for tile in range(n_tiles):
        L = tile_ptr[tile + 1] - tile_ptr[tile]
        if L > max_len:
            max_len = L
    alphas = np.empty(max_len)
    used = np.empty(max_len, dtype=np.int64)

    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        lo, hi = tile_ptr[tile], tile_ptr[tile + 1]
        if hi == lo:
            continue
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                gr = g_rgb[py, px, 0]
                gg = g_rgb[py, px, 1]
                gb = g_rgb[py, px, 2]
                ga = g_alpha[py, px]
                gd = g_depth_acc[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and ga == 0.0 and gd == 0.0:
                    continue
                # forward replay
                T = 1.0
                m = 0
                for k in range(lo, hi):
                    s = tile_splats[k]
                    dx = px - means2d[s, 0]
                    dy = py - means2d[s, 1]
                    q = (conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy
                         + conics[s, 2] * dy * dy)
                    if q > Q_CUTOFF or q < 0.0:
                        continue
                    a = opacities[s] * np.exp(-0.5 * q)
                    clamped = a > ALPHA_MAX
                    if clamped:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    alphas[m] = a
                    # store splat id, negative marks the opacity clamp
                    used[m] = s + 1 if not clamped else -(s + 1)
                    m += 1
                    T *= 1.0 - a
                    if T < T_MIN:
                        break
                T_end = T
                # suffix accumulators over contributions j > i
                Sr = T_end * background[0]
                Sg = T_end * background[1]
                Sb = T_end * background[2]
                Sa = 0.0
                Sd = 0.0
                Tcur = T_end
                for i in range(m - 1, -1, -1):
                    a = alphas[i]
                    sid = used[i]
                    clamped = sid < 0
                    s = (-sid if clamped else sid) - 1
                    # T_i = prod_{j<i}(1-a_j), recovered by dividing out
                    Ti = Tcur / (1.0 - a)
                    Tcur = Ti
                    w = Ti * a
                    d_color[s, 0] += w * gr
                    d_color[s, 1] += w * gg
                    d_color[s, 2] += w * gb
                    d_depth[s] += w * gd
                    da = (gr * (Ti * colors[s, 0] - Sr / (1.0 - a))
                          + gg * (Ti * colors[s, 1] - Sg / (1.0 - a))
                          + gb * (Ti * colors[s, 2] - Sb / (1.0 - a))
                          + ga * (Ti - Sa / (1.0 - a))
                          + gd * (Ti * depths[s] - Sd / (1.0 - a)))
                    Sr += w * colors[s, 0]
                    Sg += w * colors[s, 1]
                    Sb += w * colors[s, 2]
                    Sa += w
                    Sd += w * depths[s]
                    if clamped:
                        continue
                    # a = opacity * exp(-0.5 q)
                    dx = px - means2d[s, 0]
                    dy = py - means2d[s, 1]
                    q = (conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy
                         + conics[s, 2] * dy * dy)
                    gexp = np.exp(-0.5 * q)
                    d_opacity[s] += da * gexp
                    dq = da * opacities[s] * gexp * (-0.5)
                    d_conic[s, 0] += dq * dx * dx
                    d_conic[s, 1] += dq * 2.0 * dx * dy
                    d_conic[s, 2] += dq * dy * dy
                    # d q / d mean2d = -2 Q d
                    d_mean2d[s, 0] -= dq * (2.0 * conics[s, 0] * dx
                                            + 2.0 * conics[s, 1] * dy)
                    d_mean2d[s, 1] -= dq * (2.0 * conics[s, 1] * dx
                                            + 2.0 * conics[s, 2] * dy)
