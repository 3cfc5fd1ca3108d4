"""Image and geometry evaluation metrics."""

from __future__ import annotations

import numpy as np

from .losses import ssim as _ssim

PSNR_CAP = 99.0  # reported for (near-)identical images


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB between images in [0, peak]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse <= (peak ** 2) * 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return 10.0 * np.log10(peak ** 2 / mse)


def ssim(a, b):
    return _ssim(a, b)


def evaluate_frames(pairs):
    """Per-frame and mean PSNR/SSIM over (rendered, target) image pairs."""
    rows = []
    for i, (out, gt) in enumerate(pairs):
        rows.append({"frame": i, "psnr": psnr(out, gt), "ssim": ssim(out, gt)})
    mean = {"frame": "mean",
            "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows]))}
    return rows, mean


def write_metrics_csv(path, rows, mean):
    with open(path, "w") as fh:
        fh.write("frame,psnr,ssim\n")
        for r in rows + [mean]:
            fh.write(f"{r['frame']},{r['psnr']:.4f},{r['ssim']:.6f}\n")


def format_metrics_table(rows, mean):
    lines = [f"{'frame':>6}  {'psnr':>8}  {'ssim':>8}"]
    for r in rows + [mean]:
        lines.append(f"{str(r['frame']):>6}  {r['psnr']:8.2f}  "
                     f"{r['ssim']:8.4f}")
    return "\n".join(lines)


def chamfer_fraction_within(dists, threshold):
    """Fraction of sampled distances not exceeding the threshold."""
    dists = np.asarray(dists)
    if len(dists) == 0:
        return 0.0
    return float(np.mean(dists <= threshold))
