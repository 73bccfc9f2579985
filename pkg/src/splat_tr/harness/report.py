"""CSV and figure output for benchmark and single-Gaussian runs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Ellipse  # noqa: E402

from .. import renderer  # noqa: E402
from ..scene import Scene, project  # noqa: E402
from .single import FAMILIES, Trajectory  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "grid.linestyle": "--",
    "legend.fontsize": 8,
}
COLORS = {"3dgs2tr": "tab:blue", "adam": "tab:red", "adam-tr": "tab:green"}
LABELS = {"3dgs2tr": "3DGS²-TR", "adam": "ADAM", "adam-tr": "ADAM-TR"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_psnr_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]], path, marks=(1000, 2000)):
    """Held-out PSNR against iteration for each optimizer."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for kind, (it, p) in curves.items():
            ax.plot(it, p, color=COLORS.get(kind), label=LABELS.get(kind, kind), lw=1.4)
        for m in marks:
            ax.axvline(m, color="0.6", lw=0.8, ls=":")
        ax.set_xlabel("iteration")
        ax.set_ylabel("held-out PSNR [dB]")
        ax.legend(loc="lower right")
        _save(fig, path)


def write_single_csv(trajs: dict[str, Trajectory], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "iter", "psnr", *FAMILIES, "param_max", "joint", "eps"])
        for kind, tr in trajs.items():
            for t in range(len(tr.psnr)):
                if t == 0:
                    motion = [0.0] * (len(FAMILIES) + 2)
                    eps = -1.0
                else:
                    m = tr.motion[t - 1]
                    motion = [m[f] for f in FAMILIES] + [m["param_max"], m["joint"]]
                    eps = -1.0 if np.isnan(tr.eps[t - 1]) else tr.eps[t - 1]
                w.writerow([kind, t, repr(float(tr.psnr[t]))] + [repr(float(v)) for v in motion] + [repr(float(eps))])


def plot_motion(trajs: dict[str, Trajectory], path):
    """Per-step normalized Hellinger motion (log scale) with the trust-region level."""
    with plt.rc_context(STYLE):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        for kind, tr in trajs.items():
            it = np.arange(1, len(tr.motion) + 1)
            pm = np.array([m["param_max"] for m in tr.motion])
            a0.semilogy(it, np.maximum(pm, 1e-20), color=COLORS.get(kind), label=LABELS.get(kind, kind), lw=1.0)
            a1.plot(np.arange(len(tr.psnr)), tr.psnr, color=COLORS.get(kind), label=LABELS.get(kind, kind))
            if not np.all(np.isnan(tr.eps)):
                a0.semilogy(it, tr.eps, color="k", ls="--", lw=0.8, label="ε")
        a0.set_xlabel("iteration")
        a0.set_ylabel("max single-parameter H²/det S")
        a0.legend()
        a1.set_xlabel("iteration")
        a1.set_ylabel("PSNR [dB]")
        a1.axhline(40.0, color="0.5", ls=":", lw=0.8)
        a1.legend(loc="lower right")
        _save(fig, path)


def plot_frame_strip(trajs: dict[str, Trajectory], gt, cam, path, frames=(0, 5, 20, 50, 150, 500)):
    """Renders along each trajectory; the ground-truth 2-sigma footprint is outlined."""
    mu2d, sigma2d, _, culled = project(gt, cam)
    frames = [f for f in frames if f < min(len(t.primitives) for t in trajs.values())]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(trajs), len(frames), figsize=(1.5 * len(frames), 1.6 * len(trajs)),
                                 squeeze=False)
        for r, (kind, tr) in enumerate(trajs.items()):
            for c, f in enumerate(frames):
                ax = axes[r, c]
                img = renderer.rasterize(Scene.from_primitives([tr.primitives[f]]), cam).image
                ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
                if not culled:
                    vals, vecs = np.linalg.eigh(sigma2d)
                    ang = np.degrees(np.arctan2(vecs[1, 1], vecs[0, 1]))
                    ax.add_patch(Ellipse(mu2d, 4 * np.sqrt(vals[1]), 4 * np.sqrt(vals[0]), angle=ang,
                                         fill=False, ec="tab:orange", lw=1.0))
                ax.set_xticks([])
                ax.set_yticks([])
                ax.grid(False)
                if r == 0:
                    ax.set_title(f"t = {f}")
                if c == 0:
                    ax.set_ylabel(LABELS.get(kind, kind))
        _save(fig, path)
