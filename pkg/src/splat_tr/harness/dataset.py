"""Synthetic multi-view datasets standing in for an SfM reconstruction.

A dataset directory holds::

    gt.ply  init.ply  train_cameras.txt  test_cameras.txt  images/NNN.png (+ .npy)

The ``.npy`` sidecars keep the rendered ground truth lossless, so the
ground-truth scene reproduces its own images exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .. import renderer
from ..scene import Camera, Scene, load_cameras, load_scene, look_at, save_cameras, save_image, save_scene


@dataclass
class DatasetConfig:
    k_gt: int = 64
    k_init: int = 96
    num_views: int = 25
    holdout_every: int = 5
    width: int = 64
    height: int = 64
    focal_factor: float = 1.2      # focal length in units of image width
    ring_radius: float = 2.5
    ring_heights: tuple = (0.6, 1.4)
    sigma_init: float = 0.05
    seed: int = 0


def ring_cameras(cfg: DatasetConfig) -> list[Camera]:
    """Cameras evenly spaced on a ring around the origin, alternating height."""
    cams = []
    f = cfg.focal_factor * cfg.width
    for j in range(cfg.num_views):
        ang = 2.0 * np.pi * j / cfg.num_views
        z = cfg.ring_heights[j % len(cfg.ring_heights)]
        eye = np.array([cfg.ring_radius * np.cos(ang), cfg.ring_radius * np.sin(ang), z])
        R, t = look_at(eye, np.zeros(3))
        cams.append(Camera(f, f, (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0, cfg.width, cfg.height,
                           R, t, None, f"images/{j:03d}.png", j))
    return cams


def split_views(cams, holdout_every: int):
    """Every ``holdout_every``-th camera (index 0, n, 2n, ...) is held out."""
    test = [c for i, c in enumerate(cams) if i % holdout_every == 0]
    train = [c for i, c in enumerate(cams) if i % holdout_every != 0]
    return train, test


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def sample_gt_scene(rng: np.random.Generator, k: int) -> Scene:
    means = rng.uniform(-0.5, 0.5, (k, 3))
    scales = np.exp(rng.uniform(np.log(0.02), np.log(0.2), (k, 3)))
    quats = random_quaternions(rng, k)
    opac = rng.uniform(0.3, 0.9, k)
    colors = rng.uniform(0.1, 1.0, (k, 3))
    return Scene(means, scales, quats, opac, colors)


def init_scene(rng: np.random.Generator, gt: Scene, k_init: int, sigma: float) -> Scene:
    """Jittered ground-truth positions with isotropic, identity-rotation splats.

    When ``k_init`` exceeds the ground-truth count, positions are reused
    cyclically (each copy receives its own jitter).
    """
    src = gt.means[np.arange(k_init) % gt.num_splats]
    means = src + sigma * rng.standard_normal(src.shape)
    if k_init > 1:
        d, _ = cKDTree(means).query(means, k=min(4, k_init))
        nn = np.sqrt(np.mean(d[:, 1:] ** 2, axis=1))
    else:
        nn = np.full(1, 0.1)
    s = np.clip(nn, 0.01, 0.2)
    scales = np.repeat(s[:, None], 3, axis=1)
    quats = np.tile([0.0, 0.0, 0.0, 1.0], (k_init, 1))
    return Scene(means, scales, quats, np.full(k_init, 0.5), np.full((k_init, 3), 0.5))


def scene_extent(cams) -> float:
    """1.1 times the largest camera distance from the mean camera center."""
    centers = np.stack([c.center for c in cams])
    return 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))


def generate(out_dir, cfg: DatasetConfig = DatasetConfig()) -> Path:
    """Sample, render and write a dataset; returns the directory."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from None
    rng = np.random.default_rng(cfg.seed)
    gt = sample_gt_scene(rng, cfg.k_gt)
    init = init_scene(rng, gt, cfg.k_init, cfg.sigma_init)
    cams = ring_cameras(cfg)
    for cam in cams:
        img = renderer.rasterize(gt, cam).image
        save_image(out / cam.image_name, img, sidecar=True)
    save_scene(gt, out / "gt.ply")
    save_scene(init, out / "init.ply")
    train, test = split_views(cams, cfg.holdout_every)
    save_cameras(train, out / "train_cameras.txt")
    save_cameras(test, out / "test_cameras.txt")
    return out


@dataclass
class Dataset:
    gt: Scene
    init: Scene
    train: list
    test: list

    @property
    def extent(self) -> float:
        return scene_extent(self.train + self.test)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / "train_cameras.txt").exists():
        raise FileNotFoundError(f"{path} is not a dataset directory (no train_cameras.txt)")
    return Dataset(load_scene(path / "gt.ply"), load_scene(path / "init.ply"),
                   load_cameras(path / "train_cameras.txt"), load_cameras(path / "test_cameras.txt"))
