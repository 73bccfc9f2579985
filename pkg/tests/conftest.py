from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from splat_tr import renderer  # noqa: E402
from splat_tr.scene import Camera, Scene, look_at  # noqa: E402


def make_camera(size=16, eye=(0.0, -2.5, 0.6), target=(0.0, 0.0, 0.0), image=None, focal=1.1, cid=0):
    R, t = look_at(eye, target)
    f = focal * size
    c = (size - 1) / 2.0
    return Camera(f, f, c, c, size, size, R, t, image, f"cam{cid}", cid)


def random_scene(rng, k, spread=0.4):
    q = rng.standard_normal((k, 4))
    return Scene(rng.uniform(-spread, spread, (k, 3)), np.exp(rng.uniform(np.log(0.08), np.log(0.25), (k, 3))),
                 q / np.linalg.norm(q, axis=1, keepdims=True), rng.uniform(0.3, 0.8, k),
                 rng.uniform(0.1, 0.9, (k, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_problem():
    """Eight splats, two 16x16 views whose targets come from another scene."""
    rng = np.random.default_rng(7)
    scene = random_scene(rng, 8)
    target = random_scene(rng, 8)
    views = []
    for j, eye in enumerate([(0.0, -2.5, 0.6), (2.2, 1.0, 0.4)]):
        cam = make_camera(16, eye, cid=j)
        views.append(cam.with_image(renderer.rasterize(target, cam).image))
    return scene, views
