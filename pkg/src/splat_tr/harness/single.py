"""Single-Gaussian fitting: how far each optimizer moves the splat per step.

A ground-truth splat is perturbed and then refit with ADAM and with
3DGS²-TR from the same start. Every step is scored two ways, both as
normalized squared Hellinger distances ``H^2 / det(S)``:

``param_max``
    the largest distance caused by changing one parameter alone, which is
    the quantity the trust-region radii certify;
``joint``
    the distance of the full step, taking the worst of the opacity mass
    and the three color-channel masses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import optimizer as opt
from .. import renderer
from ..residuals import psnr
from ..scene import Camera, GaussianPrimitive, Scene, look_at, rotation_to_quat
from ..trustregion import RadiusCaps, normalized_hellinger

FAMILIES = ("mean", "scale", "rotation", "opacity", "color")


@dataclass
class SingleFitConfig:
    iterations: int = 500
    sigma: float = 0.05            # perturbation, in units of the scene extent
    extent: float = 1.0
    size: int = 32
    num_views: int = 4
    distance: float = 1.5
    eps_start: float = 1e-4
    eps_end: float = 1e-6
    lr_scale_factor: float = 1.0   # multiplies every ADAM learning rate
    seed: int = 0
    caps: RadiusCaps = field(default_factory=RadiusCaps)


def gt_primitive() -> GaussianPrimitive:
    R = np.array(look_at([1.0, 2.0, 0.5], [0.0, 0.0, 0.0])[0])
    return GaussianPrimitive([0.0, 0.0, 0.0], [0.15, 0.08, 0.05], rotation_to_quat(R.T), 0.8, [0.9, 0.5, 0.2])


def views_for(prim: GaussianPrimitive, cfg: SingleFitConfig) -> list[Camera]:
    scene = Scene.from_primitives([prim])
    f = 1.2 * cfg.size
    cams = []
    for j in range(cfg.num_views):
        ang = 2.0 * np.pi * j / cfg.num_views
        eye = cfg.distance * np.array([np.cos(ang), np.sin(ang), 0.4 * (-1) ** j])
        R, t = look_at(eye, prim.mu)
        c = (cfg.size - 1) / 2.0
        cam = Camera(f, f, c, c, cfg.size, cfg.size, R, t, None, f"view{j}", j)
        cams.append(cam.with_image(renderer.rasterize(scene, cam).image))
    return cams


def perturb(prim: GaussianPrimitive, rng: np.random.Generator, sigma: float, extent: float) -> GaussianPrimitive:
    """Gaussian noise of scale ``sigma``: absolute (times extent) on the mean, relative elsewhere."""
    p = prim.copy()
    if sigma == 0:
        return p
    p.mu = p.mu + sigma * extent * rng.standard_normal(3)
    p.s = p.s * np.exp(sigma * rng.standard_normal(3))
    q = p.q + sigma * rng.standard_normal(4)
    p.q = q / np.linalg.norm(q)
    p.alpha = float(np.clip(p.alpha * np.exp(sigma * rng.standard_normal()), 0.05, 0.95))
    p.color = np.clip(p.color * np.exp(sigma * rng.standard_normal(3)), 0.05, 1.0)
    return p


def _family_changes(before: GaussianPrimitive, after: GaussianPrimitive):
    """Yield ``(family, primitive with one parameter moved, channel)``."""
    for i in range(3):
        p = before.copy(); p.mu[i] = after.mu[i]
        yield "mean", p, None
        p = before.copy(); p.s[i] = after.s[i]
        yield "scale", p, None
        p = before.copy(); p.color[i] = after.color[i]
        yield "color", p, i
    for i in range(4):
        p = before.copy(); p.q[i] = after.q[i]
        yield "rotation", p, None
    p = before.copy(); p.alpha = after.alpha
    yield "opacity", p, None


def step_motion(before: GaussianPrimitive, after: GaussianPrimitive) -> dict[str, float]:
    """Per-family single-parameter maxima plus the joint distance."""
    out = {f: 0.0 for f in FAMILIES}
    for fam, p, ch in _family_changes(before, after):
        out[fam] = max(out[fam], normalized_hellinger(before, p, ch))
    out["param_max"] = max(out[f] for f in FAMILIES)
    out["joint"] = max([normalized_hellinger(before, after)] +
                       [normalized_hellinger(before, after, c) for c in range(3)])
    return out


@dataclass
class Trajectory:
    kind: str
    primitives: list          # length iterations + 1
    psnr: np.ndarray          # mean over views, length iterations + 1
    motion: list              # dicts from step_motion, length iterations
    eps: np.ndarray           # trust-region parameter per step (nan for ADAM)


def run(kind: str, start: GaussianPrimitive, views, cfg: SingleFitConfig) -> Trajectory:
    oc = opt.OptimizerConfig(kind=kind, eps_start=cfg.eps_start, eps_end=cfg.eps_end,
                             total_steps=cfg.iterations, caps=cfg.caps, scene_extent=cfg.extent)
    for name in ("lr_position", "lr_position_final", "lr_scale", "lr_rotation", "lr_opacity", "lr_color"):
        setattr(oc, name, getattr(oc, name) * cfg.lr_scale_factor)
    problem = opt.problem_for(views, oc)
    step = opt.make_step(oc)
    state = opt.OptimizerState.create(14, cfg.seed)
    x = Scene.from_primitives([start]).pack()

    def score(x):
        scene = Scene.unpack(x)
        return float(np.mean([psnr(renderer.rasterize(scene, c).image, c.image) for c in views]))

    prims, ps, motion, eps = [start.copy()], [score(x)], [], []
    for _ in range(cfg.iterations):
        x, diag = step(state, x, problem, oc)
        p = Scene.unpack(x).primitive(0)
        motion.append(step_motion(prims[-1], p))
        prims.append(p)
        ps.append(score(x))
        eps.append(diag["eps"] if diag["eta"] is not None else np.nan)
    return Trajectory(kind, prims, np.array(ps), motion, np.array(eps))


def fit_single(cfg: SingleFitConfig = SingleFitConfig()) -> dict[str, Trajectory]:
    gt = gt_primitive()
    views = views_for(gt, cfg)
    start = perturb(gt, np.random.default_rng(cfg.seed), cfg.sigma, cfg.extent)
    return {kind: run(kind, start, views, cfg) for kind in ("adam", "3dgs2tr")}
