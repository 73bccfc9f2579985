"""3DGS²-TR (diagonal Gauss-Newton with Hellinger trust regions) and ADAM baselines.

One 3DGS²-TR iteration:

1. sample a view batch ``S1`` and form ``g_t = (1/m)(M/|S1|) sum_i J_i^T f_i``;
2. ``g_hat = theta1 * g_hat + (1 - theta1) * g_t``;
3. when ``t mod l == 1``: sample ``S2`` and Rademacher probes, estimate
   ``D_t`` with Hutchinson, and ``D_hat = theta2 * D_hat + (1 - theta2) * D_t``;
   otherwise keep ``D_hat``;
4. ``dx = -g_hat / max(D_hat, gamma)``, clip to the per-parameter radii
   ``eta = SHD(x_t, eps_t)`` and apply, then project onto the parameter boxes.

Random draws come from one ``numpy.random.Generator`` in a fixed order per
step: the ``S1`` batch, then (on refresh steps) the ``S2`` batch, then the
``nu`` probe vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import renderer
from .residuals import ResidualChain
from .scene import ALPHA_MAX, ALPHA_MIN, C_MAX, C_MIN, S_MIN, Scene, clamp_parameters, group_of_index, layout_offsets
from .trustregion import RadiusCaps, TrustRegionSchedule, clip_step, eps_at, shd_radii

KINDS = ("3dgs2tr", "adam", "adam-tr")


class OptimizerError(FloatingPointError):
    """A gradient, curvature estimate or update went non-finite."""


@dataclass
class OptimizerConfig:
    kind: str = "3dgs2tr"
    lam: float = 0.2
    batch_grad: int = 1          # |S1|
    batch_hutch: int = 1         # |S2|
    nu: int = 1                  # Hutchinson probes per refresh
    interval: int = 10           # l
    theta1: float = 0.9
    theta2: float = 0.999
    gamma_d: float = 1e-12
    eps_start: float = 1e-6
    eps_end: float = 1e-8
    total_steps: int = 2000
    caps: RadiusCaps = field(default_factory=RadiusCaps)
    # ADAM baseline
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    position_lr_steps: int | None = None   # decay horizon; defaults to total_steps
    scene_extent: float = 1.0
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    # parameter boxes
    s_min: float = S_MIN
    alpha_min: float = ALPHA_MIN
    alpha_max: float = ALPHA_MAX
    c_min: float = C_MIN
    c_max: float = C_MAX

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}; choose from {KINDS}")
        if self.interval < 1 or self.nu < 1 or self.batch_grad < 1 or self.batch_hutch < 1:
            raise ValueError("interval, nu and batch sizes must be >= 1")

    @property
    def schedule(self) -> TrustRegionSchedule:
        return TrustRegionSchedule(self.eps_start, self.eps_end, max(self.total_steps - 1, 1))

    def eps(self, t: int) -> float:
        """Trust-region parameter at 1-based iteration ``t``."""
        return eps_at(self.schedule, t - 1)


@dataclass
class OptimizerState:
    g_hat: np.ndarray
    D_hat: np.ndarray
    t: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    @classmethod
    def create(cls, dim: int, seed: int = 0) -> "OptimizerState":
        return cls(np.zeros(dim), np.zeros(dim), 0, np.random.default_rng(seed), np.zeros(dim), np.zeros(dim))


def ema(prev, new, theta: float) -> np.ndarray:
    return theta * np.asarray(prev) + (1.0 - theta) * np.asarray(new)


def sample_batch(rng: np.random.Generator, num_views: int, size: int) -> np.ndarray:
    """Uniform sample of distinct view indices, in draw order."""
    if not 1 <= size <= num_views:
        raise ValueError(f"batch size {size} invalid for {num_views} views")
    return rng.choice(num_views, size=size, replace=False)


def rademacher(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    return rng.integers(0, 2, size=(count, dim)).astype(np.float64) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# The splat least-squares problem
# ---------------------------------------------------------------------------

class SplatProblem:
    """Residuals of a set of training views as a function of the flat parameters."""

    def __init__(self, views, lam: float = 0.2, settings: renderer.RenderSettings = renderer.DEFAULT_SETTINGS,
                 caps: RadiusCaps | None = None, bounds: dict | None = None):
        self.views = list(views)
        if not self.views:
            raise ValueError("need at least one training view")
        self.lam = lam
        self.settings = settings
        self.caps = caps or RadiusCaps()
        self.bounds = bounds or {}
        self.m = sum(6 * c.height * c.width for c in self.views)

    @property
    def num_views(self) -> int:
        return len(self.views)

    def _chain(self, scene, cam):
        frag = renderer.prepare(scene, cam, self.settings)
        img = frag.image.reshape(cam.height, cam.width, 3)
        return frag, ResidualChain(img, cam.image, self.lam)

    def view_gradient(self, scene: Scene, i: int):
        """``(J_i^T f_i, ||f_i||^2)`` for view ``i``."""
        cam = self.views[i]
        frag, chain = self._chain(scene, cam)
        adj = chain.half_sq_norm_adjoint()
        g = renderer.rasterize_vjp(scene, cam, adj, frag, self.settings)
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient from view {i} ({cam.image_name or cam.id})")
        return g, chain.sq_norm()

    def gradient(self, x, batch):
        """Unbiased gradient estimate and the batch objective ``||f_S||^2 / 2 m_S``."""
        scene = Scene.unpack(x)
        g = np.zeros(x.size)
        sq, m_batch = 0.0, 0
        for i in batch:
            gi, si = self.view_gradient(scene, int(i))
            g += gi
            sq += si
            m_batch += 6 * self.views[i].height * self.views[i].width
        g *= self.num_views / (len(batch) * self.m)
        return g, sq / (2.0 * m_batch)

    def gauss_newton_products(self, scene: Scene, i: int, probes: np.ndarray) -> np.ndarray:
        """``J_i^T J_i z`` for each row ``z`` of ``probes``."""
        cam = self.views[i]
        frag, chain = self._chain(scene, cam)
        d_img = renderer.rasterize_jvp(scene, cam, probes, frag, self.settings)
        u = chain.jvp(d_img)
        out = np.empty_like(probes)
        for j in range(probes.shape[0]):
            out[j] = renderer.rasterize_vjp(scene, cam, chain.vjp(u[j]), frag, self.settings)
        return out

    def hutchinson(self, x, batch, probes):
        """``(1/m)(M/|S2|)(1/nu) sum_i z_i * (sum_j J_j^T J_j z_i)``."""
        scene = Scene.unpack(x)
        probes = np.atleast_2d(probes)
        acc = np.zeros((probes.shape[0], x.size))
        for i in batch:
            acc += self.gauss_newton_products(scene, int(i), probes)
        d = np.mean(probes * acc, axis=0) * self.num_views / (len(batch) * self.m)
        if not np.all(np.isfinite(d)):
            raise OptimizerError("non-finite Hutchinson estimate")
        return d

    def exact_gauss_newton_diagonal(self, x, batch=None):
        """Exact ``diag((1/m)(M/|S|) sum_j J_j^T J_j)`` from unit-vector JVPs."""
        scene = Scene.unpack(x)
        batch = range(self.num_views) if batch is None else batch
        batch = list(batch)
        eye = np.eye(x.size)
        diag = np.zeros(x.size)
        for i in batch:
            cam = self.views[i]
            frag, chain = self._chain(scene, cam)
            for start in range(0, x.size, 32):
                cols = chain.jvp(renderer.rasterize_jvp(scene, cam, eye[start:start + 32], frag, self.settings))
                diag[start:start + 32] += np.sum(cols * cols, axis=-1)
        return diag * self.num_views / (len(batch) * self.m)

    def radii(self, x, eps):
        return shd_radii(Scene.unpack(x), eps, self.caps)

    def clamp(self, x):
        return clamp_parameters(x, x.size // 14, **self.bounds)

    def objective(self, x) -> float:
        scene = Scene.unpack(x)
        sq = 0.0
        for cam in self.views:
            _, chain = self._chain(scene, cam)
            sq += chain.sq_norm()
        return sq / (2.0 * self.m)


def stochastic_gradient(scene: Scene, views, batch, lam: float = 0.2,
                        settings: renderer.RenderSettings = renderer.DEFAULT_SETTINGS) -> np.ndarray:
    return SplatProblem(views, lam, settings).gradient(scene.pack(), batch)[0]


def hutchinson_diag(scene: Scene, views, batch, nu: int = 1, rng: np.random.Generator | None = None,
                    lam: float = 0.2, probes=None,
                    settings: renderer.RenderSettings = renderer.DEFAULT_SETTINGS) -> np.ndarray:
    """Hutchinson estimate of the scaled Gauss-Newton diagonal.

    ``probes`` overrides the Rademacher draws (e.g. a unit vector ``e_k``).
    """
    if probes is None:
        if nu < 1:
            raise ValueError("nu must be >= 1")
        rng = rng if rng is not None else np.random.default_rng()
        probes = rademacher(rng, nu, scene.dim)
    return SplatProblem(views, lam, settings).hutchinson(scene.pack(), batch, probes)


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

def _bounds(config: OptimizerConfig) -> dict:
    return dict(s_min=config.s_min, alpha_min=config.alpha_min, alpha_max=config.alpha_max,
                c_min=config.c_min, c_max=config.c_max)


def problem_for(views, config: OptimizerConfig, settings=renderer.DEFAULT_SETTINGS) -> SplatProblem:
    return SplatProblem(views, config.lam, settings, config.caps, _bounds(config))


def _check_update(delta, x):
    bad = np.flatnonzero(~np.isfinite(delta))
    if bad.size:
        k = x.size // 14
        group = group_of_index(int(bad[0]), k) if k else "?"
        raise OptimizerError(f"non-finite update in group {group!r} (index {bad[0]})")


def _apply(problem, x, delta, eta, t, eps, loss, g):
    clipped = delta if eta is None else clip_step(delta, eta)
    x_new = problem.clamp(x + clipped)
    diag = {
        "iter": t,
        "loss": loss,
        "gnorm": float(np.linalg.norm(g)),
        "step_pre": float(np.linalg.norm(delta)),
        "step_post": float(np.linalg.norm(clipped)),
        "clip_frac": -1.0 if eta is None else float(np.mean(np.abs(delta) > eta)) if delta.size else 0.0,
        "eps": -1.0 if eta is None else eps,
        "step": clipped,
        "eta": eta,
    }
    return x_new, diag


def step_3dgs2tr(state: OptimizerState, x: np.ndarray, problem, config: OptimizerConfig):
    """One iteration; returns ``(x_new, diagnostics)`` and updates ``state``."""
    t = state.t + 1
    batch1 = sample_batch(state.rng, problem.num_views, config.batch_grad)
    g, loss = problem.gradient(x, batch1)
    state.g_hat = ema(state.g_hat, g, config.theta1)
    refreshed = (t - 1) % config.interval == 0
    if refreshed:
        batch2 = sample_batch(state.rng, problem.num_views, config.batch_hutch)
        probes = rademacher(state.rng, config.nu, x.size)
        D = problem.hutchinson(x, batch2, probes)
        state.D_hat = ema(state.D_hat, D, config.theta2)
    delta = -state.g_hat / np.maximum(state.D_hat, config.gamma_d)
    _check_update(delta, x)
    eps = config.eps(t)
    eta = problem.radii(x, eps)
    x_new, diag = _apply(problem, x, delta, eta, t, eps, loss, g)
    diag["refreshed"] = refreshed
    state.t = t
    return x_new, diag


def adam_learning_rates(x_size: int, t: int, config: OptimizerConfig) -> np.ndarray:
    """Per-coordinate ADAM learning rates at 1-based iteration ``t``."""
    k = x_size // 14
    o = layout_offsets(k)
    horizon = config.position_lr_steps or config.total_steps
    frac = min(max((t - 1) / max(horizon - 1, 1), 0.0), 1.0)
    lr_pos = config.lr_position * (config.lr_position_final / config.lr_position) ** frac
    lr = np.empty(x_size)
    lr[o["means"]] = lr_pos * config.scene_extent
    lr[o["scales"]] = config.lr_scale
    lr[o["quats"]] = config.lr_rotation
    lr[o["opacities"]] = config.lr_opacity
    lr[o["colors"]] = config.lr_color
    return lr


def adam_direction(state: OptimizerState, g: np.ndarray, t: int, config: OptimizerConfig) -> np.ndarray:
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1 ** t)
    v_hat = state.v / (1.0 - b2 ** t)
    return -adam_learning_rates(g.size, t, config) * m_hat / (np.sqrt(v_hat) + config.adam_eps)


def step_adam(state: OptimizerState, x: np.ndarray, problem, config: OptimizerConfig, trust_region: bool = False):
    t = state.t + 1
    batch1 = sample_batch(state.rng, problem.num_views, config.batch_grad)
    g, loss = problem.gradient(x, batch1)
    delta = adam_direction(state, g, t, config)
    _check_update(delta, x)
    eps = config.eps(t)
    eta = problem.radii(x, eps) if trust_region else None
    x_new, diag = _apply(problem, x, delta, eta, t, eps, loss, g)
    state.t = t
    return x_new, diag


def step_adam_tr(state: OptimizerState, x: np.ndarray, problem, config: OptimizerConfig):
    return step_adam(state, x, problem, config, trust_region=True)


def make_step(config: OptimizerConfig):
    return {"3dgs2tr": step_3dgs2tr, "adam": step_adam, "adam-tr": step_adam_tr}[config.kind]
