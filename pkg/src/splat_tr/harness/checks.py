"""Numerical self-checks behind ``splat-tr check <name>``.

Each check compares an implementation against an independent oracle
(finite differences, quadrature, unit-vector JVPs, direct Hellinger
evaluation) and returns a :class:`CheckResult`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import optimizer as opt
from .. import renderer
from .. import trustregion as tr
from ..residuals import ResidualChain
from ..scene import Camera, GaussianPrimitive, Scene, covariance, look_at, quat_to_rotation


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max error {self.max_error:.3e} (tolerance {self.tolerance:.1e})"


# ---------------------------------------------------------------------------
# Small seeded problems
# ---------------------------------------------------------------------------

def random_scene(rng: np.random.Generator, k: int, spread: float = 0.4) -> Scene:
    q = rng.standard_normal((k, 4))
    return Scene(rng.uniform(-spread, spread, (k, 3)), np.exp(rng.uniform(np.log(0.08), np.log(0.25), (k, 3))),
                 q / np.linalg.norm(q, axis=1, keepdims=True), rng.uniform(0.3, 0.8, k),
                 rng.uniform(0.1, 0.9, (k, 3)))


def check_problem(seed: int = 0, k: int = 8, size: int = 16, num_views: int = 2):
    """A scene, its views (targets rendered from a different scene) and a problem."""
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, k)
    target = random_scene(rng, k)
    f = 1.1 * size
    views = []
    for j in range(num_views):
        ang = 2.0 * np.pi * (j + 0.25) / num_views
        R, t = look_at([2.0 * np.cos(ang), 2.0 * np.sin(ang), 0.5], [0.0, 0.0, 0.0])
        c = (size - 1) / 2.0
        cam = Camera(f, f, c, c, size, size, R, t, None, f"check{j}", j)
        views.append(cam.with_image(renderer.rasterize(target, cam).image))
    return scene, views, opt.SplatProblem(views)


def _jvp(problem, scene, v):
    parts = []
    for cam in problem.views:
        frag = renderer.prepare(scene, cam)
        chain = ResidualChain(frag.image.reshape(cam.height, cam.width, 3), cam.image, problem.lam)
        parts.append(chain.jvp(renderer.rasterize_jvp(scene, cam, v, frag)))
    return np.concatenate(parts, axis=-1)


def _vjp(problem, scene, u):
    out, start = np.zeros(scene.dim), 0
    for cam in problem.views:
        frag = renderer.prepare(scene, cam)
        chain = ResidualChain(frag.image.reshape(cam.height, cam.width, 3), cam.image, problem.lam)
        n = chain.size
        out += renderer.rasterize_vjp(scene, cam, chain.vjp(u[start:start + n]), frag)
        start += n
    return out


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def check_grad(seed: int = 0, h: float = 1e-6, tol: float = 1e-4, threshold: float = 1e-8) -> CheckResult:
    """Full-batch VJP gradient against central differences of the objective."""
    scene, views, problem = check_problem(seed)
    x = scene.pack()
    g, _ = problem.gradient(x, np.arange(len(views)))
    fd = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd[i] = (problem.objective(xp) - problem.objective(xm)) / (2.0 * h)
    sel = np.abs(g) > threshold
    rel = np.abs(g[sel] - fd[sel]) / np.abs(g[sel])
    err = float(rel.max()) if rel.size else 0.0
    return CheckResult("grad", err, tol, err <= tol, {"coordinates": int(sel.sum()), "gradient": g, "fd": fd})


def check_adjoint(seed: int = 0, pairs: int = 20, tol: float = 1e-9) -> CheckResult:
    """``<u, J v>`` against ``<J^T u, v>`` for random pairs; error is relative to ``1 + |<u, J v>|``."""
    scene, views, problem = check_problem(seed)
    rng = np.random.default_rng(seed + 1)
    m = sum(6 * c.height * c.width for c in views)
    errs = []
    for _ in range(pairs):
        u = rng.standard_normal(m)
        v = rng.standard_normal(scene.dim)
        lhs = float(u @ _jvp(problem, scene, v))
        rhs = float(_vjp(problem, scene, u) @ v)
        errs.append(abs(lhs - rhs) / (1.0 + abs(lhs)))
    err = max(errs)
    return CheckResult("adjoint", err, tol, err <= tol, {"pairs": pairs})


def exact_diagonal(problem, scene, batch) -> np.ndarray:
    """``diag((1/m)(M/|S|) sum_j J_j^T J_j)`` from one unit-vector JVP per coordinate."""
    return problem.exact_gauss_newton_diagonal(scene.pack(), batch)


def hutchinson_samples(problem, scene, batch, n: int, rng: np.random.Generator, chunk: int = 500) -> np.ndarray:
    """``n`` single-probe Hutchinson estimates, each a JVP followed by a VJP."""
    scale = problem.num_views / (len(batch) * problem.m)
    out = np.empty((n, scene.dim))
    for start in range(0, n, chunk):
        z = opt.rademacher(rng, min(chunk, n - start), scene.dim)
        acc = np.zeros_like(z)
        for i in batch:
            acc += problem.gauss_newton_products(scene, int(i), z)
        out[start:start + len(z)] = z * acc * scale
    return out


def check_hutch(seed: int = 0, samples: int = 10_000, sigmas: float = 3.0) -> CheckResult:
    """Per-coordinate Hutchinson mean within ``sigmas`` standard errors of the exact diagonal.

    Coordinates whose samples are all identical have zero standard error;
    they are compared at floating-point resolution instead.
    """
    scene, views, problem = check_problem(seed, k=8, size=16, num_views=1)
    batch = [0]
    exact = exact_diagonal(problem, scene, batch)
    s = hutchinson_samples(problem, scene, batch, samples, np.random.default_rng(seed + 7))
    mean = s.mean(axis=0)
    se = s.std(axis=0, ddof=1) / np.sqrt(samples)
    resolution = 1e-12 * np.max(np.abs(exact)) + 1e-300
    bound = np.maximum(sigmas * se, resolution)
    z = np.abs(mean - exact) / bound
    err = float(z.max())
    return CheckResult("hutch", err, 1.0, err <= 1.0,
                       {"exact": exact, "mean": mean, "se": se, "dim": scene.dim,
                        "max_sigmas": float(np.max(np.abs(mean - exact) / np.where(se > 0, se, np.inf)))})


def quadrature_hellinger(g: tr.MassGaussian, h: tr.MassGaussian, n: int = 64, half_width: float = 6.0) -> float:
    """``1/2 * integral (sqrt(G) - sqrt(G'))^2`` on an ``n^3`` midpoint grid.

    The box is centred between the means and extends ``half_width`` of the
    largest standard deviation beyond the farther mean.
    """
    sd = max(np.sqrt(np.linalg.eigvalsh(g.cov).max()), np.sqrt(np.linalg.eigvalsh(h.cov).max()))
    c = 0.5 * (np.asarray(g.mean) + np.asarray(h.mean))
    hw = half_width * sd + 0.5 * np.max(np.abs(np.asarray(g.mean) - np.asarray(h.mean)))
    ax = -hw + (np.arange(n) + 0.5) * (2.0 * hw / n)
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3) + c

    def sqrt_density(G):
        d = pts - G.mean
        P = np.linalg.inv(G.cov)
        norm = np.sqrt((2.0 * np.pi) ** 3 * np.linalg.det(G.cov))
        return np.sqrt(G.mass / norm) * np.exp(-0.25 * np.einsum("ni,ij,nj->n", d, P, d))

    return float(0.5 * np.sum((sqrt_density(g) - sqrt_density(h)) ** 2) * (2.0 * hw / n) ** 3)


def random_mass_pair(rng: np.random.Generator):
    s1 = rng.uniform(0.3, 1.5, 3)
    s2 = s1 * np.exp(0.3 * rng.standard_normal(3))
    q1 = rng.standard_normal(4)
    q2 = q1 + 0.5 * rng.standard_normal(4)
    mu = 0.2 * rng.standard_normal(3)
    g = tr.MassGaussian(rng.uniform(0.1, 1.0), mu, covariance(GaussianPrimitive(mu, s1, q1, 0.5, [1, 1, 1])))
    mu2 = mu + 0.4 * rng.standard_normal(3)
    h = tr.MassGaussian(rng.uniform(0.1, 1.0), mu2, covariance(GaussianPrimitive(mu2, s2, q2, 0.5, [1, 1, 1])))
    return g, h


def check_hellinger(seed: int = 0, pairs: int = 100, tol: float = 1e-3, n: int = 64) -> CheckResult:
    rng = np.random.default_rng(seed)
    errs, self_err = [], 0.0
    for _ in range(pairs):
        g, h = random_mass_pair(rng)
        closed = tr.hellinger_sq(g, h)
        errs.append(abs(closed - quadrature_hellinger(g, h, n)) / quadrature_hellinger(g, h, n))
        self_err = max(self_err, abs(tr.hellinger_sq(g, g)))
    err = max(errs)
    ok = err <= tol and self_err <= 1e-12
    return CheckResult("hellinger", err, tol, ok, {"self_distance": self_err})


def random_primitive(rng: np.random.Generator) -> GaussianPrimitive:
    return GaussianPrimitive(rng.uniform(-1, 1, 3), rng.uniform(0.1, 2.0, 3), rng.standard_normal(4),
                             rng.uniform(0.05, 0.9), rng.uniform(0.05, 1.0, 3))


def certification_ratios(prim: GaussianPrimitive, eps: float, caps: tr.RadiusCaps = tr.DEFAULT_CAPS) -> dict:
    """Worst ``H^2 / (det(S) eps)`` per family for ``+-radius`` single-parameter steps."""
    radii = {
        "mean": ("mu", tr.radius_mean(prim, eps, caps.mean)),
        "scale": ("s", tr.radius_scale(prim, eps, caps.scale)),
        "rotation": ("q", tr.radius_rotation(prim, eps, caps.rotation)),
        "opacity": ("alpha", np.array([tr.radius_opacity(prim, eps, caps.opacity)])),
        "color": ("color", tr.radius_color(prim, eps, caps.color)),
    }
    out = {}
    for fam, (attr, r) in radii.items():
        worst = 0.0
        for c in range(r.size):
            for sign in (1.0, -1.0):
                p = prim.copy()
                if attr == "alpha":
                    p.alpha = prim.alpha + sign * r[0]
                    if not 0.0 < p.alpha:
                        continue
                else:
                    getattr(p, attr)[c] += sign * r[c]
                    if attr in ("s", "color") and getattr(p, attr)[c] <= 0:
                        continue
                worst = max(worst, tr.normalized_hellinger(prim, p, c if fam == "color" else None) / eps)
        out[fam] = worst
    return out


def check_tr_bounds(seed: int = 0, count: int = 1000, eps_values=(1e-6, 1e-5, 1e-4),
                    mean_tol: float = 1e-6, other_tol: float = 0.15) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = {}
    for eps in eps_values:
        for _ in range(count):
            for fam, v in certification_ratios(random_primitive(rng), eps).items():
                worst[fam] = max(worst.get(fam, 0.0), v)
    excess = max([worst["mean"] - 1.0 - mean_tol] + [worst[f] - 1.0 - other_tol for f in worst if f != "mean"])
    return CheckResult("tr-bounds", max(worst.values()), 1.0 + other_tol, excess <= 0.0, {"worst": worst})


def rotation_objective(s, q, dq) -> float:
    """``T(dq) = ||S R(q)^T R(q + dq) S^{-1}||_F^2`` with normalized rotations."""
    D = quat_to_rotation(q).T @ quat_to_rotation(q + dq)
    return float(np.sum((s[:, None] * D / s[None, :]) ** 2))


def check_beta(seed: int = 0, pairs: int = 200, h: float = 1e-4, tol: float = 1e-3) -> CheckResult:
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(pairs):
        q = rng.standard_normal(4)
        s = rng.uniform(0.1, 2.0, 3)
        beta = tr.beta_rotation_all(s, q)
        t0 = rotation_objective(s, q, np.zeros(4))
        for c in range(4):
            d = np.zeros(4)
            d[c] = h
            fd = (rotation_objective(s, q, d) - 2.0 * t0 + rotation_objective(s, q, -d)) / h ** 2
            errs.append(abs(fd - beta[c]) / abs(beta[c]))
    err = max(errs)
    return CheckResult("beta", err, tol, err <= tol)


CHECKS = {
    "grad": check_grad,
    "adjoint": check_adjoint,
    "hutch": check_hutch,
    "hellinger": check_hellinger,
    "tr-bounds": check_tr_bounds,
    "beta": check_beta,
}
