"""Parameter-wise trust regions from the squared Hellinger distance.

The distance between two splats treats each as an unnormalized Gaussian
``G = Z * N(mu, Sigma)`` and uses the half-normalized convention

    H^2(G, G') = 1/2 * integral (sqrt(G) - sqrt(G'))^2
               = (Z + Z') / 2 - sqrt(Z Z') * BC,
    BC = det(S)^{1/4} det(S')^{1/4} / det(Sbar)^{1/2} * exp(-dmu^T Sbar^{-1} dmu / 8),

with ``Sbar = (Sigma + Sigma') / 2``. Radii bound ``H^2 / det(S) <= eps`` for
a change of one parameter at a time. Mass is the opacity times
``det(Sigma)^{1/2}`` for geometry and opacity, and opacity times the channel
intensity times ``det(Sigma)^{1/2}`` for color.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .scene import GaussianPrimitive, Scene, covariance, covariance_from, layout_offsets, unnormalized_rotation

BETA_FLOOR = 1e-12


class MassGaussian(NamedTuple):
    mass: float
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class TrustRegionSchedule:
    eps_start: float = 1e-6
    eps_end: float = 1e-8
    total_steps: int = 1

    def __post_init__(self):
        if not (self.eps_start >= self.eps_end > 0):
            raise ValueError("need eps_start >= eps_end > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def eps_at(schedule: TrustRegionSchedule, t: float) -> float:
    """Geometric interpolation from ``eps_start`` (t=0) to ``eps_end`` (t=total)."""
    frac = min(max(t / schedule.total_steps, 0.0), 1.0)
    eps = schedule.eps_start * (schedule.eps_end / schedule.eps_start) ** frac
    return float(min(max(eps, schedule.eps_end), schedule.eps_start))


@dataclass
class RadiusCaps:
    """Upper bounds on radii.

    The rotation cap is relative to ``|q|``: a quaternion step comparable to
    ``|q|`` itself leaves the range where the second-order expansion behind
    the rotation bound holds.
    """

    mean: float = 1.0
    scale: float = 1.0
    rotation: float = 0.25
    opacity: float = 1.0
    color: float = 1.0


DEFAULT_CAPS = RadiusCaps()


# ---------------------------------------------------------------------------
# Squared Hellinger distance
# ---------------------------------------------------------------------------

def _check_spd(cov):
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not symmetric positive definite") from None


def hellinger_sq(g: MassGaussian, h: MassGaussian) -> float:
    """Closed-form squared Hellinger distance of two unnormalized Gaussians."""
    c1 = np.asarray(g.cov, dtype=np.float64)
    c2 = np.asarray(h.cov, dtype=np.float64)
    _check_spd(c1)
    _check_spd(c2)
    z1, z2 = float(g.mass), float(h.mass)
    if z1 < 0 or z2 < 0:
        raise ValueError("masses must be non-negative")
    dmu = np.asarray(g.mean, dtype=np.float64) - np.asarray(h.mean, dtype=np.float64)
    avg = 0.5 * (c1 + c2)
    ld1 = np.linalg.slogdet(c1)[1]
    ld2 = np.linalg.slogdet(c2)[1]
    lda = np.linalg.slogdet(avg)[1]
    maha = float(dmu @ np.linalg.solve(avg, dmu))
    log_bc = 0.25 * (ld1 + ld2) - 0.5 * lda - maha / 8.0
    # Split so no large terms cancel: mass mismatch + overlap deficit.
    h2 = 0.5 * (np.sqrt(z1) - np.sqrt(z2)) ** 2 + np.sqrt(z1 * z2) * (-np.expm1(log_bc))
    return float(max(h2, 0.0))


def mass_gaussian(prim: GaussianPrimitive, channel: int | None = None) -> MassGaussian:
    """Mass form of a primitive: opacity mass, or opacity*color for ``channel``."""
    cov = covariance(prim)
    det_s = float(np.prod(prim.s))
    mass = prim.alpha * det_s
    if channel is not None:
        mass *= prim.color[channel]
    return MassGaussian(mass, prim.mu, cov)


def normalized_hellinger(before: GaussianPrimitive, after: GaussianPrimitive, channel: int | None = None) -> float:
    """``H^2(G, G') / det(S)`` with ``S`` the scale of ``before``."""
    h2 = hellinger_sq(mass_gaussian(before, channel), mass_gaussian(after, channel))
    return h2 / float(np.prod(before.s))


# ---------------------------------------------------------------------------
# Per-family radii
# ---------------------------------------------------------------------------

def _log_term(eps, alpha):
    """``-ln(1 - eps/alpha)``; ``inf`` where the constraint is vacuous."""
    alpha = np.asarray(alpha, dtype=np.float64)
    ratio = eps / alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -np.log1p(-np.minimum(ratio, 1.0))
    return np.where(eps >= alpha * (1.0 - 1e-12), np.inf, out)


def radius_mean(prim: GaussianPrimitive, eps: float, cap: float = DEFAULT_CAPS.mean) -> np.ndarray:
    """Per-axis bound on a mean change.

    Uses the conditional variance ``1 / (Sigma^{-1})_cc``, which equals
    ``Sigma_cc`` for axis-aligned splats and keeps the bound exact for
    rotated ones.
    """
    prec = np.linalg.inv(covariance(prim))
    r = np.sqrt(8.0 * _log_term(eps, prim.alpha) / np.diag(prec))
    return np.minimum(r, cap)


def radius_scale(prim: GaussianPrimitive, eps: float, cap: float = DEFAULT_CAPS.scale) -> np.ndarray:
    return np.minimum(np.sqrt(2.0 * prim.s ** 2 * eps / prim.alpha), cap)


def radius_opacity(prim: GaussianPrimitive, eps: float, cap: float = DEFAULT_CAPS.opacity) -> float:
    return float(min(np.sqrt(4.0 * prim.alpha * eps), cap))


def radius_color(prim: GaussianPrimitive, eps: float, cap: float = DEFAULT_CAPS.color) -> np.ndarray:
    return np.minimum(np.sqrt(4.0 * prim.color * eps / prim.alpha), cap)


def rotation_error_derivatives(q):
    """First and second derivatives of ``E = R^T R(q + a e_c) - I`` at ``a = 0``.

    ``q`` is ``(..., 4)``; returns two arrays of shape ``(..., 4, 3, 3)``
    indexed by the perturbed component ``c`` (x, y, z, w).
    """
    q = np.asarray(q, dtype=np.float64)
    r2 = np.sum(q * q, axis=-1)[..., None, None, None]
    Rt = unnormalized_rotation(q)[..., None, :, :]  # (..., 1, 3, 3)
    R = Rt / r2
    eye = np.eye(4)
    Re = unnormalized_rotation(eye)                  # (4, 3, 3): R~(e_c)
    # R~ is a quadratic form in q, so R~(q + a e) = R~ + a dR + a^2/2 d2R with
    dR = unnormalized_rotation(q[..., None, :] + eye) - Rt - Re
    d2R = 2.0 * Re
    qc = q[..., :, None, None]
    RT = np.swapaxes(R, -1, -2)
    dE = RT @ (dR / r2 - 2.0 * qc * Rt / r2 ** 2)
    d2E = RT @ (d2R / r2 - 4.0 * qc * dR / r2 ** 2 + (8.0 * qc ** 2 / r2 ** 3 - 2.0 / r2 ** 2) * Rt)
    return dE, d2E


def rotation_error_derivatives_fd(q, h: float = 1e-4):
    """Central-difference counterpart of :func:`rotation_error_derivatives` (debug)."""
    from .scene import quat_to_rotation

    q = np.asarray(q, dtype=np.float64)
    R = quat_to_rotation(q)
    dE = np.empty(q.shape[:-1] + (4, 3, 3))
    d2E = np.empty_like(dE)
    for c in range(4):
        e = np.zeros(4)
        e[c] = h
        Ep = np.swapaxes(R, -1, -2) @ quat_to_rotation(q + e)
        Em = np.swapaxes(R, -1, -2) @ quat_to_rotation(q - e)
        dE[..., c, :, :] = (Ep - Em) / (2 * h)
        d2E[..., c, :, :] = (Ep - 2 * np.eye(3) + Em) / h ** 2
    return dE, d2E


def beta_rotation_all(scales, quats, finite_difference: bool = False) -> np.ndarray:
    """Curvature constants ``beta_c`` for stacked splats: ``(..., 4)``.

    ``beta_c = 2 ||S dE_c S^{-1}||_F^2 + 2 tr(d2E_c)``, the second derivative
    of ``T(a) = ||S R^T R(q + a e_c) S^{-1}||_F^2`` at ``a = 0``.
    """
    s = np.asarray(scales, dtype=np.float64)
    derivs = rotation_error_derivatives_fd if finite_difference else rotation_error_derivatives
    dE, d2E = derivs(quats)
    ratio = s[..., None, :, None] / s[..., None, None, :]  # s_i / s_j
    frob = np.sum((dE * ratio) ** 2, axis=(-1, -2))
    tr = np.trace(d2E, axis1=-2, axis2=-1)
    return 2.0 * frob + 2.0 * tr


def beta_rotation(prim: GaussianPrimitive, axis: int) -> float:
    """``beta_c`` for one primitive and component ``axis`` in {0: x, 1: y, 2: z, 3: w}."""
    return float(beta_rotation_all(prim.s, prim.q)[axis])


def _rotation_radius(beta, alpha, qnorm, eps, cap):
    log_term = _log_term(eps, alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(8.0 * log_term / beta)
    vacuous = (beta * qnorm ** 2 <= BETA_FLOOR) | ~np.isfinite(r)
    limit = cap * qnorm
    return np.where(vacuous, limit, np.minimum(r, limit))


def radius_rotation(prim: GaussianPrimitive, eps: float, cap: float = DEFAULT_CAPS.rotation) -> np.ndarray:
    beta = beta_rotation_all(prim.s, prim.q)
    return _rotation_radius(beta, prim.alpha, np.linalg.norm(prim.q), eps, cap)


def shd_radii(scene: Scene, eps: float, caps: RadiusCaps = DEFAULT_CAPS) -> np.ndarray:
    """Radius vector aligned with the scene's parameter layout."""
    k = scene.num_splats
    o = layout_offsets(k)
    eta = np.empty(scene.dim)
    if k == 0:
        return eta
    alpha = scene.opacities
    cov = covariance_from(scene.scales, scene.quats)
    prec_diag = np.diagonal(np.linalg.inv(cov), axis1=-2, axis2=-1)
    log_term = _log_term(eps, alpha)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        r_mean = np.sqrt(8.0 * log_term / prec_diag)
    eta[o["means"]] = np.minimum(np.nan_to_num(r_mean, nan=np.inf), caps.mean).ravel()
    eta[o["scales"]] = np.minimum(np.sqrt(2.0 * scene.scales ** 2 * eps / alpha[:, None]), caps.scale).ravel()
    beta = beta_rotation_all(scene.scales, scene.quats)
    qnorm = np.linalg.norm(scene.quats, axis=1)[:, None]
    eta[o["quats"]] = _rotation_radius(beta, alpha[:, None], qnorm, eps, caps.rotation).ravel()
    eta[o["opacities"]] = np.minimum(np.sqrt(4.0 * alpha * eps), caps.opacity)
    eta[o["colors"]] = np.minimum(np.sqrt(4.0 * scene.colors * eps / alpha[:, None]), caps.color).ravel()
    return eta


def clip_step(delta, eta) -> np.ndarray:
    """Elementwise clamp of a step to ``[-eta, +eta]``."""
    eta = np.asarray(eta, dtype=np.float64)
    return np.clip(np.asarray(delta, dtype=np.float64), -eta, eta)


def family_slices(k: int) -> dict[str, slice]:
    """Layout slices keyed by trust-region family name."""
    o = layout_offsets(k)
    return {"mean": o["means"], "scale": o["scales"], "rotation": o["quats"],
            "opacity": o["opacities"], "color": o["colors"]}
