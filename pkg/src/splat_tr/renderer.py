"""Differentiable alpha-blending rasterizer.

Three passes share one set of *frozen branch decisions* computed from the
primal parameters: the depth order, near-plane culling, the 3-sigma box
test, the ``alpha_bar < 1/255`` skip, the ``0.99`` clamp and early
termination once transmittance would drop below ``1e-4``. Tangents and
adjoints flow only through the branch the primal took, which makes the
forward-mode JVP and the reverse-mode VJP exact transposes of each other.

Pixel centers sit at integer pixel coordinates; ``image[v, u]`` is the pixel
at column ``u`` and row ``v``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .scene import Camera, Scene, Z_NEAR, layout_offsets, project_components

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_STOP = 1e-4
BOX_SIGMA = 3.0


class RenderError(FloatingPointError):
    """Raised when a parameter or an output is not finite."""


@dataclass
class RenderSettings:
    background: tuple = (0.0, 0.0, 0.0)
    z_near: float = Z_NEAR
    alpha_clamp: float = ALPHA_CLAMP
    alpha_skip: float = ALPHA_SKIP
    t_stop: float = T_STOP


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class RenderedImage:
    image: np.ndarray          # (H, W, 3)
    transmittance: np.ndarray  # (H, W) final transmittance


@dataclass
class FragmentList:
    """Primal pass state for one (scene, camera) pair.

    ``order`` holds the indices of visible splats sorted by depth (ties by
    index); every ``(K_vis, P)`` array is in that order.
    """

    order: np.ndarray
    culled: np.ndarray
    depth: np.ndarray
    px: np.ndarray
    py: np.ndarray
    mask: np.ndarray        # contributes at this pixel (box, skip, termination)
    pass_clamp: np.ndarray  # alpha_bar taken from alpha*g rather than the clamp
    g: np.ndarray           # Gaussian footprint exp(power)
    dx: np.ndarray
    dy: np.ndarray
    conic: tuple            # (a, b, c) of the inverse 2D covariance, per visible splat
    alpha_bar: np.ndarray   # effective alpha (0 where masked)
    T: np.ndarray           # transmittance in front of each splat
    T_final: np.ndarray
    image: np.ndarray       # (P, 3)


def _pixel_grid(cam: Camera):
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    return u.ravel().astype(np.float64), v.ravel().astype(np.float64)


def _check_finite(scene: Scene) -> None:
    x = np.concatenate([scene.means, scene.scales, scene.quats, scene.opacities[:, None], scene.colors], axis=1)
    bad = np.flatnonzero(~np.isfinite(x).all(axis=1))
    if bad.size:
        raise RenderError(f"non-finite parameter in splat {bad[0]}")


def _components(arr, idx):
    return [arr[idx, c] for c in range(arr.shape[1])]


def _footprint(u, v, sxx, sxy, syy, px, py):
    """Per (splat, pixel) offsets, conic and Gaussian exponent (float or dual)."""
    det = sxx * syy - sxy * sxy
    inv_det = 1.0 / det
    ca, cb, cc = syy * inv_det, -sxy * inv_det, sxx * inv_det
    dx = px[None, :] - u[:, None]
    dy = py[None, :] - v[:, None]
    power = (-0.5) * (ca[:, None] * dx * dx + cc[:, None] * dy * dy) - cb[:, None] * dx * dy
    return dx, dy, (ca, cb, cc), power


def prepare(scene: Scene, cam: Camera, settings: RenderSettings = DEFAULT_SETTINGS) -> FragmentList:
    """Run the primal pass and record every branch decision."""
    _check_finite(scene)
    px, py = _pixel_grid(cam)
    k = scene.num_splats
    all_idx = np.arange(k)
    u, v, sxx, sxy, syy, z = project_components(
        _components(scene.means, all_idx), _components(scene.scales, all_idx),
        _components(scene.quats, all_idx), cam)
    z = np.asarray(z, dtype=np.float64).reshape(k)
    culled = z <= settings.z_near
    vis = np.flatnonzero(~culled)
    order = vis[np.lexsort((vis, z[vis]))]

    u, v = np.asarray(u).reshape(k)[order], np.asarray(v).reshape(k)[order]
    sxx, sxy, syy = (np.asarray(a).reshape(k)[order] for a in (sxx, sxy, syy))
    dx, dy, conic, power = _footprint(u, v, sxx, sxy, syy, px, py)
    g = np.exp(power)

    alpha = scene.opacities[order]
    raw = alpha[:, None] * g
    pass_clamp = raw <= settings.alpha_clamp
    a = np.where(pass_clamp, raw, settings.alpha_clamp)
    in_box = (np.abs(dx) <= BOX_SIGMA * np.sqrt(sxx)[:, None]) & (np.abs(dy) <= BOX_SIGMA * np.sqrt(syy)[:, None])
    mask = in_box & (a >= settings.alpha_skip)
    a = np.where(mask, a, 0.0)
    # Early termination: drop a splat (and all behind it) once the running
    # transmittance including it falls below t_stop.
    incl = np.cumprod(1.0 - a, axis=0)
    mask &= incl >= settings.t_stop
    a = np.where(mask, a, 0.0)

    T = ad.exclusive_cumprod(1.0 - a, axis=0) if len(order) else np.ones((0, px.size))
    T_final = T[-1] * (1.0 - a[-1]) if len(order) else np.ones(px.size)
    w = a * T
    colors = scene.colors[order]
    bg = np.asarray(settings.background, dtype=np.float64)
    image = w.T @ colors + T_final[:, None] * bg[None, :]
    return FragmentList(order, culled, z, px, py, mask, pass_clamp, g, dx, dy, conic, a, T, T_final, image)


def rasterize(scene: Scene, cam: Camera, settings: RenderSettings = DEFAULT_SETTINGS) -> RenderedImage:
    frag = prepare(scene, cam, settings)
    return RenderedImage(frag.image.reshape(cam.height, cam.width, 3),
                         frag.T_final.reshape(cam.height, cam.width))


def _splat_tangents(scene: Scene, v: np.ndarray):
    """Split a direction vector (or a stack of them) into per-group tangents."""
    k = scene.num_splats
    o = layout_offsets(k)
    lead = v.shape[:-1]
    return (v[..., o["means"]].reshape(*lead, k, 3), v[..., o["scales"]].reshape(*lead, k, 3),
            v[..., o["quats"]].reshape(*lead, k, 4), v[..., o["opacities"]].reshape(*lead, k),
            v[..., o["colors"]].reshape(*lead, k, 3))


def render_dual(scene: Scene, cam: Camera, v, frag: FragmentList | None = None,
                settings: RenderSettings = DEFAULT_SETTINGS) -> ad.Dual:
    """Render with dual numbers seeded along ``v``.

    ``v`` has shape ``(dim,)`` or ``(B, dim)`` for B stacked directions.
    Returns a dual image of shape ``(P, 3)`` with tangent ``(..., P, 3)``.
    """
    if frag is None:
        frag = prepare(scene, cam, settings)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != scene.dim:
        raise ValueError(f"direction has length {v.shape[-1]}, expected {scene.dim}")
    lead = v.shape[:-1]
    order = frag.order
    dm, ds, dq, da, dc = _splat_tangents(scene, v)

    def comp(arr, darr, c):
        return ad.Dual(arr[order, c], darr[..., order, c])

    means = [comp(scene.means, dm, c) for c in range(3)]
    scales = [comp(scene.scales, ds, c) for c in range(3)]
    quats = [comp(scene.quats, dq, c) for c in range(4)]
    u, vv, sxx, sxy, syy, _ = project_components(means, scales, quats, cam)
    _, _, _, power = _footprint(u, vv, sxx, sxy, syy, frag.px, frag.py)
    g = ad.exp(power)
    alpha = ad.Dual(scene.opacities[order], da[..., order])
    a = alpha[:, None] * g
    a = ad.where(frag.pass_clamp, a, settings.alpha_clamp)
    a = ad.where(frag.mask, a, 0.0)
    n = len(order)
    P = frag.px.size
    bg = np.asarray(settings.background, dtype=np.float64)
    if n == 0:
        return ad.Dual(np.broadcast_to(bg, (P, 3)).copy(), np.zeros(lead + (P, 3)))
    one_minus = 1.0 - a
    T = ad.exclusive_cumprod(one_minus, axis=0)
    T_final = T[n - 1] * one_minus[n - 1]
    w = a * T
    colors = ad.Dual(scene.colors[order], dc[..., order, :])
    img = (w[:, :, None] * colors[:, None, :]).sum(axis=0)
    return img + T_final[:, None] * bg[None, :]


def rasterize_jvp(scene: Scene, cam: Camera, v, frag: FragmentList | None = None,
                  settings: RenderSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Directional derivative of the rendered image along ``v``: ``(..., H, W, 3)``."""
    out = render_dual(scene, cam, v, frag, settings)
    lead = out.tangent.shape[:-2]
    return out.tangent.reshape(*lead, cam.height, cam.width, 3)


def _projection_jacobian(scene: Scene, cam: Camera, order: np.ndarray):
    """d(u, v, conic_a, conic_b, conic_c)/d(mean, scale, quat) per visible splat.

    Uses ten stacked forward-mode seeds; returns five arrays of shape (10, K_vis).
    """
    n = len(order)
    eye = np.eye(10)

    def comp(arr, c, base):
        return ad.Dual(arr[order, c], np.repeat(eye[base + c][:, None], n, axis=1))

    means = [comp(scene.means, c, 0) for c in range(3)]
    scales = [comp(scene.scales, c, 3) for c in range(3)]
    quats = [comp(scene.quats, c, 6) for c in range(4)]
    u, v, sxx, sxy, syy, _ = project_components(means, scales, quats, cam)
    det = sxx * syy - sxy * sxy
    inv_det = 1.0 / det
    ca, cb, cc = syy * inv_det, -sxy * inv_det, sxx * inv_det
    return [o.tangent for o in (u, v, ca, cb, cc)]


def rasterize_vjp(scene: Scene, cam: Camera, adjoint, frag: FragmentList | None = None,
                  settings: RenderSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Pull an image-space adjoint back to parameter space (``J^T adjoint``).

    Replays the blending recurrence back to front: with
    ``q_kp = <adjoint_p, color_k>`` and ``S_kp = sum_{i>k} q_ip w_ip``, the
    adjoint of ``alpha_bar_kp`` is ``q_kp T_kp - (S_kp + <adjoint_p, bg> T_final_p) / (1 - alpha_bar_kp)``.
    """
    if frag is None:
        frag = prepare(scene, cam, settings)
    G = np.asarray(adjoint, dtype=np.float64).reshape(-1, 3)
    k = scene.num_splats
    grad = np.zeros(scene.dim)
    order = frag.order
    if len(order) == 0:
        return grad
    o = layout_offsets(k)
    a, T = frag.alpha_bar, frag.T
    w = a * T
    colors = scene.colors[order]
    bg = np.asarray(settings.background, dtype=np.float64)

    g_col = w @ G                                     # (K_vis, 3)
    q = colors @ G.T                                  # (K_vis, P)
    qw = q * w
    suffix = np.cumsum(qw[::-1], axis=0)[::-1]        # inclusive suffix sums
    S = suffix - qw                                   # exclusive: i > k
    bg_term = (G @ bg) * frag.T_final                 # (P,)
    d_a = np.where(frag.mask, q * T - (S + bg_term[None, :]) / (1.0 - a), 0.0)

    live = frag.mask & frag.pass_clamp
    d_raw = np.where(live, d_a, 0.0)
    alpha = scene.opacities[order]
    g_alpha = np.sum(d_raw * frag.g, axis=1)
    d_power = d_raw * alpha[:, None] * frag.g

    dx, dy = frag.dx, frag.dy
    ca, cb, cc = frag.conic
    g_ca = -0.5 * np.sum(d_power * dx * dx, axis=1)
    g_cb = -np.sum(d_power * dx * dy, axis=1)
    g_cc = -0.5 * np.sum(d_power * dy * dy, axis=1)
    # d power / d u = ca dx + cb dy (since d dx / d u = -1)
    g_u = np.sum(d_power * (ca[:, None] * dx + cb[:, None] * dy), axis=1)
    g_v = np.sum(d_power * (cb[:, None] * dx + cc[:, None] * dy), axis=1)

    jac = _projection_jacobian(scene, cam, order)
    local = sum(jo * go[None, :] for jo, go in zip(jac, (g_u, g_v, g_ca, g_cb, g_cc)))  # (10, K_vis)

    means = grad[o["means"]].reshape(k, 3)
    scales = grad[o["scales"]].reshape(k, 3)
    quats = grad[o["quats"]].reshape(k, 4)
    opac = grad[o["opacities"]]
    cols = grad[o["colors"]].reshape(k, 3)
    means[order] = local[0:3].T
    scales[order] = local[3:6].T
    quats[order] = local[6:10].T
    opac[order] = g_alpha
    cols[order] = g_col
    return grad
