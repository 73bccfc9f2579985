"""Least-squares residuals and image metrics.

Each view contributes ``6 H W`` residuals: ``3 H W`` L1 entries followed by
``3 H W`` D-SSIM entries, channel-major inside each block. Every entry is the
square root of one per-pixel, per-channel loss component, floored at
``RESIDUAL_FLOOR`` so the root stays differentiable at a perfect fit.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad

RESIDUAL_FLOOR = 1e-12
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0


@lru_cache(maxsize=16)
def _filter_matrix(n: int) -> np.ndarray:
    """(n, n) matrix applying the 11-tap Gaussian with half-sample reflection.

    Padding mirrors about the pixel edge (``d c b a | a b c d``), matching
    ``scipy.ndimage`` ``mode='reflect'``.
    """
    offs = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1)
    taps = np.exp(-0.5 * (offs / SSIM_SIGMA) ** 2)
    taps /= taps.sum()
    F = np.zeros((n, n))
    for i in range(n):
        for o, wgt in zip(offs, taps):
            j = i + o
            # fold repeatedly for windows wider than the image
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            F[i, j] += wgt
    F.setflags(write=False)
    return F


def _filt(x):
    """Separable windowed mean of an ``(..., H, W, C)`` array (or dual)."""
    if isinstance(x, ad.Dual):
        return ad.Dual(_filt(x.value), _filt(x.tangent))
    h, w = x.shape[-3], x.shape[-2]
    Fh, Fw = _filter_matrix(h), _filter_matrix(w)
    return np.einsum("ij,...jkc,lk->...ilc", Fh, x, Fw, optimize=True)


def _filt_T(x):
    h, w = x.shape[-3], x.shape[-2]
    Fh, Fw = _filter_matrix(h), _filter_matrix(w)
    return np.einsum("ji,...jkc,kl->...ilc", Fh, x, Fw, optimize=True)


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel, per-channel SSIM of two ``(H, W, 3)`` images.

    ``a`` may be a dual; the result is then a dual as well.
    """
    b = np.asarray(b, dtype=np.float64)
    if ad.value_of(a).shape != b.shape:
        raise ValueError(f"shape mismatch {ad.value_of(a).shape} vs {b.shape}")
    mu_a, mu_b = _filt(a), _filt(b)
    saa = _filt(a * a) - mu_a * mu_a
    sbb = _filt(b * b) - mu_b * mu_b
    sab = _filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def ssim_vjp(a: np.ndarray, b: np.ndarray, adjoint: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`ssim_map` with respect to ``a``."""
    mu_a, mu_b = _filt(a), _filt(b)
    saa = _filt(a * a) - mu_a * mu_a
    sbb = _filt(b * b) - mu_b * mu_b
    sab = _filt(a * b) - mu_a * mu_b
    A1 = 2.0 * mu_a * mu_b + SSIM_C1
    A2 = 2.0 * sab + SSIM_C2
    B1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    B2 = saa + sbb + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    GS = adjoint * S
    # dS/S = dA1/A1 + dA2/A2 - dB1/B1 - dB2/B2, expressed through
    # d mu_a, d filt(a b) and d filt(a^2).
    c_mu = GS * (2.0 * mu_b / A1 - 2.0 * mu_b / A2 - 2.0 * mu_a / B1 + 2.0 * mu_a / B2)
    c_ab = GS * (2.0 / A2)
    c_aa = GS * (-1.0 / B2)
    return _filt_T(c_mu) + b * _filt_T(c_ab) + 2.0 * a * _filt_T(c_aa)


def _channel_major(x):
    """(…, H, W, 3) -> (…, 3 H W) flattening with channel as slowest axis."""
    return np.moveaxis(x, -1, -3).reshape(*x.shape[:-3], -1)


def _from_channel_major(x, h, w):
    return np.moveaxis(x.reshape(*x.shape[:-1], 3, h, w), -3, -1)


def _check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")


def residuals(rendered, gt, lam: float = 0.2) -> np.ndarray:
    """Residual vector of one view (length ``6 H W``)."""
    _check_lambda(lam)
    rendered = np.asarray(getattr(rendered, "image", rendered), dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {gt.shape}")
    l1 = (1.0 - lam) * np.abs(rendered - gt)
    ds = lam * (1.0 - ssim_map(rendered, gt)) / 2.0
    u = np.concatenate([_channel_major(l1), _channel_major(ds)])
    return np.sqrt(np.maximum(u, RESIDUAL_FLOOR))


class ResidualChain:
    """Residuals of one view with their linearization w.r.t. the image.

    Holds the branch decisions (L1 sign, floor activity) of the primal so the
    JVP and VJP through the square root are exact transposes.
    """

    def __init__(self, rendered: np.ndarray, gt: np.ndarray, lam: float = 0.2):
        _check_lambda(lam)
        self.a = np.asarray(rendered, dtype=np.float64)
        self.b = np.asarray(gt, dtype=np.float64)
        if self.a.shape != self.b.shape:
            raise ValueError(f"shape mismatch {self.a.shape} vs {self.b.shape}")
        self.lam = lam
        self.h, self.w = self.a.shape[:2]
        diff = self.a - self.b
        self.sign = np.sign(diff)
        u_l1 = (1.0 - lam) * np.abs(diff)
        self.ssim = ssim_map(self.a, self.b)
        u_ds = lam * (1.0 - self.ssim) / 2.0
        self.live_l1 = u_l1 >= RESIDUAL_FLOOR
        self.live_ds = u_ds >= RESIDUAL_FLOOR
        self.f_l1 = np.sqrt(np.maximum(u_l1, RESIDUAL_FLOOR))
        self.f_ds = np.sqrt(np.maximum(u_ds, RESIDUAL_FLOOR))

    @property
    def f(self) -> np.ndarray:
        return np.concatenate([_channel_major(self.f_l1), _channel_major(self.f_ds)])

    @property
    def size(self) -> int:
        return 6 * self.h * self.w

    def sq_norm(self) -> float:
        return float(np.sum(self.f_l1 ** 2) + np.sum(self.f_ds ** 2))

    def jvp(self, d_image: np.ndarray) -> np.ndarray:
        """Residual tangent for an image tangent ``(..., H, W, 3)``."""
        d_image = np.asarray(d_image, dtype=np.float64)
        d_l1 = np.where(self.live_l1, (1.0 - self.lam) * self.sign * d_image / (2.0 * self.f_l1), 0.0)
        d_ssim = ssim_map(ad.Dual(self.a, d_image), self.b).tangent
        d_ds = np.where(self.live_ds, (-self.lam / 2.0) * d_ssim / (2.0 * self.f_ds), 0.0)
        return np.concatenate([_channel_major(d_l1), _channel_major(d_ds)], axis=-1)

    def vjp(self, w: np.ndarray) -> np.ndarray:
        """Image adjoint for a residual adjoint ``w`` of length ``6 H W``."""
        n = 3 * self.h * self.w
        w_l1 = _from_channel_major(np.asarray(w[:n]), self.h, self.w)
        w_ds = _from_channel_major(np.asarray(w[n:]), self.h, self.w)
        g = np.where(self.live_l1, (1.0 - self.lam) * self.sign * w_l1 / (2.0 * self.f_l1), 0.0)
        s_adj = np.where(self.live_ds, (-self.lam / 2.0) * w_ds / (2.0 * self.f_ds), 0.0)
        return g + ssim_vjp(self.a, self.b, s_adj)

    def half_sq_norm_adjoint(self) -> np.ndarray:
        """``d (||f||^2 / 2) / d image``: the image adjoint giving ``J^T f``.

        Equal to ``vjp(f)`` but without dividing by the residuals.
        """
        g = np.where(self.live_l1, 0.5 * (1.0 - self.lam) * self.sign, 0.0)
        s_adj = np.where(self.live_ds, -0.25 * self.lam, 0.0)
        return g + ssim_vjp(self.a, self.b, s_adj)


def objective(scene, views, lam: float = 0.2, settings=None) -> float:
    """``(1 / 2m) ||f||^2`` over all views, ``m = 6 H W M``."""
    from .renderer import DEFAULT_SETTINGS, rasterize

    views = list(views)
    if not views:
        raise ValueError("objective needs at least one view")
    settings = settings or DEFAULT_SETTINGS
    total, m = 0.0, 0
    for cam in views:
        img = rasterize(scene, cam, settings).image
        f = residuals(img, cam.image, lam)
        total += float(f @ f)
        m += f.size
    return total / (2.0 * m)


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def mean_ssim(a, b) -> float:
    return float(np.mean(ssim_map(np.asarray(a, dtype=np.float64), b)))
