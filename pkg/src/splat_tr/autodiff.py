"""Forward-mode automatic differentiation with dual numbers.

A :class:`Dual` carries a primal ``value`` and a ``tangent`` holding the
directional derivative along a seed direction. Both fields may be numpy
arrays. The tangent may carry extra *leading* axes on top of the value's
shape, one per stacked seed direction, so ``value`` of shape ``(K,)`` with
``tangent`` of shape ``(10, K)`` propagates ten directions at once through
elementwise code.

The module-level functions (:func:`exp`, :func:`sqrt`, :func:`minimum`, ...)
accept plain floats/arrays as well as duals, which lets the renderer and the
loss be written once and evaluated either on floats or on duals.
"""

from __future__ import annotations

from typing import Any

import numpy as np

__all__ = [
    "Dual",
    "seed_direction",
    "value_of",
    "tangent_of",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "minimum",
    "maximum",
    "where",
    "exclusive_cumprod",
    "isfinite",
]


class Dual:
    """A (value, tangent) pair obeying the chain rule under arithmetic."""

    __slots__ = ("value", "tangent")
    __array_priority__ = 1000  # make ndarray <op> Dual defer to Dual

    def __init__(self, value: Any, tangent: Any = 0.0):
        self.value = np.asarray(value, dtype=np.float64)
        self.tangent = np.asarray(tangent, dtype=np.float64)

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def constant(value: Any) -> "Dual":
        return Dual(value, np.zeros_like(np.asarray(value, dtype=np.float64)))

    def __repr__(self) -> str:
        return f"Dual({self.value!r}, {self.tangent!r})"

    def __iter__(self):
        raise TypeError("Dual is not iterable; index components explicitly")

    def __getitem__(self, idx) -> "Dual":
        # Index the value axes; leading tangent-only axes pass through.
        extra = self.tangent.ndim - self.value.ndim
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.value[idx], self.tangent[(slice(None),) * extra + idx])

    @property
    def shape(self):
        return self.value.shape

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.tangent + other.tangent)
        return Dual(self.value + other, self.tangent)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value - other.value, self.tangent - other.tangent)
        return Dual(self.value - other, self.tangent)

    def __rsub__(self, other):
        return Dual(other - self.value, -self.tangent)

    def __neg__(self):
        return Dual(-self.value, -self.tangent)

    def __pos__(self):
        return self

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.value * other.value,
                self.tangent * other.value + self.value * other.tangent,
            )
        return Dual(self.value * other, self.tangent * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        # Division by a zero value yields non-finite entries; callers check.
        with np.errstate(divide="ignore", invalid="ignore"):
            if isinstance(other, Dual):
                q = self.value / other.value
                return Dual(q, (self.tangent - q * other.tangent) / other.value)
            return Dual(self.value / other, self.tangent / other)

    def __rtruediv__(self, other):
        with np.errstate(divide="ignore", invalid="ignore"):
            q = other / self.value
            return Dual(q, -q * self.tangent / self.value)

    def __pow__(self, n):
        if not isinstance(n, (int, np.integer)):
            raise TypeError("Dual only supports integer powers")
        n = int(n)
        if n == 0:
            return Dual.constant(np.ones_like(self.value))
        with np.errstate(divide="ignore", invalid="ignore"):
            return Dual(self.value**n, n * self.value ** (n - 1) * self.tangent)

    # Comparisons act on primal values only.
    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)

    def sum(self, axis=None) -> "Dual":
        """Sum over value axes (``axis`` indexes the value's own axes)."""
        extra = self.tangent.ndim - self.value.ndim
        if axis is None:
            axes = tuple(range(self.value.ndim))
        else:
            axes = tuple(np.atleast_1d(axis))
            axes = tuple(a % self.value.ndim for a in axes)
        return Dual(
            self.value.sum(axis=axes),
            self.tangent.sum(axis=tuple(a + extra for a in axes)),
        )


def value_of(x: Any) -> np.ndarray:
    return x.value if isinstance(x, Dual) else np.asarray(x, dtype=np.float64)


def tangent_of(x: Any) -> np.ndarray:
    """Tangent of ``x``; exactly zero for constants."""
    if isinstance(x, Dual):
        return x.tangent
    return np.zeros_like(np.asarray(x, dtype=np.float64))


def seed_direction(x, v) -> Dual:
    """Pair a parameter vector with a direction: ``Dual(x_k, v_k)``."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if x.shape != v.shape[v.ndim - x.ndim :] or v.ndim < x.ndim:
        raise ValueError(f"direction shape {v.shape} does not match parameters {x.shape}")
    return Dual(x.copy(), v.copy())


def exp(x):
    if isinstance(x, Dual):
        e = np.exp(x.value)
        return Dual(e, e * x.tangent)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        with np.errstate(divide="ignore", invalid="ignore"):
            return Dual(np.log(x.value), x.tangent / x.value)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(x)


def sqrt(x):
    if isinstance(x, Dual):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.sqrt(x.value)
            return Dual(r, x.tangent / (2.0 * r))
    with np.errstate(invalid="ignore"):
        return np.sqrt(x)


def absolute(x):
    """|x| with the subgradient convention abs'(0) = 0."""
    if isinstance(x, Dual):
        return Dual(np.abs(x.value), np.sign(x.value) * x.tangent)
    return np.abs(x)


def where(cond, a, b):
    """Select elementwise; ``cond`` is evaluated on primal values only."""
    cond = np.asarray(cond, dtype=bool)
    if isinstance(a, Dual) or isinstance(b, Dual):
        av, bv = value_of(a), value_of(b)
        at, bt = tangent_of(a), tangent_of(b)
        return Dual(np.where(cond, av, bv), np.where(cond, at, bt))
    return np.where(cond, a, b)


def minimum(a, b):
    """Elementwise min; at a tie the derivative follows ``a``."""
    return where(value_of(a) <= value_of(b), a, b)


def maximum(a, b):
    """Elementwise max; at a tie the derivative follows ``a``."""
    return where(value_of(a) >= value_of(b), a, b)


def exclusive_cumprod(x, axis: int = 0):
    """``out[i] = prod_{j<i} x[j]`` along ``axis`` (value axes for duals).

    The dual tangent uses ``d out[i] = out[i] * sum_{j<i} dx[j] / x[j]``, so
    ``x`` must be bounded away from zero (the renderer guarantees
    ``x = 1 - alpha >= 0.01``).
    """
    v = value_of(x)
    axis = axis % v.ndim
    ones = np.ones_like(np.take(v, [0], axis=axis))
    cp = np.cumprod(np.concatenate([ones, v], axis=axis), axis=axis)
    out = np.delete(cp, -1, axis=axis)
    if not isinstance(x, Dual):
        return out
    extra = x.tangent.ndim - v.ndim
    rel = x.tangent / v
    zeros = np.zeros_like(np.take(rel, [0], axis=axis + extra))
    cs = np.cumsum(np.concatenate([zeros, rel], axis=axis + extra), axis=axis + extra)
    cs = np.delete(cs, -1, axis=axis + extra)
    return Dual(out, out * cs)


def isfinite(x) -> bool:
    if isinstance(x, Dual):
        return bool(np.all(np.isfinite(x.value)) and np.all(np.isfinite(x.tangent)))
    return bool(np.all(np.isfinite(x)))
