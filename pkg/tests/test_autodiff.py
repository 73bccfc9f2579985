from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat_tr import autodiff as ad
from splat_tr.autodiff import Dual


class TestElementary:
    def test_product_rule(self):
        out = Dual(2.0, 1.0) * Dual(3.0, 0.0)
        assert (out.value, out.tangent) == (6.0, 3.0)

    def test_exp_at_zero(self):
        out = ad.exp(Dual(0.0, 1.0))
        assert (out.value, out.tangent) == (1.0, 1.0)

    def test_sqrt(self):
        out = ad.sqrt(Dual(4.0, 2.0))
        assert (out.value, out.tangent) == (2.0, 0.5)

    def test_division_and_log(self):
        out = ad.log(Dual(2.0, 1.0) / Dual(4.0, 1.0))
        # d/dt log((2+t)/(4+t)) at 0 = 1/2 - 1/4
        np.testing.assert_allclose(out.value, np.log(0.5))
        np.testing.assert_allclose(out.tangent, 0.25)

    def test_integer_power(self):
        out = Dual(3.0, 1.0) ** 3
        assert (out.value, out.tangent) == (27.0, 27.0)

    def test_constant_has_zero_tangent(self):
        assert np.all(ad.tangent_of(np.array([1.0, 2.0])) == 0.0)
        assert np.all(Dual.constant([1.0, 2.0]).tangent == 0.0)

    def test_abs_at_zero_has_zero_derivative(self):
        out = ad.absolute(Dual(0.0, 5.0))
        assert out.value == 0.0 and out.tangent == 0.0
        assert ad.absolute(Dual(-2.0, 1.0)).tangent == -1.0

    def test_min_max_tie_follows_first_argument(self):
        a, b = Dual(1.0, 2.0), Dual(1.0, -3.0)
        assert ad.minimum(a, b).tangent == 2.0
        assert ad.maximum(a, b).tangent == 2.0
        assert ad.minimum(b, a).tangent == -3.0

    def test_comparisons_use_values(self):
        assert Dual(1.0, 100.0) < Dual(2.0, -100.0)
        assert not Dual(3.0, 0.0) <= 2.0

    def test_negative_sqrt_propagates_nan(self):
        out = ad.sqrt(Dual(-1.0, 1.0))
        assert not ad.isfinite(out)

    def test_division_by_zero_is_non_finite(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = Dual(1.0, 1.0) / Dual(0.0, 0.0)
        assert not ad.isfinite(out)


class TestSeedDirection:
    @pytest.mark.parametrize("x, v", [([1, 2], [0, 0]), ([1], [1]), ([3, 4], [1, -1])])
    def test_pairs(self, x, v):
        d = ad.seed_direction(x, v)
        np.testing.assert_array_equal(d.value, x)
        np.testing.assert_array_equal(d.tangent, v)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ad.seed_direction([1.0, 2.0], [1.0])

    def test_stacked_directions(self):
        d = ad.seed_direction([1.0, 2.0], np.eye(2))
        out = (d * d).sum()
        np.testing.assert_allclose(out.tangent, [2.0, 4.0])


def _composite(x):
    """Smooth test function built from every smooth elementary op."""
    y = ad.sqrt(x * x + 1.0) * ad.exp(x / 3.0) / (1.0 + x * x)
    return y + ad.log(x * x + 2.0) - (x - 0.5) ** 2 + ad.maximum(x * 0.0 + 10.0, x)


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(st.floats(-5, 5), st.floats(-3, 3))
    def test_tangent_matches_central_difference(self, x, v):
        h = 1e-6 * (1 + abs(x))
        tangent = float(_composite(Dual(x, v)).tangent)
        fd = (_composite(x + h * v) - _composite(x - h * v)) / (2 * h)
        assert abs(tangent - fd) <= 1e-5 * max(abs(fd), 1e-3)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-4, 4), st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_seed(self, x, a, b, v, w):
        tv = _composite(Dual(x, v)).tangent
        tw = _composite(Dual(x, w)).tangent
        tab = _composite(Dual(x, a * v + b * w)).tangent
        np.testing.assert_allclose(tab, a * tv + b * tw, rtol=1e-12, atol=1e-12 * (1 + abs(tv) + abs(tw)))


class TestArrays:
    def test_exclusive_cumprod_matches_difference(self, rng):
        x = rng.uniform(0.2, 0.9, (5, 4))
        v = rng.standard_normal((5, 4))
        out = ad.exclusive_cumprod(Dual(x, v), axis=0)
        h = 1e-7
        fd = (ad.exclusive_cumprod(x + h * v) - ad.exclusive_cumprod(x - h * v)) / (2 * h)
        np.testing.assert_allclose(out.value[0], 1.0)
        np.testing.assert_allclose(out.value[3], np.prod(x[:3], axis=0))
        np.testing.assert_allclose(out.tangent, fd, rtol=1e-6, atol=1e-9)

    def test_batched_cumprod_matches_single(self, rng):
        x = rng.uniform(0.2, 0.9, (6, 3))
        V = rng.standard_normal((4, 6, 3))
        batched = ad.exclusive_cumprod(Dual(x, V), axis=0).tangent
        for i in range(4):
            np.testing.assert_allclose(batched[i], ad.exclusive_cumprod(Dual(x, V[i]), axis=0).tangent)

    def test_indexing_keeps_leading_tangent_axes(self):
        d = Dual(np.arange(6.0).reshape(2, 3), np.ones((5, 2, 3)))
        sub = d[1]
        assert sub.value.shape == (3,) and sub.tangent.shape == (5, 3)

    def test_where_selects_tangents_by_primal_condition(self):
        a = Dual([1.0, 2.0], [10.0, 20.0])
        out = ad.where([True, False], a, 0.0)
        np.testing.assert_array_equal(out.value, [1.0, 0.0])
        np.testing.assert_array_equal(out.tangent, [10.0, 0.0])
