from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import quadrature_h2, quat_matrix
from splat_tr import trustregion as tr
from splat_tr.scene import ALPHA_MIN, GaussianPrimitive, Scene, covariance

quats = arrays(np.float64, 4, elements=st.floats(-2, 2)).filter(lambda q: np.linalg.norm(q) > 0.05)
scales3 = arrays(np.float64, 3, elements=st.floats(0.1, 2.0))


def _prim(mu=(0, 0, 0), s=(1, 1, 1), q=(0, 0, 0, 1), alpha=0.5, color=(0.5, 0.5, 0.5)):
    return GaussianPrimitive(list(mu), list(s), list(q), alpha, list(color))


def _mass(prim, channel=None):
    return tr.mass_gaussian(prim, channel)


class TestHellinger:
    def test_identity_is_zero(self):
        g = _mass(_prim(s=(0.3, 0.5, 0.9), q=(0.1, 0.2, 0.3, 0.9)))
        assert tr.hellinger_sq(g, g) == 0.0

    @pytest.mark.parametrize("t", [0.1, 0.7, 2.0])
    def test_shifted_unit_gaussians(self, t):
        z = 0.37
        g = tr.MassGaussian(z, np.zeros(3), np.eye(3))
        h = tr.MassGaussian(z, np.array([t, 0.0, 0.0]), np.eye(3))
        assert tr.hellinger_sq(g, h) == pytest.approx(z * (1 - np.exp(-t * t / 8)), rel=1e-12)

    def test_mass_only_difference(self):
        g = tr.MassGaussian(0.4, np.zeros(3), np.eye(3))
        h = tr.MassGaussian(0.9, np.zeros(3), np.eye(3))
        assert tr.hellinger_sq(g, h) == pytest.approx(0.5 * (np.sqrt(0.4) - np.sqrt(0.9)) ** 2, rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        q1, q2 = rng.standard_normal(4), rng.standard_normal(4)
        c1 = quat_matrix(q1) @ np.diag(rng.uniform(0.3, 1.5, 3) ** 2) @ quat_matrix(q1).T
        c2 = quat_matrix(q2) @ np.diag(rng.uniform(0.3, 1.5, 3) ** 2) @ quat_matrix(q2).T
        m1, m2 = rng.uniform(0.1, 1, 2)
        mu1, mu2 = rng.normal(0, 0.3, 3), rng.normal(0, 0.3, 3)
        closed = tr.hellinger_sq(tr.MassGaussian(m1, mu1, c1), tr.MassGaussian(m2, mu2, c2))
        assert closed == pytest.approx(quadrature_h2(m1, mu1, c1, m2, mu2, c2), rel=1e-3)

    @settings(max_examples=60, deadline=None)
    @given(scales3, quats, scales3, quats, st.floats(0.01, 1), st.floats(0.01, 1),
           arrays(np.float64, 3, elements=st.floats(-1, 1)))
    def test_symmetric_and_non_negative(self, s1, q1, s2, q2, a1, a2, dmu):
        g = tr.MassGaussian(a1, np.zeros(3), covariance(_prim(s=s1, q=q1)))
        h = tr.MassGaussian(a2, dmu, covariance(_prim(s=s2, q=q2)))
        assert tr.hellinger_sq(g, h) == tr.hellinger_sq(h, g)
        assert tr.hellinger_sq(g, h) >= 0.0

    @settings(max_examples=40, deadline=None)
    @given(scales3, quats, st.floats(0.1, 10) | st.floats(-10, -0.1))
    def test_zero_for_rescaled_quaternion(self, s, q, c):
        p = _prim(s=s, q=q)
        p2 = _prim(s=s, q=c * np.asarray(q))
        assert tr.hellinger_sq(_mass(p), _mass(p2)) <= 1e-12 * _mass(p).mass

    def test_rejects_non_spd(self):
        g = tr.MassGaussian(1.0, np.zeros(3), np.diag([1.0, -1.0, 1.0]))
        with pytest.raises(ValueError, match="positive definite"):
            tr.hellinger_sq(g, g)

    def test_color_mass(self):
        p = _prim(s=(0.5, 2, 1), alpha=0.4, color=(0.25, 0.5, 1.0))
        assert _mass(p).mass == pytest.approx(0.4)
        assert _mass(p, 1).mass == pytest.approx(0.2)


class TestRadii:
    def test_mean_small_eps(self):
        r = tr.radius_mean(_prim(alpha=0.999999999), 1e-6)
        np.testing.assert_allclose(r, np.sqrt(-8 * np.log1p(-1e-6 / 0.999999999)))
        np.testing.assert_allclose(r, 2.828e-3, atol=1e-6)

    def test_mean_vacuous_returns_cap(self):
        np.testing.assert_array_equal(tr.radius_mean(_prim(alpha=0.3), 0.5, cap=0.7), 0.7)

    def test_mean_homogeneity(self):
        a = tr.radius_mean(_prim(s=(1, 1, 1)), 1e-5)
        b = tr.radius_mean(_prim(s=(np.sqrt(2), 1, 1)), 1e-5)
        assert b[0] / a[0] == pytest.approx(np.sqrt(2))
        assert b[1] == pytest.approx(a[1])

    def test_mean_uses_conditional_variance(self):
        p = _prim(s=(0.2, 1.0, 0.5), q=(0.3, -0.2, 0.5, 0.8))
        prec = np.linalg.inv(covariance(p))
        np.testing.assert_allclose(tr.radius_mean(p, 1e-5), np.sqrt(-8 * np.log1p(-1e-5 / 0.5) / np.diag(prec)))

    def test_scale(self):
        np.testing.assert_allclose(tr.radius_scale(_prim(s=(1, 2, 3)), 1e-6), [2e-3, 4e-3, 6e-3])
        a = tr.radius_scale(_prim(alpha=0.2), 1e-6)
        b = tr.radius_scale(_prim(alpha=0.8), 1e-6)
        np.testing.assert_allclose(a / b, 2.0)

    def test_opacity(self):
        assert tr.radius_opacity(_prim(alpha=0.25), 1e-6) == pytest.approx(1e-3)
        assert tr.radius_opacity(_prim(alpha=1.0), 0.01) == pytest.approx(0.2)
        assert tr.radius_opacity(_prim(alpha=ALPHA_MIN), 1e-6) == pytest.approx(np.sqrt(4 * ALPHA_MIN * 1e-6))

    def test_color(self):
        np.testing.assert_allclose(tr.radius_color(_prim(alpha=0.25, color=(0.25, 1e-6, 1.0)), 1e-6),
                                   [2e-3, np.sqrt(4e-12 / 0.25), 4e-3])

    def test_rotation_vacuous_when_eps_exceeds_alpha(self):
        p = _prim(s=(0.3, 1, 2), q=(0.1, 0.2, 0.3, 0.9), alpha=0.1)
        np.testing.assert_allclose(tr.radius_rotation(p, 0.2, cap=0.25), 0.25 * np.linalg.norm(p.q))

    def test_rotation_inverse_sqrt_beta(self):
        p = _prim(s=(0.3, 1, 2), q=(0.1, 0.2, 0.3, 0.9), alpha=0.5)
        beta = tr.beta_rotation_all(p.s, p.q)
        r = tr.radius_rotation(p, 1e-7, cap=10.0)
        np.testing.assert_allclose(r * np.sqrt(beta), np.sqrt(-8 * np.log1p(-1e-7 / 0.5)))

    @settings(max_examples=40, deadline=None)
    @given(scales3, quats, st.floats(0.05, 0.9), st.floats(0.2, 5))
    def test_radii_positive_and_rescale_with_quaternion(self, s, q, alpha, c):
        p = _prim(s=s, q=q, alpha=alpha)
        p2 = _prim(s=s, q=c * np.asarray(q), alpha=alpha)
        for eps in (1e-6, 1e-4):
            a = tr.shd_radii(Scene.from_primitives([p]), eps)
            b = tr.shd_radii(Scene.from_primitives([p2]), eps)
            assert np.all(a > 0) and np.all(np.isfinite(a))
            rot = slice(6, 10)
            np.testing.assert_allclose(np.delete(b, rot), np.delete(a, rot), rtol=1e-10)
            np.testing.assert_allclose(b[rot], c * a[rot], rtol=1e-7)


class TestBeta:
    def test_identity_quaternion_isotropic(self):
        beta = tr.beta_rotation_all(np.ones(3), np.array([0, 0, 0, 1.0]))
        s = np.ones(3)
        h = 1e-4

        def T(dq):
            D = quat_matrix([0, 0, 0, 1]).T @ quat_matrix(np.array([0, 0, 0, 1.0]) + dq)
            return np.sum((s[:, None] * D / s[None, :]) ** 2)

        for c in range(4):
            e = np.zeros(4)
            e[c] = h
            assert beta[c] == pytest.approx((T(e) - 2 * T(0 * e) + T(-e)) / h ** 2, rel=1e-3, abs=1e-6)

    def test_closed_form_matches_difference_mode(self, rng):
        for _ in range(20):
            q, s = rng.standard_normal(4), rng.uniform(0.1, 2, 3)
            np.testing.assert_allclose(tr.beta_rotation_all(s, q),
                                       tr.beta_rotation_all(s, q, finite_difference=True), rtol=1e-4, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(scales3, quats, st.floats(0.2, 5))
    def test_scales_inversely_with_squared_norm(self, s, q, c):
        b1 = tr.beta_rotation_all(s, q)
        b2 = tr.beta_rotation_all(s, c * q)
        np.testing.assert_allclose(c * c * b2, b1, rtol=1e-8, atol=1e-12 * (1 + np.max(np.abs(b1))))

    def test_beta_rotation_accessor(self):
        p = _prim(s=(0.3, 1, 2), q=(0.1, 0.2, 0.3, 0.9))
        assert tr.beta_rotation(p, 2) == tr.beta_rotation_all(p.s, p.q)[2]


class TestCertification:
    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, 3, elements=st.floats(0.1, 2.0)), quats, st.floats(0.05, 0.9),
           arrays(np.float64, 3, elements=st.floats(0.05, 1.0)), st.sampled_from([1e-6, 1e-5, 1e-4]))
    def test_single_parameter_steps(self, s, q, alpha, color, eps):
        from splat_tr.harness.checks import certification_ratios

        worst = certification_ratios(_prim(s=s, q=q, alpha=alpha, color=color), eps)
        assert worst["mean"] <= 1 + 1e-6
        for fam in ("scale", "rotation", "opacity", "color"):
            assert worst[fam] <= 1.15, fam


class TestScheduleAndClip:
    def test_endpoints_and_midpoint(self):
        sch = tr.TrustRegionSchedule(1e-6, 1e-8, 100)
        assert tr.eps_at(sch, 0) == pytest.approx(1e-6, rel=1e-14)
        assert tr.eps_at(sch, 100) == pytest.approx(1e-8, rel=1e-14)
        assert tr.eps_at(sch, 50) == pytest.approx(1e-7, rel=1e-12)
        assert tr.eps_at(sch, 1000) == pytest.approx(1e-8)

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            tr.TrustRegionSchedule(1e-8, 1e-6, 10)

    def test_clip_examples(self):
        assert tr.clip_step(0.5, 0.2) == 0.2
        d = np.array([0.1, -0.05])
        np.testing.assert_array_equal(tr.clip_step(d, [0.2, 0.2]), d)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 8, elements=st.floats(-10, 10)), arrays(np.float64, 8, elements=st.floats(1e-6, 5)))
    def test_clip_idempotent_and_bounded(self, d, eta):
        c = tr.clip_step(d, eta)
        np.testing.assert_array_equal(tr.clip_step(c, eta), c)
        assert np.all(np.abs(c) <= eta)

    def test_shd_radii_single_splat(self):
        p = _prim(s=(0.3, 0.5, 0.8), q=(0.1, 0.2, 0.3, 0.9), alpha=0.6, color=(0.2, 0.4, 0.9))
        eta = tr.shd_radii(Scene.from_primitives([p]), 1e-6)
        np.testing.assert_allclose(eta[0:3], tr.radius_mean(p, 1e-6))
        np.testing.assert_allclose(eta[3:6], tr.radius_scale(p, 1e-6))
        np.testing.assert_allclose(eta[6:10], tr.radius_rotation(p, 1e-6))
        np.testing.assert_allclose(eta[10], tr.radius_opacity(p, 1e-6))
        np.testing.assert_allclose(eta[11:14], tr.radius_color(p, 1e-6))

    def test_shd_radii_monotone_in_eps(self, rng):
        from conftest import random_scene

        scene = random_scene(rng, 6)
        assert np.all(tr.shd_radii(scene, 5e-7) <= tr.shd_radii(scene, 1e-6))

    def test_minimum_opacity_is_finite(self, rng):
        from conftest import random_scene

        scene = random_scene(rng, 5)
        scene.opacities[:] = ALPHA_MIN
        eta = tr.shd_radii(scene, 1e-6)
        assert np.all(np.isfinite(eta)) and np.all(eta > 0)
