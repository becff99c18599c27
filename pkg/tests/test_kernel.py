import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mile.kernel import (
    MN2_LAMBDA, ChainState, KernelParams, init_state, kernel_step, mn2_step, partial_refresh, random_unit_vector,
    velocity_drift_update,
)
from mile.posterior import NonFiniteError
from mile.targets import FlatTarget, GaussianTarget, GradientCounter


def rk4_drift(u, g, t, dim, n=4000):
    """Integrate du/dt = (g - (u.g) u) / (d - 1), dK/dt = u.g with classical RK4."""
    def rhs(y):
        v = y[:-1]
        ug = v @ g
        return np.append((g - ug * v) / (dim - 1), ug)

    y = np.append(u, 0.0)
    h = t / n
    for _ in range(n):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y[:-1], y[-1]


class TestVelocityDrift:
    @pytest.mark.parametrize("dim, t, gscale", [(3, 0.5, 1.0), (10, 2.0, 5.0), (50, 1.0, 30.0)])
    def test_matches_ode_oracle(self, dim, t, gscale):
        rng = np.random.default_rng(dim)
        u = random_unit_vector(dim, rng)
        g = gscale * rng.normal(size=dim)
        new_u, dk = velocity_drift_update(u, g, t, dim)
        ref_u, ref_k = rk4_drift(u, g, t, dim)
        np.testing.assert_allclose(new_u, ref_u, atol=1e-9)
        assert dk == pytest.approx(ref_k, rel=1e-8, abs=1e-10)

    @given(st.integers(2, 40), st.floats(1e-6, 1e6), st.integers(0, 2**20))
    @settings(max_examples=60, deadline=None)
    def test_norm_preserved_and_finite(self, dim, t, seed):
        rng = np.random.default_rng(seed)
        u = random_unit_vector(dim, rng)
        g = rng.normal(size=dim)
        new_u, dk = velocity_drift_update(u, g, t, dim)
        assert np.linalg.norm(new_u) == pytest.approx(1.0, abs=1e-12)
        assert math.isfinite(dk)

    def test_long_time_aligns_with_gradient(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=5)
        new_u, _ = velocity_drift_update(random_unit_vector(5, rng), g, 1e5, 5)
        np.testing.assert_allclose(new_u, g / np.linalg.norm(g), atol=1e-12)

    def test_zero_gradient_is_identity(self):
        u = np.array([0.6, 0.8])
        new_u, dk = velocity_drift_update(u, np.zeros(2), 1.0, 2)
        np.testing.assert_array_equal(new_u, u)
        assert dk == 0.0


class TestMinimalNormStep:
    def test_two_gradient_calls(self):
        target = GradientCounter(GaussianTarget(4))
        rng = np.random.default_rng(0)
        state = init_state(np.ones(4), target, rng)
        assert target.calls == 1
        mn2_step(state, 0.1, target)
        assert target.calls == 3

    def test_flat_target_moves_straight(self):
        rng = np.random.default_rng(1)
        state = init_state(np.zeros(3), FlatTarget(3), rng)
        new, info = mn2_step(state, 0.7, FlatTarget(3))
        np.testing.assert_allclose(new.position, 0.7 * state.velocity, atol=1e-15)
        np.testing.assert_array_equal(new.velocity, state.velocity)
        assert info.energy_change == 0.0

    def test_time_reversible(self):
        target = GaussianTarget(6, scales=np.linspace(0.5, 2.0, 6))
        rng = np.random.default_rng(2)
        s0 = init_state(rng.normal(size=6), target, rng)
        s1, i1 = mn2_step(s0, 0.3, target)
        back, i2 = mn2_step(s1._replace(velocity=-s1.velocity), 0.3, target)
        np.testing.assert_allclose(back.position, s0.position, atol=1e-12)
        np.testing.assert_allclose(-back.velocity, s0.velocity, atol=1e-12)
        assert i2.energy_change == pytest.approx(-i1.energy_change, abs=1e-12)

    def test_local_energy_error_third_order(self):
        target = GaussianTarget(10)
        rng = np.random.default_rng(3)
        s0 = init_state(rng.normal(size=10), target, rng)
        errs = [abs(mn2_step(s0, eps, target)[1].energy_change) for eps in (0.01, 0.005)]
        assert errs[0] / errs[1] == pytest.approx(8.0, rel=0.1)

    def test_non_finite_returns_input_state(self):
        class Cliff:
            dim = 2

            def logdensity_and_grad(self, x):
                if x[0] > 0.5:
                    raise NonFiniteError("cliff")
                return -0.5 * float(x @ x), -x

        target = Cliff()
        state = ChainState(np.array([0.4, 0.0]), np.array([1.0, 0.0]), -0.08, np.array([-0.4, 0.0]))
        new, info = mn2_step(state, 1.0, target)
        assert not info.is_finite and math.isnan(info.energy_change)
        assert new is state

    def test_coefficient(self):
        assert MN2_LAMBDA == pytest.approx(0.1931833275037836, abs=1e-16)


class TestPartialRefresh:
    def test_unit_norm_and_noise_scale(self):
        rng_a = np.random.default_rng(4)
        rng_b = np.random.default_rng(4)
        u = random_unit_vector(20, np.random.default_rng(9))
        out = partial_refresh(u, 0.5, 2.0, rng_a)
        nu = math.sqrt(math.expm1(2 * 0.5 / 2.0) / 20)
        ref = u + nu * rng_b.standard_normal(20)
        np.testing.assert_allclose(out, ref / np.linalg.norm(ref), rtol=1e-13)

    def test_infinite_length_keeps_direction(self):
        u = random_unit_vector(5, np.random.default_rng(0))
        np.testing.assert_allclose(partial_refresh(u, 0.1, math.inf, np.random.default_rng(1)), u, rtol=1e-15)

    def test_kernel_step_skips_refresh_on_failure(self):
        class Broken:
            dim = 3

            def logdensity_and_grad(self, x):
                raise NonFiniteError("always")

        state = ChainState(np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.0, np.zeros(3))
        rng = np.random.default_rng(0)
        new, info = kernel_step(state, KernelParams(0.1, 1.0), Broken(), rng)
        assert new is state and not info.is_finite


class TestSamplesGaussian:
    def test_short_chain_moments(self):
        # fixed small step, no tuning: long-run moments of a 20-d standard normal
        target = GaussianTarget(20)
        rng = np.random.default_rng(5)
        state = init_state(np.zeros(20), target, rng)
        params = KernelParams(0.5, math.sqrt(20))
        xs = []
        for i in range(20000):
            state, info = kernel_step(state, params, target, rng)
            assert info.is_finite
            if i >= 1000:
                xs.append(state.position)
        xs = np.array(xs)
        assert np.abs(xs.mean(axis=0)).max() < 0.15
        assert np.abs(xs.var(axis=0) - 1.0).max() < 0.2
