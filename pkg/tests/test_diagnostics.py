import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mile.diagnostics import (
    DEGENERATE_RHAT, chainwise_split_rhat, diagnose, layer_variances, parameter_variances, pooled_ess,
)
from mile.nn import MlpArchitecture


class TestSplitRhat:
    def test_stationary_chain_near_one(self):
        trace = np.random.default_rng(0).normal(size=(4000, 5))
        r = chainwise_split_rhat(trace)
        assert np.all(np.abs(r - 1) < 0.01)

    def test_drifting_chain_flagged(self):
        t = np.linspace(0, 5, 2000)
        trace = (t + np.random.default_rng(1).normal(size=t.size))[:, None]
        assert chainwise_split_rhat(trace)[0] > 1.1

    def test_matches_hand_formula(self):
        rng = np.random.default_rng(2)
        trace = rng.normal(size=(40, 1))
        seg = trace.reshape(4, 10)
        w = seg.var(axis=1, ddof=1).mean()
        b = 10 * seg.mean(axis=1).var(ddof=1)
        expected = np.sqrt((9 / 10) + b / (10 * w))
        assert chainwise_split_rhat(trace)[0] == pytest.approx(expected, rel=1e-12)

    def test_constant_column_gets_sentinel(self):
        trace = np.column_stack([np.ones(100), np.random.default_rng(3).normal(size=100)])
        r = chainwise_split_rhat(trace)
        assert r[0] == DEGENERATE_RHAT and r[1] > 0

    def test_remainder_dropped(self):
        trace = np.random.default_rng(4).normal(size=(43, 2))
        np.testing.assert_array_equal(chainwise_split_rhat(trace), chainwise_split_rhat(trace[:40]))

    @pytest.mark.parametrize("n, splits", [(7, 4), (3, 2)])
    def test_too_short(self, n, splits):
        with pytest.raises(ValueError):
            chainwise_split_rhat(np.zeros((n, 1)), splits)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-100, 100), st.floats(0.01, 100))
    def test_affine_invariant(self, seed, shift, scale):
        trace = np.random.default_rng(seed).normal(size=(80, 3))
        np.testing.assert_allclose(chainwise_split_rhat(trace), chainwise_split_rhat(shift + scale * trace),
                                   rtol=1e-6)


class TestVariances:
    def test_two_chain_by_hand(self):
        # chain means 1 and 3 -> between variance (ddof 1) = 2; each chain variance 1
        a = np.array([0.0, 2.0, 0.0, 2.0])
        chains = np.stack([a, a + 2.0])[:, :, None]
        within, between = parameter_variances(chains)
        assert within[0] == pytest.approx(np.var(a, ddof=1))
        assert between[0] == pytest.approx(2.0)

    def test_single_chain_between_none(self):
        within, between = parameter_variances(np.zeros((1, 10, 3)))
        assert between is None and within.shape == (3,)

    def test_layer_grouping(self):
        arch = MlpArchitecture((2, 3, 2))
        rng = np.random.default_rng(0)
        chains = rng.normal(size=(3, 50, arch.n_params))
        chains[..., :9] *= 3.0  # first layer weights and biases
        layers = layer_variances(chains, arch)
        assert [lv.n_params for lv in layers] == [9, 8]
        assert layers[0].within > 4 * layers[1].within


class TestEss:
    def test_clamped_and_pooled(self):
        rng = np.random.default_rng(0)
        chains = rng.normal(size=(3, 500, 4))
        e = pooled_ess(chains)
        assert np.all(e.per_chain <= 500)
        np.testing.assert_allclose(e.total, e.per_chain.sum(axis=0))

    def test_constant_flagged(self):
        chains = np.random.default_rng(0).normal(size=(2, 100, 3))
        chains[0, :, 1] = 4.0
        e = pooled_ess(chains)
        assert e.constant[0, 1] and not e.constant[1, 1]

    def test_rejects_2d(self):
        with pytest.raises(ValueError):
            pooled_ess(np.zeros((10, 3)))


def test_diagnose_report_formats():
    arch = MlpArchitecture((2, 3, 2))
    chains = np.random.default_rng(0).normal(size=(2, 100, arch.n_params))
    chains[1, :, 0] = 0.0
    report = diagnose(chains, arch)
    s = report.summary()
    assert s["chains"] == 2 and s["params"] == arch.n_params
    assert s["rhat_degenerate"] == 1 and s["ess_constant_columns"] == 1
    text = report.to_text()
    assert text.splitlines()[0] == "chains = 2"
    rows = report.layer_csv().splitlines()
    assert rows[0].startswith("layer,n_params,within_var,between_var") and len(rows) == 3
