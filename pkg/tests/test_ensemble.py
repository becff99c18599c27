import math

import numpy as np
import pytest
from scipy import stats

from mile.ensemble import (
    AllChainsFailed, PosteriorSamples, RunConfig, SampleFileError, load_samples, predict, predict_draws,
    predict_ensemble, run_chain, run_ensemble, save_samples,
)
from mile.nn import MlpArchitecture, init_params
from mile.optim import DeepEnsemble, TrainConfig
from mile.posterior import Likelihood, NonFiniteError, PosteriorModel, Prior, pointwise_log_density
from mile.targets import GaussianTarget
from mile.tuning import TuningConfig
from conftest import make_classification_model, make_regression_model

TINY_TUNING = TuningConfig(phase1_steps=200, phase2_steps=50, phase3_steps=50)


def tiny_config(chains=3, sampling_steps=100, thinning=10, seed=0):
    return RunConfig(chains=chains, sampling_steps=sampling_steps, thinning=thinning, tuning=TINY_TUNING,
                     training=TrainConfig(ensemble_size=chains), base_seed=seed)


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.n_retained == 1000
        assert cfg.steps_per_chain == 60000

    def test_thinning_100(self):
        assert RunConfig(thinning=100).n_retained == 100

    @pytest.mark.parametrize("kwargs", [{"thinning": 3}, {"chains": 0}, {"base_seed": -1}, {"thinning": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            RunConfig(**kwargs)


class TestRunChain:
    def test_budget_and_shapes(self):
        cfg = tiny_config()
        out, report, tuned = run_chain(np.zeros(5), GaussianTarget(5), cfg, 0)
        assert out.shape == (10, 5) and np.all(np.isfinite(out))
        assert report.grad_evals == 2 * (300 + 100)
        assert report.init_grad_evals == 1 and report.recovery_grad_evals == 0
        assert report.steps == 400 and report.retained == 10
        assert report.step_size == tuned.step_size

    def test_thinning_consistency(self):
        full, _, _ = run_chain(np.zeros(4), GaussianTarget(4), tiny_config(thinning=1), 2)
        thin, _, _ = run_chain(np.zeros(4), GaussianTarget(4), tiny_config(thinning=5), 2)
        # retained sample j is the position after step (j + 1) * thinning
        np.testing.assert_array_equal(thin, full[4::5])

    def test_deterministic_given_seed(self):
        a, _, _ = run_chain(np.zeros(3), GaussianTarget(3), tiny_config(seed=5), 1)
        b, _, _ = run_chain(np.zeros(3), GaussianTarget(3), tiny_config(seed=5), 1)
        c, _, _ = run_chain(np.zeros(3), GaussianTarget(3), tiny_config(seed=6), 1)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_starts_from_learning_rate(self):
        cfg = tiny_config()
        _, _, tuned = run_chain(np.zeros(3), GaussianTarget(3), cfg, 0, record=True)
        assert tuned.step_size_trace[0] == cfg.training.learning_rate

    def test_non_finite_member_rejected(self):
        with pytest.raises(ValueError):
            run_chain(np.array([np.nan, 0.0]), GaussianTarget(2), tiny_config(), 0)

    def test_failure_during_sampling_keeps_prefix(self):
        class Dies:
            dim = 3

            def __init__(self):
                self.inner = GaussianTarget(3)
                self.calls = 0

            def logdensity_and_grad(self, x):
                self.calls += 1
                if self.calls > 1 + 2 * 300 + 2 * 45:
                    raise NonFiniteError("boom")
                return self.inner.logdensity_and_grad(x)

        out, report, _ = run_chain(np.zeros(3), Dies(), tiny_config(), 0)
        assert report.failed and "sampling" in report.reason
        assert report.retained == 4
        assert np.all(np.isfinite(out[:4])) and np.all(np.isnan(out[4:]))

    def test_failure_at_start(self):
        class Broken:
            dim = 2

            def logdensity_and_grad(self, x):
                raise NonFiniteError("nope")

        out, report, tuned = run_chain(np.zeros(2), Broken(), tiny_config(), 0)
        assert report.failed and tuned is None and np.all(np.isnan(out))


class TestRunEnsemble:
    def test_worker_invariance(self):
        cfg = tiny_config()
        members = [np.full(4, float(k)) for k in range(3)]
        a = run_ensemble(members, GaussianTarget(4), cfg, workers=1)
        b = run_ensemble(members, GaussianTarget(4), cfg, workers=3)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert [r.to_dict(False) for r in a.reports] == [r.to_dict(False) for r in b.reports]

    def test_permuting_members_permutes_chains(self):
        cfg = tiny_config()
        ens = DeepEnsemble([np.full(4, float(k)) for k in range(3)], [0.0] * 3, 0.01)
        a = run_ensemble(ens, GaussianTarget(4), cfg)
        b = run_ensemble(ens.permuted([2, 0, 1]), GaussianTarget(4), cfg)
        np.testing.assert_array_equal(b.samples, a.samples[[2, 0, 1]])

    def test_single_chain_is_run_chain(self):
        cfg = tiny_config(chains=1)
        res = run_ensemble([np.zeros(3)], GaussianTarget(3), cfg)
        out, _, _ = run_chain(np.zeros(3), GaussianTarget(3), cfg, 0)
        np.testing.assert_array_equal(res.samples[0], out)

    def test_member_count_checked(self):
        with pytest.raises(ValueError):
            run_ensemble([np.zeros(2)], GaussianTarget(2), tiny_config(chains=2))

    def test_all_failed(self):
        class Broken:
            dim = 2

            def logdensity_and_grad(self, x):
                raise NonFiniteError("nope")

        with pytest.raises(AllChainsFailed):
            run_ensemble([np.zeros(2)] * 2, Broken(), tiny_config(chains=2))

    def test_budget_exact_over_chains(self):
        cfg = tiny_config()
        res = run_ensemble([np.zeros(3)] * 3, GaussianTarget(3), cfg)
        assert res.grad_evals.sum() == 3 * 2 * cfg.steps_per_chain


def _samples(draws, failed=None):
    draws = np.asarray(draws, dtype=float)
    from mile.ensemble import ChainReport
    failed = failed or [False] * draws.shape[0]
    reports = [ChainReport(k, failed=f) for k, f in enumerate(failed)]
    return PosteriorSamples(draws, reports, 1, 0)


def linear_gaussian(loc_bias, scale_bias):
    """Flat vector of an arch-(1, 2) net with zero weights: outputs (loc_bias, scale_bias)."""
    return np.array([0.0, 0.0, loc_bias, scale_bias])


class TestPredict:
    @pytest.fixture
    def model(self):
        x = np.zeros((5, 1))
        return PosteriorModel(MlpArchitecture((1, 2)), Prior(), Likelihood(), x, np.zeros(5))

    def test_single_draw_equals_single_predictive(self, model):
        theta = linear_gaussian(0.3, -0.2)
        x, y = np.zeros((2, 1)), np.array([0.1, 1.0])
        summary = predict(model, _samples([[theta]]), x, y)
        np.testing.assert_allclose(summary.log_density, stats.norm.logpdf(y, 0.3, np.exp(-0.2)), rtol=1e-13)
        np.testing.assert_allclose(summary.point, 0.3)

    def test_symmetric_mixture_mean_zero(self, model):
        draws = [[linear_gaussian(1.0, 0.0), linear_gaussian(-1.0, 0.0)]]
        summary = predict(model, _samples(draws), np.zeros((1, 1)))
        assert summary.point[0] == 0.0
        assert summary.log_density is None

    def test_log_density_direct_sum(self, model):
        thetas = [linear_gaussian(m, s) for m, s in [(0.0, 0.0), (1.0, -0.5), (-2.0, 0.3)]]
        y = np.array([0.4])
        summary = predict(model, _samples([thetas]), np.zeros((1, 1)), y)
        direct = math.log(sum(stats.norm.pdf(0.4, m, math.exp(s)) for m, s in [(0.0, 0.0), (1.0, -0.5), (-2.0, 0.3)]) / 3)
        assert summary.log_density[0] == pytest.approx(direct, abs=1e-12)

    def test_failed_chains_excluded(self, model):
        good = [[linear_gaussian(0.0, 0.0)]]
        bad = [[linear_gaussian(100.0, 0.0)]]
        summary = predict(model, _samples(good + bad, failed=[False, True]), np.zeros((1, 1)), np.zeros(1))
        assert summary.n_draws == 1 and summary.point[0] == 0.0

    def test_no_successful_chain(self, model):
        with pytest.raises(AllChainsFailed):
            predict(model, _samples([[linear_gaussian(0, 0)]], failed=[True]), np.zeros((1, 1)))

    def test_classification_probabilities(self):
        model = make_classification_model()
        rng = np.random.default_rng(0)
        draws = rng.normal(size=(2, 4, model.dim))
        summary = predict(model, _samples(draws), model.x, model.y)
        np.testing.assert_allclose(summary.probs.sum(axis=1), 1.0, atol=1e-12)
        per = np.stack([pointwise_log_density(model.likelihood, model.outputs(t), model.y) for t in draws.reshape(8, -1)])
        np.testing.assert_allclose(summary.log_density, np.log(np.exp(per).mean(axis=0)), rtol=1e-12)

    def test_ensemble_baseline(self):
        model = make_regression_model()
        members = [init_params(model.arch, k) for k in range(3)]
        ens = DeepEnsemble(members, [0.0] * 3, 0.01)
        a = predict_ensemble(model, ens, model.x, model.y)
        b = predict_draws(model, np.stack(members), model.x, model.y)
        np.testing.assert_array_equal(a.log_density, b.log_density)


class TestPersistence:
    def _result(self):
        cfg = tiny_config(seed=3)
        res = run_ensemble([np.zeros(4)] * 3, GaussianTarget(4), cfg)
        res.reports[1].failed = True
        res.reports[1].reason = "synthetic"
        return res

    def test_roundtrip_bit_exact(self, tmp_path):
        res = self._result()
        res.layer_widths = (1, 2)
        path = tmp_path / "s.mile"
        save_samples(path, res)
        back = load_samples(path)
        assert back.samples.tobytes() == res.samples.tobytes()
        assert [r.to_dict(False) for r in back.reports] == [r.to_dict(False) for r in res.reports]
        assert (back.thinning, back.base_seed, back.layer_widths) == (10, 3, (1, 2))
        save_samples(tmp_path / "t.mile", back)
        assert (tmp_path / "t.mile").read_bytes() == path.read_bytes()

    def test_header_layout(self, tmp_path):
        res = self._result()
        save_samples(tmp_path / "s.mile", res)
        raw = (tmp_path / "s.mile").read_bytes()
        assert raw[:4] == b"MILE"
        assert int.from_bytes(raw[4:8], "little") == 1
        k, s, d = (int.from_bytes(raw[8 + 8 * i: 16 + 8 * i], "little") for i in range(3))
        assert (k, s, d) == (3, 10, 4)
        first = np.frombuffer(raw[48:56], dtype="<f8")[0]
        assert first == res.samples[0, 0, 0]

    def test_wallclock_not_persisted(self, tmp_path):
        res = self._result()
        save_samples(tmp_path / "a.mile", res)
        for r in res.reports:
            r.wallclock += 5.0
        save_samples(tmp_path / "b.mile", res)
        assert (tmp_path / "a.mile").read_bytes() == (tmp_path / "b.mile").read_bytes()

    @pytest.mark.parametrize("corrupt", ["magic", "version", "truncate", "trailer"])
    def test_corrupted(self, tmp_path, corrupt):
        path = tmp_path / "s.mile"
        save_samples(path, self._result())
        raw = bytearray(path.read_bytes())
        if corrupt == "magic":
            raw[:4] = b"NOPE"
        elif corrupt == "version":
            raw[4] = 9
        elif corrupt == "truncate":
            raw = raw[:100]
        else:
            raw[-3:] = b"???"
        path.write_bytes(bytes(raw))
        with pytest.raises(SampleFileError):
            load_samples(path)
