import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from wusim.errors import FitQualityError, InvalidDatasetError, InvalidParameterError
from wusim.forecast import (
    CalibrationResult,
    InterArrivalForecaster,
    calibrate_margin,
    decide_sleep,
    init_lstm_params,
    lstm_forward,
    lstm_gradients,
    r_metric,
    rmse,
    score_decisions,
)
from wusim.traffic import TrafficModel, generate_trace


def _reference_forward(params, x):
    """Slow per-sample recurrence, independent of the batched code path."""
    hidden = params["wh"].shape[0]
    out = np.empty(len(x))
    for s in range(len(x)):
        h = np.zeros(hidden)
        c = np.zeros(hidden)
        for t in range(x.shape[1]):
            z = x[s, t] @ params["wx"] + h @ params["wh"] + params["b"]
            zi, zf, zo, zg = np.split(z, 4)
            i = 1.0 / (1.0 + np.exp(-zi))
            f = 1.0 / (1.0 + np.exp(-zf))
            o = 1.0 / (1.0 + np.exp(-zo))
            g = np.tanh(zg)
            c = f * c + i * g
            h = o * np.tanh(c)
        out[s] = float((h @ params["wy"])[0] + params["by"][0])
    return out


class TestLstmCore:
    def test_forward_matches_reference(self):
        rng = np.random.default_rng(0)
        params = init_lstm_params(rng, 2, 7)
        x = rng.normal(size=(5, 9, 2))
        batched, _ = lstm_forward(params, x)
        slow = _reference_forward(params, x)
        assert np.max(np.abs(batched - slow)) < 1e-12

    def test_forward_deterministic(self):
        rng = np.random.default_rng(1)
        params = init_lstm_params(rng, 1, 4)
        x = rng.normal(size=(3, 6, 1))
        a, _ = lstm_forward(params, x)
        b, _ = lstm_forward(params, x)
        assert np.array_equal(a, b)

    def test_zero_weights_output_zero(self):
        params = {
            "wx": np.zeros((1, 16)),
            "wh": np.zeros((4, 16)),
            "b": np.zeros(16),
            "wy": np.zeros((4, 1)),
            "by": np.zeros(1),
        }
        y, _ = lstm_forward(params, np.random.default_rng(2).normal(size=(4, 5, 1)))
        assert np.array_equal(y, np.zeros(4))

    def test_shape_mismatch_raises(self):
        params = init_lstm_params(np.random.default_rng(3), 2, 4)
        with pytest.raises(InvalidParameterError):
            lstm_forward(params, np.zeros((2, 5, 3)))

    def test_gate_ranges_on_random_batches(self):
        rng = np.random.default_rng(4)
        params = init_lstm_params(rng, 2, 8)
        x = rng.normal(scale=3.0, size=(16, 10, 2))
        _, caches = lstm_forward(params, x)
        for cache in caches[:-1]:
            _, _, _, i, f, o, g, _, _ = cache
            for gate in (i, f, o):
                assert np.all(gate > 0.0) and np.all(gate < 1.0)
            assert np.all(g > -1.0) and np.all(g < 1.0)


class TestGradients:
    def test_every_block_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        params = init_lstm_params(rng, 2, 6)
        x = rng.normal(size=(4, 8, 2))
        t = rng.normal(size=4)
        _, grads = lstm_gradients(params, x, t)
        h = 1e-6
        worst = 0.0
        for key, arr in params.items():
            flat = arr.ravel()
            g = grads[key].ravel()
            stride = max(1, flat.size // 25)
            for idx in range(0, flat.size, stride):
                orig = flat[idx]
                flat[idx] = orig + h
                lp, _ = lstm_gradients(params, x, t)
                flat[idx] = orig - h
                lm, _ = lstm_gradients(params, x, t)
                flat[idx] = orig
                fd = (lp - lm) / (2 * h)
                denom = max(abs(fd), abs(g[idx]), 1e-8)
                worst = max(worst, abs(fd - g[idx]) / denom)
        assert worst < 1e-4

    def test_zero_error_gives_zero_gradients(self):
        rng = np.random.default_rng(6)
        params = init_lstm_params(rng, 1, 4)
        x = rng.normal(size=(3, 5, 1))
        y, _ = lstm_forward(params, x)
        loss, grads = lstm_gradients(params, x, y)
        assert loss == 0.0
        for g in grads.values():
            assert np.allclose(g, 0.0)

    def test_zeroed_feature_column_has_zero_input_gradient(self):
        rng = np.random.default_rng(7)
        params = init_lstm_params(rng, 2, 5)
        x = rng.normal(size=(6, 7, 2))
        x[:, :, 1] = 0.0
        _, grads = lstm_gradients(params, x, rng.normal(size=6))
        assert np.allclose(grads["wx"][1], 0.0)
        assert not np.allclose(grads["wx"][0], 0.0)


class TestMetrics:
    def test_rmse_identical(self):
        assert rmse([3.0, 4.0], [3.0, 4.0]) == 0.0

    def test_rmse_hand_value(self):
        assert rmse([1.0, 2.0], [1.0, 4.0]) == pytest.approx(np.sqrt(2.0))

    def test_rmse_single_pair(self):
        assert rmse([5.0], [2.0]) == pytest.approx(3.0)

    def test_rmse_empty_rejected(self):
        with pytest.raises(InvalidParameterError):
            rmse([], [])

    def test_r_perfect(self):
        assert r_metric([2.0, 3.0], [2.0, 3.0]) == pytest.approx(1.0)

    def test_r_all_zero_predictions(self):
        assert r_metric([0.0, 0.0], [1.0, 2.0]) == pytest.approx(0.0, abs=1e-12)

    def test_r_hand_value(self):
        assert r_metric([2.0], [4.0]) == pytest.approx(np.sqrt(0.75))

    def test_r_zero_observation_rejected(self):
        with pytest.raises(ZeroDivisionError):
            r_metric([1.0], [0.0])

    def test_r_negative_radicand_flagged(self):
        with pytest.raises(FitQualityError):
            r_metric([10.0], [1.0])


class TestEstimator:
    def test_sklearn_params_roundtrip(self):
        m = InterArrivalForecaster(hidden_size=9, window=4)
        params = m.get_params()
        assert params["hidden_size"] == 9
        m.set_params(window=6)
        assert m.window == 6

    def test_unfitted_predict_raises(self):
        with pytest.raises(NotFittedError):
            InterArrivalForecaster().predict(np.ones((1, 20)))

    def test_too_short_sequence_rejected(self):
        with pytest.raises(InvalidDatasetError):
            InterArrivalForecaster(window=10).fit(np.ones(12))

    def test_nonpositive_gaps_rejected(self):
        with pytest.raises(InvalidParameterError):
            InterArrivalForecaster(window=4).fit(np.array([1.0, 0.0] * 10))

    def test_constant_sequence_learned(self):
        period = 40.0
        gaps = np.full(120, period)
        m = InterArrivalForecaster(
            hidden_size=8, window=6, max_epochs=30, learning_rate=5e-3, batch_size=32, seed=1
        )
        m.fit(gaps)
        val = m.evaluate(gaps, split="val")
        assert val["rmse_tti"] < 0.01 * period
        # Dead network outputs the de-normalized zero, i.e. the training mean.
        zeroed = {k: np.zeros_like(v) for k, v in m.params_.items()}
        m2 = InterArrivalForecaster(hidden_size=8, window=6)
        m2.params_ = zeroed
        m2.gap_mean_, m2.gap_scale_ = m.gap_mean_, m.gap_scale_
        m2.margin_ = 0.0
        assert m2.predict(np.full(6, period))[0] == pytest.approx(m.gap_mean_)

    def test_training_is_reproducible_bitwise(self):
        rng = np.random.default_rng(8)
        gaps = rng.integers(1, 6, size=200).astype(float)
        kw = dict(hidden_size=6, window=5, max_epochs=4, batch_size=32, seed=3)
        a = InterArrivalForecaster(**kw).fit(gaps)
        b = InterArrivalForecaster(**kw).fit(gaps)
        for key in a.params_:
            assert np.array_equal(a.params_[key], b.params_[key])

    def test_training_rmse_declines_early_on_model_traffic(self):
        # Median first-5-epoch curve over 10 seeds is non-increasing.
        trace = generate_trace(
            [TrafficModel(0.25, 0.3) for _ in range(4)], 4000, np.random.default_rng(11)
        )
        gaps = trace.inter_arrivals.astype(float)
        curves = []
        for seed in range(10):
            m = InterArrivalForecaster(
                hidden_size=10, window=8, max_epochs=5, learning_rate=2e-3, batch_size=64, seed=seed
            )
            m.fit(gaps)
            curves.append([h["train_rmse"] for h in m.history_])
        med = np.median(np.array(curves), axis=0)
        assert all(b <= a + 1e-9 for a, b in zip(med, med[1:]))

    def test_phase_feature_requires_slots(self):
        m = InterArrivalForecaster(window=4, phase_period=10.0)
        with pytest.raises(InvalidParameterError):
            m.fit(np.ones(20))

    def test_checkpoint_roundtrip(self, tmp_path):
        gaps = np.ones(80) * 3.0
        m = InterArrivalForecaster(hidden_size=5, window=4, max_epochs=3, seed=0)
        m.fit(gaps)
        m.margin_ = 1.25
        path = tmp_path / "model.npz"
        m.save(path)
        loaded = InterArrivalForecaster.load(path)
        assert loaded.margin_ == 1.25
        assert loaded.hidden_size == 5
        for key in m.params_:
            assert np.array_equal(m.params_[key], loaded.params_[key])
        w = np.full(4, 3.0)
        assert loaded.predict(w)[0] == pytest.approx(m.predict(w)[0])

    def test_predict_sequence_alignment(self):
        gaps = np.ones(60) * 2.0
        m = InterArrivalForecaster(hidden_size=4, window=5, max_epochs=2, seed=2)
        m.fit(gaps)
        seq = m.predict_sequence(gaps)
        assert np.all(np.isnan(seq[:5]))
        assert np.all(np.isfinite(seq[5:]))
        assert seq[10] == pytest.approx(m.predict(gaps[5:10])[0])


class _OracleModel:
    """Duck-typed stand-in: forecasts a fixed value."""

    def __init__(self, value, window=4):
        self.value = value
        self.window = window
        self.is_fitted_ = True
        self.margin_ = 0.0

    def _check_fitted(self):
        pass

    def forecast_next(self, recent_gaps, recent_slots=None):
        return self.value

    def predict_sequence(self, gaps, arrival_slots=None):
        out = np.full(len(gaps), np.nan)
        out[self.window :] = self.value
        return out


class TestDecideSleep:
    def test_floor_when_arrival_expected_early(self):
        m = _OracleModel(3.0)
        assert decide_sleep(m, np.ones(4), t4=10.0, margin=0.0) == 10.0

    def test_extends_for_long_forecast(self):
        m = _OracleModel(5 * 10.0 + 0.4)
        assert decide_sleep(m, np.ones(4), t4=10.0, margin=0.0) == 50.0

    def test_full_margin_collapses_to_floor(self):
        g = 42.0
        m = _OracleModel(g)
        assert decide_sleep(m, np.ones(4), t4=10.0, margin=g) == 10.0

    def test_output_is_positive_multiple_of_period(self):
        m = _OracleModel(137.0)
        t4 = 11.0
        out = decide_sleep(m, np.ones(4), t4=t4, margin=5.0)
        assert out >= t4
        assert out / t4 == pytest.approx(round(out / t4))

    def test_unfitted_model_raises(self):
        with pytest.raises(NotFittedError):
            decide_sleep(InterArrivalForecaster(), np.ones(20), 10.0, 0.0)


class TestCalibration:
    def test_perfect_predictor_zero_margin(self):
        gaps = np.array([7.0, 23.0, 55.0, 12.0, 88.0, 31.0] * 60)
        m = _OracleModel(0.0, window=2)
        m.predict_sequence = lambda g, s=None: np.concatenate([[np.nan] * 2, g[2:]])
        res = calibrate_margin(m, gaps, t4=10.0, min_samples=10)
        assert isinstance(res, CalibrationResult)
        assert res.margin == 0.0
        assert res.p_md == 0.0 and res.p_f == 0.0
        assert res.attained

    def test_constant_zero_predictor_is_baseline(self):
        rng = np.random.default_rng(12)
        gaps = rng.integers(1, 40, size=400).astype(float)
        m = _OracleModel(0.0, window=3)
        res = calibrate_margin(m, gaps, t4=10.0, min_samples=10)
        # Never skips: no misses; every arrival beyond the first window is a
        # needless wake.
        assert res.p_md == 0.0
        obs = gaps[3:]
        frac_late = np.mean(np.floor(obs / 10.0 + 0.5).clip(1) > 1)
        assert res.p_f == pytest.approx(frac_late)

    def test_insufficient_samples_returns_conservative_flag(self):
        gaps = np.array([5.0] * 8)
        m = _OracleModel(5.0, window=2)
        res = calibrate_margin(m, gaps, t4=10.0, min_samples=100)
        assert not res.attained
        m2 = _OracleModel(5.0, window=2)
        m2.margin_ = res.margin
        assert decide_sleep(m2, np.ones(2), 10.0, res.margin) == 10.0

    def test_score_decisions_counts(self):
        preds = np.array([10.0, 30.0, 10.0])
        obs = np.array([10.0, 10.0, 30.0])
        p_md, p_f = score_decisions(preds, obs, t4=10.0, margin=0.0)
        assert p_md == pytest.approx(1 / 3)
        assert p_f == pytest.approx(1 / 3)
