import numpy as np
import pytest

from memnet.baselines import (
    LSTM,
    RNN,
    DetrendConfig,
    LstmParams,
    RnnParams,
    fit_linear_trend,
    lstm_detrended_forecast,
    lstm_step,
    rnn_step,
)
from memnet.core import DimensionError
from memnet.tasks import TaskInstance
from memnet.training import TrainConfig, fd_gradient, max_relative_error, train_sequences


def _zero_params(cls, n_x, n_h, n_o):
    p = cls.init(n_x, n_h, n_o, 0)
    for name in ("W_x", "W_h", "b", "W_o", "b_o"):
        getattr(p, name)[...] = 0.0
    return p


class TestRnnStep:
    def test_zero_params(self):
        h, o = rnn_step(np.ones(3), np.ones(2), _zero_params(RnnParams, 2, 3, 1))
        assert not h.any() and not o.any()

    def test_tanh_bound(self):
        rng = np.random.default_rng(0)
        p = RnnParams.init(2, 5, 1, 0)
        h = np.zeros(5)
        for _ in range(200):
            h, _ = rnn_step(h, rng.normal(size=2) * 50, p)
            assert np.all(np.abs(h) <= 1)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rnn_step(np.zeros(3), np.zeros(4), RnnParams.init(2, 3, 1, 0))


class TestLstmStep:
    def test_zero_params_closed_form(self):
        c_prev = np.array([0.8, -2.0])
        c, h, o = lstm_step(c_prev, np.ones(2), np.ones(3), _zero_params(LstmParams, 3, 2, 1))
        # i = f = o_gate = 0.5, candidate g = tanh(0) = 0
        assert np.allclose(c, 0.5 * c_prev, rtol=0, atol=0)
        assert np.allclose(h, 0.5 * np.tanh(0.5 * c_prev), rtol=1e-15)
        assert not o.any()

    def test_hidden_bound(self):
        rng = np.random.default_rng(1)
        p = LstmParams.init(2, 4, 1, 1)
        c, h = np.zeros(4), np.zeros(4)
        for _ in range(200):
            c, h, _ = lstm_step(c, h, rng.normal(size=2) * 20, p)
            assert np.all(np.abs(h) <= 1)

    def test_forget_bias_initialised_to_one(self):
        p = LstmParams.init(2, 3, 1, 0)
        assert np.array_equal(p.b[3:6], np.ones(3))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            lstm_step(np.zeros(3), np.zeros(3), np.zeros(5), LstmParams.init(2, 3, 1, 0))


@pytest.mark.parametrize("cls", [RNN, LSTM])
class TestBaselineGradients:
    def test_matches_finite_differences(self, cls):
        rng = np.random.default_rng(2)
        worst = 0.0
        for trial in range(20):
            n_x, n_h, n_o = (int(v) for v in rng.integers(1, 5, size=3))
            T = int(rng.integers(1, 9))
            model = cls(n_x, n_h, n_o, seed=trial)
            xs, ds = rng.normal(size=(T, n_x)), rng.normal(size=(T, n_o))
            mask = (rng.random(T) < 0.75).astype(float)
            analytic = model.backward(model.forward(xs, ds, mask)[0])
            # step 1e-5: at 1e-6 the LSTM's central differences carry ~1e-5 roundoff
            numeric = fd_gradient(lambda p: model.loss(p, xs, ds, mask), model.params, 1e-5)
            worst = max(worst, max_relative_error(analytic, numeric))
        assert worst < 1e-6

    def test_serialization_round_trip(self, cls, tmp_path):
        model = cls(2, 3, 1, seed=4)
        path = tmp_path / "b.ckpt"
        model.save(path)
        back = cls.load(path)
        for name in ("W_x", "W_h", "b", "W_o", "b_o"):
            assert getattr(back.params, name).tobytes() == getattr(model.params, name).tobytes()

    def test_trainer_interface(self, cls):
        rng = np.random.default_rng(5)
        data = []
        for _ in range(4):
            x = rng.normal(size=(10, 1))
            data.append(TaskInstance(x, np.roll(x, 1, axis=0) * 0.5, np.ones(10)))
        model = cls(1, 6, 1, seed=0)
        hist = train_sequences(model, data, TrainConfig(lr=0.01, epochs=40))
        assert hist[-1]["mean_loss"] < hist[0]["mean_loss"]


def test_wrong_kind_checkpoint(tmp_path):
    path = tmp_path / "r.ckpt"
    RNN(1, 2, 1).save(path)
    with pytest.raises(ValueError):
        LSTM.load(path)


class TestDetrend:
    def test_linear_trend_exact(self):
        t = np.arange(30.0)
        slope, intercept = fit_linear_trend(2 * t + 3)
        assert slope == pytest.approx(2.0, abs=1e-12)
        assert intercept == pytest.approx(3.0, abs=1e-12)

    def test_constant_series(self):
        slope, intercept = fit_linear_trend(np.full(10, 4.0))
        assert abs(slope) < 1e-12 and intercept == pytest.approx(4.0)

    def test_zero_residual_forecast_is_trend(self):
        y = 2 * np.arange(40.0) + 3
        preds = lstm_detrended_forecast(y, 30, DetrendConfig(epochs=1))
        assert np.allclose(preds, y[30:], atol=1e-9)

    def test_forecast_length_and_determinism(self):
        rng = np.random.default_rng(0)
        y = np.arange(40.0) + np.sin(np.arange(40) / 2) * 3 + rng.normal(size=40) * 0.1
        cfg = DetrendConfig(n_h=4, epochs=3)
        a = lstm_detrended_forecast(y, 30, cfg)
        b = lstm_detrended_forecast(y, 30, cfg)
        assert a.shape == (10,) and np.array_equal(a, b)
        assert lstm_detrended_forecast(y, 30, cfg, horizon=5).shape == (5,)

    def test_split_must_leave_test_points(self):
        with pytest.raises(ValueError):
            lstm_detrended_forecast(np.arange(10.0), 10)
