"""Vanilla tanh RNN and single-layer LSTM baselines with manual BPTT.

Both classes follow the same trainer interface as
:class:`memnet.training.MemNet` (``init_state``, ``step``, ``forward``,
``backward``, ``loss``), so tasks and the harness treat them uniformly.
Write gating has no meaning for these cells and is ignored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import DimensionError

__all__ = [
    "LSTM",
    "LstmParams",
    "RNN",
    "RnnParams",
    "fit_linear_trend",
    "lstm_detrended_forecast",
    "lstm_step",
    "rnn_step",
]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check(name, arr, shape):
    if arr.shape != shape:
        raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")


@dataclass
class RnnParams:
    W_x: np.ndarray
    W_h: np.ndarray
    b: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray

    @classmethod
    def init(cls, n_x, n_h, n_o, seed):
        rng = np.random.default_rng(seed)
        u = lambda shape, fan: rng.uniform(-1 / np.sqrt(fan), 1 / np.sqrt(fan), size=shape)
        return cls(u((n_h, n_x), n_x), u((n_h, n_h), n_h), np.zeros(n_h),
                   u((n_o, n_h), n_h), np.zeros(n_o))


@dataclass
class LstmParams:
    """Gate blocks are stacked in the order input, forget, candidate, output."""

    W_x: np.ndarray  # 4n_h x n_x
    W_h: np.ndarray  # 4n_h x n_h
    b: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray

    @classmethod
    def init(cls, n_x, n_h, n_o, seed):
        rng = np.random.default_rng(seed)
        u = lambda shape, fan: rng.uniform(-1 / np.sqrt(fan), 1 / np.sqrt(fan), size=shape)
        b = np.zeros(4 * n_h)
        b[n_h:2 * n_h] = 1.0  # forget-gate bias
        return cls(u((4 * n_h, n_x), n_x), u((4 * n_h, n_h), n_h), b,
                   u((n_o, n_h), n_h), np.zeros(n_o))


def rnn_step(h_prev, x, params: RnnParams):
    """h = tanh(W_x x + W_h h_prev + b); o = W_o h + b_o."""
    n_h, n_x = params.W_x.shape
    x = np.asarray(x, dtype=float)
    _check("x", x, (n_x,))
    _check("h_prev", h_prev, (n_h,))
    h = np.tanh(params.W_x @ x + params.W_h @ h_prev + params.b)
    return h, params.W_o @ h + params.b_o


def lstm_step(c_prev, h_prev, x, params: LstmParams):
    n4, n_x = params.W_x.shape
    n_h = n4 // 4
    x = np.asarray(x, dtype=float)
    _check("x", x, (n_x,))
    _check("h_prev", h_prev, (n_h,))
    _check("c_prev", c_prev, (n_h,))
    gates = _lstm_gates(params, x, h_prev)
    i, f, g, og = gates
    c = f * c_prev + i * g
    h = og * np.tanh(c)
    return c, h, params.W_o @ h + params.b_o


def _lstm_gates(params, x, h_prev):
    n_h = params.W_h.shape[1]
    z = params.W_x @ x + params.W_h @ h_prev + params.b
    return (_sigmoid(z[:n_h]), _sigmoid(z[n_h:2 * n_h]),
            np.tanh(z[2 * n_h:3 * n_h]), _sigmoid(z[3 * n_h:]))


@dataclass
class _Tape:
    xs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    hs: np.ndarray  # hs[t] is h after step t; hs[-1] would be h_{-1} = 0
    outputs: np.ndarray
    extra: dict


def _prep(model, inputs, targets, mask):
    xs = np.asarray(inputs, dtype=float)
    ds = np.asarray(targets, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    if ds.ndim == 1:
        ds = ds[:, None]
    if xs.shape[1] != model.n_x or ds.shape[1] != model.n_o or len(xs) != len(ds):
        raise DimensionError("input/target shapes do not match the model")
    mask = np.ones(len(xs)) if mask is None else np.asarray(mask, dtype=float)
    return xs, ds, mask


class _Baseline:
    kind = ""
    params_cls = None

    def __init__(self, n_x: int, n_h: int, n_o: int, seed: int = 0, params=None):
        self.n_x, self.n_h, self.n_o = n_x, n_h, n_o
        self.params = self.params_cls.init(n_x, n_h, n_o, seed) if params is None else params

    def loss(self, params, inputs, targets, mask=None, write_mask=None) -> float:
        saved = self.params
        self.params = params
        try:
            return self.forward(inputs, targets, mask)[1]
        finally:
            self.params = saved

    def save(self, path) -> None:
        core.save_params(path, self.params, (self.n_x, self.n_h, self.n_o, 0), kind=self.kind)

    @classmethod
    def load(cls, path):
        kind, (n_x, n_h, n_o, _), arrays = core.load_params(path)
        if kind != cls.kind:
            raise ValueError(f"{path} holds a {kind!r} checkpoint, not {cls.kind}")
        return cls(n_x, n_h, n_o, params=cls.params_cls(*arrays))


class RNN(_Baseline):
    kind = "rnn"
    params_cls = RnnParams

    def init_state(self):
        return np.zeros(self.n_h)

    def step(self, state, x, write: bool = True):
        return rnn_step(state, x, self.params)

    def forward(self, inputs, targets, mask=None, write_mask=None):
        xs, ds, mask = _prep(self, inputs, targets, mask)
        p = self.params
        T = len(xs)
        hs = np.zeros((T + 1, self.n_h))  # hs[t + 1] = h_t
        outs = np.zeros((T, self.n_o))
        loss = 0.0
        for t in range(T):
            hs[t + 1], outs[t] = rnn_step(hs[t], xs[t], p)
            e = ds[t] - outs[t]
            loss += 0.5 * mask[t] * float(e @ e)
        return _Tape(xs, ds, mask, hs, outs, {}), loss

    def backward(self, tape, window: int | None = None) -> RnnParams:
        p = self.params
        g = RnnParams(*(np.zeros_like(a) for a in (p.W_x, p.W_h, p.b, p.W_o, p.b_o)))
        dh_next = np.zeros(self.n_h)
        for t in range(len(tape.xs) - 1, -1, -1):
            h, h_prev = tape.hs[t + 1], tape.hs[t]
            do = tape.mask[t] * (tape.outputs[t] - tape.targets[t])
            g.W_o += np.outer(do, h)
            g.b_o += do
            dh = p.W_o.T @ do + dh_next
            dz = dh * (1.0 - h * h)
            g.W_x += np.outer(dz, tape.xs[t])
            g.W_h += np.outer(dz, h_prev)
            g.b += dz
            dh_next = p.W_h.T @ dz
            if window and t % window == 0:
                dh_next[:] = 0.0
        return g


class LSTM(_Baseline):
    kind = "lstm"
    params_cls = LstmParams

    def init_state(self):
        return np.zeros(self.n_h), np.zeros(self.n_h)

    def step(self, state, x, write: bool = True):
        c, h = state
        c, h, o = lstm_step(c, h, x, self.params)
        return (c, h), o

    def forward(self, inputs, targets, mask=None, write_mask=None):
        xs, ds, mask = _prep(self, inputs, targets, mask)
        p = self.params
        T, n = len(xs), self.n_h
        hs = np.zeros((T + 1, n))
        cs = np.zeros((T + 1, n))
        gates = np.zeros((T, 4, n))
        outs = np.zeros((T, self.n_o))
        loss = 0.0
        for t in range(T):
            i, f, gg, og = _lstm_gates(p, xs[t], hs[t])
            gates[t] = (i, f, gg, og)
            cs[t + 1] = f * cs[t] + i * gg
            hs[t + 1] = og * np.tanh(cs[t + 1])
            outs[t] = p.W_o @ hs[t + 1] + p.b_o
            e = ds[t] - outs[t]
            loss += 0.5 * mask[t] * float(e @ e)
        return _Tape(xs, ds, mask, hs, outs, {"cs": cs, "gates": gates}), loss

    def backward(self, tape, window: int | None = None) -> LstmParams:
        p = self.params
        g = LstmParams(*(np.zeros_like(a) for a in (p.W_x, p.W_h, p.b, p.W_o, p.b_o)))
        cs, gates = tape.extra["cs"], tape.extra["gates"]
        dh_next = np.zeros(self.n_h)
        dc_next = np.zeros(self.n_h)
        for t in range(len(tape.xs) - 1, -1, -1):
            i, f, gg, og = gates[t]
            h_prev = tape.hs[t]
            tc = np.tanh(cs[t + 1])
            do = tape.mask[t] * (tape.outputs[t] - tape.targets[t])
            g.W_o += np.outer(do, tape.hs[t + 1])
            g.b_o += do
            dh = p.W_o.T @ do + dh_next
            dc = dc_next + dh * og * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * gg * i * (1.0 - i),
                dc * cs[t] * f * (1.0 - f),
                dc * i * (1.0 - gg * gg),
                dh * tc * og * (1.0 - og),
            ])
            g.W_x += np.outer(dz, tape.xs[t])
            g.W_h += np.outer(dz, h_prev)
            g.b += dz
            dh_next = p.W_h.T @ dz
            dc_next = dc * f
            if window and t % window == 0:
                dh_next[:] = 0.0
                dc_next[:] = 0.0
        return g


# -- detrended LSTM forecasting ------------------------------------------------

def fit_linear_trend(y) -> tuple[float, float]:
    """Least-squares (slope, intercept) of y against 0..n-1."""
    y = np.asarray(y, dtype=float)
    t = np.arange(len(y), dtype=float)
    if len(y) == 1:
        return 0.0, float(y[0])
    slope, intercept = np.polyfit(t, y, 1)
    return float(slope), float(intercept)


@dataclass
class DetrendConfig:
    n_h: int = 16
    lr: float = 0.01
    epochs: int = 300
    seed: int = 0
    window_len: int | None = None  # split training residuals into chunks; None = one sequence


def lstm_detrended_forecast(series, split: int, config: DetrendConfig | None = None,
                            horizon: int | None = None, return_model: bool = False):
    """Remove a linear trend fitted on ``series[:split]``, train an LSTM to
    predict the next residual, free-run it past ``split`` and add the trend back.

    Residuals are divided by their training standard deviation before the
    LSTM sees them (a constant series gets scale 1).  Returns ``horizon``
    predictions for indices ``split, split + 1, ...`` (default: the rest of
    the series).
    """
    from .harness import recursive_forecast
    from .tasks import TaskInstance
    from .training import TrainConfig, train_sequences

    config = config or DetrendConfig()
    y = np.asarray(series, dtype=float)
    if len(y) <= split:
        raise ValueError("series must be longer than split")
    horizon = len(y) - split if horizon is None else horizon
    slope, intercept = fit_linear_trend(y[:split])
    trend = slope * np.arange(split + horizon) + intercept
    resid = y[:split] - trend[:split]
    scale = float(np.std(resid)) or 1.0
    z = resid / scale

    model = LSTM(1, config.n_h, 1, seed=config.seed)
    if np.allclose(z, 0):
        preds = trend[split:split + horizon].copy()
        return (preds, model) if return_model else preds
    chunk = config.window_len or (split - 1)
    instances = []
    for s in range(0, split - 1, chunk):
        seg = z[s:min(s + chunk + 1, split)]
        if len(seg) >= 2:
            instances.append(TaskInstance(seg[:-1, None], seg[1:, None], np.ones(len(seg) - 1)))
    train_sequences(model, instances, TrainConfig(lr=config.lr, epochs=config.epochs,
                                                  seed=config.seed, shuffle=True))
    free, _ = recursive_forecast(model, z[:, None], horizon)
    preds = free[:, 0] * scale + trend[split:split + len(free)]
    return (preds, model) if return_model else preds
