"""Backpropagation through time for MemNet, a finite-difference oracle, Adam,
and the per-sequence training loop shared by MemNet and the baseline cells.

The backward pass differentiates the memory as a function of history: a
read at step t sends gradient into the query of step t *and* into the key
and value of every earlier step whose event is still in the buffer, and
from there into that step's own (x, h_prev) inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import core
from .core import Dims, ModelParams, StepState, StepTrace

log = logging.getLogger(__name__)

__all__ = [
    "AdamState",
    "ComputationTape",
    "MemNet",
    "TrainConfig",
    "TrainingDiverged",
    "adam_update",
    "backward",
    "fd_gradient",
    "forward_record",
    "gradient_gate",
    "max_relative_error",
    "mse_loss",
    "train_sequences",
    "write_history_csv",
]


class TrainingDiverged(RuntimeError):
    pass


def mse_loss(o, d) -> float:
    """0.5 * ||d - o||^2."""
    o = np.asarray(o, dtype=float)
    d = np.asarray(d, dtype=float)
    if o.shape != d.shape:
        raise core.DimensionError(f"output shape {o.shape} != target shape {d.shape}")
    e = d - o
    return 0.5 * float(e @ e)


def _digest(params) -> str:
    h = hashlib.blake2b(digest_size=16)
    for f in dataclasses.fields(params):
        h.update(np.ascontiguousarray(getattr(params, f.name)).tobytes())
    return h.hexdigest()


def _as_rows(seq, width=None) -> np.ndarray:
    arr = np.asarray(seq, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if width is not None and arr.shape[1] != width:
        raise core.DimensionError(f"expected vectors of length {width}, got {arr.shape[1]}")
    return arr


def _norm_masks(n: int, mask, write_mask):
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=float)
    write_mask = np.ones(n, dtype=bool) if write_mask is None else np.asarray(write_mask, dtype=bool)
    if mask.shape != (n,) or write_mask.shape != (n,):
        raise core.DimensionError("mask and write_mask must have one entry per step")
    return mask, write_mask


@dataclass
class ComputationTape:
    traces: list[StepTrace]
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    write_mask: np.ndarray
    sigma: float = 1.0
    param_digest: str = ""

    def __len__(self):
        return len(self.traces)

    @property
    def outputs(self) -> np.ndarray:
        return np.array([tr.o for tr in self.traces])


def forward_record(inputs, targets, mask, params: ModelParams, sigma: float,
                   write_mask=None, dims: Dims | None = None) -> tuple[ComputationTape, float]:
    """Run a fresh MemNet over the sequence and record every step.

    Returns the tape and ``sum_t mask[t] * mse_loss(o_t, d_t)``.
    """
    n_x, n_h, n_o = params.dims_hint
    if dims is None:
        raise ValueError("dims is required (memory capacity is not implied by params)")
    params.validate(dims)
    xs = _as_rows(inputs, n_x)
    ds = _as_rows(targets, n_o)
    if len(ds) != len(xs):
        raise core.DimensionError("inputs and targets differ in length")
    mask, write_mask = _norm_masks(len(xs), mask, write_mask)
    state = StepState.initial(dims)
    traces = []
    loss = 0.0
    for t in range(len(xs)):
        state, o, tr = core.step(state, xs[t], params, sigma, write=write_mask[t])
        traces.append(tr)
        if mask[t]:
            loss += mask[t] * mse_loss(o, ds[t])
    tape = ComputationTape(traces, xs, ds, mask, write_mask, sigma, _digest(params))
    return tape, loss


def backward(tape: ComputationTape, params: ModelParams, sigma: float,
             window: int | None = None) -> ModelParams:
    """Exact reverse-mode gradient of the tape's masked loss.

    ``window`` enables truncated BPTT over consecutive chunks of that many
    steps: hidden-state and memory-event gradients are not carried across a
    chunk boundary.  The default (None) is the full, untruncated gradient.
    """
    if tape.param_digest and tape.param_digest != _digest(params):
        raise ValueError("tape was recorded with different parameters")
    if sigma != tape.sigma:
        raise ValueError(f"tape was recorded with sigma={tape.sigma}, got {sigma}")
    p = params
    g = ModelParams(**{k: np.zeros_like(v) for k, v in p.as_dict().items()})
    T = len(tape)
    n_h = p.Wq_h.shape[0]
    dK = np.zeros((T, n_h))  # gradient w.r.t. the key written at step j
    dV = np.zeros((T, n_h))
    dh = np.zeros(n_h)  # dJ/dh_t, flowing in from later steps
    for t in range(T - 1, -1, -1):
        tr = tape.traces[t]
        do = tape.mask[t] * (tr.o - tape.targets[t])
        g.Wo_r += np.outer(do, tr.r)
        g.Wo_h += np.outer(do, tr.h_prev)
        g.Wh_r += np.outer(dh, tr.r)
        g.Wh_x += np.outer(dh, tr.x)
        g.Wh_h += np.outer(dh, tr.h_prev)
        dr = p.Wo_r.T @ do + p.Wh_r.T @ dh
        dh_prev = p.Wo_h.T @ do + p.Wh_h.T @ dh

        # read: r = sum_i s_i V_i, s_i = exp(-|q - K_i|^2 / 2 sigma)
        filled = tr.origins >= 0
        dq = np.zeros(n_h)
        if filled.any():
            src = tr.origins[filled]
            s = tr.sims[filled]
            diff = tr.q - tr.keys[filled]
            coef = (tr.values[filled] @ dr) * s / sigma
            dq = -(coef @ diff)
            live = src >= (t // window) * window if window else np.ones(len(src), dtype=bool)
            # each origin appears at most once per snapshot, so fancy += is safe
            dK[src[live]] += coef[live, None] * diff[live]
            dV[src[live]] += s[live, None] * dr

        dk, dv = dK[t], dV[t]  # complete: only later reads touch them
        g.Wq_x += np.outer(dq, tr.x)
        g.Wq_h += np.outer(dq, tr.h_prev)
        g.Wk_x += np.outer(dk, tr.x)
        g.Wk_h += np.outer(dk, tr.h_prev)
        g.Wv_x += np.outer(dv, tr.x)
        g.Wv_h += np.outer(dv, tr.h_prev)
        dh_prev += p.Wq_h.T @ dq + p.Wk_h.T @ dk + p.Wv_h.T @ dv
        if window and t % window == 0:
            dh_prev[:] = 0.0
        dh = dh_prev
    return g


def read_jacobians(q, keys, values, sigma: float):
    """Closed-form pieces of the read derivative, one slot at a time.

    Returns ``(dr_dq, dr_dk, dr_dv)``: ``dr_dq`` is n_h x n_h; ``dr_dk`` and
    ``dr_dv`` are lists of per-slot n_h x n_h Jacobians.
    """
    q = np.asarray(q, dtype=float)
    dr_dq = np.zeros((len(q), len(q)))
    dr_dk, dr_dv = [], []
    for k, v in zip(keys, values):
        diff = q - k
        s = np.exp(-(diff @ diff) / (2.0 * sigma))
        dr_dq -= np.outer(v, diff) * s / sigma
        dr_dk.append(np.outer(v, diff) * s / sigma)
        dr_dv.append(s * np.eye(len(q)))
    return dr_dq, dr_dk, dr_dv


def fd_gradient(loss_fn: Callable[[object], float], params, epsilon: float = 1e-6):
    """Central finite differences of ``loss_fn(params)`` for every scalar.

    ``loss_fn`` re-runs the full forward pass.  The step for entry ``w`` is
    ``epsilon * max(1, |w|)``.  Works for any dataclass of arrays.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    work = dataclasses.replace(params, **{f.name: getattr(params, f.name).copy()
                                          for f in dataclasses.fields(params)})
    grads = {}
    for f in dataclasses.fields(work):
        arr = getattr(work, f.name)
        out = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            w = arr[idx]
            h = epsilon * max(1.0, abs(w))
            arr[idx] = w + h
            up = loss_fn(work)
            arr[idx] = w - h
            down = loss_fn(work)
            arr[idx] = w
            out[idx] = (up - down) / (2.0 * h)
        grads[f.name] = out
    return type(params)(**grads)


def max_relative_error(a, b, floor: float = 1e-4) -> float:
    """Largest entrywise |a - b| / max(|a|, |b|, floor) across two param sets."""
    worst = 0.0
    for f in dataclasses.fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if x.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params, grads, state: AdamState):
    """One bias-corrected Adam step; returns ``(new_params, new_state)``.

    Neither input is modified.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_vals, m_new, v_new = {}, {}, {}
    for f in dataclasses.fields(params):
        name = f.name
        w = getattr(params, name)
        g = getattr(grads, name)
        if g.shape != w.shape:
            raise core.DimensionError(f"{name}: grad shape {g.shape} != param shape {w.shape}")
        m = b1 * state.m.get(name, np.zeros_like(w)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(w)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_vals[name] = w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[name], v_new[name] = m, v
    new_state = dataclasses.replace(state, step=t, m=m_new, v=v_new)
    return dataclasses.replace(params, **new_vals), new_state


# -- model wrapper -------------------------------------------------------------

class MemNet:
    """MemNet bound to its dims and kernel size, with the trainer interface.

    Baseline cells in :mod:`memnet.baselines` expose the same methods, so
    every task and harness routine works with any of them.
    """

    kind = "memnet"

    def __init__(self, dims: Dims, sigma: float = 1.0, seed: int = 0, params: ModelParams | None = None):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.dims = dims
        self.sigma = float(sigma)
        self.params = core.init_params(dims, seed) if params is None else params
        self.params.validate(dims)

    @property
    def n_x(self):
        return self.dims.n_x

    @property
    def n_o(self):
        return self.dims.n_o

    def init_state(self) -> StepState:
        return StepState.initial(self.dims)

    def step(self, state, x, write: bool = True):
        state, o, _ = core.step(state, x, self.params, self.sigma, write=write)
        return state, o

    def step_traced(self, state, x, write: bool = True):
        return core.step(state, x, self.params, self.sigma, write=write)

    def forward(self, inputs, targets, mask=None, write_mask=None):
        return forward_record(inputs, targets, mask, self.params, self.sigma,
                              write_mask=write_mask, dims=self.dims)

    def backward(self, tape, window: int | None = None) -> ModelParams:
        return backward(tape, self.params, self.sigma, window=window)

    def loss(self, params, inputs, targets, mask=None, write_mask=None) -> float:
        return forward_record(inputs, targets, mask, params, self.sigma,
                              write_mask=write_mask, dims=self.dims)[1]

    def save(self, path) -> None:
        core.save_params(path, self.params, self.dims, kind=self.kind)

    @classmethod
    def load(cls, path, sigma: float = 1.0) -> "MemNet":
        kind, (n_x, n_h, n_o, n_mem), arrays = core.load_params(path)
        if kind != cls.kind:
            raise ValueError(f"{path} holds a {kind!r} checkpoint, not memnet")
        dims = Dims(n_x, n_h, n_o, n_mem)
        return cls(dims, sigma=sigma, params=ModelParams(*arrays))


# -- training loop -------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 10
    seed: int = 0
    shuffle: bool = True
    window: int | None = None
    clip: float | None = None  # global-norm clipping; off unless a run diverges
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _clip(grads, max_norm: float):
    total = np.sqrt(sum(float(np.sum(getattr(grads, f.name) ** 2)) for f in dataclasses.fields(grads)))
    if total <= max_norm or total == 0:
        return grads
    scale = max_norm / total
    return dataclasses.replace(grads, **{f.name: getattr(grads, f.name) * scale
                                         for f in dataclasses.fields(grads)})


def train_sequences(model, instances: Sequence, config: TrainConfig,
                    metric: Callable[[object], float] | None = None,
                    callback: Callable[[int, float], None] | None = None) -> list[dict]:
    """Online training: one forward/backward/Adam step per sequence.

    Every sequence starts from a fresh state; there is no batching and no
    padding.  ``metric(model)`` is evaluated at the end of each epoch when
    given.  Returns one ``{"epoch", "mean_loss", "task_metric"}`` row per
    epoch.  A non-finite loss raises :class:`TrainingDiverged`.
    """
    if not instances:
        raise ValueError("empty task set")
    rng = random.Random(config.seed)
    opt = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    order = list(range(len(instances)))
    history = []
    for epoch in range(1, config.epochs + 1):
        if config.shuffle:
            rng.shuffle(order)
        total = 0.0
        for i in order:
            inst = instances[i]
            tape, loss = model.forward(inst.inputs, inst.targets, inst.mask,
                                       getattr(inst, "write_mask", None))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            grads = model.backward(tape, window=config.window)
            if config.clip:
                grads = _clip(grads, config.clip)
            model.params, opt = adam_update(model.params, grads, opt)
            total += loss
        row = {
            "epoch": epoch,
            "mean_loss": float(total / len(instances)),
            "task_metric": float(metric(model)) if metric else float("nan"),
        }
        history.append(row)
        log.debug("epoch %d loss %.6g metric %.6g", epoch, row["mean_loss"], row["task_metric"])
        if callback:
            callback(epoch, row["mean_loss"])
    return history


def write_history_csv(history: list[dict], path) -> None:
    lines = ["epoch,mean_loss,task_metric"]
    lines += [f"{r['epoch']},{r['mean_loss']!r},{r['task_metric']!r}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n")


# -- gradient gate -------------------------------------------------------------

@dataclass
class GateResult:
    trials: int
    max_rel_error: float
    tolerance: float
    regimes: dict

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def random_gate_case(rng: np.random.Generator):
    """A random small MemNet problem: dims <= 4, length <= 8.

    Memory capacity is drawn so that both full and not-full buffers occur;
    loss masks and write gates are random.
    """
    n_x, n_h, n_o = (int(v) for v in rng.integers(1, 5, size=3))
    T = int(rng.integers(1, 9))
    n_mem = int(rng.integers(1, 5))
    model = MemNet(Dims(n_x, n_h, n_o, n_mem), sigma=float(rng.uniform(0.5, 2.0)),
                   seed=int(rng.integers(2 ** 31)))
    xs = rng.normal(size=(T, n_x))
    ds = rng.normal(size=(T, n_o))
    mask = (rng.random(T) < 0.75).astype(float)
    write = rng.random(T) < 0.75
    return model, xs, ds, mask, write


def gradient_gate(trials: int = 100, seed: int = 0, tolerance: float = 1e-5,
                  epsilon: float = 1e-6) -> GateResult:
    """Compare :func:`backward` with :func:`fd_gradient` on random small cases."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    regimes = {"memory_full": 0, "memory_not_full": 0, "gated": 0, "masked": 0}
    for _ in range(trials):
        model, xs, ds, mask, write = random_gate_case(rng)
        tape, _ = model.forward(xs, ds, mask, write)
        analytic = model.backward(tape)
        numeric = fd_gradient(lambda p: model.loss(p, xs, ds, mask, write), model.params, epsilon)
        worst = max(worst, max_relative_error(analytic, numeric))
        regimes["memory_full" if write.sum() > model.dims.n_mem else "memory_not_full"] += 1
        regimes["gated"] += int((~write).any())
        regimes["masked"] += int((mask == 0).any())
    return GateResult(trials, worst, tolerance, regimes)
