"""Experiment runner: per-task training/evaluation protocols and artifact writers.

``run(config)`` trains one model per seed, evaluates it with the task's
protocol and writes a JSON report plus CSV artifacts (learning curves,
forecasts, correctness grids, memory dumps) under ``config.out``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tasks
from .baselines import LSTM, RNN, DetrendConfig, lstm_detrended_forecast
from .core import Dims
from .training import MemNet, TrainConfig, TrainingDiverged, train_sequences, write_history_csv

log = logging.getLogger(__name__)

__all__ = [
    "CopyGenReport",
    "RunConfig",
    "RunReport",
    "babi_eval",
    "build_model",
    "copy_generalization",
    "dump_memory_artifacts",
    "nrmse",
    "recursive_forecast",
    "run",
    "synchronize_eval",
]

TASKS = ("henon", "airline", "copy", "reverse", "babi")
MODELS = ("memnet", "rnn", "lstm")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "henon"
    model: str = "memnet"
    n_h: int = 8
    n_mem: int = 64
    sigma: float = 1.0
    lr: float = 0.01
    epochs: int = 200
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs/henon"
    # mode flags
    recursive: bool = True
    synchronize: bool = True
    joint: bool = False
    # henon
    henon_sequences: int = 1
    henon_length: int = 2000
    include_y: bool = False
    # copy / reverse
    n_bits: int = 8
    train_max_len: int = 20
    train_sequences: int = 2000
    eval_lengths: list[int] = field(default_factory=lambda: list(range(1, 21)) + [120])
    eval_per_length: int = 100
    # babi
    babi_dir: str | None = None
    babi_task: int = 1
    babi_train_stories: int = 1000
    babi_test_stories: int = 1000
    # airline
    airline_path: str | None = None
    lstm_baseline: bool = True
    lstm_n_h: int = 16
    # misc
    window: int | None = None
    clip: float | None = None
    dump_memory: bool = True

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {MODELS}")
        if self.task == "babi" and self.model != "memnet":
            raise ConfigError("babi protocol relies on memory write gating; use model=memnet")
        if self.n_h < 1 or self.n_mem < 1 or self.epochs < 0 or not self.seeds:
            raise ConfigError("n_h, n_mem must be positive, epochs >= 0, seeds non-empty")
        if not self.sigma > 0 or not self.lr > 0:
            raise ConfigError("sigma and lr must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# Per-task defaults; used by the CLI when a task is picked without a config file.
PRESETS = {
    "henon": dict(task="henon", n_h=8, n_mem=64, lr=0.01, epochs=200, sigma=0.3),
    "airline": dict(task="airline", n_h=12, n_mem=16, lr=0.01, epochs=300, sigma=1.0),
    "copy": dict(task="copy", n_h=32, n_mem=128, lr=1e-4, epochs=50, sigma=1.0),
    "reverse": dict(task="reverse", n_h=32, n_mem=128, lr=1e-4, epochs=50, sigma=1.0),
    "babi": dict(task="babi", n_h=32, n_mem=512, lr=1e-4, epochs=60, sigma=1.0,
                 seeds=list(range(10))),
}


@dataclass
class RunReport:
    config: dict
    seeds: list[dict]
    best_seed: int | None
    wall_clock_s: float = 0.0
    artifacts: list[str] = field(default_factory=list)

    def body(self) -> dict:
        """Report content without timing, for reproducibility comparisons."""
        d = dataclasses.asdict(self)
        d.pop("wall_clock_s")
        return d

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# -- model construction ----------------------------------------------------------

def build_model(kind: str, n_x: int, n_o: int, n_h: int, n_mem: int = 1,
                sigma: float = 1.0, seed: int = 0):
    if kind == "memnet":
        return MemNet(Dims(n_x, n_h, n_o, n_mem), sigma=sigma, seed=seed)
    if kind == "rnn":
        return RNN(n_x, n_h, n_o, seed=seed)
    if kind == "lstm":
        return LSTM(n_x, n_h, n_o, seed=seed)
    raise ConfigError(f"unknown model kind {kind!r}")


def load_model(path, sigma: float = 1.0):
    from .core import load_params
    kind = load_params(path)[0]
    if kind == "memnet":
        return MemNet.load(path, sigma=sigma)
    return {"rnn": RNN, "lstm": LSTM}[kind].load(path)


# -- evaluation protocols ----------------------------------------------------------

def recursive_forecast(model, warmup, horizon: int) -> tuple[np.ndarray, bool]:
    """Free-run prediction.

    The warm-up series is fed step by step to build state and memory; then
    each prediction is fed back as the next input for ``horizon`` steps.
    Memory keeps receiving events during the free run.  Returns
    ``(predictions, failed)``; on a non-finite prediction the forecast is
    truncated and ``failed`` is True.
    """
    warm = np.asarray(warmup, dtype=float)
    if warm.ndim == 1:
        warm = warm[:, None]
    if horizon <= 0:
        return np.zeros((0, model.n_o)), False
    if len(warm) == 0:
        raise ValueError("warm-up series is empty")
    state = model.init_state()
    for x in warm:
        state, o = model.step(state, x)
    preds = []
    for _ in range(horizon):
        if not np.all(np.isfinite(o)):
            return np.array(preds).reshape(-1, model.n_o), True
        preds.append(np.array(o, dtype=float))
        if len(preds) == horizon:
            break
        state, o = model.step(state, o)
    return np.array(preds), False


def synchronize_eval(model, series) -> np.ndarray:
    """One-step-ahead absolute errors from an empty memory and zero state.

    ``errors[t] = |o_t - series[t + 1]|`` (Euclidean norm for vector series).
    """
    y = np.asarray(series, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if len(y) < 2:
        return np.zeros(0)
    state = model.init_state()
    errs = np.empty(len(y) - 1)
    for t in range(len(y) - 1):
        state, o = model.step(state, y[t])
        errs[t] = np.linalg.norm(o - y[t + 1])
    return errs


def nrmse(pred, target) -> float:
    """Root-mean-square error divided by the standard deviation of the target."""
    pred = np.asarray(pred, dtype=float).ravel()
    target = np.asarray(target, dtype=float).ravel()
    if len(pred) != len(target):
        return float("inf")
    scale = np.std(target) or 1.0
    return float(np.sqrt(np.mean((pred - target) ** 2)) / scale)


def predict_bits(model, inst: tasks.TaskInstance) -> np.ndarray:
    """Thresholded (> 0.5) outputs over the masked output phase."""
    state = model.init_state()
    outs = []
    for t, x in enumerate(inst.inputs):
        state, o = model.step(state, x)
        if inst.mask[t]:
            outs.append(o)
    return (np.array(outs) > 0.5).astype(float)


@dataclass
class CopyGenReport:
    lengths: list[int]
    bit_accuracy: list[float]
    sequence_accuracy: list[float]
    grids: dict[int, np.ndarray]  # length -> (n_sequences, length) position-correct flags

    def rows(self):
        for L, b, s in zip(self.lengths, self.bit_accuracy, self.sequence_accuracy):
            yield {"length": L, "bit_accuracy": b, "sequence_accuracy": s}


def copy_generalization(model, lengths: Sequence[int], n_per_length: int = 100,
                        n_bits: int = 8, reverse: bool = False, seed: int = 12345) -> CopyGenReport:
    """Accuracy of a copy (or reverse) model on fresh sequences of each length.

    A position counts as correct when every bit at that output position is
    right.  Held-out seeds are derived from ``seed`` and the length.
    """
    gen = tasks.gen_reverse if reverse else tasks.gen_copy
    bit_acc, seq_acc, grids = [], [], {}
    for L in lengths:
        grid = np.zeros((n_per_length, L), dtype=bool)
        correct_bits = 0
        for j in range(n_per_length):
            inst = gen(L, n_bits, seed=(seed, L, j))
            pred = predict_bits(model, inst)
            gold = inst.targets[inst.mask > 0]
            ok = pred == gold
            correct_bits += int(ok.sum())
            grid[j] = ok.all(axis=1)
        bit_acc.append(correct_bits / (n_per_length * L * n_bits))
        seq_acc.append(float(grid.all(axis=1).mean()))
        grids[L] = grid
    return CopyGenReport(list(lengths), bit_acc, seq_acc, grids)


def babi_answers(model, inst: tasks.TaskInstance) -> list[int]:
    """Argmax (lowest index on ties) of the output at every answer slot."""
    state = model.init_state()
    picks = []
    for t, x in enumerate(inst.inputs):
        write = True if inst.write_mask is None else bool(inst.write_mask[t])
        state, o = model.step(state, x, write=write)
        if inst.mask[t]:
            picks.append(int(np.argmax(o)))
    return picks


def babi_eval(model, instances: Sequence[tasks.TaskInstance]) -> dict:
    """Question error rate; a task is 'failed' when error exceeds 5%."""
    wrong = total = 0
    for inst in instances:
        if inst.inputs.shape[1] != model.n_x or inst.targets.shape[1] != model.n_o:
            raise ValueError("vocabulary size does not match the model")
        gold = inst.meta["answers"]
        picks = babi_answers(model, inst)
        wrong += sum(p != g for p, g in zip(picks, gold))
        total += len(gold)
    err = wrong / total if total else 0.0
    return {"error_rate": err, "questions": total, "failed": err > 0.05}


def memory_trace(model: MemNet, inputs, write_mask=None):
    """Run a fresh MemNet over ``inputs``; returns (similarity matrix T x n_mem, final state)."""
    xs = np.asarray(inputs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    state = model.init_state()
    sims = np.zeros((len(xs), model.dims.n_mem))
    for t, x in enumerate(xs):
        write = True if write_mask is None else bool(write_mask[t])
        state, _, tr = model.step_traced(state, x, write=write)
        sims[t] = tr.sims
    return sims, state


def _write_matrix(path, mat, header_prefix: str) -> None:
    mat = np.atleast_2d(mat)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{header_prefix}{j}" for j in range(mat.shape[1])])
        for row in mat:
            w.writerow([repr(float(v)) for v in row])


def dump_memory_artifacts(model: MemNet, inputs, out_dir, prefix: str = "", write_mask=None) -> dict:
    """Write final key/value matrices and the per-step similarity matrix.

    ``keys.csv``/``values.csv`` hold one row per memory slot (slot 0, the
    newest event, first) and one column per embedding dimension.
    ``similarity.csv`` holds one row per time step and one column per slot.
    """
    if not isinstance(model, MemNet):
        raise TypeError("memory dumps need a MemNet model")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sims, state = memory_trace(model, inputs, write_mask)
    paths = {
        "keys": out / f"{prefix}keys.csv",
        "values": out / f"{prefix}values.csv",
        "similarity": out / f"{prefix}similarity.csv",
    }
    _write_matrix(paths["keys"], state.memory.keys, "dim")
    _write_matrix(paths["values"], state.memory.values, "dim")
    _write_matrix(paths["similarity"], sims, "slot")
    return {k: str(v) for k, v in paths.items()}


def write_grid_csv(report: CopyGenReport, length: int, path) -> None:
    """Correctness grid for one length: one row per sequence, 1 = correct."""
    _write_matrix(path, report.grids[length].astype(int), "pos")


def _write_rows(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# -- per-task protocols ----------------------------------------------------------

def _henon_data(cfg: RunConfig):
    train = tasks.henon_task(cfg.henon_sequences, cfg.henon_length, include_y=cfg.include_y)
    # held-out orbit from a different start point
    test = tasks.henon_task(1, min(cfg.henon_length, 1000), x0=0.3, y0=0.0,
                            discard=500, include_y=cfg.include_y)
    return train, test


def _copy_data(cfg: RunConfig, seed: int):
    gen = tasks.gen_reverse if cfg.task == "reverse" else tasks.gen_copy
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, cfg.train_max_len + 1, size=cfg.train_sequences)
    return [gen(int(L), cfg.n_bits, seed=(seed, i)) for i, L in enumerate(lengths)]


def _babi_data(cfg: RunConfig):
    if cfg.babi_dir:
        d = Path(cfg.babi_dir)
        train_files = sorted(d.glob(f"qa{cfg.babi_task}_*_train.txt"))
        test_files = sorted(d.glob(f"qa{cfg.babi_task}_*_test.txt"))
        if not train_files or not test_files:
            raise ConfigError(f"no qa{cfg.babi_task} train/test files in {d}")
        train = tasks.babi_parse(train_files[0])[:cfg.babi_train_stories]
        test = tasks.babi_parse(test_files[0])[:cfg.babi_test_stories]
        if cfg.joint:
            everything = [tasks.babi_parse(p) for p in sorted(d.glob("qa*_*.txt"))]
            vocab = tasks.build_vocab(*everything)
        else:
            vocab = tasks.build_vocab(train, test)
    else:
        if cfg.babi_task != 1:
            raise ConfigError("only task 1 can be synthesized; pass babi_dir for other tasks")
        train = tasks.babi_parse(tasks.generate_babi_qa1(cfg.babi_train_stories, seed=1))
        test = tasks.babi_parse(tasks.generate_babi_qa1(cfg.babi_test_stories, seed=2))
        vocab = tasks.build_vocab(train, test)
    enc = lambda ss: [tasks.babi_encode(s, vocab) for s in ss]
    return enc(train), enc(test), vocab


def _mean_step_loss(model, instances) -> float:
    total = steps = 0.0
    for inst in instances:
        _, loss = model.forward(inst.inputs, inst.targets, inst.mask, inst.write_mask)
        total += loss
        steps += float(np.sum(inst.mask))
    return total / steps if steps else 0.0


def _run_seed(cfg: RunConfig, seed: int, out: Path) -> dict:
    tag = f"seed{seed}"
    artifacts = []
    metrics: dict = {}
    tc = TrainConfig(lr=cfg.lr, epochs=cfg.epochs, seed=seed, window=cfg.window, clip=cfg.clip)

    if cfg.task == "henon":
        train, test = _henon_data(cfg)
        n_x = train[0].inputs.shape[1]
        model = build_model(cfg.model, n_x, 1, cfg.n_h, cfg.n_mem, cfg.sigma, seed)
        history = train_sequences(model, train, tc)
        metrics["train_mse"] = _mean_step_loss(model, train)
        metrics["test_mse"] = _mean_step_loss(model, test)
        if cfg.dump_memory and isinstance(model, MemNet):
            paths = dump_memory_artifacts(model, test[0].inputs, out, prefix=f"{tag}_")
            artifacts += paths.values()

    elif cfg.task == "airline":
        series = tasks.load_airline(cfg.airline_path)
        y = series.values
        train = [tasks.airline_instance(y, 0, 96)]
        model = build_model(cfg.model, 1, 1, cfg.n_h, cfg.n_mem, cfg.sigma, seed)
        val_metric = lambda m: nrmse(recursive_forecast(m, y[:72, None], 24)[0], y[72:96])
        history = train_sequences(model, train, tc, metric=val_metric)
        metrics["train_mse"] = _mean_step_loss(model, train)
        rows = []
        if cfg.recursive:
            preds, failed = recursive_forecast(model, y[:96, None], 48)
            metrics["forecast_nrmse"] = nrmse(preds, y[96:]) if not failed else float("inf")
            metrics["forecast_failed"] = failed
            lstm_preds = None
            if cfg.lstm_baseline:
                lstm_preds = lstm_detrended_forecast(
                    y, 96, DetrendConfig(n_h=cfg.lstm_n_h, lr=cfg.lr, epochs=cfg.epochs, seed=seed))
                metrics["lstm_forecast_nrmse"] = nrmse(lstm_preds, y[96:])
            for i in range(48):
                row = {"index": 96 + i, "target": float(y[96 + i]),
                       "prediction": float(preds[i, 0]) if i < len(preds) else float("nan")}
                if lstm_preds is not None:
                    row["lstm_prediction"] = float(lstm_preds[i])
                rows.append(row)
            path = out / f"{tag}_forecast.csv"
            _write_rows(path, rows)
            artifacts.append(str(path))
        if cfg.synchronize:
            errs = synchronize_eval(model, y[96:])
            k = cfg.n_mem
            metrics["sync_error_first"] = float(errs[:k].mean())
            metrics["sync_error_after"] = float(errs[k:].mean())
            path = out / f"{tag}_sync.csv"
            _write_rows(path, [{"step": t, "error": float(e)} for t, e in enumerate(errs)])
            artifacts.append(str(path))

    elif cfg.task in ("copy", "reverse"):
        train = _copy_data(cfg, seed)
        model = build_model(cfg.model, cfg.n_bits + 2, cfg.n_bits, cfg.n_h, cfg.n_mem, cfg.sigma, seed)
        history = train_sequences(model, train, tc)
        rep = copy_generalization(model, cfg.eval_lengths, cfg.eval_per_length, cfg.n_bits,
                                  reverse=cfg.task == "reverse")
        metrics["per_length"] = list(rep.rows())
        in_range = [r for r in rep.rows() if r["length"] <= cfg.train_max_len]
        metrics["train_range_sequence_accuracy"] = (
            float(np.mean([r["sequence_accuracy"] for r in in_range])) if in_range else float("nan"))
        path = out / f"{tag}_copygen.csv"
        _write_rows(path, metrics["per_length"])
        artifacts.append(str(path))
        for L in cfg.eval_lengths:
            if L > cfg.train_max_len:
                p = out / f"{tag}_grid_len{L}.csv"
                write_grid_csv(rep, L, p)
                artifacts.append(str(p))

    else:  # babi
        train, test, vocab = _babi_data(cfg)
        n = len(vocab)
        model = build_model("memnet", n, n, cfg.n_h, cfg.n_mem, cfg.sigma, seed)
        history = train_sequences(model, train, tc)
        res = babi_eval(model, test)
        metrics.update({"test_" + k: v for k, v in res.items()})
        metrics["vocab_size"] = n

    hist_path = out / f"{tag}_history.csv"
    write_history_csv(history, hist_path)
    ckpt = out / f"{tag}.ckpt"
    model.save(ckpt)
    artifacts += [str(hist_path), str(ckpt)]
    return {"seed": seed, "status": "ok", "metrics": metrics, "history": history, "artifacts": artifacts}


_PRIMARY_METRIC = {
    "henon": ("train_mse", min),
    "airline": ("forecast_nrmse", min),
    "copy": ("train_range_sequence_accuracy", max),
    "reverse": ("train_range_sequence_accuracy", max),
    "babi": ("test_error_rate", min),
}


def run(config: RunConfig) -> RunReport:
    """Train and evaluate one model per seed; write report.json and artifacts."""
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    results = []
    for seed in config.seeds:
        try:
            res = _run_seed(config, seed, out)
        except (TrainingDiverged, FloatingPointError) as exc:
            log.warning("seed %d failed: %s", seed, exc)
            res = {"seed": seed, "status": "failed", "error": str(exc), "metrics": {},
                   "history": [], "artifacts": []}
        results.append(res)
    key, pick = _PRIMARY_METRIC[config.task]
    ok = [r for r in results if r["status"] == "ok" and key in r["metrics"]]
    best = pick(ok, key=lambda r: r["metrics"][key])["seed"] if ok else None
    artifacts = [a for r in results for a in r["artifacts"]]
    report = RunReport(dataclasses.asdict(config), results, best,
                       wall_clock_s=time.perf_counter() - t0, artifacts=artifacts)
    (out / "report.json").write_text(report.to_json())
    return report
