"""Command-line entry point: ``memnet <subcommand> ...``.

Results go to stdout as tab-separated rows; files go under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, tasks
from .baselines import DetrendConfig, lstm_detrended_forecast
from .harness import PRESETS, RunConfig
from .training import MemNet, gradient_gate


def _lengths(text: str) -> list[int]:
    """Parse '1-20,120' into [1, ..., 20, 120]."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def _tsv(*cols) -> None:
    print("\t".join(str(c) for c in cols))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, nargs="+", help="one or more seeds")
    p.add_argument("--sigma", type=float, help="Gaussian kernel size (exponent uses 2*sigma)")
    p.add_argument("--out", help="output directory")


def _config_from_args(args) -> RunConfig:
    data = {}
    if getattr(args, "task", None):
        data.update(PRESETS[args.task])
    if args.config:
        data.update(json.loads(Path(args.config).read_text()))
    overrides = {
        "task": args.task, "model": args.model, "n_h": args.n_h, "n_mem": args.n_mem,
        "lr": args.lr, "epochs": args.epochs, "sigma": args.sigma, "out": args.out,
        "seeds": args.seed,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    data.update(dict(kv for kv in (getattr(args, "set", None) or [])))
    data.setdefault("out", f"runs/{data.get('task', 'henon')}")
    return RunConfig.from_dict(data)


def _parse_set(text: str):
    key, _, value = text.partition("=")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    report = harness.run(cfg)
    keys = sorted({k for s in report.seeds for k in s["metrics"] if not isinstance(s["metrics"][k], list)})
    _tsv("seed", "status", *keys)
    for s in report.seeds:
        _tsv(s["seed"], s["status"], *(s["metrics"].get(k, "") for k in keys))
    _tsv("best_seed", report.best_seed)
    _tsv("report", Path(cfg.out) / "report.json")
    return 0


def cmd_eval(args) -> int:
    model = harness.load_model(args.checkpoint, sigma=args.sigma or 1.0)
    if args.task == "henon":
        n_x = model.n_x
        test = tasks.henon_task(1, 1000, x0=0.3, y0=0.0, discard=500, include_y=n_x == 2)
        _tsv("test_mse", harness._mean_step_loss(model, test))
    elif args.task == "airline":
        y = tasks.load_airline(args.data).values
        preds, failed = harness.recursive_forecast(model, y[:96, None], 48)
        _tsv("forecast_nrmse", harness.nrmse(preds, y[96:]) if not failed else "inf")
        errs = harness.synchronize_eval(model, y[96:])
        k = getattr(getattr(model, "dims", None), "n_mem", 16)
        _tsv("sync_error_first", errs[:k].mean())
        _tsv("sync_error_after", errs[k:].mean())
    elif args.task in ("copy", "reverse"):
        rep = harness.copy_generalization(model, list(range(1, 21)), 100, model.n_o,
                                          reverse=args.task == "reverse")
        _tsv("length", "bit_accuracy", "sequence_accuracy")
        for r in rep.rows():
            _tsv(r["length"], r["bit_accuracy"], r["sequence_accuracy"])
    else:
        raise SystemExit("eval supports henon, airline, copy, reverse; use `memnet babi` for bAbI")
    return 0


def cmd_forecast(args) -> int:
    model = harness.load_model(args.checkpoint, sigma=args.sigma or 1.0)
    y = tasks.load_airline(args.data).values
    split = args.split
    preds, failed = harness.recursive_forecast(model, y[:split, None], args.horizon)
    lstm = None
    if args.baseline:
        lstm = lstm_detrended_forecast(y, split, DetrendConfig(seed=(args.seed or [0])[0]),
                                       horizon=args.horizon)
    header = ["index", "target", "prediction"] + (["lstm_prediction"] if lstm is not None else [])
    _tsv(*header)
    for i in range(args.horizon):
        j = split + i
        row = [j, y[j] if j < len(y) else "", preds[i, 0] if i < len(preds) else "nan"]
        if lstm is not None:
            row.append(lstm[i])
        _tsv(*row)
    if failed:
        print("forecast truncated: non-finite prediction", file=sys.stderr)
        return 1
    return 0


def cmd_sync(args) -> int:
    model = harness.load_model(args.checkpoint, sigma=args.sigma or 1.0)
    y = tasks.load_airline(args.data).values
    errs = harness.synchronize_eval(model, y[args.split:])
    _tsv("step", "error")
    for t, e in enumerate(errs):
        _tsv(t, e)
    return 0


def cmd_copygen(args) -> int:
    model = harness.load_model(args.checkpoint, sigma=args.sigma or 1.0)
    lengths = _lengths(args.lengths)
    rep = harness.copy_generalization(model, lengths, args.n, model.n_o, reverse=args.reverse)
    _tsv("length", "bit_accuracy", "sequence_accuracy")
    for r in rep.rows():
        _tsv(r["length"], r["bit_accuracy"], r["sequence_accuracy"])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for L in lengths:
            harness.write_grid_csv(rep, L, out / f"grid_len{L}.csv")
    return 0


def cmd_babi(args) -> int:
    args.task = "babi"
    cfg = _config_from_args(args)
    if args.data_dir:
        cfg.babi_dir = args.data_dir
    cfg.babi_task = args.babi_task
    cfg.joint = args.joint
    report = harness.run(cfg)
    _tsv("seed", "status", "test_error_rate", "failed")
    for s in report.seeds:
        m = s["metrics"]
        _tsv(s["seed"], s["status"], m.get("test_error_rate", ""), m.get("test_failed", ""))
    _tsv("best_seed", report.best_seed)
    return 0


def cmd_dump(args) -> int:
    model = harness.load_model(args.checkpoint, sigma=args.sigma or 1.0)
    if not isinstance(model, MemNet):
        raise SystemExit("dump needs a memnet checkpoint")
    if args.task == "henon":
        inputs = tasks.henon_task(1, args.length, x0=0.3, y0=0.0, discard=500,
                                  include_y=model.n_x == 2)[0].inputs
    elif args.task == "airline":
        inputs = tasks.load_airline(args.data).values[96:, None]
    else:
        gen = tasks.gen_reverse if args.task == "reverse" else tasks.gen_copy
        inputs = gen(min(args.length, 20), model.n_o, seed=(args.seed or [0])[0]).inputs
    paths = harness.dump_memory_artifacts(model, inputs, args.out or "dump")
    for name, path in paths.items():
        _tsv(name, path)
    return 0


def cmd_gradcheck(args) -> int:
    res = gradient_gate(trials=args.trials, seed=(args.seed or [0])[0], tolerance=args.tol)
    _tsv("trials", "max_rel_error", "tolerance", "passed")
    _tsv(res.trials, res.max_rel_error, res.tolerance, res.passed)
    return 0 if res.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memnet", description="MemNet experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train per seed and write a run report")
    _common(p)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--task", choices=harness.TASKS)
    p.add_argument("--model", choices=harness.MODELS)
    p.add_argument("--n-h", type=int)
    p.add_argument("--n-mem", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", type=_parse_set, action="append", metavar="KEY=VALUE",
                   help="override any config field (JSON value)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task's test protocol")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=harness.TASKS)
    p.add_argument("--data", help="airline CSV (default: bundled)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="free-run airline forecast from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", type=int, default=96)
    p.add_argument("--horizon", type=int, default=48)
    p.add_argument("--baseline", action="store_true", help="also run the detrended LSTM")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("sync", help="synchronization errors from an empty memory")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", type=int, default=96)
    p.set_defaults(func=cmd_sync)

    p = sub.add_parser("copygen", help="copy/reverse accuracy per sequence length")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lengths", default="1-20,120")
    p.add_argument("--n", type=int, default=100, help="sequences per length")
    p.add_argument("--reverse", action="store_true")
    p.set_defaults(func=cmd_copygen)

    p = sub.add_parser("babi", help="single-task bAbI training, best of N seeds")
    _common(p)
    p.add_argument("--config")
    p.add_argument("--data-dir", help="tasks_1-20_v1-2/en directory; omit to synthesize task 1")
    p.add_argument("--babi-task", type=int, default=1)
    p.add_argument("--joint", action="store_true", help="use the vocabulary of all tasks")
    p.add_argument("--n-h", type=int)
    p.add_argument("--n-mem", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", type=_parse_set, action="append", metavar="KEY=VALUE",
                   help="override any config field (JSON value)")
    p.set_defaults(func=cmd_babi, model=None)

    p = sub.add_parser("dump", help="write key/value matrices and the similarity heatmap")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default="henon", choices=("henon", "airline", "copy", "reverse"))
    p.add_argument("--data")
    p.add_argument("--length", type=int, default=200)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("gradcheck", help="analytic BPTT vs finite differences")
    _common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
