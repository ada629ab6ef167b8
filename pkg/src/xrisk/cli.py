"""Command-line front end: ``xrisk train|eval|bench``.

Exit codes: 0 success, 1 configuration or input error (the message names
the offending key), 2 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .data import TwoLevelSampler, dataset_from_config
from .metrics import METRIC_HELP, compute_metric
from .objective import ConfigError, ObjectiveSpec, build_problem, data_kind
from .optimizer import NumericalError, ScheduleConfig, run, theorem_schedule, write_trace
from .scorer import ScoreModelSpec, forward, init_model, load_model, save_model

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

SCHEDULE_KEYS = ("B1", "B2", "gamma0", "beta1", "eta", "eta0", "gamma_hess", "update_style",
                 "beta2", "delta", "u_eval")
RUN_DEFAULTS = {"T": 100, "seed": 0, "log_every": 10, "eval_every": 0, "output_dir": "runs",
                "metrics": [], "record_wall_time": False}


def load_schema():
    return json.loads(resources.files("xrisk").joinpath("config_schema.json").read_text())


# ------------------------------------------------------------------ config

def _schema_error(err):
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        path = f"{path}.{missing}" if path else missing
    elif err.validator == "additionalProperties" and "'" in err.message:
        extra = err.message.split("'")[1]
        path = f"{path}.{extra}" if path else extra
    return ConfigError(path or "config", err.message)


def validate_config(cfg: dict) -> dict:
    """Schema check plus the semantic checks of every section."""
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as err:
        raise _schema_error(err) from None
    ObjectiveSpec.from_dict(cfg["objective"])
    path = cfg["data"].get("path")
    if path is not None and not Path(path).exists():
        raise ConfigError("data.path", f"file not found: {path}")
    if "bench" in cfg and "B2_grid" not in cfg["bench"]:
        raise ConfigError("bench.B2_grid", "missing grid")
    return cfg


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return validate_config(cfg)


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def run_options(cfg):
    return {**RUN_DEFAULTS, **cfg.get("run", {})}


def _model_spec(section, data, objective, default_dim=None):
    d = dict(section or {})
    d.setdefault("input_dim", default_dim if default_dim is not None else data.dim)
    if objective.kind == "auroc_minmax":
        d.setdefault("output_dim", objective.tasks)
    try:
        return ScoreModelSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError("model", str(exc)) from None


def schedule_from_config(cfg, problem, family, B2=None):
    opt = dict(cfg.get("optimizer", {}))
    opts = run_options(cfg)
    if B2 is not None:
        opt["B2"] = B2
    over = {k: opt[k] for k in SCHEDULE_KEYS if k in opt}
    try:
        if "theorem" in opt:
            th = opt["theorem"]
            algo = {"fcco": "fcco", "minmax": "mbmmo", "bilevel": "mbbo", "cvar": "fcco"}[family]
            B1 = int(opt.get("B1", 1))
            sched = theorem_schedule(th["eps"], B1, int(opt.get("B2", 1)), problem.m,
                                     th.get("constants"), algo,
                                     **{k: v for k, v in over.items() if k not in ("B1", "B2")})
            if "T" in cfg.get("run", {}):
                sched.T = int(opts["T"])
            return sched
        return ScheduleConfig(T=int(opts["T"]), **over)
    except ValueError as exc:
        msg = str(exc)
        key = msg.split()[0] if msg.split() and msg.split()[0] in SCHEDULE_KEYS + ("T",) else "optimizer"
        raise ConfigError(f"optimizer.{key}" if key != "optimizer" else key, msg) from None


def build_from_config(cfg):
    """Objective spec, dataset, problem, scorer specs and initial vector."""
    objective = ObjectiveSpec.from_dict(cfg["objective"])
    try:
        data = dataset_from_config(cfg["data"])
    except (KeyError, ValueError) as exc:
        raise ConfigError("data", str(exc)) from None
    if data.kind != data_kind(objective.kind):
        raise ConfigError("data", f"{objective.kind} needs {data_kind(objective.kind)} data, "
                          f"got {data.kind}")
    ms = _model_spec(cfg.get("model"), data, objective)
    ts = None
    if objective.kind == "gcl_twoway":
        if data.X_pair is None:
            raise ConfigError("data", "gcl_twoway needs paired features")
        tsec = cfg.get("text_model", {**(cfg.get("model") or {}), "input_dim": data.X_pair.shape[1]})
        ts = _model_spec(tsec, data, objective, default_dim=data.X_pair.shape[1])
    try:
        problem = build_problem(objective, data, ms, ts)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("model", str(exc)) from None
    seed = run_options(cfg)["seed"]
    w0 = np.concatenate([init_model(s, seed + k).params
                         for k, s in enumerate(problem.bank.specs)])
    return objective, data, problem, w0


# ----------------------------------------------------------------- metrics

def evaluate_metrics(names, models, data):
    """Named exact metrics of scalar (or per-task) scores on a dataset."""
    out = forward(models[0], data.X).out
    values = {}
    for name in names:
        try:
            if out.ndim == 1:
                values[name] = compute_metric(name, out, data.task_labels(0) if data.kind == "binary"
                                              else None, data.qid, data.rel)
            else:
                if data.kind != "binary" or data.y.ndim != 2 or data.y.shape[1] != out.shape[1]:
                    raise ValueError("metrics need scalar scores or one score per task")
                values[name] = float(np.mean([compute_metric(name, out[:, k], data.task_labels(k))
                                              for k in range(out.shape[1])]))
        except KeyError:
            raise ConfigError("metrics", f"unknown metric {name!r}; valid: {METRIC_HELP}") from None
        except ValueError as exc:
            raise ConfigError("metrics", f"{name}: {exc}") from None
    return values


def write_metrics(values, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["metric", "value"])
        for k, v in values.items():
            wr.writerow([k, repr(float(v))])


def _hooks(names, problem, data):
    if not names:
        return {}

    def make(name):
        return lambda z: evaluate_metrics([name], problem.bank.models(z[:problem.bank.d]), data)[name]

    evaluate_metrics(names, problem.bank.models(np.zeros(problem.bank.d)), data)
    return {n: make(n) for n in names}


# -------------------------------------------------------------------- train

def train(cfg, out_root=None, seed=None, B2=None, solver=None):
    """Run one configuration; returns ``(output dir, final vector, trace, problem, data)``."""
    cfg = json.loads(json.dumps(cfg))
    if seed is not None:
        cfg.setdefault("run", {})["seed"] = seed
    opts = run_options(cfg)
    objective, data, problem, w0 = build_from_config(cfg)
    opt = cfg.get("optimizer", {})
    solver = solver or opt.get("solver", "sox")
    sched = schedule_from_config(cfg, problem, problem.family, B2)
    sampler = TwoLevelSampler(sched.B1, sched.B2, seed=opts["seed"],
                              strategy=opt.get("strategy", "uniform_with_replacement"))
    names = list(opts["metrics"])
    hooks = _hooks(names, problem, data)
    z, trace, _ = run(problem, sampler, sched, hooks, w0=w0, log_every=opts["log_every"],
                      eval_every=opts["eval_every"], naive=solver == "naive_sgd",
                      record_wall_time=opts["record_wall_time"])
    out = Path(out_root or opts["output_dir"]) / f"{objective.kind}_{solver}_seed{opts['seed']}"
    out.mkdir(parents=True, exist_ok=True)
    models = problem.bank.models(z[:problem.bank.d])
    save_model(models[0], out / "model.txt")
    if len(models) > 1:
        save_model(models[1], out / "model_text.txt")
    write_trace(trace, out / "trace.csv", names)
    final = {"objective": float(problem.eval_full(z))}
    final.update(evaluate_metrics(names, models, data))
    write_metrics(final, out / "metrics.csv")
    (out / "config.json").write_text(dump_config(cfg))
    return out, z, trace, problem, data


def cmd_train(args):
    cfg = load_config(args.config)
    out, _, trace, _, _ = train(cfg, out_root=args.output_dir)
    print(f"wrote {out} ({len(trace)} trace rows)")
    return EXIT_OK


# --------------------------------------------------------------------- eval

def _load_data_source(src):
    p = Path(src)
    if not p.exists():
        raise ConfigError("data", f"file not found: {src}")
    if p.suffix.lower() == ".json":
        sec = json.loads(p.read_text())
        sec = sec.get("data", sec)
    else:
        sec = {"path": str(p)}
    try:
        return dataset_from_config(sec)
    except (KeyError, ValueError) as exc:
        raise ConfigError("data", str(exc)) from None


def cmd_eval(args):
    try:
        model = load_model(args.model)
    except (OSError, ValueError) as exc:
        raise ConfigError("model", str(exc)) from None
    data = _load_data_source(args.data)
    if data.dim != model.spec.input_dim:
        raise ConfigError("model", f"model expects {model.spec.input_dim} features, data has {data.dim}")
    names = [m for m in args.metrics.split(",") if m.strip()]
    values = evaluate_metrics(names, [model], data)
    wr = csv.writer(sys.stdout, lineterminator="\n")
    wr.writerow(["metric", "value"])
    for k, v in values.items():
        wr.writerow([k, repr(float(v))])
    return EXIT_OK


# -------------------------------------------------------------------- bench

def bench(cfg, out_root=None):
    """Grid over (method, B2); returns the comparison CSV path."""
    grid = cfg.get("bench", {}).get("B2_grid")
    if grid is None:
        raise ConfigError("bench.B2_grid", "missing grid")
    methods = cfg["bench"].get("methods", ["sox", "naive_sgd"])
    opts = run_options(cfg)
    names = list(opts["metrics"])
    root = Path(out_root or opts["output_dir"]) / f"{cfg['objective']['kind']}_bench_seed{opts['seed']}"
    rows, cell = [], 0
    for method in methods:
        for B2 in grid:
            seed = opts["seed"] + cell
            t0 = time.perf_counter()
            _, z, _, problem, data = train(cfg, out_root=root / f"B2_{B2}", seed=seed, B2=B2,
                                           solver=method)
            wall = time.perf_counter() - t0
            mv = evaluate_metrics(names, problem.bank.models(z[:problem.bank.d]), data)
            rows.append([method, B2, seed, f"{problem.eval_full(z):.10g}"]
                        + [f"{mv[n]:.10g}" for n in names] + [f"{wall:.6f}"])
            cell += 1
    root.mkdir(parents=True, exist_ok=True)
    path = root / "comparison.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "B2", "seed", "final_objective"] + [f"metric:{n}" for n in names]
                    + ["wall_seconds"])
        wr.writerows(rows)
    return path


def cmd_bench(args):
    cfg = load_config(args.config)
    if "bench" not in cfg:
        raise ConfigError("bench.B2_grid", "config has no bench section")
    path = bench(cfg, out_root=args.output_dir)
    print(f"wrote {path}")
    return EXIT_OK


# --------------------------------------------------------------------- main

def build_parser():
    ap = argparse.ArgumentParser(prog="xrisk", description="Train and evaluate X-risk objectives.")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="run one configuration")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None, help="override run.output_dir")
    p.set_defaults(fn=cmd_train)
    p = sub.add_parser("eval", help="exact metrics of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="data file, or a JSON data section")
    p.add_argument("--metrics", required=True, help=f"comma-separated: {METRIC_HELP}")
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("bench", help="SOX vs naive mini-batch over a B2 grid")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
