"""Loop driver, trace records and trace CSV output."""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .schedule import ScheduleConfig
from .sox import init_state, step_fn

THREADS_ENV = "XRISK_THREADS"


@dataclass
class TraceRecord:
    iteration: int
    wall_seconds: float | None
    objective_estimate: float
    exact_objective: float | None = None
    metric_values: dict = field(default_factory=dict)
    grad_norm: float = 0.0


def worker_count(threads=None):
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            threads = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, int(threads))


def run(problem, sampler, cfg: ScheduleConfig, eval_hooks=None, w0=None, log_every=1,
        eval_every=0, threads=None, naive=False, record_wall_time=False):
    """Run ``cfg.T`` solver steps and return ``(final vector, trace, state)``.

    A trace row is written after every step ``t`` (0-based) with
    ``t % log_every == 0``; its ``iteration`` is the number of completed
    steps.  Rows with ``t % eval_every == 0`` (and the last row) also carry
    the exact objective and the ``eval_hooks`` metrics, each a callable of
    the current vector.
    """
    if log_every < 1:
        raise ValueError("log_every must be >= 1")
    eval_hooks = eval_hooks or {}
    w0 = np.zeros(problem.d) if w0 is None else w0
    if hasattr(problem, "initial_extras") and np.size(w0) == problem.bank.d:
        w0 = np.concatenate([w0, problem.initial_extras()])
    state = init_state(problem, w0, cfg)
    step = step_fn(problem)
    trace = []
    n_workers = worker_count(threads)
    pool = ThreadPoolExecutor(n_workers) if n_workers > 1 else None
    start = time.perf_counter()
    last = ((cfg.T - 1) // log_every) * log_every
    try:
        for t in range(cfg.T):
            step(state, problem, sampler, cfg, pool=pool, naive=naive)
            if t % log_every:
                continue
            rec = TraceRecord(t + 1, time.perf_counter() - start if record_wall_time else None,
                              state.estimate, grad_norm=float(np.linalg.norm(state.v)))
            if (eval_every and t % eval_every == 0) or t == last:
                rec.exact_objective = float(problem.eval_full(state.w))
                rec.metric_values = {k: float(fn(state.w)) for k, fn in eval_hooks.items()}
            trace.append(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return state.w.copy(), trace, state


def naive_sgd_run(problem, sampler, cfg: ScheduleConfig, **kwargs):
    """Mini-batch baseline: every batch is treated as the full reference set
    (fresh inner values, batch-optimal duals and thresholds)."""
    return run(problem, sampler, cfg, naive=True, **kwargs)


def full_batch_gd(problem, w0, eta, T):
    """Plain full-gradient descent on the exact objective."""
    w = np.asarray(w0, dtype=np.float64).copy()
    for _ in range(T):
        w = w - eta * problem.full_grad(w)
    return w


def _fmt(x):
    if x is None:
        return ""
    return f"{x:.10g}"


def trace_header(metric_names):
    return (["iteration", "wall_seconds", "objective_estimate", "exact_objective"]
            + [f"metric:{m}" for m in metric_names] + ["grad_norm"])


def write_trace(trace, path, metric_names=()):
    metric_names = list(metric_names)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(trace_header(metric_names))
        for r in trace:
            wr.writerow([r.iteration, _fmt(r.wall_seconds), _fmt(r.objective_estimate),
                         _fmt(r.exact_objective)]
                        + [_fmt(r.metric_values.get(m)) for m in metric_names]
                        + [_fmt(r.grad_norm)])


def read_trace(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
