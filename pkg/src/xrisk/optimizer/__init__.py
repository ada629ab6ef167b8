"""Stochastic solvers for compiled X-risk objectives."""

from .run import (THREADS_ENV, TraceRecord, full_batch_gd, naive_sgd_run, read_trace, run,
                  trace_header, worker_count, write_trace)
from .schedule import ScheduleConfig, theorem_schedule
from .sox import (BilevelState, CvarState, MinMaxState, NumericalError, SoxFccoState,
                  cvar_subgrad_step, init_state, param_update, sox_fcco_step, sox_mbbo_step,
                  sox_mbmmo_step, step_fn)

__all__ = [
    "THREADS_ENV", "BilevelState", "CvarState", "MinMaxState", "NumericalError",
    "ScheduleConfig", "SoxFccoState", "TraceRecord", "cvar_subgrad_step", "full_batch_gd",
    "init_state", "naive_sgd_run", "param_update", "read_trace", "run", "sox_fcco_step",
    "sox_mbbo_step", "sox_mbmmo_step", "step_fn", "theorem_schedule", "trace_header",
    "worker_count", "write_trace",
]
