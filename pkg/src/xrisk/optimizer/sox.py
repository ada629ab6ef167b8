"""Stochastic solvers: compositional (moving-average inner estimators), min-max
(per-block dual ascent), bilevel (per-threshold SGD with Hessian tracking)
and the CVaR subgradient method, all sharing one momentum / Adam-style
parameter update.

Every step draws its random batches first (blocks in increasing id order,
then each block's inner batch, then pair batches, then threshold batches
in key order) and only then evaluates the blocks, possibly on a thread
pool.  Per-block gradients are summed in block order, so results do not
depend on the number of workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..metrics import cvar_exact
from ..objective.bilevel import BilevelProblem
from ..objective.cvar import CvarProblem
from ..objective.fcco import FccoProblem
from ..objective.minmax import MinMaxProblem
from .schedule import ScheduleConfig


class NumericalError(RuntimeError):
    """A non-finite value appeared in an optimizer state."""


@dataclass
class SoxFccoState:
    w: np.ndarray
    v: np.ndarray
    u: dict = field(default_factory=dict)
    m2: np.ndarray | None = None
    step_count: int = 0
    estimate: float = float("nan")


@dataclass
class MinMaxState:
    w: np.ndarray  # model parameters followed by the per-task a and b
    v: np.ndarray
    s: dict = field(default_factory=dict)
    m2: np.ndarray | None = None
    step_count: int = 0
    estimate: float = float("nan")


@dataclass
class BilevelState:
    w: np.ndarray
    v: np.ndarray
    u: dict = field(default_factory=dict)
    lam: dict = field(default_factory=dict)
    s_hess: dict = field(default_factory=dict)
    m2: np.ndarray | None = None
    step_count: int = 0
    estimate: float = float("nan")


@dataclass
class CvarState:
    w: np.ndarray
    v: np.ndarray
    s: dict = field(default_factory=dict)
    m2: np.ndarray | None = None
    step_count: int = 0
    estimate: float = float("nan")


def init_state(problem, w0, cfg: ScheduleConfig):
    w = np.asarray(w0, dtype=np.float64).copy()
    if w.size != problem.d:
        raise ValueError(f"initial vector has {w.size} entries, problem needs {problem.d}")
    v = np.zeros_like(w)
    m2 = np.zeros_like(w) if cfg.update_style == "adam" else None
    if isinstance(problem, FccoProblem):
        return SoxFccoState(w, v, m2=m2)
    if isinstance(problem, MinMaxProblem):
        return MinMaxState(w, v, m2=m2)
    if isinstance(problem, BilevelProblem):
        return BilevelState(w, v, m2=m2)
    if isinstance(problem, CvarProblem):
        return CvarState(w, v, m2=m2)
    raise TypeError(f"no solver for {type(problem).__name__}")


def _check(step, what, x):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite {what} at step {step}")


def _map(pool, fn, items):
    if pool is None:
        return [fn(x) for x in items]
    return list(pool.map(fn, items))


def _reduce(grads, B1):
    total = grads[0].copy()
    for g in grads[1:]:
        total += g
    return total / B1


def param_update(state, m_t, cfg: ScheduleConfig):
    """``v <- beta1 v + (1 - beta1) m_t`` then a momentum or Adam-style step."""
    _check(state.step_count, "gradient estimate", m_t)
    state.v = cfg.beta1 * state.v + (1.0 - cfg.beta1) * m_t
    if cfg.update_style == "adam":
        state.m2 = cfg.beta2 * state.m2 + (1.0 - cfg.beta2) * m_t * m_t
        state.w = state.w - cfg.eta * state.v / (np.sqrt(state.m2) + cfg.delta)
    else:
        state.w = state.w - cfg.eta * state.v
    _check(state.step_count, "parameters", state.w)
    state.step_count += 1
    return state


def _blend(old, fresh, gamma):
    return fresh if old is None else (1.0 - gamma) * old + gamma * fresh


# ------------------------------------------------------------- compositional

def sox_fcco_step(state: SoxFccoState, problem: FccoProblem, sampler, cfg: ScheduleConfig,
                  pool=None, naive=False):
    blocks = sampler.blocks(problem.m)
    if blocks.size == 0:
        raise ValueError("empty block sample")
    batches = [sampler.inner(problem.refs[i]) for i in blocks]
    gamma0 = 1.0 if naive else cfg.gamma0
    post = naive or cfg.u_eval == "post"
    w = state.w

    def block(j):
        i, batch = int(blocks[j]), batches[j]
        ids = problem.layout(i, batch)
        fw = problem.bank.forward(w, ids)
        parts, dv, drows = problem.block_eval(i, fw.out, batch)
        old = None if naive else state.u.get(i)
        u_new = _blend(old, parts.g, gamma0)
        u_at = u_new if post or old is None else old
        f, df = problem.outer_eval(i, u_at)
        U = problem.block_upstream(fw.out, batch, parts, drows, df)
        return u_new, f + dv, fw.vjp(U)

    res = _map(pool, block, range(blocks.size))
    for i, (u_new, _, _) in zip(blocks, res):
        _check(state.step_count, f"inner estimate of block {int(i)}", u_new)
        if not naive:
            state.u[int(i)] = u_new
    state.estimate = float(np.mean([r[1] for r in res]))
    return param_update(state, _reduce([r[2] for r in res], blocks.size), cfg)


# ------------------------------------------------------------------ min-max

def sox_mbmmo_step(state: MinMaxState, problem: MinMaxProblem, sampler, cfg: ScheduleConfig,
                   pool=None, naive=False):
    blocks = sampler.blocks(problem.m)
    if blocks.size == 0:
        raise ValueError("empty block sample")
    batches = [sampler.inner(problem.refs[k]) for k in blocks]
    w, a, b = problem.split(state.w)
    d0, K = problem.bank.d, problem.m

    def block(j):
        k, ids = int(blocks[j]), batches[j]
        fw = problem.bank.forward(w, ids)
        h = problem.task_scores(fw.out, k)
        s_pre = state.s.get(k, 0.0)
        if naive:
            # the batch maximizer of the concave quadratic in s
            _, _, _, _, ds0 = problem.block_terms(k, h, ids, a[k], b[k], 0.0)
            s_pre = 2.0 * ds0
        val, dh, da, db, ds = problem.block_terms(k, h, ids, a[k], b[k], s_pre)
        U = np.zeros_like(fw.out)
        if U.ndim == 1:
            U += dh
        else:
            U[:, k] += dh
        g = np.zeros(problem.d)
        g[:d0] = fw.vjp(U)
        g[d0 + k] = da
        g[d0 + K + k] = db
        return s_pre + cfg.eta0 * ds, val, g

    res = _map(pool, block, range(blocks.size))
    for k, (s_new, _, _) in zip(blocks, res):
        _check(state.step_count, f"dual of block {int(k)}", s_new)
        if not naive:
            state.s[int(k)] = float(s_new)  # the dual domain is the real line
    state.estimate = float(np.mean([r[1] for r in res]))
    return param_update(state, _reduce([r[2] for r in res], blocks.size), cfg)


# ------------------------------------------------------------------ bilevel

def sox_mbbo_step(state: BilevelState, problem: BilevelProblem, sampler, cfg: ScheduleConfig,
                  pool=None, naive=False):
    blocks = sampler.blocks(problem.m)
    if blocks.size == 0:
        raise ValueError("empty block sample")
    batches = [sampler.inner(problem.refs[i]) for i in blocks]
    pair_batches = []
    for i in blocks:
        ps = problem.pair_set(int(i))
        pair_batches.append(None if ps is None else sampler.inner(ps))
    keys = sorted({k for i in blocks for k in problem.block_keys(int(i))})
    key_batches = [sampler.inner(problem.lowers[k].items) for k in keys]
    gamma0 = 1.0 if naive else cfg.gamma0
    post = naive or cfg.u_eval == "post"
    w = state.w
    step = state.step_count

    # thresholds and Hessian estimates at w_t; blocks use the pre-update values
    lam_pre, s_pre, key_fw, key_cw = {}, {}, {}, {}
    for k, kb in zip(keys, key_batches):
        lo = problem.lowers[k]
        fw = problem.bank.forward(w, kb)
        old = None if naive else state.lam.get(k)
        lam_k = lo.solve(fw.out) if old is None else old
        grad, hess, cw = lo.terms(fw.out, lam_k)
        s_old = None if naive else state.s_hess.get(k)
        s_k = hess if s_old is None else s_old
        s_new = _blend(s_old, hess, cfg.gamma_hess)
        if s_new <= 0.0:
            warnings.warn(f"Hessian estimate {s_new:.3g} for threshold {k} at step {step}; clamped",
                          RuntimeWarning, stacklevel=2)
        s_new = max(s_new, 0.5 * lo.tau2)
        lam_new = lam_k - cfg.eta0 * grad
        _check(step, f"threshold {k}", np.array([lam_new, s_new]))
        if not naive:
            state.lam[k], state.s_hess[k] = float(lam_new), float(s_new)
        lam_pre[k], s_pre[k], key_fw[k], key_cw[k] = lam_k, s_k, fw, cw
    lam_vec = np.zeros(len(problem.lowers))
    for k, v in lam_pre.items():
        lam_vec[k] = v

    def block(j):
        i, batch, pb = int(blocks[j]), batches[j], pair_batches[j]
        ids = problem.layout(i, batch, pb)
        fw = problem.bank.forward(w, ids)
        H = fw.out
        inner_H, pair_H = problem.split_layout(i, H, batch, pb)
        fc = problem.fcco
        U = np.zeros_like(H)
        u_new, f = None, 1.0
        pe = problem.phi_eval(i, H[0], pair_H, lam_vec)
        if fc is not None:
            parts, _, drows = fc.block_eval(i, inner_H, batch)
            old = None if naive else state.u.get(i)
            u_new = _blend(old, parts.g, gamma0)
            u_at = u_new if post or old is None else old
            f, df = fc.outer_eval(i, u_at)
            U[:inner_H.shape[0]] = pe.phi * fc.block_upstream(inner_H, batch, parts, drows, df)
        U[0] += f * pe.d_anchor
        if pe.d_pairs is not None:
            U[inner_H.shape[0]:] += f * pe.d_pairs
        lam_coef = {k: f * v for k, v in pe.d_lam.items()}
        return u_new, f * pe.phi, fw.vjp(U), lam_coef

    res = _map(pool, block, range(blocks.size))
    grads = []
    coef = dict.fromkeys(keys, 0.0)
    for i, (u_new, _, g, lc) in zip(blocks, res):
        if u_new is not None:
            _check(step, f"inner estimate of block {int(i)}", u_new)
            if not naive:
                state.u[int(i)] = u_new
        grads.append(g)
        for k, v in lc.items():
            coef[k] += v
    for k in keys:
        if coef[k] != 0.0:
            grads.append(key_fw[k].vjp(-key_cw[k] * coef[k] / s_pre[k]))
    state.estimate = float(np.mean([r[1] for r in res]))
    return param_update(state, _reduce(grads, blocks.size), cfg)


# --------------------------------------------------------------------- CVaR

def cvar_subgrad_step(state: CvarState, problem: CvarProblem, sampler, cfg: ScheduleConfig,
                      pool=None, naive=False):
    blocks = sampler.blocks(problem.m)
    if blocks.size == 0:
        raise ValueError("empty block sample")
    batches = [sampler.inner(problem.refs[i]) for i in blocks]
    w = state.w

    def block(j):
        i, batch = int(blocks[j]), batches[j]
        ids = problem.layout(i, batch)
        fw = problem.bank.forward(w, ids)
        s_pre = state.s.get(i, 0.0)
        if naive:
            loss = problem.block_losses(fw.out[0], fw.out[1:])
            s_pre = cvar_exact(loss, problem.beta)[0]
        val, d_a, d_r, ds = problem.block_terms(fw.out[0], fw.out[1:], s_pre)
        U = np.concatenate([[d_a], d_r])
        return s_pre - cfg.eta0 * ds, val, fw.vjp(U)

    res = _map(pool, block, range(blocks.size))
    for i, (s_new, _, _) in zip(blocks, res):
        _check(state.step_count, f"threshold of block {int(i)}", s_new)
        if not naive:
            state.s[int(i)] = float(s_new)
    state.estimate = float(np.mean([r[1] for r in res]))
    return param_update(state, _reduce([r[2] for r in res], blocks.size), cfg)


def step_fn(problem):
    if isinstance(problem, FccoProblem):
        return sox_fcco_step
    if isinstance(problem, MinMaxProblem):
        return sox_mbmmo_step
    if isinstance(problem, BilevelProblem):
        return sox_mbbo_step
    if isinstance(problem, CvarProblem):
        return cvar_subgrad_step
    raise TypeError(f"no solver for {type(problem).__name__}")
