"""Compiled X-risk objectives.

``build_problem`` turns an :class:`ObjectiveSpec`, a dataset and a scorer
spec into one of four problem families (compositional, min-max, bilevel,
CVaR), each exposing exact ``eval_full`` and ``full_grad`` oracles plus the
block-level pieces the stochastic solvers use.
"""

import numpy as np

from .bank import BankForward, ItemBank, single_bank
from .bilevel import BilevelProblem, LowerLevel, as_bilevel, build_bilevel
from .cvar import CvarProblem, build_cvar
from .fcco import FccoProblem, build_fcco
from .minmax import MinMaxProblem, build_minmax
from .spec import (ALL_KINDS, BILEVEL_KINDS, CONTRASTIVE_KINDS, CVAR_KINDS, FCCO_KINDS,
                   MINMAX_KINDS, RANKING_KINDS, ConfigError, ObjectiveSpec, data_kind,
                   default_surrogate, family)


def build_problem(spec, data, model_spec, text_spec=None):
    fam = family(spec.kind)
    if fam == "fcco":
        return build_fcco(spec, data, model_spec, text_spec)
    if fam == "minmax":
        return build_minmax(spec, data, model_spec)
    if fam == "bilevel":
        return build_bilevel(spec, data, model_spec)
    return build_cvar(spec, data, model_spec)


def initial_variables(problem, w):
    """Full primal vector for a problem: model parameters plus any extras."""
    if isinstance(problem, MinMaxProblem):
        return np.concatenate([w, problem.initial_extras()])
    return np.asarray(w, dtype=np.float64).copy()


def eval_full(problem, z):
    return problem.eval_full(z)


def full_grad(problem, z):
    return problem.full_grad(z)


__all__ = [
    "ALL_KINDS", "BILEVEL_KINDS", "CONTRASTIVE_KINDS", "CVAR_KINDS", "FCCO_KINDS",
    "MINMAX_KINDS", "RANKING_KINDS", "BankForward", "BilevelProblem", "ConfigError",
    "CvarProblem", "FccoProblem", "ItemBank", "LowerLevel", "MinMaxProblem", "ObjectiveSpec",
    "as_bilevel", "build_bilevel", "build_cvar", "build_fcco", "build_minmax", "build_problem",
    "data_kind", "default_surrogate", "eval_full", "family", "full_grad", "initial_variables",
    "single_bank",
]
