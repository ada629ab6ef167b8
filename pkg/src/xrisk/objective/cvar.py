"""One-way partial AUC with FPR in [0, beta] in CVaR form.

    F(w, s) = (1/n+) sum_i [ s_i + (1/beta) (1/n-) sum_j (l_ij - s_i)_+ ]

with ``l_ij = l(h(x_j) - h(x_i))``.  The subgradient of ``(.)_+`` at its kink
is taken as 0.
"""

from __future__ import annotations

import math

import numpy as np

from ..data import Dataset
from ..metrics import cvar_exact
from ..scorer import ScoreModelSpec
from ..surrogate import pair_loss
from .bank import single_bank
from .spec import ConfigError, ObjectiveSpec


class CvarProblem:
    family = "cvar"

    def __init__(self, kind, bank, pos, neg, surrogate, beta):
        self.kind, self.bank = kind, bank
        self.anchors, self.neg = pos, neg
        self.refs = [neg] * pos.size
        self.surrogate, self.beta = surrogate, float(beta)

    @property
    def m(self):
        return self.anchors.size

    @property
    def d(self):
        return self.bank.d

    def layout(self, i, batch):
        return np.concatenate([[self.anchors[i]], batch]).astype(np.int64)

    def block_losses(self, ha, hr):
        return pair_loss(self.surrogate, hr - ha)[0]

    def block_terms(self, ha, hr, s):
        """Batch value, output derivatives (anchor, references) and d/ds."""
        loss, dz = pair_loss(self.surrogate, hr - ha)
        act = (loss > s).astype(np.float64)
        B = hr.size
        value = s + np.mean(np.maximum(loss - s, 0.0)) / self.beta
        d_r = act * dz / (self.beta * B)
        ds = 1.0 - act.mean() / self.beta
        return float(value), -d_r.sum(), d_r, float(ds)

    def losses(self, w):
        h = self.bank.outputs(w)
        L, dZ = pair_loss(self.surrogate, h[self.neg][None, :] - h[self.anchors][:, None])
        return L, dZ

    def s_star(self, w):
        L, _ = self.losses(w)
        return np.array([cvar_exact(row, self.beta)[0] for row in L])

    def eval_full(self, w):
        L, _ = self.losses(w)
        return float(np.mean([cvar_exact(row, self.beta)[1] for row in L]))

    def value_at(self, w, s):
        L, _ = self.losses(w)
        return float(np.mean(s + np.mean(np.maximum(L - s[:, None], 0.0), axis=1) / self.beta))

    def grad_at(self, w, s):
        """Subgradient of ``F(w, s)`` in w and s (kinks take the 0 element)."""
        L, dZ = self.losses(w)
        act = (L > s[:, None]).astype(np.float64)
        nneg = self.neg.size
        coef = act * dZ / (self.beta * nneg * self.m)
        U = np.zeros(self.bank.n_items)
        np.add.at(U, self.neg, coef.sum(axis=0))
        np.add.at(U, self.anchors, -coef.sum(axis=1))
        gw = self.bank.forward(w, np.arange(self.bank.n_items)).vjp(U)
        gs = (1.0 - act.mean(axis=1) / self.beta) / self.m
        return gw, gs

    def full_grad(self, w):
        """Gradient of ``min_s F(w, s)``: each positive weights its largest
        losses by 1/(beta n-), with the fractional remainder on the last one."""
        L, dZ = self.losses(w)
        nneg = self.neg.size
        bn = self.beta * nneg
        k = math.ceil(bn - 1e-9)
        W = np.zeros_like(L)
        order = np.argsort(-L, axis=1, kind="stable")
        rows = np.arange(self.m)[:, None]
        W[rows, order[:, :k - 1]] = 1.0 / bn
        W[np.arange(self.m), order[:, k - 1]] = (bn - (k - 1)) / bn
        coef = W * dZ / self.m
        U = np.zeros(self.bank.n_items)
        np.add.at(U, self.neg, coef.sum(axis=0))
        np.add.at(U, self.anchors, -coef.sum(axis=1))
        return self.bank.forward(w, np.arange(self.bank.n_items)).vjp(U)


def build_cvar(spec: ObjectiveSpec, data: Dataset, model_spec: ScoreModelSpec) -> CvarProblem:
    if data.kind != "binary":
        raise ConfigError("data", "pauc_cvar_oneway needs a binary dataset")
    if model_spec.output_dim != 1:
        raise ConfigError("model", "pauc_cvar_oneway needs a scalar scorer")
    if not spec.surrogate.non_decreasing:
        raise ConfigError("surrogate", "the CVaR form needs a non-decreasing loss")
    pos, neg = data.positives, data.negatives
    if pos.size == 0 or neg.size == 0:
        raise ConfigError("data", "both classes must be present")
    return CvarProblem(spec.kind, single_bank(model_spec, data.X), pos, neg, spec.surrogate, spec.beta)
