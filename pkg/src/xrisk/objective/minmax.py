"""Multi-task AUROC min-max problem with square-loss conjugate.

For task k with scores h = h(x; k):

    F_k = E+[(h - a_k)^2] + E-[(h - b_k)^2] + s_k (E-[h] - E+[h] + c) - s_k^2 / 4

and ``F = (1/K) sum_k F_k``.  Primal variables are the model parameters
followed by ``a`` (K values) and ``b`` (K values).  A mini-batch of a task is
a uniform draw from all of that task's items; class expectations are
reweighted by the inverse class frequency so the estimates stay unbiased.
"""

from __future__ import annotations

import numpy as np

from ..data import Dataset
from ..scorer import ScoreModelSpec
from ..surrogate import SurrogateKind, conjugate
from .bank import single_bank
from .spec import ConfigError, ObjectiveSpec

_SQUARE = SurrogateKind("square", 1.0)


class MinMaxProblem:
    family = "minmax"

    def __init__(self, kind, bank, labels, c, info=None):
        self.kind, self.bank, self.c = kind, bank, float(c)
        self.labels = labels  # (n, K) in {-1, +1}
        n, K = labels.shape
        self.refs = [np.arange(n)] * K
        self.p = (labels > 0).mean(axis=0)
        self.info = info or {}
        for k in range(K):
            if not 0.0 < self.p[k] < 1.0:
                raise ConfigError("data", f"task {k} needs both positive and negative examples")

    @property
    def m(self):
        return self.labels.shape[1]

    @property
    def n_model_params(self):
        return self.bank.d

    @property
    def d(self):
        return self.bank.d + 2 * self.m

    def initial_extras(self):
        return np.zeros(2 * self.m)

    def split(self, z):
        d0 = self.bank.d
        return z[:d0], z[d0:d0 + self.m], z[d0 + self.m:]

    def task_scores(self, out, k):
        return out if out.ndim == 1 else out[:, k]

    def block_terms(self, k, h, ids, a, b, s):
        """Batch estimates for task k at scores ``h`` of items ``ids``.

        Returns ``(value, dF/dh rows, dF/da_k, dF/db_k, dF/ds_k)``.
        """
        y = self.labels[ids, k]
        r = (y > 0) / self.p[k]
        q = (y < 0) / (1.0 - self.p[k])
        B = ids.size
        ea, eb = h - a, h - b
        value = (np.mean(r * ea * ea + q * eb * eb + s * (q - r) * h) + s * self.c
                 - float(conjugate(_SQUARE, s)))
        dh = (2.0 * r * ea + 2.0 * q * eb + s * (q - r)) / B
        da = -2.0 * np.mean(r * ea)
        db = -2.0 * np.mean(q * eb)
        ds = np.mean((q - r) * h) + self.c - 0.5 * s
        return float(value), dh, float(da), float(db), float(ds)

    def s_star(self, z):
        """Exact per-task dual maximizer ``2 (E-[h] - E+[h] + c)``."""
        w, _, _ = self.split(z)
        out = self.bank.outputs(w)
        s = np.zeros(self.m)
        for k in range(self.m):
            h, y = self.task_scores(out, k), self.labels[:, k]
            s[k] = 2.0 * (h[y < 0].mean() - h[y > 0].mean() + self.c)
        return s

    def value_at(self, z, s):
        return self._full(z, s, grad=False)[0]

    def grad_at(self, z, s):
        """Full-batch primal gradient and dual gradient at fixed duals."""
        _, gz, gs = self._full(z, s, grad=True)
        return gz, gs

    def eval_full(self, z):
        return self._full(z, self.s_star(z), grad=False)[0]

    def full_grad(self, z):
        return self._full(z, self.s_star(z), grad=True)[1]

    def _full(self, z, s, grad):
        w, a, b = self.split(z)
        n = self.labels.shape[0]
        ids = np.arange(n)
        fw = self.bank.forward(w, ids)
        U = np.zeros_like(fw.out)
        total, ga, gb, gs = 0.0, np.zeros(self.m), np.zeros(self.m), np.zeros(self.m)
        for k in range(self.m):
            h = self.task_scores(fw.out, k)
            v, dh, ga[k], gb[k], gs[k] = self.block_terms(k, h, ids, a[k], b[k], s[k])
            total += v
            if U.ndim == 1:
                U += dh
            else:
                U[:, k] += dh
        K = self.m
        if not grad:
            return total / K, None, None
        gz = np.concatenate([fw.vjp(U), ga, gb]) / K
        return total / K, gz, gs / K


def build_minmax(spec: ObjectiveSpec, data: Dataset, model_spec: ScoreModelSpec) -> MinMaxProblem:
    if data.kind != "binary":
        raise ConfigError("data", "auroc_minmax needs a binary dataset")
    Y = data.y if data.y.ndim == 2 else data.y[:, None]
    if Y.shape[1] != spec.tasks:
        raise ConfigError("tasks", f"config says {spec.tasks} task(s), data has {Y.shape[1]}")
    if model_spec.output_dim != spec.tasks:
        raise ConfigError("model", "output_dim must equal the number of tasks")
    if model_spec.normalize_output:
        raise ConfigError("model", "auroc_minmax scores must not be normalized")
    bank = single_bank(model_spec, data.X)
    return MinMaxProblem(spec.kind, bank, Y, spec.c)
