"""Item banks: the feature rows every objective scores, tied to their models.

The full parameter vector of a problem is the concatenation of its models'
parameter vectors (two-way contrastive learning uses an image and a text
encoder; every other objective uses one model).  Items are numbered model
by model: the rows of model 0's matrix first, then model 1's.
"""

from __future__ import annotations

import numpy as np

from ..scorer import Forward, ScoreModel, ScoreModelSpec


class ItemBank:
    def __init__(self, specs, mats):
        self.specs = tuple(specs)
        self.mats = [np.asarray(M, dtype=np.float64) for M in mats]
        if len(self.specs) != len(self.mats):
            raise ValueError("one feature matrix per model is required")
        dims = {s.output_dim for s in self.specs}
        if len(dims) != 1:
            raise ValueError("all models of one problem must share output_dim")
        self.output_dim = dims.pop()
        for s, M in zip(self.specs, self.mats):
            s.validate()
            if M.ndim != 2 or M.shape[1] != s.input_dim:
                raise ValueError(f"feature dimension {M.shape[1] if M.ndim == 2 else M.shape} "
                                 f"does not match model input_dim {s.input_dim}")
        counts = [M.shape[0] for M in self.mats]
        self.item_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.owner = np.repeat(np.arange(len(self.mats)), counts)
        self.local = np.concatenate([np.arange(c) for c in counts])
        sizes = [s.n_params for s in self.specs]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def n_items(self):
        return int(self.item_offsets[-1])

    @property
    def d(self):
        return int(self.offsets[-1])

    def param_slice(self, k):
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def models(self, w):
        return [ScoreModel(s, w[self.param_slice(k)]) for k, s in enumerate(self.specs)]

    def forward(self, w, ids) -> "BankForward":
        return BankForward(self, np.asarray(w, dtype=np.float64), np.asarray(ids, dtype=np.int64))

    def outputs(self, w, ids=None):
        if ids is None:
            ids = np.arange(self.n_items)
        return self.forward(w, ids).out


class BankForward:
    """Forward pass over a list of item ids (duplicates allowed)."""

    def __init__(self, bank: ItemBank, w, ids):
        self.bank, self.ids = bank, ids
        if len(bank.specs) == 1:
            fw = Forward(bank.specs[0], w, bank.mats[0][ids])
            self.parts = [(0, None, fw)]
            self.out = fw.out
            return
        e = bank.output_dim
        out = np.zeros((ids.size, e)) if e > 1 else np.zeros(ids.size)
        self.parts = []
        owners = bank.owner[ids]
        for k, spec in enumerate(bank.specs):
            pos = np.flatnonzero(owners == k)
            if pos.size == 0:
                continue
            fw = Forward(spec, w[bank.param_slice(k)], bank.mats[k][bank.local[ids[pos]]])
            out[pos] = fw.out
            self.parts.append((k, pos, fw))
        self.out = out

    def vjp(self, U) -> np.ndarray:
        """Parameter gradient of ``sum_r U[r] . out[r]``."""
        U = np.asarray(U, dtype=np.float64)
        if len(self.bank.specs) == 1:
            return self.parts[0][2].vjp(U)
        g = np.zeros(self.bank.d)
        for k, pos, fw in self.parts:
            g[self.bank.param_slice(k)] = fw.vjp(U[pos])
        return g


def single_bank(spec: ScoreModelSpec, X):
    return ItemBank([spec], [X])
