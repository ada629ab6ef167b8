"""Finite-sum coupled compositional problems ``F = (1/m) sum_i f_i(g_i)``.

Every block ``i`` has an anchor item, a reference set ``S_i`` and an inner
value ``g_i = offset + scale_i * mean_{z in S_i} C[:, z] * psi(h(x_i), h(z))``
where ``C`` picks, per component, either every reference (``all``) or only
those whose label matches the block's label (``match``).  A block may also
carry a deterministic ``direct`` term whose gradient is exact.
"""

from __future__ import annotations

import math

import numpy as np

from ..data import Dataset, augmented_views
from ..metrics import dcg_ideal
from ..scorer import ScoreModelSpec
from .bank import ItemBank, single_bank
from .spec import ConfigError, ObjectiveSpec
from . import terms


def scale_rows(wc, D):
    return wc * D if D.ndim == 1 else wc[:, None] * D


class BlockInner:
    """Inner value of one block on a given batch, with cached pair derivatives."""

    __slots__ = ("g", "C", "s", "da", "dr")

    def __init__(self, g, C, s, da, dr):
        self.g, self.C, self.s, self.da, self.dr = g, C, s, da, dr

    def upstream(self, wts):
        """Output-level derivative of ``wts . g``: (anchor row, reference rows)."""
        if self.C is None:
            return None, None
        wc = (wts @ self.C) * self.s
        return scale_rows(wc, self.da).sum(axis=0), scale_rows(wc, self.dr)


class FccoProblem:
    family = "fcco"

    def __init__(self, kind, bank: ItemBank, anchors, refs, pair, outer, weights, scale,
                 offset, components, item_label=None, block_label=None, direct=None, info=None):
        self.kind = kind
        self.bank = bank
        self.anchors = np.asarray(anchors, dtype=np.int64)
        self.refs = list(refs)
        self.pair = pair
        self.outer = outer
        self.weights = np.asarray(weights, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        self.offset = np.asarray(offset, dtype=np.float64)
        self.components = tuple(components)
        self.item_label = item_label
        self.block_label = block_label
        self.direct = direct
        self.info = info or {}
        if len(self.components) != outer.k or self.offset.shape != (outer.k,):
            raise ValueError("component count must match the outer function")

    @property
    def m(self):
        return self.anchors.size

    @property
    def k(self):
        return self.outer.k

    @property
    def d(self):
        return self.bank.d

    # -- block-level oracles on outputs ---------------------------------

    def _coef(self, i, ref_ids):
        rows = []
        for c in self.components:
            if c == "all":
                rows.append(np.ones(ref_ids.size))
            else:
                rows.append((self.item_label[ref_ids] == self.block_label[i]).astype(np.float64))
        return np.array(rows)

    def inner_parts(self, i, ha, hr, ref_ids) -> BlockInner:
        ref_ids = np.asarray(ref_ids, dtype=np.int64)
        if ref_ids.size == 0:
            return BlockInner(self.offset.copy(), None, 0.0, None, None)
        val, da, dr = self.pair(ha, hr)
        C = self._coef(i, ref_ids)
        s = self.scale[i] / ref_ids.size
        g = self.offset + s * (C @ val)
        return BlockInner(g, C, s, da, dr)

    def outer_eval(self, i, u):
        f, df = self.outer(np.asarray(u, dtype=np.float64), self.weights[i])
        return float(f), df

    def direct_ids(self, i):
        if self.direct is None or self.direct[i] is None:
            return np.zeros(0, dtype=np.int64)
        return self.direct[i].ids

    def layout(self, i, batch):
        """Item ids a block needs: anchor, inner batch, direct-term items."""
        return np.concatenate([[self.anchors[i]], np.asarray(batch, dtype=np.int64),
                               self.direct_ids(i)]).astype(np.int64)

    def block_eval(self, i, H, batch):
        """Evaluate block ``i`` on outputs ``H`` aligned with ``layout(i, batch)``.

        Returns ``(parts, direct_value, direct_rows)``.
        """
        nb = len(batch)
        parts = self.inner_parts(i, H[0], H[1:1 + nb], batch)
        if self.direct is None or self.direct[i] is None:
            return parts, 0.0, None
        dv, drows = self.direct[i](H[1 + nb:])
        return parts, dv, drows

    def block_upstream(self, H, batch, parts, drows, wts):
        """Upstream rows aligned with the block layout for gradient ``wts . grad g + grad direct``."""
        U = np.zeros_like(H)
        nb = len(batch)
        up_a, up_r = parts.upstream(wts)
        if up_a is not None:
            U[0] += up_a
            U[1:1 + nb] += up_r
        if drows is not None:
            U[1 + nb:] += drows
        return U

    # -- parameter-level oracles ----------------------------------------

    def inner_eval(self, w, i, batch):
        """``(g_i(w; batch), jacobian rows d g_i / d w)`` for one block."""
        batch = np.asarray(batch, dtype=np.int64)
        ids = np.concatenate([[self.anchors[i]], batch]).astype(np.int64)
        fw = self.bank.forward(w, ids)
        parts = self.inner_parts(i, fw.out[0], fw.out[1:], batch)
        jac = np.zeros((self.k, self.d))
        for c in range(self.k):
            U = np.zeros_like(fw.out)
            up_a, up_r = parts.upstream(np.eye(self.k)[c])
            if up_a is not None:
                U[0] += up_a
                U[1:] += up_r
            jac[c] = fw.vjp(U)
        return parts.g, jac

    def eval_full(self, w):
        return self._full(w, grad=False)[0]

    def full_grad(self, w):
        return self._full(w, grad=True)[1]

    def value_and_grad(self, w):
        return self._full(w, grad=True)

    def _full(self, w, grad):
        H = self.bank.outputs(w)
        U = np.zeros_like(H) if grad else None
        total = 0.0
        for i in range(self.m):
            ids = self.layout(i, self.refs[i])
            Hb = H[ids]
            parts, dv, drows = self.block_eval(i, Hb, self.refs[i])
            f, df = self.outer_eval(i, parts.g)
            total += f + dv
            if grad:
                np.add.at(U, ids, self.block_upstream(Hb, self.refs[i], parts, drows, df))
        value = total / self.m
        if not grad:
            return value, None
        g = self.bank.forward(w, np.arange(self.bank.n_items)).vjp(U) / self.m
        return value, g


# ------------------------------------------------------------------ builders

def _require(data: Dataset, kind, what):
    if data.kind != kind:
        raise ConfigError("data", f"objective needs a {kind} dataset ({what}), got {data.kind}")


def _all_but(n, i):
    return np.concatenate([np.arange(i), np.arange(i + 1, n)])


def _binary_sets(data):
    _require(data, "binary", "labels +1/-1")
    pos, neg = data.positives, data.negatives
    if pos.size == 0:
        raise ConfigError("data", "no positive examples")
    return pos, neg


def _relevant_blocks(data):
    _require(data, "ranking", "query ids and relevances")
    blocks, qs = [], data.queries()
    for q, idx in enumerate(qs):
        rel = data.rel[idx]
        if not np.any(rel > 0):
            raise ConfigError("data", f"query {int(data.qid[idx[0]])} has no relevant item")
        for j in idx[rel > 0]:
            blocks.append((q, int(j)))
    return qs, blocks


def build_fcco(spec: ObjectiveSpec, data: Dataset, model_spec: ScoreModelSpec,
               text_spec: ScoreModelSpec | None = None) -> FccoProblem:
    kind = spec.kind
    ell = spec.surrogate
    scalar_kinds = ("auroc_pairwise", "pnorm_push", "pauc_kl", "ap", "recall_k_fcco",
                    "ndcg", "map", "listnet")
    if kind in scalar_kinds and model_spec.output_dim != 1:
        raise ConfigError("model", f"{kind} needs a scalar scorer (output_dim 1)")

    if kind in ("auroc_pairwise", "pnorm_push", "pauc_kl"):
        pos, neg = _binary_sets(data)
        if neg.size == 0:
            raise ConfigError("data", "no negative examples")
        bank = single_bank(model_spec, data.X)
        if kind == "auroc_pairwise":
            pair, outer, c = terms.LossPair(ell), terms.Linear(), 1.0
        elif kind == "pnorm_push":
            pair, outer, c = terms.LossPair(ell), terms.Power(spec.p), 1.0
        else:
            pair, outer, c = terms.ExpLossPair(ell, spec.lambda_dro), terms.Log(), spec.lambda_dro
        m = pos.size
        return FccoProblem(kind, bank, pos, [neg] * m, pair, outer, np.full(m, c),
                           np.ones(m), [0.0], ("all",))

    if kind in ("ap", "recall_k_fcco"):
        pos, _ = _binary_sets(data)
        n = data.n
        bank = single_bank(model_spec, data.X)
        refs = [_all_but(n, i) for i in pos]
        m = pos.size
        if kind == "ap":
            label = (data.task_labels(0) > 0).astype(np.int64)
            return FccoProblem(kind, bank, pos, refs, terms.LossPair(ell), terms.NegRatio(),
                               np.ones(m), np.full(m, n - 1.0), [1.0, 1.0], ("match", "all"),
                               item_label=label, block_label=np.ones(m, dtype=np.int64))
        return FccoProblem(kind, bank, pos, refs, terms.LossPair(ell),
                           terms.LossOuter(spec.outer_surrogate, spec.K), np.ones(m),
                           np.full(m, n - 1.0), [1.0], ("all",))

    if kind in ("ndcg", "map", "listnet"):
        qs, blocks = _relevant_blocks(data)
        bank = single_bank(model_spec, data.X)
        N, m = len(qs), len(blocks)
        anchors = np.array([j for _, j in blocks])
        refs, weights, scale = [], [], []
        for q, j in blocks:
            idx = qs[q]
            refs.append(idx[idx != j])
            scale.append(idx.size - 1.0)
            rel_q = data.rel[idx]
            if kind == "ndcg":
                weights.append(m / N * (2.0 ** data.rel[j] - 1.0) / dcg_ideal(rel_q))
            elif kind == "map":
                weights.append(m / (N * np.sum(rel_q > 0)))
            else:
                weights.append(m / N * data.rel[j] / rel_q.sum())
        if kind == "ndcg":
            pair, outer, comps, off = terms.LossPair(ell), terms.NdcgOuter(), ("all",), [1.0]
        elif kind == "map":
            pair, outer, comps, off = terms.LossPair(ell), terms.NegRatio(), ("match", "all"), [1.0, 1.0]
        else:
            pair, outer, comps, off = terms.ExpPair(), terms.Log(), ("all",), [1.0]
        label = (data.rel > 0).astype(np.int64)
        return FccoProblem(kind, bank, anchors, refs, pair, outer, weights, scale, off, comps,
                           item_label=label, block_label=np.ones(m, dtype=np.int64),
                           info={"queries": qs, "blocks": blocks})

    if model_spec.output_dim < 2:
        raise ConfigError("model", f"{kind} needs an embedding model (output_dim >= 2)")
    _require(data, "contrastive_pool", "feature pool")
    n = data.n
    if n < 2:
        raise ConfigError("data", "contrastive objectives need at least 2 samples")

    if kind == "gcl_oneway":
        V = int(spec.n_views)
        views = augmented_views(data, V)
        bank = single_bank(model_spec, views.reshape(n * V, -1))
        anchors = np.arange(n * V)
        owner = anchors // V
        refs, direct = [], []
        for a in anchors:
            i = owner[a]
            refs.append(np.concatenate([np.arange(i * V), np.arange((i + 1) * V, n * V)]))
            direct.append(terms.DirectTerm("dot", np.full(V, a), np.arange(i * V, (i + 1) * V),
                                           np.full(V, -1.0 / V)))
        m = n * V
        return FccoProblem(kind, bank, anchors, refs, terms.DotExpPair(spec.tau),
                           terms.Log(eps=spec.eps_gcl), np.full(m, spec.tau),
                           np.full(m, (n - 1.0) * V), [0.0], ("all",), direct=direct,
                           info={"n_views": V})

    if kind == "gcl_twoway":
        if data.X_pair is None:
            raise ConfigError("data", "gcl_twoway needs paired features (X_pair)")
        tspec = text_spec
        if tspec is None:
            tspec = ScoreModelSpec.from_dict({**model_spec.to_dict(), "input_dim": data.X_pair.shape[1]})
        bank = ItemBank([model_spec, tspec], [data.X, data.X_pair])
        imgs, txts = np.arange(n), np.arange(n, 2 * n)
        anchors, refs, direct = [], [], []
        for side, (own, other) in enumerate(((imgs, txts), (txts, imgs))):
            for i in range(n):
                anchors.append(own[i])
                refs.append(np.delete(other, i) if spec.exclude_positive else other)
                direct.append(terms.DirectTerm("dot", [imgs[i]], [txts[i]], [-2.0]))
        m = 2 * n
        scale = [float(r.size) for r in refs]
        return FccoProblem(kind, bank, anchors, refs, terms.DotExpPair(spec.tau), terms.Log(),
                           np.full(m, 2.0 * spec.tau), scale, [0.0], ("all",), direct=direct)

    if kind in ("supcon_ratio", "supcon_log_ratio", "supcon_per_pair"):
        if data.classes is None:
            raise ConfigError("data", f"{kind} needs class labels")
        bank = single_bank(model_spec, data.X)
        anchors = np.arange(n)
        refs = [_all_but(n, i) for i in range(n)]
        cls = data.classes
        if kind == "supcon_per_pair":
            direct, weights = [], []
            for i in range(n):
                same = np.flatnonzero((cls == cls[i]) & (anchors != i))
                direct.append(terms.DirectTerm("sqdist", np.full(same.size, i), same,
                                               np.ones(same.size)))
                weights.append(same.size + 1.0)
            return FccoProblem(kind, bank, anchors, refs, terms.RbfPair(), terms.Log(), weights,
                               np.full(n, n - 1.0), [1.0], ("all",), direct=direct)
        outer = terms.NegRatio() if kind == "supcon_ratio" else terms.LogRatio()
        return FccoProblem(kind, bank, anchors, refs, terms.RbfPair(), outer, np.ones(n),
                           np.full(n, n - 1.0), [1.0, 1.0], ("match", "all"),
                           item_label=cls, block_label=cls.copy())

    raise ConfigError("kind", f"{kind} is not a compositional objective")
