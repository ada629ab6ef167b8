"""Multi-block bilevel problems ``F = (1/m) sum_i f_i(g_i) phi_i(w, lambda(w))``.

Each threshold ``lambda_k`` minimizes the smoothed top-K objective

    L_k(lam) = (K+eps)/|S| lam + tau2/2 lam^2 + (1/|S|) sum_S tau1 softplus((h - lam)/tau1)

over its own item set ``S``.  Several blocks may share one threshold
(all positives of a pAUC problem share the thresholds over the negatives;
the items of one query share that query's threshold).

``phi_i`` is a product of factors evaluated at the block's anchor, times an
optional average over a "pair set" of reference items:

    phi_i = c_i * prod_a A_a(h_i) * mean_{j in P_i} [ prod_r R_r(h_j) * l(h_j - h_i) ]

A factor is ``fn(sign * (h - lambda_key))`` where ``fn`` is a gate (sigmoid or
indicator) or a surrogate loss.  A factor with key -1 is absent (value 1).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..data import Dataset
from ..metrics import dcg_ideal, lower_level_solve_exact, lower_level_terms, pauc_band
from ..scorer import ScoreModelSpec
from ..surrogate import GateKind, gate, pair_loss
from .bank import single_bank
from .fcco import FccoProblem, build_fcco
from .spec import ConfigError, ObjectiveSpec


class LowerLevel:
    """One smoothed top-K threshold problem over a fixed item set."""

    def __init__(self, items, K, eps_sel, tau1, tau2, label=""):
        self.items = np.asarray(items, dtype=np.int64)
        self.K, self.eps_sel, self.tau1, self.tau2 = K, eps_sel, tau1, tau2
        self.label = label
        if K < 0:
            raise ValueError("lower-level K must be >= 0")

    @property
    def n(self):
        return self.items.size

    def terms(self, h, lam):
        """Batch estimates ``(dL/dlam, d2L/dlam2, weights)``; the weights turn
        the batch outputs into ``d2L/dw dlam = sum_b weights[b] grad h_b``."""
        t = (h - lam) / self.tau1
        sig = expit(t)
        sd = sig * (1.0 - sig)
        B = h.size
        grad = (self.K + self.eps_sel) / self.n + self.tau2 * lam - sig.mean()
        hess = self.tau2 + sd.mean() / self.tau1
        return float(grad), float(hess), -sd / (self.tau1 * B)

    def value(self, h, lam):
        return lower_level_terms(h, self.K, self.eps_sel, self.tau1, self.tau2, lam, self.n)[0]

    def solve(self, h):
        return lower_level_solve_exact(h, self.K, self.eps_sel, self.tau1, self.tau2)


class Factor:
    """``fn(sign * (h - lambda[key]))`` with a per-block key (-1 = absent)."""

    def __init__(self, keys, sign, fn):
        self.keys = np.asarray(keys, dtype=np.int64)
        self.sign = float(sign)
        self.fn = fn

    def __call__(self, i, h, lam):
        """Values, d/dh and d/dlambda for outputs ``h`` of block ``i``."""
        key = self.keys[i]
        if key < 0:
            one = np.ones_like(h)
            return one, np.zeros_like(h), np.zeros_like(h), key
        z = self.sign * (h - lam[key])
        if isinstance(self.fn, GateKind):
            v, dv = gate(self.fn, z)
        else:
            v, dv = pair_loss(self.fn, z)
        return v, self.sign * dv, -self.sign * dv, key


def _product(parts):
    """Product of factor values with leave-one-out terms for derivatives."""
    vals = [p[0] for p in parts]
    prod = np.ones_like(vals[0]) if vals else None
    for v in vals:
        prod = prod * v
    loo = []
    for f in range(len(vals)):
        o = np.ones_like(vals[0])
        for g, v in enumerate(vals):
            if g != f:
                o = o * v
        loo.append(o)
    return prod, loo


class PhiEval:
    __slots__ = ("phi", "d_anchor", "d_pairs", "d_lam")

    def __init__(self, phi, d_anchor, d_pairs, d_lam):
        self.phi, self.d_anchor, self.d_pairs, self.d_lam = phi, d_anchor, d_pairs, d_lam


class BilevelProblem:
    family = "bilevel"

    def __init__(self, kind, bank, anchors, lowers, anchor_factors, pair_factors=(),
                 pair_sets=None, pair_loss_kind=None, weights=None, fcco: FccoProblem | None = None,
                 info=None):
        self.kind, self.bank = kind, bank
        self.anchors = np.asarray(anchors, dtype=np.int64)
        self.lowers = list(lowers)
        self.anchor_factors = list(anchor_factors)
        self.pair_factors = list(pair_factors)
        self.pair_sets = pair_sets
        self.pair_loss_kind = pair_loss_kind
        m = self.anchors.size
        self.weights = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)
        self.fcco = fcco
        self.info = info or {}
        if fcco is not None and not np.array_equal(fcco.anchors, self.anchors):
            raise ValueError("compositional part must share the block anchors")
        empty = np.zeros(0, dtype=np.int64)
        self.refs = fcco.refs if fcco is not None else [empty] * m
        self._keys = [sorted({int(f.keys[i]) for f in self.anchor_factors + self.pair_factors
                              if f.keys[i] >= 0}) for i in range(m)]

    @property
    def m(self):
        return self.anchors.size

    @property
    def d(self):
        return self.bank.d

    def block_keys(self, i):
        return self._keys[i]

    def pair_set(self, i):
        return None if self.pair_sets is None else self.pair_sets[i]

    # -- compositional part ---------------------------------------------

    def layout(self, i, batch, pair_batch):
        parts = [[self.anchors[i]], np.asarray(batch, dtype=np.int64)]
        if self.fcco is not None:
            parts.append(self.fcco.direct_ids(i))
        if pair_batch is not None:
            parts.append(np.asarray(pair_batch, dtype=np.int64))
        return np.concatenate(parts).astype(np.int64)

    def split_layout(self, i, H, batch, pair_batch):
        nb = len(batch)
        nd = 0 if self.fcco is None else self.fcco.direct_ids(i).size
        inner = H[:1 + nb + nd]
        pairs = None if pair_batch is None else H[1 + nb + nd:]
        return inner, pairs

    def outer_eval(self, i, u):
        if self.fcco is None:
            return 1.0, np.zeros(1)
        return self.fcco.outer_eval(i, u)

    # -- gate part --------------------------------------------------------

    def phi_eval(self, i, ha, hp, lam) -> PhiEval:
        """``phi_i`` and its derivatives at anchor output ``ha``, pair-batch
        outputs ``hp`` (or None) and thresholds ``lam``."""
        c = self.weights[i]
        ha1 = np.atleast_1d(np.asarray(ha, dtype=np.float64))
        aparts = [f(i, ha1, lam) for f in self.anchor_factors]
        if aparts:
            A, aloo = _product(aparts)
            A = float(A[0])
            dA_dh = sum(float(p[1][0] * o[0]) for p, o in zip(aparts, aloo))
        else:
            A, dA_dh, aloo = 1.0, 0.0, []
        d_lam = {}
        if hp is None or self.pair_loss_kind is None:
            P, dP_dha, d_pairs = 1.0, 0.0, None
        else:
            B = hp.size
            loss, dz = pair_loss(self.pair_loss_kind, hp - ha1[0])
            rparts = [f(i, hp, lam) for f in self.pair_factors]
            if rparts:
                R, rloo = _product(rparts)
                dR_dh = sum(p[1] * o for p, o in zip(rparts, rloo))
            else:
                R, rloo, dR_dh = np.ones(B), [], np.zeros(B)
            P = float(np.mean(R * loss))
            dP_dha = float(np.mean(-R * dz))
            d_pairs = c * A * (dR_dh * loss + R * dz) / B
            for p, o in zip(rparts, rloo):
                if p[3] >= 0:
                    d_lam[p[3]] = d_lam.get(p[3], 0.0) + c * A * float(np.mean(p[2] * o * loss))
        for p, o in zip(aparts, aloo):
            if p[3] >= 0:
                d_lam[p[3]] = d_lam.get(p[3], 0.0) + c * float(p[2][0] * o[0]) * P
        phi = c * A * P
        d_anchor = c * (dA_dh * P + A * dP_dha)
        return PhiEval(phi, d_anchor, d_pairs, d_lam)

    # -- exact evaluation -------------------------------------------------

    def solve_lowers(self, H):
        return np.array([lo.solve(H[lo.items]) for lo in self.lowers])

    def eval_full(self, w):
        return self.value_and_grad(w, grad=False)[0]

    def full_grad(self, w):
        return self.value_and_grad(w, grad=True)[1]

    def value_and_grad(self, w, grad=True):
        """Exact objective and hypergradient with every threshold solved exactly."""
        fw = self.bank.forward(w, np.arange(self.bank.n_items))
        H = fw.out
        lam = self.solve_lowers(H)
        U = np.zeros_like(H)
        lam_coef = np.zeros(len(self.lowers))
        total = 0.0
        for i in range(self.m):
            f, df, g_up = 1.0, None, None
            if self.fcco is not None:
                ref = self.fcco.refs[i]
                ids = self.fcco.layout(i, ref)
                parts, dv, drows = self.fcco.block_eval(i, H[ids], ref)
                f, df = self.fcco.outer_eval(i, parts.g)
                g_up = (ids, self.fcco.block_upstream(H[ids], ref, parts, drows, df))
            ps = self.pair_set(i)
            pe = self.phi_eval(i, H[self.anchors[i]], None if ps is None else H[ps], lam)
            total += f * pe.phi
            if not grad:
                continue
            if g_up is not None:
                np.add.at(U, g_up[0], pe.phi * g_up[1])
            U[self.anchors[i]] += f * pe.d_anchor
            if pe.d_pairs is not None:
                np.add.at(U, ps, f * pe.d_pairs)
            for key, v in pe.d_lam.items():
                lam_coef[key] += f * v
        value = total / self.m
        if not grad:
            return value, None
        for k, lo in enumerate(self.lowers):
            if lam_coef[k] == 0.0:
                continue
            _, hess, cw = lo.terms(H[lo.items], lam[k])
            np.add.at(U, lo.items, -cw * lam_coef[k] / hess)
        return value, fw.vjp(U) / self.m


# ------------------------------------------------------------------ builders

def as_bilevel(problem: FccoProblem) -> BilevelProblem:
    """View a compositional problem as a bilevel one without gates (phi == 1)."""
    if problem.direct is not None:
        raise ValueError("problems with direct terms have no bilevel form")
    return BilevelProblem(problem.kind, problem.bank, problem.anchors, [], [], fcco=problem)


def _binary(data, model_spec, kind):
    if data.kind != "binary":
        raise ConfigError("data", f"{kind} needs a binary dataset")
    if model_spec.output_dim != 1:
        raise ConfigError("model", f"{kind} needs a scalar scorer")
    pos, neg = data.positives, data.negatives
    if pos.size == 0 or neg.size == 0:
        raise ConfigError("data", "both classes must be present")
    return pos, neg


def build_bilevel(spec: ObjectiveSpec, data: Dataset, model_spec: ScoreModelSpec) -> BilevelProblem:
    kind = spec.kind
    lo_args = (spec.eps_sel, spec.tau1, spec.tau2)
    g, ell = spec.gate, spec.surrogate

    if kind in ("pauc_bilevel_oneway", "top_push", "pauc_bilevel_twoway", "pap_k"):
        pos, neg = _binary(data, model_spec, kind)
        npos, nneg = pos.size, neg.size
        bank = single_bank(model_spec, data.X)
        m = npos
        lowers, afac, rfac = [], [], []

        def add(items, K, label):
            lowers.append(LowerLevel(items, K, *lo_args, label=label))
            return np.full(m, len(lowers) - 1)

        if kind in ("pauc_bilevel_oneway", "top_push"):
            if kind == "top_push":
                k1, k2 = 0, 1
            else:
                try:
                    k1, k2 = pauc_band(npos, nneg, spec.alpha, spec.beta)
                except ValueError as exc:
                    raise ConfigError("alpha", str(exc)) from None
            if k1 >= 1:
                rfac.append(Factor(add(neg, k1 - 1, "neg_upper"), -1, g))
            if k2 < nneg:
                rfac.append(Factor(add(neg, k2, "neg_lower"), +1, g))
            c = 1.0 if spec.normalization == "full" else nneg / (k2 - k1)
            info = {"k1": k1, "k2": k2}
        elif kind == "pauc_bilevel_twoway":
            try:
                k1, k2 = pauc_band(npos, nneg, spec.alpha, spec.beta, two_way=True)
            except ValueError as exc:
                raise ConfigError("alpha", str(exc)) from None
            if k1 < npos:
                afac.append(Factor(add(pos, npos - k1 - 1, "pos_upper"), -1, g))
            if k2 < nneg:
                rfac.append(Factor(add(neg, k2, "neg_lower"), +1, g))
            c = 1.0 if spec.normalization == "full" else npos * nneg / (k1 * k2)
            info = {"k1": k1, "k2": k2}
        else:
            K = int(spec.K)
            k1 = min(K, npos)
            if k1 < npos:
                afac.append(Factor(add(pos, k1, "pos_top"), +1, g))
            if K < nneg:
                rfac.append(Factor(add(neg, K, "neg_top"), +1, g))
            c = npos * nneg / (k1 * K)
            info = {"k1": k1, "K": K}
        return BilevelProblem(kind, bank, pos, lowers, afac, rfac, [neg] * m, ell,
                              np.full(m, c), info=info)

    if kind == "recall_k_bilevel":
        pos, neg = _binary(data, model_spec, kind)
        K = int(spec.K)
        if K >= data.n:
            raise ConfigError("K", f"K={K} must be smaller than the dataset size {data.n}")
        m = pos.size
        lo = LowerLevel(np.arange(data.n), K, *lo_args, label="all")
        return BilevelProblem(kind, single_bank(model_spec, data.X), pos, [lo],
                              [Factor(np.zeros(m), -1, ell)], info={"K": K})

    if kind == "prec_at_recall":
        pos, neg = _binary(data, model_spec, kind)
        K = int(spec.K)
        if K > pos.size:
            raise ConfigError("K", f"K={K} exceeds the number of positives {pos.size}")
        m = neg.size
        lo = LowerLevel(pos, K - 1, *lo_args, label="pos")
        return BilevelProblem(kind, single_bank(model_spec, data.X), neg, [lo],
                              [Factor(np.zeros(m), +1, ell)], info={"K": K})

    if kind in ("topk_ndcg", "topk_map"):
        base = build_fcco(spec.with_(kind="ndcg" if kind == "topk_ndcg" else "map"),
                          data, model_spec)
        qs, blocks = base.info["queries"], base.info["blocks"]
        K = int(spec.K)
        N, m = len(qs), len(blocks)
        lowers, keys = [], []
        for q, idx in enumerate(qs):
            if K > idx.size:
                raise ConfigError("K", f"K={K} exceeds the size of query {int(data.qid[idx[0]])} "
                                  f"({idx.size} items)")
            lowers.append(LowerLevel(idx, K, *lo_args, label=f"q{q}"))
        weights = []
        for q, j in blocks:
            idx = qs[q]
            rel_q = data.rel[idx]
            keys.append(q if K < idx.size else -1)
            if kind == "topk_ndcg":
                weights.append(m / N * (2.0 ** data.rel[j] - 1.0) / dcg_ideal(rel_q, K))
            else:
                weights.append(m / (N * min(K, int(np.sum(rel_q > 0)))))
        base.weights = np.array(weights)
        return BilevelProblem(kind, base.bank, base.anchors, lowers,
                              [Factor(np.array(keys), +1, g)], fcco=base,
                              info={"K": K, "queries": qs, "blocks": blocks})

    raise ConfigError("kind", f"{kind} is not a bilevel objective")
