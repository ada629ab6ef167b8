"""Exact, surrogate-free evaluation of every measure the library optimizes.

Conventions
-----------
* AUROC-style comparisons count ties as one half.
* Hard top-k selection sorts with a stable sort, so tied scores keep input
  order.  Tests that compare against selection-based formulas use tie-free
  inputs.
* Rank counts follow ``r(x) = #{x' : h(x') >= h(x)}``, so an item counts
  itself.
"""

from __future__ import annotations

import math
import re
from typing import Iterable

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .surrogate import SurrogateKind, pair_loss


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).ravel()


def _nonempty(x, what):
    if x.size == 0:
        raise ValueError(f"{what} is empty")


# ---------------------------------------------------------------- AUC family

def auroc_exact(pos, neg) -> float:
    pos, neg = _arr(pos), _arr(neg)
    _nonempty(pos, "positive set")
    _nonempty(neg, "negative set")
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks -> ties count 1/2
    npos, nneg = pos.size, neg.size
    u = ranks[:npos].sum() - npos * (npos + 1) / 2.0
    return float(u / (npos * nneg))


def average_precision(pos, neg) -> float:
    """Average precision with ``>=`` comparisons (each positive counts itself)."""
    pos, neg = _arr(pos), _arr(neg)
    _nonempty(pos, "positive set")
    allv = np.sort(np.concatenate([pos, neg]))
    posv = np.sort(pos)
    n_ge_all = allv.size - np.searchsorted(allv, pos, side="left")
    n_ge_pos = posv.size - np.searchsorted(posv, pos, side="left")
    return float(np.mean(n_ge_pos / n_ge_all))


def pauc_band(n_pos: int, n_neg: int, alpha: float, beta: float, two_way: bool = False):
    """Rank cut-offs ``(k1, k2)`` of the partial-AUC selection.

    One-way keeps negatives ranked ``k1+1..k2`` (descending); two-way keeps the
    ``k1`` lowest positives and the ``k2`` highest negatives.
    """
    if not 0.0 <= alpha <= 1.0 or not 0.0 <= beta <= 1.0:
        raise ValueError("alpha and beta must lie in [0, 1]")
    # 1e-9 absorbs float noise such as 950 * 0.1 = 95.00000000000001
    if two_way:
        k1 = math.floor(n_pos * alpha + 1e-9)
        k2 = math.floor(n_neg * beta + 1e-9)
        if k1 < 1 or k2 < 1:
            raise ValueError(f"empty two-way selection (k1={k1}, k2={k2}); increase alpha/beta")
        return k1, k2
    if not alpha < beta:
        raise ValueError(f"alpha must be < beta (alpha={alpha}, beta={beta})")
    k1 = math.ceil(n_neg * alpha - 1e-9)
    k2 = math.floor(n_neg * beta + 1e-9)
    if k1 >= k2:
        raise ValueError(f"empty FPR band: k1={k1} >= k2={k2}")
    return k1, k2


def _desc(x):
    return np.argsort(-x, kind="stable")


def _asc(x):
    return np.argsort(x, kind="stable")


def _select(pos, neg, k1, k2, two_way):
    if two_way:
        return pos[_asc(pos)[:k1]], neg[_desc(neg)[:k2]]
    return pos, neg[_desc(neg)[k1:k2]]


def pauc_exact(pos, neg, alpha, beta, two_way=False, normalization="full",
               k1=None, k2=None) -> float:
    pos, neg = _arr(pos), _arr(neg)
    _nonempty(pos, "positive set")
    _nonempty(neg, "negative set")
    if k1 is None:
        k1, k2 = pauc_band(pos.size, neg.size, alpha, beta, two_way)
    sp, sn = _select(pos, neg, k1, k2, two_way)
    d = sp[:, None] - sn[None, :]
    num = np.sum(d > 0) + 0.5 * np.sum(d == 0)
    denom = pos.size * neg.size if normalization == "full" else sp.size * sn.size
    return float(num / denom)


def pauc_surrogate_hard(pos, neg, alpha, beta, two_way=False,
                        surrogate: SurrogateKind = SurrogateKind(),
                        normalization="full", k1=None, k2=None) -> float:
    """Partial-AUC surrogate with exact sort-based selection.

    Takes the positive and negative score vectors of a model on a dataset.
    ``k1``/``k2`` override the band derived from ``alpha``/``beta``.
    """
    pos, neg = _arr(pos), _arr(neg)
    if k1 is None:
        k1, k2 = pauc_band(pos.size, neg.size, alpha, beta, two_way)
    sp, sn = _select(pos, neg, k1, k2, two_way)
    vals, _ = pair_loss(surrogate, sn[None, :] - sp[:, None])
    denom = pos.size * neg.size if normalization == "full" else sp.size * sn.size
    return float(vals.sum() / denom)


def top_push_objective(pos, neg, surrogate: SurrogateKind = SurrogateKind()) -> float:
    pos, neg = _arr(pos), _arr(neg)
    vals, _ = pair_loss(surrogate, neg.max() - pos)
    return float(vals.mean())


# ------------------------------------------------------------ ranking family

def _gains(rel):
    return np.power(2.0, rel) - 1.0


def dcg_ideal(rel, K=None) -> float:
    rel = np.sort(_arr(rel))[::-1]
    if K is not None:
        rel = rel[:K]
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum(_gains(rel) / np.log2(ranks + 1.0)))


def ndcg_exact(scores, rel, K=None) -> float:
    scores, rel = _arr(scores), _arr(rel)
    if scores.shape != rel.shape:
        raise ValueError("scores and relevances differ in length")
    if not np.any(rel > 0):
        raise ValueError("query has no relevant item")
    if K is not None and K < 1:
        raise ValueError("K must be >= 1")
    order = _desc(scores)
    ranks = np.empty(scores.size)
    ranks[order] = np.arange(1, scores.size + 1)
    keep = rel > 0
    if K is not None:
        keep &= ranks <= K
    dcg = np.sum(_gains(rel[keep]) / np.log2(ranks[keep] + 1.0))
    return float(dcg / dcg_ideal(rel, K))


def ndcg_mean(queries: Iterable, K=None) -> float:
    return float(np.mean([ndcg_exact(s, r, K) for s, r in queries]))


def query_average_precision(scores, rel, K=None) -> float:
    """Per-query AP with ``>=`` rank counts; top-K restricts to the K best-scored
    items and normalizes by ``min(K, #relevant)``."""
    scores, rel = _arr(scores), _arr(rel)
    relevant = rel > 0
    n_rel = int(relevant.sum())
    if n_rel == 0:
        raise ValueError("query has no relevant item")
    s_rel = np.sort(scores[relevant])
    s_all = np.sort(scores)
    i_rel = scores[relevant]
    r_plus = s_rel.size - np.searchsorted(s_rel, i_rel, side="left")
    r_all = s_all.size - np.searchsorted(s_all, i_rel, side="left")
    ratio = r_plus / r_all
    if K is None:
        return float(ratio.sum() / n_rel)
    order = _desc(scores)
    in_top = np.zeros(scores.size, dtype=bool)
    in_top[order[:K]] = True
    return float(ratio[in_top[relevant]].sum() / min(K, n_rel))


def map_exact(queries: Iterable, K=None) -> float:
    return float(np.mean([query_average_precision(s, r, K) for s, r in queries]))


# ------------------------------------------------------- accuracy at the top

def _split(scores, labels):
    scores = _arr(scores)
    labels = np.asarray(labels).ravel() > 0
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    return scores, labels


def precision_recall_at_k(scores, labels, K):
    scores, labels = _split(scores, labels)
    n_pos = int(labels.sum())
    if not 1 <= K <= scores.size:
        raise ValueError(f"K={K} out of range [1, {scores.size}]")
    if n_pos == 0:
        raise ValueError("no positive examples")
    hits = int(labels[_desc(scores)[:K]].sum())
    return hits / K, hits / n_pos


def precision_at_recall(scores, labels, K) -> float:
    """Precision K/(K+FP) at the threshold given by the K-th largest positive score."""
    scores, labels = _split(scores, labels)
    pos, neg = scores[labels], scores[~labels]
    if not 1 <= K <= pos.size:
        raise ValueError(f"K={K} out of range [1, {pos.size}]")
    t = kth_largest(pos, K)
    fp = int(np.sum(neg > t))
    return K / (K + fp)


def pap_at_k_exact(scores, labels, K, normalization="full") -> float:
    scores, labels = _split(scores, labels)
    pos, neg = scores[labels], scores[~labels]
    if K < 1:
        raise ValueError("K must be >= 1")
    _nonempty(pos, "positive set")
    _nonempty(neg, "negative set")
    k1 = min(K, pos.size)
    sp = pos[_desc(pos)[:k1]]
    sn = neg[_desc(neg)[:K]]
    d = sp[:, None] - sn[None, :]
    num = np.sum(d > 0) + 0.5 * np.sum(d == 0)
    denom = k1 * K if normalization == "full" else sp.size * sn.size
    return float(num / denom)


# ----------------------------------------------------- selection and solvers

def kth_largest(values, k) -> float:
    v = _arr(values)
    if not 1 <= k <= v.size:
        raise ValueError(f"k={k} out of range [1, {v.size}]")
    return float(np.partition(v, v.size - k)[v.size - k])


def lower_level_terms(scores, K, eps_sel, tau1, tau2, lam, n_total=None):
    """Value, first and second derivative in ``lam`` of the smoothed threshold
    objective ``(K+eps)/n lam + tau2/2 lam^2 + mean tau1 softplus((h-lam)/tau1)``.

    ``n_total`` is the size of the full set when ``scores`` is a sub-sample.
    """
    h = _arr(scores)
    n = h.size if n_total is None else n_total
    t = (h - lam) / tau1
    sig = expit(t)
    value = (K + eps_sel) / n * lam + 0.5 * tau2 * lam * lam + tau1 * np.mean(np.logaddexp(0.0, t))
    grad = (K + eps_sel) / n + tau2 * lam - np.mean(sig)
    hess = tau2 + np.mean(sig * (1.0 - sig)) / tau1
    return float(value), float(grad), float(hess)


def lower_level_solve_exact(scores, K, eps_sel, tau1, tau2, tol=1e-12, max_iter=500) -> float:
    """Unique root of the (strictly increasing) lower-level gradient.

    Newton steps safeguarded by a bisection bracket.  The bracket comes from
    ``tau2 * lam = mean(sigmoid) - (K+eps)/n`` with the mean in [0, 1].
    """
    if not (tau1 > 0 and tau2 > 0):
        raise ValueError("tau1 and tau2 must be positive")
    h = _arr(scores)
    _nonempty(h, "score set")
    c = (K + eps_sel) / h.size

    def grad_hess(lam):
        sig = expit((h - lam) / tau1)
        return c + tau2 * lam - np.mean(sig), tau2 + np.mean(sig * (1.0 - sig)) / tau1

    lo, hi = -c / tau2, (1.0 - c) / tau2
    lam = min(max(float(np.median(h)), lo), hi)
    g, H = grad_hess(lam)
    for _ in range(max_iter):
        if abs(g) <= tol:
            break
        if g > 0:
            hi = lam
        else:
            lo = lam
        cand = lam - g / H
        if not lo < cand < hi:
            cand = 0.5 * (lo + hi)
        if cand == lam:
            break
        lam = cand
        g, H = grad_hess(lam)
    # Newton polish: one or two more steps push the residual to rounding level
    for _ in range(3):
        cand = lam - g / H
        g2, H2 = grad_hess(cand)
        if abs(g2) < abs(g):
            lam, g, H = cand, g2, H2
        else:
            break
    return float(lam)


def cvar_exact(losses, beta):
    """Minimize ``s + 1/(beta n) sum (l - s)_+`` over s by scanning breakpoints."""
    ls = np.sort(_arr(losses))[::-1]
    _nonempty(ls, "losses")
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    n = ls.size
    csum = np.cumsum(ls)
    k = np.arange(1, n + 1)
    # value at s = ls[k-1]: the k-1 larger losses exceed it
    vals = ls + (csum - k * ls) / (beta * n)
    best = vals.min()
    idx = int(np.flatnonzero(vals <= best + 1e-12 * max(1.0, abs(best)))[0])
    return float(ls[idx]), float(vals[idx])


# ---------------------------------------------------------- contrastive

def contrastive_loss_exact(embeddings, pairing=None, tau=1.0, eps_gcl=0.0,
                           kind="gcl_oneway", exclude_positive=False) -> float:
    """Literal evaluation of the global contrastive objectives.

    * ``gcl_oneway``: ``embeddings`` has shape (n, V, e) holding V augmented
      views per sample; the expectation over augmentation pairs runs over all
      V*V ordered view pairs.  References are all views of the other samples.
    * ``gcl_twoway``: ``embeddings`` are image embeddings (n, e) and
      ``pairing`` the matched text embeddings (n, e).
    * ``supcon_ratio`` / ``supcon_log_ratio`` / ``supcon_per_pair``:
      ``pairing`` holds class labels; kernels are ``exp(-||e - e'||^2)``.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    if kind == "gcl_oneway":
        if E.ndim != 3:
            raise ValueError("gcl_oneway expects embeddings of shape (n, views, dim)")
        n, V, _ = E.shape
        total, count = 0.0, 0
        for i in range(n):
            others = np.concatenate([E[j] for j in range(n) if j != i], axis=0)
            for a in range(V):
                g = np.sum(np.exp(others @ E[i, a] / tau))
                for b in range(V):
                    num = math.exp(float(E[i, a] @ E[i, b]) / tau)
                    total += -tau * math.log(num / (eps_gcl + g))
                    count += 1
        return total / count
    if kind == "gcl_twoway":
        T = np.asarray(pairing, dtype=np.float64)
        if E.shape != T.shape or E.ndim != 2:
            raise ValueError("image and text embeddings must share shape (n, e)")
        n = E.shape[0]
        S = E @ T.T / tau
        total = 0.0
        for i in range(n):
            mask = np.ones(n, dtype=bool)
            if exclude_positive:
                mask[i] = False
            d_img = np.sum(np.exp(S[i, mask]))
            d_txt = np.sum(np.exp(S[mask, i]))
            total += -tau * (S[i, i] - math.log(d_img)) - tau * (S[i, i] - math.log(d_txt))
        return total / n
    if kind in ("supcon_ratio", "supcon_log_ratio", "supcon_per_pair"):
        y = np.asarray(pairing).ravel()
        if E.ndim != 2 or y.shape[0] != E.shape[0]:
            raise ValueError("supervised contrastive needs (n, e) embeddings and n labels")
        n = E.shape[0]
        total = 0.0
        for i in range(n):
            k = np.exp(-np.sum((E - E[i]) ** 2, axis=1))
            same = y == y[i]
            if kind == "supcon_ratio":
                total += -k[same].sum() / k.sum()
            elif kind == "supcon_log_ratio":
                total += -math.log(k[same].sum() / k.sum())
            else:
                total += -np.sum(np.log(k[same] / k.sum()))
        return total / n
    raise ValueError(f"unknown contrastive kind {kind!r}")


# ------------------------------------------------------------- named metrics

METRIC_HELP = (
    "auroc, ap, pauc@<beta> (one-way, FPR in [0,beta], band norm), "
    "tpauc@<alpha>:<beta>, ndcg, ndcg@K, map, map@K, p@K, r@K, "
    "p@r<K> (precision at the K-th positive), papk@K"
)


def _binary(scores, labels):
    if labels is None:
        raise ValueError("metric needs binary labels")
    s, lab = _split(scores, labels)
    return s, lab


def _queries(scores, qid, rel):
    if qid is None or rel is None:
        raise ValueError("metric needs query ids and relevances")
    scores, qid, rel = _arr(scores), np.asarray(qid).ravel(), _arr(rel)
    return [(scores[qid == q], rel[qid == q]) for q in np.unique(qid)]


def compute_metric(name: str, scores, labels=None, qid=None, rel=None) -> float:
    """Evaluate one named metric on scalar scores (see ``METRIC_HELP``)."""
    m = re.fullmatch(r"([a-z]+)(?:@(r?)([0-9.:]+))?", name.strip())
    if m is None:
        raise KeyError(name)
    base, rflag, arg = m.group(1), m.group(2), m.group(3)
    if base == "auroc" and arg is None:
        s, lab = _binary(scores, labels)
        return auroc_exact(s[lab], s[~lab])
    if base == "ap" and arg is None:
        s, lab = _binary(scores, labels)
        return average_precision(s[lab], s[~lab])
    if base == "pauc" and arg:
        s, lab = _binary(scores, labels)
        return pauc_exact(s[lab], s[~lab], 0.0, float(arg), normalization="band")
    if base == "tpauc" and arg and ":" in arg:
        a, b = (float(t) for t in arg.split(":"))
        s, lab = _binary(scores, labels)
        return pauc_exact(s[lab], s[~lab], a, b, two_way=True, normalization="band")
    if base == "ndcg":
        return ndcg_mean(_queries(scores, qid, rel), int(arg) if arg else None)
    if base == "map":
        return map_exact(_queries(scores, qid, rel), int(arg) if arg else None)
    if base == "p" and rflag and arg:
        s, lab = _binary(scores, labels)
        return precision_at_recall(s, lab, int(arg))
    if base in ("p", "r") and arg:
        s, lab = _binary(scores, labels)
        p, r = precision_recall_at_k(s, lab, int(arg))
        return p if base == "p" else r
    if base == "papk" and arg:
        s, lab = _binary(scores, labels)
        return pap_at_k_exact(s, lab, int(arg))
    raise KeyError(name)


def metric_report(values: dict) -> dict:
    """Validate a name -> value mapping (finite values, rates inside [0, 1])."""
    out = {}
    for k, v in values.items():
        v = float(v)
        if not math.isfinite(v):
            raise ValueError(f"metric {k} is not finite")
        out[k] = v
    return out
