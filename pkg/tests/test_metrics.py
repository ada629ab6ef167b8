import math

import numpy as np
import pytest

import oracles as O
from xrisk.metrics import (auroc_exact, average_precision, compute_metric, contrastive_loss_exact,
                           cvar_exact, kth_largest, lower_level_solve_exact, lower_level_terms,
                           map_exact, metric_report, ndcg_exact, pap_at_k_exact, pauc_band,
                           pauc_exact, pauc_surrogate_hard, precision_at_recall,
                           precision_recall_at_k, query_average_precision, top_push_objective)
from xrisk.surrogate import SurrogateKind, pair_loss


def _scores(rng, n, ties):
    # integer scores on a small range make ties frequent
    return rng.integers(0, 6, size=n).astype(float) if ties else O.tie_free(rng, n)


# ------------------------------------------------------------- examples

def test_auroc_examples():
    assert auroc_exact([2, 3], [0, 1]) == 1.0
    assert auroc_exact([0], [1]) == 0.0
    assert auroc_exact([1], [1]) == 0.5
    with pytest.raises(ValueError):
        auroc_exact([], [1])


def test_ap_examples():
    assert average_precision([3, 2], [1, 0]) == 1.0
    assert average_precision([2], [3]) == 0.5
    assert average_precision([3, 1], [2]) == pytest.approx(5 / 6, abs=1e-15)
    with pytest.raises(ValueError):
        average_precision([], [1])


def test_pauc_examples():
    rng = np.random.default_rng(0)
    pos, neg = O.tie_free(rng, 7), O.tie_free(rng, 9)
    assert pauc_exact(pos, neg, 0.0, 1.0, normalization="band") == auroc_exact(pos, neg)
    assert pauc_exact([3], [2, 0], 0.0, 0.5, normalization="band") == 1.0
    assert pauc_exact(pos, neg, 1.0, 1.0, two_way=True) == auroc_exact(pos, neg)
    with pytest.raises(ValueError):
        pauc_exact(pos, neg, 0.5, 0.5)
    with pytest.raises(ValueError):
        pauc_exact(pos, neg, 0.0, 0.05)


def test_band_matches_counting():
    rng = np.random.default_rng(1)
    for _ in range(200):
        npos, nneg = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        a, b = sorted(rng.uniform(0, 1, size=2))
        for two_way in (False, True):
            try:
                got = pauc_band(npos, nneg, a, b, two_way)
            except ValueError:
                k1, k2 = O.band_bf(npos, nneg, a, b, two_way)
                assert (k1 < 1 or k2 < 1) if two_way else k1 >= k2
                continue
            assert got == O.band_bf(npos, nneg, a, b, two_way)


def test_surrogate_hard_examples():
    rng = np.random.default_rng(2)
    pos, neg = O.tie_free(rng, 6), O.tie_free(rng, 8)
    sk = SurrogateKind("squared_hinge", 1.0)
    tp = top_push_objective(pos, neg, sk)
    hard = pauc_surrogate_hard(pos, neg, 0, 0, surrogate=sk, normalization="band", k1=0, k2=1)
    assert tp == pytest.approx(hard, abs=1e-12)
    full = pauc_surrogate_hard(pos, neg, 0.0, 1.0, surrogate=sk, normalization="full")
    loss = lambda d: float(pair_loss(sk, np.array(d))[0])
    assert full == pytest.approx(O.pair_surrogate_sum_bf(pos, neg, loss) / 48, abs=1e-12)


def test_ndcg_examples():
    assert ndcg_exact([3, 2, 1], [2, 1, 0]) == 1.0
    assert ndcg_exact([1, 2], [1, 0]) == pytest.approx(1 / math.log2(3), abs=1e-15)
    s, r = [0.3, 0.1, 0.7, 0.2], [1, 2, 0, 1]
    assert ndcg_exact(s, r, K=4) == ndcg_exact(s, r)
    assert ndcg_exact(s, r, K=10) == ndcg_exact(s, r)
    with pytest.raises(ValueError):
        ndcg_exact([1, 2], [0, 0])


def test_top_of_list_examples():
    assert precision_recall_at_k([3, 2, 1], [1, 0, 0], 1) == (1.0, 1.0)
    assert precision_recall_at_k([3, 1, 2], [1, 1, 0], 2) == (0.5, 0.5)
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = O.tie_free(rng, 20)
        y = rng.integers(0, 2, size=20)
        y[0] = 1
        K = int(rng.integers(1, 21))
        p, r = precision_recall_at_k(s, y, K)
        assert p == r * y.sum() / K
    with pytest.raises(ValueError):
        precision_recall_at_k([1, 2], [1, 0], 3)
    with pytest.raises(ValueError):
        precision_at_recall([1, 2], [1, 0], 2)


def test_kth_largest_examples():
    assert kth_largest([3, 1, 2], 1) == 3
    assert O.breakpoint_argmin_bf([3, 1, 2], 1, 0.5) == 2 == kth_largest([3, 1, 2], 2)
    with pytest.raises(ValueError):
        kth_largest([1, 2], 3)
    rng = np.random.default_rng(4)
    for _ in range(100):
        v = rng.normal(size=int(rng.integers(1, 30)))
        k = int(rng.integers(1, v.size + 1))
        assert kth_largest(v, k) == O.kth_largest_bf(list(v), k)


def test_breakpoint_minimizer_characterization():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        s = O.tie_free(rng, n)
        k = int(rng.integers(0, n))
        eps = float(rng.uniform(0.01, 0.99))
        assert O.breakpoint_argmin_bf(list(s), k, eps) == kth_largest(s, k + 1)


def test_lower_level_examples():
    lam = lower_level_solve_exact([3, 1, 2], 1, 0.5, 0.01, 0.01)
    assert 1.95 <= lam <= 2.05
    assert lam == pytest.approx(O.lower_level_bisect([3, 1, 2], 1, 0.5, 0.01, 0.01), abs=1e-9)
    # all scores equal s0: the gradient at s0 is (K+eps)/n + tau2 s0 - 1/2, so
    # its sign decides the side of s0 on which the root lies
    assert lower_level_solve_exact([1.0] * 4, 0, 0.1, 0.1, 0.1) > 1.0
    assert lower_level_solve_exact([1.0] * 4, 3, 0.9, 0.1, 0.1) < 1.0


def test_lower_level_residual_and_oracle():
    rng = np.random.default_rng(6)
    for _ in range(50):
        n = int(rng.integers(2, 50))
        s = rng.normal(size=n)
        K = int(rng.integers(0, n))
        t1, t2 = float(rng.uniform(0.01, 1)), float(rng.uniform(0.01, 1))
        lam = lower_level_solve_exact(s, K, 0.5, t1, t2)
        assert abs(lower_level_terms(s, K, 0.5, t1, t2, lam)[1]) <= 1e-12
        assert lam == pytest.approx(O.lower_level_bisect(list(s), K, 0.5, t1, t2), abs=1e-9)


def test_lower_level_smoothing_gap_shrinks():
    rng = np.random.default_rng(7)
    s = O.tie_free(rng, 50)
    target = kth_largest(s, 6)
    gaps = [abs(lower_level_solve_exact(s, 5, 0.5, e, e) - target)
            for e in (0.1, 0.05, 0.025, 0.0125)]
    assert all(b <= a + 1e-10 for a, b in zip(gaps, gaps[1:]))


def test_cvar_examples():
    assert cvar_exact([2.5, 2.5, 2.5], 0.3) == (2.5, 2.5)
    assert cvar_exact([4, 2, 0], 1 / 3)[1] == pytest.approx(4.0, abs=1e-12)
    ls = [0.5, 3.0, 1.25, 2.0]
    assert cvar_exact(ls, 1.0)[1] == pytest.approx(np.mean(ls), abs=1e-12)
    with pytest.raises(ValueError):
        cvar_exact([], 0.5)
    with pytest.raises(ValueError):
        cvar_exact([1.0], 0.0)


def test_contrastive_examples():
    tau, n, V = 0.5, 2, 2
    E = np.ones((n, V, 3)) / math.sqrt(3)
    n_ref = (n - 1) * V
    expect = -tau * math.log(math.exp(1 / tau) / (n_ref * math.exp(1 / tau)))
    assert contrastive_loss_exact(E, tau=tau) == pytest.approx(expect, abs=1e-12)
    rng = np.random.default_rng(8)

    def unit(shape):
        x = rng.normal(size=shape)
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    a = contrastive_loss_exact(unit((4, 2, 3)), tau=1e6) / 1e6
    b = contrastive_loss_exact(unit((4, 2, 3)), tau=1e6) / 1e6
    assert abs(a - b) <= 1e-6
    Es = unit((5, 3))
    assert contrastive_loss_exact(Es, np.zeros(5), kind="supcon_ratio") == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        contrastive_loss_exact(unit((4, 3)), unit((3, 3)), kind="gcl_twoway")


# ------------------------------------------------------ oracle agreement

@pytest.mark.parametrize("ties", [False, True])
def test_binary_metrics_match_oracles(ties):
    rng = np.random.default_rng(10 + ties)
    for _ in range(100):
        npos, nneg = int(rng.integers(1, 25)), int(rng.integers(1, 25))
        pos, neg = _scores(rng, npos, ties), _scores(rng, nneg, ties)
        assert auroc_exact(pos, neg) == O.auroc_bf(pos, neg)
        assert average_precision(pos, neg) == pytest.approx(O.ap_bf(pos, neg), abs=1e-12)
        a, b = sorted(rng.uniform(0, 1, size=2))
        for two_way in (False, True):
            for norm in ("full", "band"):
                try:
                    k1, k2 = pauc_band(npos, nneg, a, b, two_way)
                except ValueError:
                    continue
                got = pauc_exact(pos, neg, a, b, two_way, norm)
                assert got == O.pauc_bf(pos, neg, k1, k2, two_way, norm)
        s = np.concatenate([pos, neg])
        y = np.r_[np.ones(npos), np.zeros(nneg)]
        K = int(rng.integers(1, s.size + 1))
        assert precision_recall_at_k(s, y, K) == O.prk_bf(s, y, K)
        Kp = int(rng.integers(1, npos + 1))
        assert precision_at_recall(s, y, Kp) == O.prec_at_recall_bf(s, y, Kp)
        Kn = int(rng.integers(1, nneg + 1))
        assert pap_at_k_exact(s, y, Kn) == O.pap_bf(s, y, Kn)


@pytest.mark.parametrize("ties", [False, True])
def test_ranking_metrics_match_oracles(ties):
    rng = np.random.default_rng(20 + ties)
    for _ in range(100):
        n = int(rng.integers(1, 50))
        s = _scores(rng, n, ties)
        rel = rng.integers(0, 3, size=n).astype(float)
        rel[rng.integers(n)] = 1.0 + rng.integers(0, 2)
        K = int(rng.integers(1, n + 1))
        assert ndcg_exact(s, rel) == pytest.approx(O.ndcg_bf(s, rel), abs=1e-12)
        assert ndcg_exact(s, rel, K) == pytest.approx(O.ndcg_bf(s, rel, K), abs=1e-12)
        assert query_average_precision(s, rel) == pytest.approx(O.query_ap_bf(s, rel), abs=1e-12)
        assert query_average_precision(s, rel, K) == pytest.approx(O.query_ap_bf(s, rel, K),
                                                                    abs=1e-12)
    q = [(np.array([1.0, 0.0]), np.array([0.0, 1.0])), (np.array([2.0, 1.0]), np.array([1.0, 0.0]))]
    assert map_exact(q) == pytest.approx((0.5 + 1.0) / 2)


def test_selection_and_cvar_match_oracles():
    rng = np.random.default_rng(30)
    for _ in range(100):
        v = rng.normal(size=int(rng.integers(1, 50)))
        assert cvar_exact(v, 1.0)[1] == pytest.approx(O.cvar_bf(list(v), 1.0), abs=1e-12)
        beta = float(rng.uniform(0.05, 1.0))
        assert cvar_exact(v, beta)[1] == pytest.approx(O.cvar_bf(list(v), beta), abs=1e-12)


def test_contrastive_matches_oracles():
    rng = np.random.default_rng(40)

    def unit(shape):
        x = rng.normal(size=shape)
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    for _ in range(20):
        E = unit((int(rng.integers(2, 6)), 2, 3))
        tau, eps = float(rng.uniform(0.2, 2)), float(rng.uniform(0, 1))
        assert contrastive_loss_exact(E, tau=tau, eps_gcl=eps) == pytest.approx(
            O.gcl_oneway_bf(E, tau, eps), abs=1e-12)
        A, B = unit((5, 3)), unit((5, 3))
        for ex in (False, True):
            assert contrastive_loss_exact(A, B, tau, kind="gcl_twoway", exclude_positive=ex) == \
                pytest.approx(O.gcl_twoway_bf(A, B, tau, ex), abs=1e-12)
        y = rng.integers(0, 2, size=6)
        Es = unit((6, 3))
        for kind in ("supcon_ratio", "supcon_log_ratio", "supcon_per_pair"):
            assert contrastive_loss_exact(Es, y, kind=kind) == pytest.approx(
                O.supcon_bf(Es, y, kind), abs=1e-12)


# --------------------------------------------------------- named metrics

def test_compute_metric_names():
    s = np.array([0.9, 0.1, 0.8, 0.3, 0.2])
    y = np.array([1, 0, 0, 1, 0])
    assert compute_metric("auroc", s, y) == auroc_exact(s[y > 0], s[y == 0])
    assert compute_metric("ap", s, y) == average_precision(s[y > 0], s[y == 0])
    assert compute_metric("p@2", s, y) == 0.5
    assert compute_metric("r@2", s, y) == 0.5
    assert compute_metric("p@r2", s, y) == precision_at_recall(s, y, 2)
    assert compute_metric("papk@2", s, y) == pap_at_k_exact(s, y, 2)
    assert compute_metric("pauc@0.5", s, y) == pauc_exact(s[y > 0], s[y == 0], 0, 0.5,
                                                          normalization="band")
    qid, rel = np.array([0, 0, 1, 1, 1]), np.array([1, 0, 2, 0, 1])
    assert compute_metric("ndcg@2", s, qid=qid, rel=rel) == pytest.approx(
        np.mean([O.ndcg_bf([0.9, 0.1], [1, 0], 2), O.ndcg_bf([0.8, 0.3, 0.2], [2, 0, 1], 2)]))
    for bad in ("bogus", "auroc@3", "p@"):
        with pytest.raises(KeyError):
            compute_metric(bad, s, y)
    with pytest.raises(ValueError):
        compute_metric("ndcg", s, y)


def test_metric_report_rejects_nonfinite():
    assert metric_report({"auroc": 1}) == {"auroc": 1.0}
    with pytest.raises(ValueError):
        metric_report({"ap": float("nan")})
