import numpy as np
import pytest

import oracles as O
from xrisk.data import Dataset, TwoLevelSampler, gen_binary, gen_multitask
from xrisk.metrics import cvar_exact, lower_level_solve_exact
from xrisk.objective import ObjectiveSpec, as_bilevel, build_problem
from xrisk.optimizer import (NumericalError, ScheduleConfig, TraceRecord, cvar_subgrad_step,
                             full_batch_gd, init_state, naive_sgd_run, param_update, read_trace,
                             run, sox_fcco_step, sox_mbbo_step, sox_mbmmo_step, theorem_schedule,
                             write_trace)
from xrisk.scorer import ScoreModelSpec
from xrisk.surrogate import SurrogateKind

LIN3 = ScoreModelSpec(input_dim=3)
SQ = SurrogateKind("square", 1.0)


def _pairwise(n_pos=5, n_neg=10, seed=0, surrogate=SurrogateKind("squared_hinge", 1.0)):
    ds = gen_binary(n_pos, n_neg, 3, 1.0, seed=seed)
    return ds, build_problem(ObjectiveSpec(kind="auroc_pairwise", surrogate=surrogate), ds, LIN3)


# ------------------------------------------------------------- schedule

def test_theorem_schedule_worked_example():
    cfg = theorem_schedule(0.1, 1, 1, 1)
    assert cfg.gamma0 == pytest.approx(0.01)
    assert cfg.gamma1 == pytest.approx(0.01)
    assert cfg.beta1 == pytest.approx(0.99)
    assert cfg.eta == pytest.approx(0.01)
    assert cfg.T == 10_000


def test_theorem_schedule_scaling():
    a, b = theorem_schedule(0.2, 1, 4, 1000), theorem_schedule(0.2, 1, 8, 1000)
    assert b.T * 2 == pytest.approx(a.T, abs=1)
    c = theorem_schedule(0.2, 50, 4, 50)
    assert c.T == int(np.ceil(1 / (4 * 0.2 ** 4) - 1e-9))
    d = theorem_schedule(0.1, 2, 3, 10, algo="mbmmo")
    assert d.eta0 == pytest.approx(3 * 0.01)
    assert d.eta == pytest.approx(min(2 * 0.01, 2 * d.eta0 / 10))
    e = theorem_schedule(0.1, 2, 3, 10, algo="mbbo", constants={"c_hess": 2.0})
    assert e.eta0 == pytest.approx(2 * e.gamma0 / 10)
    assert e.gamma_hess == pytest.approx(2 * 3 * 0.01)
    with pytest.raises(ValueError):
        theorem_schedule(0.1, 5, 1, 3)
    with pytest.raises(ValueError):
        theorem_schedule(0.1, 1, 1, 3, constants={"c_zeta": 1})


def test_schedule_validation_and_round_trip():
    for kw in ({"B1": 0}, {"gamma0": 0.0}, {"beta1": 1.0}, {"eta": -1.0}, {"update_style": "sgd"},
               {"u_eval": "mid"}, {"T": -1}):
        with pytest.raises(ValueError, match=next(iter(kw))):
            ScheduleConfig(**kw)
    cfg = ScheduleConfig(B1=3, update_style="adam", constants={"c_eta": 2.0})
    assert ScheduleConfig.from_dict(cfg.to_dict()) == cfg


# -------------------------------------------------------- compositional

def test_fcco_degenerate_constants_give_batch_estimator():
    ds = gen_binary(4, 9, 3, 1.0, seed=1)
    p = build_problem(ObjectiveSpec(kind="ap"), ds, LIN3)
    w = np.array([0.2, -0.4, 0.1])
    cfg = ScheduleConfig(B1=2, B2=3, gamma0=1.0, beta1=0.0, eta=0.0, u_eval="post")
    st = init_state(p, w, cfg)
    s1, s2 = TwoLevelSampler(2, 3, seed=5), TwoLevelSampler(2, 3, seed=5)
    for _ in range(10):
        sox_fcco_step(st, p, s1, cfg)
        blocks = s2.blocks(p.m)
        batches = [s2.inner(p.refs[i]) for i in blocks]
        m_t = np.zeros(3)
        for i, b in zip(blocks, batches):
            g, J = p.inner_eval(w, int(i), b)
            assert np.allclose(st.u[int(i)], g, rtol=0, atol=1e-14)
            m_t += p.outer_eval(int(i), g)[1] @ J
        assert np.allclose(st.v, m_t / 2, rtol=0, atol=1e-12)


def test_fcco_constant_outer_decays_momentum():
    _, p = _pairwise()
    p.weights[:] = 0.0  # f = 0 * g, so the outer gradient vanishes
    cfg = ScheduleConfig(B1=2, B2=3, beta1=0.5, eta=0.1)
    st = init_state(p, np.zeros(3), cfg)
    st.v = np.ones(3)
    sampler = TwoLevelSampler(2, 3, seed=0)
    for t in range(1, 6):
        w_before = st.w.copy()
        sox_fcco_step(st, p, sampler, cfg)
        assert np.array_equal(st.v, np.full(3, 0.5 ** t))
        assert np.allclose(w_before - st.w, 0.1 * 0.5 ** t)


def test_fcco_single_block_is_gradient_descent():
    X = np.array([[1.0, 0.5, -0.2], [0.1, -0.3, 0.4], [-0.5, 0.2, 0.3], [0.3, 0.3, -0.1]])
    ds = Dataset("binary", X, [1, -1, -1, -1])
    p = build_problem(ObjectiveSpec(kind="auroc_pairwise", surrogate=SQ), ds, LIN3)
    cfg = ScheduleConfig(B1=1, B2=10, T=20, gamma0=1.0, beta1=0.0, eta=0.1)
    z, _, _ = run(p, TwoLevelSampler(1, 10, seed=0), cfg, w0=np.zeros(3), log_every=100)
    w = np.zeros(3)
    D = X[1:] - X[0]
    for _ in range(20):
        r = D @ w + 1.0
        w = w - 0.1 * np.mean(2 * r[:, None] * D, axis=0)
    assert np.allclose(z, w, rtol=0, atol=1e-12)


def test_moving_average_contraction():
    ds = gen_binary(3, 5, 3, 1.0, seed=2)
    p = build_problem(ObjectiveSpec(kind="ap"), ds, LIN3)
    w = np.array([0.5, 0.1, -0.3])
    cfg = ScheduleConfig(B1=3, B2=100, gamma0=0.3, eta=0.0)
    st = init_state(p, w, cfg)
    exact = [p.inner_eval(w, i, p.refs[i])[0] for i in range(p.m)]
    for i in range(p.m):
        st.u[i] = exact[i] + np.array([1.0, -2.0])
    sampler = TwoLevelSampler(3, 100, seed=0)
    for t in range(1, 6):
        sox_fcco_step(st, p, sampler, cfg)
        for i in range(p.m):
            err = np.linalg.norm(st.u[i] - exact[i])
            assert err == pytest.approx(0.7 ** t * np.sqrt(5.0), rel=1e-10)


def test_adam_with_unit_second_moment_is_momentum():
    cfg_m = ScheduleConfig(beta1=0.8, eta=0.05)
    cfg_a = ScheduleConfig(beta1=0.8, eta=0.05, update_style="adam", delta=1e-300)

    class S:
        pass

    a, b = S(), S()
    for s in (a, b):
        s.w, s.v, s.step_count = np.zeros(4), np.zeros(4), 0
    a.m2, b.m2 = None, np.ones(4)
    rng = np.random.default_rng(0)
    for _ in range(30):
        g = rng.choice([-1.0, 1.0], size=4)  # squared entries are 1, so m2 stays 1
        param_update(a, g, cfg_m)
        param_update(b, g, cfg_a)
    assert np.allclose(a.w, b.w, rtol=0, atol=1e-12)


def test_linear_outer_naive_equals_sox():
    _, p = _pairwise()
    cfg = ScheduleConfig(B1=2, B2=3, T=30, gamma0=0.5, beta1=0.9, eta=0.1)
    z1, _, _ = run(p, TwoLevelSampler(2, 3, seed=3), cfg, log_every=100)
    z2, _, _ = naive_sgd_run(p, TwoLevelSampler(2, 3, seed=3), cfg, log_every=100)
    assert np.allclose(z1, z2, rtol=0, atol=1e-14)


def test_naive_full_batch_is_gradient_descent():
    ds = gen_binary(4, 8, 3, 1.0, seed=3)
    p = build_problem(ObjectiveSpec(kind="ap"), ds, LIN3)
    cfg = ScheduleConfig(B1=4, B2=100, T=15, beta1=0.0, eta=0.2)
    z, _, _ = naive_sgd_run(p, TwoLevelSampler(4, 100, seed=0), cfg, log_every=100)
    assert np.allclose(z, full_batch_gd(p, np.zeros(3), 0.2, 15), rtol=0, atol=1e-12)


def test_naive_ap_gradient_is_biased():
    ds = gen_binary(25, 475, 5, 2.0, seed=0)
    p = build_problem(ObjectiveSpec(kind="ap"), ds, ScoreModelSpec(input_dim=5))
    w = np.random.default_rng(1).normal(size=5) * 0.3
    g = p.full_grad(w)
    cfg = ScheduleConfig(B1=25, B2=2, beta1=0.0, eta=0.0)
    st = init_state(p, w, cfg)
    sampler = TwoLevelSampler(25, 2, seed=0)
    acc = np.zeros(5)
    for _ in range(1000):
        sox_fcco_step(st, p, sampler, cfg, naive=True)
        acc += st.v
    assert np.linalg.norm(acc / 1000 - g) > 0.3 * np.linalg.norm(g)


# --------------------------------------------------------------- min-max

def _minmax():
    ds = gen_multitask(40, 3, 1, 1.0, seed=4)
    return build_problem(ObjectiveSpec(kind="auroc_minmax"), ds, LIN3)


def test_minmax_zero_dual_step_freezes_duals():
    p = _minmax()
    z0 = np.array([0.1, -0.2, 0.3, 0.0, 0.0])
    cfg = ScheduleConfig(B1=1, B2=100, beta1=0.5, eta=0.1, eta0=0.0)
    st = init_state(p, z0, cfg)
    sox_mbmmo_step(st, p, TwoLevelSampler(1, 100, seed=0), cfg)
    gz, _ = p.grad_at(z0, np.zeros(1))
    assert st.s == {0: 0.0}
    assert np.allclose(st.w, z0 - 0.1 * 0.5 * gz, rtol=0, atol=1e-14)


def test_minmax_dual_contracts_to_argmax():
    p = _minmax()
    z = np.array([0.4, 0.2, -0.1, 0.05, -0.05])
    s_star = p.s_star(z)[0]
    cfg = ScheduleConfig(B1=1, B2=100, eta=0.0, eta0=0.4)
    st = init_state(p, z, cfg)
    sampler = TwoLevelSampler(1, 100, seed=0)
    errs = []
    for _ in range(20):
        sox_mbmmo_step(st, p, sampler, cfg)
        errs.append(abs(st.s[0] - s_star))
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    assert np.allclose(ratios, 1 - 0.4 / 2, rtol=1e-6)


# --------------------------------------------------------------- bilevel

def test_bilevel_without_gate_matches_fcco():
    _, f = _pairwise()
    b = as_bilevel(f)
    cfg = ScheduleConfig(B1=2, B2=4, gamma0=0.7, beta1=0.9, eta=0.05)
    s1, s2 = init_state(f, np.zeros(3), cfg), init_state(b, np.zeros(3), cfg)
    r1, r2 = TwoLevelSampler(2, 4, seed=9), TwoLevelSampler(2, 4, seed=9)
    for _ in range(30):
        sox_fcco_step(s1, f, r1, cfg)
        sox_mbbo_step(s2, b, r2, cfg)
        assert np.array_equal(s1.w, s2.w)


def test_bilevel_gate_only_matches_hand_recursion():
    ds = gen_binary(8, 24, 3, 1.0, seed=0)
    spec = ObjectiveSpec(kind="recall_k_bilevel", K=5, tau1=0.1, tau2=0.1,
                         surrogate=SurrogateKind("squared_hinge", 1.0))
    p = build_problem(spec, ds, LIN3)
    cfg = ScheduleConfig(B1=3, B2=10, T=30, beta1=0.9, eta=0.05, eta0=0.2, gamma_hess=0.5)
    w0 = np.array([0.3, -0.1, 0.2])
    z, _, _ = run(p, TwoLevelSampler(3, 10, seed=4), cfg, w0=w0, log_every=100)
    path = O.recall_bilevel_hand(ds.X, ds.positives, 5, 0.5, 0.1, 0.1, 1.0, cfg,
                                 TwoLevelSampler(3, 10, seed=4), 30, w0, lower_level_solve_exact)
    assert np.array_equal(z, path[-1])


def test_bilevel_frozen_threshold_converges():
    ds = gen_binary(10, 30, 3, 1.0, seed=5)
    spec = ObjectiveSpec(kind="recall_k_bilevel", K=6, tau1=0.1, tau2=0.1)
    p = build_problem(spec, ds, LIN3)
    w = np.array([1.0, 0.5, -0.5])
    cfg = ScheduleConfig(B1=10, B2=1000, eta=0.0, eta0=0.3)
    st = init_state(p, w, cfg)
    st.lam[0] = 5.0  # start far from the solution
    sampler = TwoLevelSampler(10, 1000, seed=0)
    for _ in range(300):
        sox_mbbo_step(st, p, sampler, cfg)
    exact = O.lower_level_bisect(list(ds.X @ w), 6, 0.5, 0.1, 0.1)
    assert abs(st.lam[0] - exact) <= 1e-3
    assert st.s_hess[0] >= 0.05


# ------------------------------------------------------------------ CVaR

def test_cvar_inactive_threshold_descends_linearly():
    ds = gen_binary(3, 6, 3, 1.0, seed=6)
    p = build_problem(ObjectiveSpec(kind="pauc_cvar_oneway", beta=0.5), ds, LIN3)
    cfg = ScheduleConfig(B1=3, B2=6, eta=0.0, eta0=0.25)
    st = init_state(p, np.zeros(3), cfg)
    st.s = {i: 100.0 for i in range(3)}
    sampler = TwoLevelSampler(3, 6, seed=0)
    for t in range(1, 5):
        cvar_subgrad_step(st, p, sampler, cfg)
        assert all(v == 100.0 - 0.25 * t for v in st.s.values())


def test_cvar_frozen_w_threshold_reaches_quantile():
    ds = gen_binary(4, 10, 3, 1.0, seed=7)
    p = build_problem(ObjectiveSpec(kind="pauc_cvar_oneway", beta=0.35), ds, LIN3)
    w = np.array([0.6, -0.2, 0.4])
    cfg = ScheduleConfig(B1=4, B2=100, eta=0.0, eta0=0.01)
    st = init_state(p, w, cfg)
    sampler = TwoLevelSampler(4, 100, seed=0)
    for _ in range(3000):
        cvar_subgrad_step(st, p, sampler, cfg)
    s = np.array([st.s[i] for i in range(4)])
    assert np.max(np.abs(s - p.s_star(w))) <= 0.05
    assert abs(p.value_at(w, s) - p.eval_full(w)) <= 1e-2
    L, _ = p.losses(w)
    assert np.allclose(p.s_star(w), [cvar_exact(r, 0.35)[0] for r in L])


def test_cvar_full_tail_tracks_pairwise():
    ds = gen_binary(5, 12, 3, 1.0, seed=8)
    sk = SurrogateKind("squared_hinge", 1.0)
    pc = build_problem(ObjectiveSpec(kind="pauc_cvar_oneway", beta=1.0, surrogate=sk), ds, LIN3)
    pf = build_problem(ObjectiveSpec(kind="auroc_pairwise", surrogate=sk), ds, LIN3)
    cfg = ScheduleConfig(B1=5, B2=100, T=300, gamma0=1.0, beta1=0.9, eta=0.05, eta0=0.05)
    zc, _, _ = run(pc, TwoLevelSampler(5, 100, seed=0), cfg, log_every=1000)
    zf, _, _ = run(pf, TwoLevelSampler(5, 100, seed=0), cfg, log_every=1000)
    assert abs(pc.eval_full(zc) - pf.eval_full(zf)) <= 0.01


# ------------------------------------------------------------------- run

def test_run_zero_steps():
    _, p = _pairwise()
    w0 = np.array([0.1, 0.2, 0.3])
    z, trace, _ = run(p, TwoLevelSampler(2, 3), ScheduleConfig(T=0), w0=w0)
    assert np.array_equal(z, w0) and trace == []


def test_run_trace_shape_and_determinism():
    _, p = _pairwise()
    cfg = ScheduleConfig(B1=2, B2=3, T=25)
    hooks = {"norm": lambda z: float(np.linalg.norm(z))}
    z1, t1, _ = run(p, TwoLevelSampler(2, 3, seed=1), cfg, eval_hooks=hooks, log_every=10)
    z2, t2, _ = run(p, TwoLevelSampler(2, 3, seed=1), cfg, eval_hooks=hooks, log_every=10,
                    threads=3)
    assert [r.iteration for r in t1] == [1, 11, 21]
    assert t1 == t2 and np.array_equal(z1, z2)
    # the last logged row is taken after completed step 21
    z21, _, _ = run(p, TwoLevelSampler(2, 3, seed=1), ScheduleConfig(B1=2, B2=3, T=21),
                    log_every=100)
    assert t1[-1].exact_objective == p.eval_full(z21)
    assert t1[0].exact_objective is None and t1[-1].metric_values["norm"] > 0
    assert all(r.wall_seconds is None for r in t1)


def test_run_aborts_on_overflow():
    _, p = _pairwise(surrogate=SQ)
    cfg = ScheduleConfig(B1=5, B2=10, T=200, beta1=0.0, eta=1e6)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalError, match="non-finite"):
            run(p, TwoLevelSampler(5, 10), cfg, w0=np.ones(3))


def test_trace_csv_round_trip(tmp_path):
    trace = [TraceRecord(1, None, 0.123456789012, None, {}, 2.0),
             TraceRecord(11, 0.5, 0.1, 0.2, {"auroc": 0.75}, 1.5)]
    path = tmp_path / "trace.csv"
    write_trace(trace, path, ["auroc"])
    header = path.read_text().splitlines()[0]
    assert header == "iteration,wall_seconds,objective_estimate,exact_objective,metric:auroc,grad_norm"
    rows = read_trace(path)
    assert rows[0]["objective_estimate"] == "0.123456789"
    assert rows[0]["exact_objective"] == "" and rows[0]["wall_seconds"] == ""
    assert rows[1]["metric:auroc"] == "0.75"
