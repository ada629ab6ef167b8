import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xrisk.surrogate import (NON_DECREASING, SURROGATE_PARAMS, GateKind, SurrogateKind,
                             conjugate, gate, pair_loss, softplus)

SMOOTH = [SurrogateKind("squared_hinge", 1.0), SurrogateKind("squared_hinge", 0.5),
          SurrogateKind("logistic", 1.0), SurrogateKind("logistic", 0.3),
          SurrogateKind("sigmoid", 1.0), SurrogateKind("sigmoid", 0.1),
          SurrogateKind("square", 1.0)]


def test_squared_hinge_inactive():
    v, d = pair_loss(SurrogateKind("squared_hinge", 1.0), -2.0)
    assert (float(v), float(d)) == (0.0, 0.0)


def test_logistic_at_zero():
    v, d = pair_loss(SurrogateKind("logistic", 1.0), 0.0)
    assert float(v) == pytest.approx(math.log(2.0), abs=1e-15)
    assert float(d) == pytest.approx(0.5, abs=1e-15)


def test_sigmoid_at_zero():
    v, d = pair_loss(SurrogateKind("sigmoid", 1.0), 0.0)
    assert (float(v), float(d)) == (0.5, 0.25)


def test_indicator_is_step_with_zero_derivative():
    v, d = pair_loss(SurrogateKind("indicator"), np.array([-1.0, 0.0, 2.0]))
    assert v.tolist() == [0.0, 1.0, 1.0]
    assert d.tolist() == [0.0, 0.0, 0.0]


@pytest.mark.parametrize("kind", SMOOTH, ids=lambda k: f"{k.tag}-{k.param}")
@settings(max_examples=40, deadline=None)
@given(z=st.floats(-4.0, 4.0))
def test_surrogate_derivative_matches_fd(kind, z):
    h = 1e-6
    if kind.tag == "squared_hinge" and abs(z + kind.param) < 1e-4:
        return  # kink of the hinge
    _, d = pair_loss(kind, z)
    fd = (float(pair_loss(kind, z + h)[0]) - float(pair_loss(kind, z - h)[0])) / (2 * h)
    assert float(d) == pytest.approx(fd, rel=1e-5, abs=1e-6)


@pytest.mark.parametrize("kind", SMOOTH[:-1], ids=lambda k: f"{k.tag}-{k.param}")
def test_non_decreasing_flags(kind):
    z = np.linspace(-5, 5, 201)
    v, _ = pair_loss(kind, z)
    assert kind.non_decreasing
    assert np.all(np.diff(v) >= -1e-15)


def test_square_is_not_monotone():
    assert not SurrogateKind("square", 1.0).non_decreasing
    assert "square" not in NON_DECREASING


def test_gate_values():
    g = GateKind("sigmoid", 0.1)
    assert float(gate(g, 0.0)[0]) == 0.5
    assert float(gate(g, 10 * 0.1)[0]) >= 0.9999


@settings(max_examples=40, deadline=None)
@given(z=st.floats(-1.0, 1.0), t=st.sampled_from([0.05, 0.1, 1.0]))
def test_gate_derivative_matches_fd(z, t):
    g, h = GateKind("sigmoid", t), 1e-7
    fd = (float(gate(g, z + h)[0]) - float(gate(g, z - h)[0])) / (2 * h)
    assert float(gate(g, z)[1]) == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_softplus_examples():
    v, d = softplus(0.0, 1.0)
    assert float(v) == pytest.approx(math.log(2.0), abs=1e-15) and float(d) == 0.5
    assert abs(float(softplus(100.0, 0.01)[0]) - 100.0) <= 1e-12
    assert abs(float(softplus(-100.0, 0.01)[0])) <= 1e-12


def test_conjugate_examples():
    sq = SurrogateKind("square", 1.0)
    assert float(conjugate(sq, 2.0)) == 1.0
    assert float(conjugate(sq, 0.0)) == 0.0
    with pytest.raises(ValueError):
        conjugate(SurrogateKind("logistic", 1.0), 1.0)


def test_fenchel_young():
    rng = np.random.default_rng(0)
    z, s = rng.normal(size=100) * 3, rng.normal(size=100) * 3
    lhs = z * z + conjugate(SurrogateKind("square", 1.0), s)
    assert np.all(lhs >= s * z - 1e-12)


def test_surrogate_round_trip_and_validation():
    for tag in SURROGATE_PARAMS:
        k = SurrogateKind(tag) if SURROGATE_PARAMS[tag] is None else SurrogateKind(tag, 0.7)
        assert SurrogateKind.from_dict(k.to_dict()) == k
    with pytest.raises(ValueError):
        SurrogateKind("hinge", 1.0)
    with pytest.raises(ValueError):
        SurrogateKind("logistic", 0.0)
    assert GateKind.from_dict(GateKind("sigmoid", 0.2).to_dict()) == GateKind("sigmoid", 0.2)
