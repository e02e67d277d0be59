"""Control blocks built as circuit fragments."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circuit_tsa import blocks as bl
from circuit_tsa import expr as ex
from circuit_tsa.engine import Simulator, SolverConfig, run_transient
from circuit_tsa.netlist import DC, PWL, Netlist, Sine, VoltageSource, validate_netlist


def _with_input(wf):
    nl = Netlist("blk")
    n = nl.node("in")
    nl.add(VoltageSource("Vin", n, 0, wf))
    return nl, n


def _dc_out(build, value):
    nl, n = _with_input(DC(value))
    blk = build(nl, n)
    sim = Simulator(nl)
    return sim.voltage(sim.dc_operating_point(), blk.output)


def _step(build, dt, t_stop):
    nl, n = _with_input(DC(1.0))
    blk = build(nl, n)
    return run_transient(nl, SolverConfig(dt=dt, t_stop=t_stop), probes={"y": blk.output}, start="uic")


def test_operator_examples():
    assert _dc_out(lambda nl, n: bl.make_operator(nl, "g", "gain", [n], 3.0), 2.0) == 6.0
    nl = Netlist()
    a, b, c = (nl.node() for _ in range(3))
    for lab, node, v in (("Va", a, 5.0), ("Vb", b, 3.0), ("Vc", c, 4.0)):
        nl.add(VoltageSource(lab, node, 0, DC(v)))
    sub = bl.make_operator(nl, "sub", "adder", [a, b], [1.0, -1.0])
    prod = bl.make_operator(nl, "prod", "product", [b, c, a])
    sim = Simulator(nl)
    st0 = sim.dc_operating_point()
    assert sim.voltage(st0, sub.output) == 2.0
    assert sim.voltage(st0, prod.output) == 60.0


@pytest.mark.parametrize("kind,inputs", [("adder", []), ("product", [1]), ("gain", [1, 2]), ("modulo", [1])])
def test_operator_errors(kind, inputs):
    nl = Netlist()
    with pytest.raises(bl.BlockError):
        bl.make_operator(nl, "op", kind, inputs)


@pytest.mark.parametrize("maker", [bl.make_low_pass, bl.make_high_pass])
def test_filters_reject_nonpositive_t(maker):
    with pytest.raises(bl.BlockError):
        maker(Netlist(), "f", 1, 0.0)


def test_other_parameter_errors():
    with pytest.raises(bl.BlockError):
        bl.make_lead_lag(Netlist(), "ll", 1, 1.0, 0.0)
    with pytest.raises(bl.BlockError):
        bl.make_integrator(Netlist(), "i", 0.0, ex.Const(1.0))
    with pytest.raises(bl.BlockError):
        bl.make_limiter(Netlist(), "l", 1, 1.0, 1.0)


def test_low_pass_dc_gain():
    assert _dc_out(lambda nl, n: bl.make_low_pass(nl, "lp", n, 0.5), 2.0) == pytest.approx(2.0, abs=1e-9)
    assert _dc_out(lambda nl, n: bl.make_low_pass(nl, "lp", n, 0.5, K=5.0), 1.0) == pytest.approx(5.0, abs=1e-9)


def test_low_pass_step_pointwise():
    T = 0.2
    s = _step(lambda nl, n: bl.make_low_pass(nl, "lp", n, T), T / 1000, 3 * T)
    exact = np.array([bl.step_response("low_pass", t, T=T) for t in s.time])
    assert np.max(np.abs(s["y"] - exact)) < 1e-3


def test_high_pass_step_and_dc_blocking():
    T = 0.3
    s = _step(lambda nl, n: bl.make_high_pass(nl, "hp", n, T), T / 1000, 3 * T)
    assert s["y"][0] == pytest.approx(1.0, abs=1e-12)
    exact = np.array([bl.step_response("high_pass", t, T=T) for t in s.time])
    assert np.max(np.abs(s["y"] - exact)) < 1e-3
    assert _dc_out(lambda nl, n: bl.make_high_pass(nl, "hp", n, T), 3.0) == pytest.approx(0.0, abs=1e-9)


def test_high_pass_ramp_final_value():
    T, m = 0.2, 0.7
    nl, n = _with_input(PWL(((0.0, 0.0), (10.0, 10 * m))))
    blk = bl.make_high_pass(nl, "hp", n, T)
    s = run_transient(nl, SolverConfig(dt=1e-3, t_stop=3.0), probes={"y": blk.output}, start="uic")
    assert s["y"][-1] == pytest.approx(m * T, abs=1e-6)


def test_lead_lag_pointwise_and_limits():
    T1, T2 = 0.4, 0.1
    s = _step(lambda nl, n: bl.make_lead_lag(nl, "ll", n, T1, T2), T2 / 1000, 10 * T2)
    exact = np.array([bl.step_response("lead_lag", t, T1=T1, T2=T2) for t in s.time])
    assert np.max(np.abs(s["y"] - exact)) < 1e-3
    assert s["y"][0] == pytest.approx(T1 / T2, abs=1e-12)


def test_lead_lag_pole_zero_cancellation():
    nl, n = _with_input(Sine(0.2, 1.0, 1.5))
    blk = bl.make_lead_lag(nl, "ll", n, 0.3, 0.3, initial_input=0.2)
    s = run_transient(nl, SolverConfig(dt=1e-3, t_stop=2.0), probes={"y": blk.output, "u": n}, start="uic")
    assert np.max(np.abs(s["y"] - s["u"])) < 1e-9


def test_lead_lag_without_zero_is_low_pass():
    T2 = 0.25
    s = _step(lambda nl, n: bl.make_lead_lag(nl, "ll", n, 0.0, T2), T2 / 1000, T2)
    assert s["y"][-1] == pytest.approx(1 - math.exp(-1), abs=1e-3)


def test_integrator_examples():
    nl = Netlist()
    one = bl.make_integrator(nl, "one", 1.0, ex.Const(1.0))
    zero = bl.make_integrator(nl, "zero", 1.0, ex.Const(0.0), initial=0.7)
    s = run_transient(nl, SolverConfig(dt=1e-2, t_stop=2.0), probes={"a": one.output, "b": zero.output},
                      start="uic")
    assert np.max(np.abs(s["a"] - s.time)) < 1e-9
    assert np.max(np.abs(s["b"] - 0.7)) < 1e-9


def test_integrator_of_cosine():
    nl, n = _with_input(Sine(0.0, 1.0, 1 / (2 * math.pi), 90.0))
    blk = bl.make_integrator(nl, "int", 1.0, ex.V(n))
    s = run_transient(nl, SolverConfig(dt=1e-3, t_stop=2 * math.pi), probes={"y": blk.output}, start="uic")
    assert np.max(np.abs(s["y"] - np.sin(s.time))) < 1e-4


def test_integrator_with_feedback_settles():
    nl, n = _with_input(DC(2.0))
    blk = bl.make_integrator(nl, "int", 0.5, lambda out: ex.V(n) - out)
    s = run_transient(nl, SolverConfig(dt=1e-3, t_stop=5.0), probes={"y": blk.output}, start="uic")
    assert s["y"][-1] == pytest.approx(2.0, abs=1e-3)


@pytest.mark.parametrize("x,y", [(0.5, 0.5), (3.0, 1.0), (-4.0, -1.0)])
def test_limiter_values(x, y):
    assert _dc_out(lambda nl, n: bl.make_limiter(nl, "lim", n, -1.0, 1.0), x) == y


def test_limiter_bounds_hold_over_a_run():
    nl, n = _with_input(Sine(0.0, 5.0, 2.0))
    blk = bl.make_limiter(nl, "lim", n, -1.0, 2.0)
    s = run_transient(nl, SolverConfig(dt=1e-3, t_stop=1.0), probes={"y": blk.output}, start="uic")
    assert s["y"].min() >= -1.0 and s["y"].max() <= 2.0


@pytest.mark.parametrize("e,out", [(3.0, 0.0), (4.0, 0.1), (2.0, 0.0)])
def test_saturation_values(e, out):
    got = _dc_out(lambda nl, n: bl.make_saturation(nl, "sat", n, 3.0, 0.1), e)
    assert got == pytest.approx(out, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
def test_chained_gains_compose(k1, k2, x):
    def build(nl, n):
        return bl.make_operator(nl, "g2", "gain", [bl.make_operator(nl, "g1", "gain", [n], k1)], k2)
    got = _dc_out(build, x)
    assert got == pytest.approx(k1 * k2 * x, rel=1e-12, abs=1e-12)


def test_composition_allocates_fresh_nodes():
    nl, n = _with_input(DC(1.0))
    a = bl.make_low_pass(nl, "a", n, 0.1)
    b = bl.make_low_pass(nl, "b", a, 0.1)
    c = bl.make_lead_lag(nl, "c", b, 0.2, 0.1)
    outs = {a.output, b.output, c.output, n}
    assert len(outs) == 4
    assert validate_netlist(nl) == []
