"""Y-bus assembly, power flow and compiled network behavior."""

import cmath

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circuit_tsa.case import Branch, Bus, Case, Load, Transformer
from circuit_tsa.engine import Simulator
from circuit_tsa.grid import (GridError, PowerFlowError, branch_two_port, build_ybus, build_ybus_naive,
                              bus_nodes, compile_branch, compile_load, compile_transformer,
                              constant_pq_current, solve_power_flow, solve_power_flow_gauss_seidel)
from circuit_tsa.netlist import DC, Netlist, VoltageSource


def two_bus(load_kind="constant_z", p=1.0, q=0.0, b=0.0):
    return Case(
        name="two-bus",
        buses=[Bus(1, "slack", v_setpoint=1.0), Bus(2, "PQ")],
        branches=[Branch("L1-2", 1, 2, 0.0, 0.1, b)],
        loads=[Load("D2", 2, p, q, load_kind)] if (p or q) else [],
    )


def test_single_line_hand_values():
    y = build_ybus(two_bus(p=0.0, b=0.2)).matrix
    assert y[0, 0] == pytest.approx(-9.9j, abs=1e-12)
    assert y[1, 1] == pytest.approx(-9.9j, abs=1e-12)
    assert y[0, 1] == pytest.approx(10j, abs=1e-12)
    assert y[1, 0] == pytest.approx(10j, abs=1e-12)


def test_unit_tap_transformer_equals_line():
    line = two_bus(p=0.0)
    tr = Case(buses=line.buses, transformers=[Transformer("T1-2", 1, 2, 0.0, 0.1, 1.0)])
    assert np.array_equal(build_ybus(line).matrix, build_ybus(tr).matrix)


def test_ieee14_ybus_against_naive(ieee14):
    y, yn = build_ybus(ieee14), build_ybus_naive(ieee14)
    assert y.matrix.shape == (14, 14) and y.real_split().shape == (28, 28)
    assert np.max(np.abs(y.matrix - yn.matrix)) < 1e-12
    assert np.allclose(y.matrix, y.matrix.T, atol=0, rtol=0)


def test_real_split_pattern(ieee14):
    y = build_ybus(ieee14)
    r = y.real_split()
    n = len(y.bus_ids)
    g, b = y.matrix.real, y.matrix.imag
    assert np.array_equal(r[:n, :n], g) and np.array_equal(r[n:, n:], g)
    assert np.array_equal(r[:n, n:], -b) and np.array_equal(r[n:, :n], b)


def test_row_sums_equal_shunts(ieee14):
    y = build_ybus(ieee14)
    shunt = np.zeros(len(y.bus_ids), complex)
    idx = y.index
    for bus in ieee14.buses:
        shunt[idx[bus.id]] += complex(bus.shunt_g, bus.shunt_b)
    for br in ieee14.branches:
        shunt[idx[br.from_bus]] += 0.5j * br.b
        shunt[idx[br.to_bus]] += 0.5j * br.b
    for tr in ieee14.transformers:
        yff, yft, ytf, ytt = branch_two_port(tr)
        shunt[idx[tr.from_bus]] += yff + yft
        shunt[idx[tr.to_bus]] += ytt + ytf
    assert np.max(np.abs(y.matrix.sum(axis=1) - shunt)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(14))))
def test_ybus_permutation_equivariance(ieee14, perm):
    ids = [b.id for b in ieee14.buses]
    relabel = {ids[k]: 100 + perm[k] for k in range(14)}
    from dataclasses import replace
    case = ieee14.copy(
        buses=[replace(b, id=relabel[b.id]) for b in ieee14.buses],
        branches=[replace(b, from_bus=relabel[b.from_bus], to_bus=relabel[b.to_bus]) for b in ieee14.branches],
        transformers=[replace(t, from_bus=relabel[t.from_bus], to_bus=relabel[t.to_bus])
                      for t in ieee14.transformers],
    )
    a, b = build_ybus(ieee14), build_ybus(case)
    for i in ids:
        for j in ids:
            assert a.matrix[a.index[i], a.index[j]] == b.matrix[b.index[relabel[i]], b.index[relabel[j]]]


def test_zero_impedance_and_bad_tap():
    with pytest.raises(GridError):
        branch_two_port(Branch("z", 1, 2, 0.0, 0.0))
    with pytest.raises(GridError):
        branch_two_port(Transformer("t", 1, 2, 0.0, 0.1, 0.0))


def test_unloaded_network_is_flat():
    case = two_bus(p=0.0)
    pf = solve_power_flow(case)
    assert np.max(np.abs(pf.voltages - 1.0)) < 1e-12
    assert np.max(np.abs(pf.injections)) < 1e-12


def test_two_bus_against_scalar_newton():
    pf = solve_power_flow(two_bus("constant_pq"))
    # hand Newton on V2 = 1 - j0.1 * conj(S/V2) in polar unknowns (|V|, angle)
    x = np.array([1.0, 0.0])
    for _ in range(50):
        def f(z):
            v2 = z[0] * cmath.exp(1j * z[1])
            s = v2 * np.conj((v2 - 1.0) / 0.1j)
            return np.array([s.real + 1.0, s.imag])
        jac = np.column_stack([(f(x + h) - f(x - h)) / 2e-7 for h in np.eye(2) * 1e-7])
        x = x - np.linalg.solve(jac, f(x))
    assert abs(pf.voltage(2) - x[0] * cmath.exp(1j * x[1])) < 1e-8
    assert pf.max_mismatch < 1e-8


def test_ieee14_power_flow(ieee14):
    pf = solve_power_flow(ieee14)
    gs = solve_power_flow_gauss_seidel(ieee14)
    assert pf.max_mismatch < 1e-8
    assert np.max(np.abs(pf.voltages - gs.voltages)) < 1e-8
    s = pf.voltages * np.conj(build_ybus(ieee14).matrix @ pf.voltages)
    assert np.max(np.abs(s - pf.injections)) < 1e-12


def test_power_flow_divergence_is_reported():
    case = two_bus("constant_pq", p=20.0)
    with pytest.raises(PowerFlowError):
        solve_power_flow(case, max_iter=10)


def test_power_flow_seed_is_used():
    pf = solve_power_flow(two_bus("constant_pq"), seed={2: 0.9 - 0.1j})
    assert pf.max_mismatch < 1e-8


@pytest.mark.parametrize("v,s,i", [(0.8 + 0.6j, 1 + 0j, 0.8 + 0.6j), (1 + 0j, 1 + 0.5j, 1 - 0.5j)])
def test_constant_pq_current(v, s, i):
    assert constant_pq_current(v, s) == pytest.approx(i, abs=1e-15)
    assert v * constant_pq_current(v, s).conjugate() == pytest.approx(s, abs=1e-15)


def _terminal_currents(build, voltages):
    """Drive bus node pairs with ``voltages`` at DC; return the complex current drawn at each."""
    nl = Netlist("fixture")
    nodes = {k: (nl.node(f"b{k}.re"), nl.node(f"b{k}.im")) for k in voltages}
    build(nl, nodes)
    for k, v in voltages.items():
        nl.add(VoltageSource(f"V{k}r", nodes[k][0], 0, DC(v.real)))
        nl.add(VoltageSource(f"V{k}i", nodes[k][1], 0, DC(v.imag)))
    sim = Simulator(nl)
    st0 = sim.dc_operating_point()
    return {k: complex(-sim.current(st0, f"V{k}r"), -sim.current(st0, f"V{k}i")) for k in voltages}


V_FIX = {1: 1.02 + 0.05j, 2: 0.97 - 0.12j}


@pytest.mark.parametrize("element", [
    Branch("L", 1, 2, 0.01, 0.1, 0.0),
    Branch("L", 1, 2, 0.02, 0.2, 0.04),
    Branch("L", 1, 2, 0.0, 0.1, 0.2),
    Transformer("T", 1, 2, 0.0, 0.1, 1.0),
    Transformer("T", 1, 2, 0.0, 0.1, 0.95),
    Transformer("T", 1, 2, 0.005, 0.1, 1.05),
])
def test_compiled_element_matches_two_port(element):
    compile_fn = compile_transformer if isinstance(element, Transformer) else compile_branch
    got = _terminal_currents(lambda nl, nodes: compile_fn(nl, element, nodes), V_FIX)
    yff, yft, ytf, ytt = branch_two_port(element)
    want = {1: yff * V_FIX[1] + yft * V_FIX[2], 2: ytf * V_FIX[1] + ytt * V_FIX[2]}
    for k in V_FIX:
        assert abs(got[k] - want[k]) < 1e-9


def test_branch_without_charging_emits_no_shunts():
    nl = Netlist()
    labels = compile_branch(nl, Branch("L", 1, 2, 0.01, 0.1, 0.0), {1: (1, 2), 2: (3, 4)})
    assert not any(".sh" in lab for lab in labels)


def test_transformer_series_uses_tap_scaled_impedance():
    nl = Netlist()
    labels = compile_transformer(nl, Transformer("T", 1, 2, 0.0, 0.1, 1.0), {1: (1, 2), 2: (3, 4)})
    assert not any(".sh" in lab for lab in labels)


@pytest.mark.parametrize("kind,p,q", [("constant_z", 1.0, 0.0), ("constant_z", 0.6, 0.3),
                                      ("constant_z", 0.4, -0.2), ("constant_pq", 0.9, 0.4)])
def test_compiled_load_draws_its_power(kind, p, q):
    v = 0.98 + 0.1j if kind == "constant_pq" else 1.0 + 0j
    load = Load("D", 1, p, q, kind)
    got = _terminal_currents(lambda nl, nodes: compile_load(nl, load, nodes), {1: v})
    s = v * got[1].conjugate()
    assert s == pytest.approx(complex(p, q), abs=1e-9)


def test_unity_resistive_load_is_one_ohm():
    nl = Netlist()
    labels = compile_load(nl, Load("D", 1, 1.0, 0.0), {1: (1, 2)})
    assert [nl.device(lab).resistance for lab in labels] == [1.0, 1.0]


def test_zero_load_emits_nothing():
    assert compile_load(Netlist(), Load("D", 1, 0.0, 0.0), {1: (1, 2)}) == []


def test_compiled_network_matches_ybus(ieee14):
    y = build_ybus(ieee14)
    v = {b.id: complex(1 + 0.01 * k, -0.02 * k) for k, b in enumerate(ieee14.buses)}

    def build(nl, nodes):
        for br in ieee14.branches:
            compile_branch(nl, br, nodes)
        for tr in ieee14.transformers:
            compile_transformer(nl, tr, nodes)
        from circuit_tsa.grid import compile_bus_shunt
        for bus in ieee14.buses:
            if bus.shunt_g or bus.shunt_b:
                compile_bus_shunt(nl, bus.id, complex(bus.shunt_g, bus.shunt_b), nodes)

    got = _terminal_currents(build, v)
    want = y.matrix @ np.array([v[b] for b in y.bus_ids])
    for k, b in enumerate(y.bus_ids):
        assert abs(got[b] - want[k]) < 1e-9


def test_bus_nodes_are_pairs(ieee14):
    nl = Netlist()
    nodes = bus_nodes(nl, ieee14)
    assert len({n for pair in nodes.values() for n in pair}) == 28
