"""Machine, exciter and governor subcircuits simulated in the engine."""

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from circuit_tsa import expr as ex
from circuit_tsa.case import Branch, Bus, Case, Event, Machine
from circuit_tsa.engine import Simulator, SolverConfig
from circuit_tsa.machines import build_governor_subcircuit
from circuit_tsa.models import ExciterParams, GovernorParams, MachineParams, saturation_quadratic
from circuit_tsa.netlist import DC, Netlist, VoltageSource
from circuit_tsa.oracle import run_reference_dae
from circuit_tsa.scenario import compile_case, run_scenario

X_LINE = 0.2
P0 = 0.5
LIMIT_SLACK = 1e-9
CLASSICAL = MachineParams(xd=0.3, xq=0.3, xd1=0.3, xq1=0.3, xd2=0.3, xl=0.1, td01=1e4, tq01=1e4,
                          td02=1e4, tq02=1e4, h=3.5, d=0.0)


def smib(params=CLASSICAL, events=()):
    return Case(
        name="smib",
        buses=[Bus(1, "slack", v_setpoint=1.0), Bus(2, "PV", v_setpoint=1.0, p_gen=P0)],
        branches=[Branch("L1-2", 1, 2, 0.0, X_LINE)],
        machines=[Machine("G", 2, params, 100.0)],
        events=list(events),
        t_stop=5.0,
    ).validate()


def _run(compiled, probes, dt=1e-3, t_stop=5.0):
    sim = Simulator(compiled.netlist, SolverConfig(dt=dt, t_stop=t_stop))
    return sim.run(probes, initial=sim.initial_conditions())


def _smib_swing(step=0.02):
    case = smib(events=[Event("step_mechanical_power", 0.5, "G", step)])
    c = compile_case(case)
    mb = c.machine_blocks["G"]
    s = _run(c, {"delta": ex.V(mb.states["delta"]), "omega": ex.V(mb.states["omega"])})
    return case, c, s


def _swing_constants(c):
    init = c.init.machines["G"]
    e = abs(complex(*init.state[2:4][::-1]))  # |E'| = |(Ed', Eq')|
    pmax = e * 1.0 / (CLASSICAL.x2 + X_LINE)
    return init, pmax


def test_classical_swing_frequency():
    case, c, s = _smib_swing()
    init, pmax = _swing_constants(c)
    delta0 = init.state[0]
    expect = math.sqrt(case.omega_base * pmax * math.cos(delta0) / (2 * CLASSICAL.h)) / (2 * math.pi)
    late = s.time > 1.0
    w = s["omega"][late] - 1.0
    w = w - w.mean()
    ups = np.nonzero((w[:-1] < 0) & (w[1:] >= 0))[0]
    t = s.time[late]
    crossings = t[ups] - w[ups] * (t[ups + 1] - t[ups]) / (w[ups + 1] - w[ups])
    measured = (len(crossings) - 1) / (crossings[-1] - crossings[0])
    assert abs(measured / expect - 1) < 0.02


def test_classical_limit_matches_swing_oracle():
    case, c, s = _smib_swing()
    init, pmax = _swing_constants(c)
    # internal angle differs from delta by a constant in the classical limit
    offset = math.atan2(init.state[3], init.state[2])

    def rhs(t, y):
        pm = init.pm + (0.02 if t >= 0.5 else 0.0)
        pe = pmax * math.sin(y[0] - offset)
        return [case.omega_base * (y[1] - 1.0), (pm - pe) / (2 * CLASSICAL.h)]

    y0 = [init.state[0], 1.0]
    first = solve_ivp(rhs, (0.0, 0.5), y0, rtol=1e-11, atol=1e-12, dense_output=True)
    second = solve_ivp(rhs, (0.5, 5.0), first.y[:, -1], rtol=1e-11, atol=1e-12, dense_output=True)
    ref = np.where(s.time < 0.5, first.sol(np.minimum(s.time, 0.5))[0], second.sol(np.maximum(s.time, 0.5))[0])
    assert np.max(np.abs(s["delta"] - ref)) < 1e-3
    assert s["delta"].max() > init.state[0] + 0.01


def test_controlled_machine_equilibrium_persistence():
    params = MachineParams(xd=1.8, xq=1.7, xd1=0.3, xq1=0.55, xd2=0.25, xl=0.15, td01=8.0, tq01=0.4,
                           td02=0.03, tq02=0.05, h=4.0, d=1.0, sat_a=0.8, sat_b=0.3)
    exciter = ExciterParams(ka=50.0, ta=0.05, ke=1.0, te=0.5, kf=0.05, tf=1.0, vrmax=5.0, vrmin=-5.0, tr=0.02,
                            sat_a=1.6, sat_b=0.05)
    governor = GovernorParams(k=20.0, t1=0.2, t2=0.1, t3=0.2, t4=0.3, t5=7.0, f=0.28, pmax=1.0)
    case = smib(params).copy(machines=[Machine("G", 2, params, 100.0, exciter, governor)], t_stop=10.0)
    s = run_scenario(case.validate(), SolverConfig(dt=1e-3, t_stop=10.0),
                     probes=["vmag_2", "omega_2", "efd_2", "pm_2", "pe_2", "vr_2"])
    for name, v in s.channels.items():
        assert np.max(np.abs(v - v[0])) < 1e-5, name


def test_mechanical_step_against_oracle():
    params = MachineParams(xd=1.8, xq=1.7, xd1=0.3, xq1=0.55, xd2=0.25, xl=0.15, td01=8.0, tq01=0.4,
                           td02=0.03, tq02=0.05, h=4.0, d=2.0)
    case = smib(params, [Event("step_mechanical_power", 0.5, "G", 0.1)])
    circuit = run_scenario(case, SolverConfig(dt=1e-3, t_stop=5.0), probes=["omega_2", "pe_2", "vmag_2"])
    oracle = run_reference_dae(case, dt=1e-3, t_stop=5.0, probes=["omega_2", "pe_2", "vmag_2"])
    for name in circuit.names:
        assert np.max(np.abs(circuit[name] - oracle[name])) < 1e-3, name
    assert circuit["omega_2"].max() > 1.0


def test_machine_injections_reproduce_power_flow(ieee14):
    c = compile_case(ieee14)
    sim = Simulator(c.netlist)
    st0 = sim.initial_conditions()
    for m in ieee14.machines:
        mb = c.machine_blocks[m.id]
        i = complex(sim.voltage(st0, mb.nodes["ir"]), sim.voltage(st0, mb.nodes["ii"]))
        r, im = c.node_map[m.bus]
        v = complex(sim.voltage(st0, r), sim.voltage(st0, im))
        assert abs(v * i.conjugate() - c.init.power_flow.generation_at(m.bus)) < 1e-6, m.id


def test_exciter_equilibrium_at_initial_solve(ieee14):
    c = compile_case(ieee14)
    sim = Simulator(c.netlist)
    st0 = sim.initial_conditions()
    for m in ieee14.machines:
        p, nodes = m.exciter, c.exciter_blocks[m.id].nodes
        vr = sim.voltage(st0, nodes["vr"])
        efd = sim.voltage(st0, nodes["efd"])
        vs = sim.voltage(st0, nodes["vs"])
        se = saturation_quadratic(efd, p.sat_a, p.sat_b)
        assert vr == pytest.approx((p.ke + se) * efd, abs=1e-9)
        assert vs == pytest.approx(c.exciter_blocks[m.id].vref - vr / p.ka, abs=1e-9)


@pytest.mark.parametrize("k,expect", [(20.0, 0.7), (100.0, 1.0)])
def test_governor_sustained_speed_error(k, expect):
    p = GovernorParams(k=k, t1=0.2, t2=0.1, t3=0.2, t4=0.3, t5=7.0, f=0.28, pmax=1.0)
    nl = Netlist("gov")
    w = nl.node("omega")
    pm = nl.node("pm")
    nl.add(VoltageSource("Vw", w, 0, DC(1.0 - 0.01)))
    build_governor_subcircuit(nl, "gov", p, 0.5, w, pm)
    sim = Simulator(nl)
    # low speed (positive speed error) raises the mechanical power
    assert sim.voltage(sim.dc_operating_point(), pm) == pytest.approx(expect, abs=1e-9)


def test_governor_zero_error_holds_reference():
    p = GovernorParams(k=20.0, t1=0.2, t2=0.1, t3=0.2, t4=0.3, t5=7.0, f=0.28, pmax=1.0)
    nl = Netlist("gov")
    w, pm = nl.node("omega"), nl.node("pm")
    nl.add(VoltageSource("Vw", w, 0, DC(1.0)))
    build_governor_subcircuit(nl, "gov", p, 0.42, w, pm)
    sim = Simulator(nl)
    assert sim.voltage(sim.dc_operating_point(), pm) == pytest.approx(0.42, abs=1e-12)


def test_limiters_hold_through_the_fault(fault_run_1ms, ieee14):
    s, _ = fault_run_1ms
    for m in ieee14.machines:
        vr = s[f"vr_{m.bus}"]
        # the clamp is a finite-conductance circuit, so allow its residual leak
        assert vr.max() <= m.exciter.vrmax + LIMIT_SLACK
        assert vr.min() >= m.exciter.vrmin - LIMIT_SLACK
        if m.governor is not None:
            assert s[f"pm_{m.bus}"].max() <= m.governor.pmax + LIMIT_SLACK
    assert max(s[f"vr_{m.bus}"].max() for m in ieee14.machines) == pytest.approx(5.0, abs=1e-9)


def test_swing_equation_consistency(ieee14):
    case = ieee14.copy(machines=[m if m.governor is None else
                                 type(m)(m.id, m.bus, m.params, m.mbase, m.exciter, None)
                                 for m in ieee14.machines])
    names = [f"{k}_{m.bus}" for m in case.machines for k in ("omega", "pm", "te")]
    dt = 1e-3
    s = run_scenario(case, SolverConfig(dt=dt, t_stop=3.0), probes=names)
    # trapezoidal steps satisfy 2H (w1 - w0)/h = mean of the two accelerating powers
    keep = np.ones(len(s.time) - 1, bool)
    for t_ev in (1.0, 2.0):
        keep &= np.abs(s.time[1:] - t_ev) > dt / 2
    total_lhs = np.zeros(keep.sum())
    total_rhs = np.zeros(keep.sum())
    for m in case.machines:
        w, pm, te = s[f"omega_{m.bus}"], s[f"pm_{m.bus}"], s[f"te_{m.bus}"]
        acc = pm - te - m.params.d * (w - 1.0)
        total_lhs += (2 * m.params.h * np.diff(w) / dt)[keep]
        total_rhs += (0.5 * (acc[1:] + acc[:-1]))[keep]
    assert np.max(np.abs(total_lhs - total_rhs)) < 1e-6
