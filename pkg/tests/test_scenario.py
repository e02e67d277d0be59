"""Fault placement, whole-case compilation, probes, CSV output and the pipeline."""

import numpy as np
import pytest

from circuit_tsa.case import Branch, Bus, Case, Event, Load, Machine
from circuit_tsa.engine import Simulator, SolverConfig
from circuit_tsa.grid import solve_power_flow
from circuit_tsa.models import ExciterParams, GovernorParams, MachineParams
from circuit_tsa.netlist import export_spice_netlist, validate_netlist
from circuit_tsa.scenario import (
    ScenarioError,
    compile_case,
    place_midline_fault,
    probe_names,
    run_scenario,
)
from circuit_tsa.timeseries import TimeSeries, read_csv, write_csv

PARAMS = MachineParams(xd=1.8, xq=1.7, xd1=0.3, xq1=0.55, xd2=0.25, xl=0.15, td01=8.0, tq01=0.4,
                       td02=0.03, tq02=0.05, h=4.0, d=1.0)
EXCITER = ExciterParams(ka=50.0, ta=0.05, ke=1.0, te=0.5, kf=0.05, tf=1.0, vrmax=5.0, vrmin=-5.0)
GOVERNOR = GovernorParams(k=20.0, t1=0.2, t2=0.1, t3=0.2, t4=0.3, t5=7.0, f=0.28, pmax=1.0)


def two_bus(**changes):
    case = Case(
        name="two-bus",
        buses=[Bus(1, "slack", v_setpoint=1.03), Bus(2, "PQ")],
        branches=[Branch("L1-2", 1, 2, 0.01, 0.1, 0.02)],
        loads=[Load("LD2", 2, 0.5, 0.2)],
        machines=[Machine("G1", 1, PARAMS, 100.0, EXCITER, GOVERNOR)],
        t_stop=2.0,
    )
    return case.copy(**changes).validate()


def test_split_halves_example():
    case = Case(buses=[Bus(1, "slack"), Bus(2, "PQ")], branches=[Branch("L", 1, 2, 0.02, 0.2, 0.04)]).validate()
    out = place_midline_fault(case, "L", 0.5, 0.2)
    a, b = out.branches
    for half in (a, b):
        assert (half.r, half.x, half.b) == pytest.approx((0.01, 0.1, 0.02))
    (fault,) = out.faults
    assert fault.bus == 3 and fault.x == 0.2
    assert (a.from_bus, a.to_bus, b.from_bus, b.to_bus) == (1, 3, 3, 2)


@pytest.mark.parametrize("location", [0.0, 1.0, -0.2])
def test_split_rejects_endpoints(location):
    with pytest.raises(ValueError):
        place_midline_fault(two_bus(), "L1-2", location, 0.2)


def test_split_rejects_transformer(ieee14):
    with pytest.raises(ValueError, match="transformer"):
        place_midline_fault(ieee14, ieee14.transformers[0].id, 0.5, 0.2)


def _split_shift(case, location):
    base = solve_power_flow(case)
    split = solve_power_flow(place_midline_fault(case, "L2-4", location, 0.2))
    return max(abs(split.voltage(b) - base.voltage(b)) for b in base.bus_ids)


@pytest.mark.parametrize("location", [0.3, 0.5])
def test_split_of_uncharged_line_keeps_power_flow(ieee14, location):
    branches = [b if b.id != "L2-4" else Branch(b.id, b.from_bus, b.to_bus, b.r, b.x, 0.0)
                for b in ieee14.branches]
    assert _split_shift(ieee14.copy(branches=branches), location) < 1e-9


def test_split_charging_redistribution_is_small(ieee14):
    # two nominal pi halves move charging from the ends to the midpoint
    br = ieee14.branch("L2-4")
    assert _split_shift(ieee14, 0.5) < abs(complex(br.r, br.x)) * br.b


def test_two_bus_compiles_clean():
    c = compile_case(two_bus())
    assert validate_netlist(c.netlist) == []


def test_initial_solve_matches_power_flow(ieee14):
    c = compile_case(ieee14)
    sim = Simulator(c.netlist)
    st = sim.initial_conditions()
    for b, (r, i) in c.node_map.items():
        v = complex(sim.voltage(st, r), sim.voltage(st, i))
        assert abs(v - c.init.power_flow.voltage(b)) < 1e-6, b


def test_netlist_export_is_deterministic(ieee14):
    a = export_spice_netlist(compile_case(ieee14).netlist)
    b = export_spice_netlist(compile_case(ieee14.copy()).netlist)
    assert a == b


def test_probe_names_cover_machines(ieee14):
    names = probe_names(ieee14)
    assert names[:3] == ["vmag_1", "omega_1", "delta_1"]
    assert sum(n.startswith("vr_") for n in names) == 5


def test_unknown_probe_rejected():
    with pytest.raises(ScenarioError) as err:
        run_scenario(two_bus(), probes=["speed_1"])
    assert err.value.stage == "compile"


def test_reference_angle_is_zero(fault_run_1ms):
    s, _ = fault_run_1ms
    assert np.all(s["delta_1"] == 0.0)


def test_eventless_two_bus_is_flat():
    s = run_scenario(two_bus())
    for name, v in s.channels.items():
        assert np.max(np.abs(v - v[0])) < 1e-6, name


def test_pre_fault_matches_eventless(fault_run_1ms, eventless14):
    s, _ = fault_run_1ms
    flat = run_scenario(eventless14, SolverConfig(dt=1e-3, t_stop=1.0))
    pre = s.time < 1.0
    for name in flat.names:
        assert np.max(np.abs(s[name][pre] - flat[name][flat.time < 1.0])) < 1e-6, name


def test_fault_depresses_bus_four():
    case = place_midline_fault(two_bus(), "L1-2", 0.5, 0.2)
    case = case.copy(events=[Event("close_fault_switch", 0.5, "F1"), Event("open_fault_switch", 0.6, "F1")])
    s = run_scenario(case, probes=["vmag_1", "omega_1"])
    assert s["vmag_1"][s.window(0.51, 0.6)].max() < s["vmag_1"][0]
    assert s["omega_1"][s.window(0.55, 0.61)].max() > 1.0


def test_branch_trip_and_reclose(ieee14):
    case = ieee14.copy(faults=[], events=[Event("open_branch", 0.5, "L4-5"), Event("close_branch", 1.0, "L4-5")])
    s = run_scenario(case, SolverConfig(dt=1e-3, t_stop=1.5), probes=["vmag_6"])
    assert abs(s["vmag_6"][s.window(0.6, 0.7)].mean() - s["vmag_6"][0]) > 1e-4


def test_run_records_meta():
    s = run_scenario(two_bus(), t_stop=0.1)
    assert s.meta["runtime_s"] > 0
    assert s.meta["initial_max_rate"] < 1e-6


def test_power_flow_failure_is_tagged():
    heavy = two_bus(loads=[Load("LD2", 2, 50.0, 20.0)])
    with pytest.raises(ScenarioError) as err:
        run_scenario(heavy)
    assert err.value.stage == "compile"


def test_governor_limit_violation_is_tagged():
    tight = two_bus(machines=[Machine("G1", 1, PARAMS, 100.0, EXCITER, GovernorParams(
        k=20.0, t1=0.2, t2=0.1, t3=0.2, t4=0.3, t5=7.0, f=0.28, pmax=0.1))])
    with pytest.raises(ScenarioError) as err:
        run_scenario(tight)
    assert err.value.stage == "initialize"


def test_csv_shape_and_round_trip(tmp_path):
    s = TimeSeries(np.array([0.0, 0.1, 0.2]), {"a": np.array([1.0, 1 / 3, -2e-300]),
                                                "b": np.array([np.pi, 0.0, 7.0])})
    path = tmp_path / "out.csv"
    write_csv(s, path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert len(lines) == 4 and all(len(x.split(",")) == 3 for x in lines)
    back = read_csv(path)
    assert back.names == ["a", "b"]
    assert np.array_equal(back.time, s.time)
    for n in s.names:
        assert np.array_equal(back[n], s[n])


def test_csv_empty_channel_set(tmp_path):
    path = tmp_path / "empty.csv"
    write_csv(TimeSeries(np.array([0.0, 1.0])), path)
    assert path.read_text().splitlines()[0] == "time"
    assert read_csv(path).names == []


def test_timeseries_rejects_ragged_channel():
    with pytest.raises(ValueError):
        TimeSeries(np.zeros(3), {"a": np.zeros(2)})
