"""Whole-case compilation and the scenario pipeline.

Pipeline: power flow, machine and controller initialization, compilation of
the case into one netlist, a held-initial-condition solve that must find
every state derivative at zero, then the transient with events.
"""

from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field, replace

import numpy as np

from . import expr as ex
from .case import Branch, Bus, Case, Fault
from .engine import SimulationError, Simulator, SolverConfig
from .grid import (
    PowerFlowResult,
    add_series_impedance,
    bus_nodes,
    compile_branch,
    compile_bus_shunt,
    compile_load,
    compile_transformer,
    solve_power_flow,
)
from .machines import (
    build_exciter_subcircuit,
    build_governor_subcircuit,
    build_machine_subcircuit,
)
from .models import ExciterInit, MachineInit, initialize_exciter, initialize_machine
from .netlist import PWL, DC, Netlist, Resistor, Switch, VoltageSource, validate_netlist
from .timeseries import TimeSeries, read_csv, write_csv

log = logging.getLogger(__name__)

# equilibrium check after the initial solve: largest state derivative allowed.
# Closed breakers add 1/G_on of series resistance the power flow does not see,
# which leaves rates of order 1e-5/s; a bad initialization gives rates of order 1.
EQUILIBRIUM_RATE_TOL = 1e-4
# leak to ground for nodes that would otherwise lack a DC path
NODE_LEAK_OHMS = 1e9


class ScenarioError(RuntimeError):
    def __init__(self, stage: str, message: str, time: float | None = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.time = time


# -- fault placement -------------------------------------------------------------

def place_midline_fault(case: Case, branch_id: str, location: float, fault_x: float,
                        fault_id: str = "F1", fault_r: float = 0.0) -> Case:
    """Split a line at ``location`` and attach an (open) fault there.

    Each section takes its share of R, X and B.  The new bus gets the next
    free id and the returned case lists the fault with that bus.
    """
    if not 0.0 < location < 1.0:
        raise ValueError("fault location must be strictly between 0 and 1 (use a bus fault instead)")
    try:
        br = case.branch(branch_id)
    except KeyError:
        raise ValueError(f"unknown branch {branch_id!r}") from None
    if not isinstance(br, Branch):
        raise ValueError(f"{branch_id!r} is a transformer; faults are placed on lines")
    mid = max(case.bus_ids) + 1
    a, b = location, 1.0 - location
    first = Branch(f"{br.id}.a", br.from_bus, mid, br.r * a, br.x * a, br.b * a)
    second = Branch(f"{br.id}.b", mid, br.to_bus, br.r * b, br.x * b, br.b * b)
    branches = []
    for x in case.branches:
        branches.extend([first, second] if x.id == br.id else [x])
    base_kv = case.bus(br.from_bus).base_kv
    faults = [f for f in case.faults if f.id != fault_id]
    faults.append(Fault(fault_id, br.id, location, fault_x, fault_r, mid))
    out = case.copy(buses=list(case.buses) + [Bus(mid, "PQ", base_kv)], branches=branches, faults=faults)
    out.validate()
    return out


def place_faults(case: Case) -> Case:
    """Split every line that carries a not-yet-placed fault."""
    for f in list(case.faults):
        if f.bus is None:
            case = place_midline_fault(case, f.branch, f.location, f.x, f.id, f.r)
    return case


# -- compiled case --------------------------------------------------------------------

@dataclass
class Initialization:
    power_flow: PowerFlowResult
    machines: dict[str, MachineInit]
    exciters: dict[str, ExciterInit]
    pmref: dict[str, float]


@dataclass
class CompiledCase:
    case: Case
    netlist: Netlist
    node_map: dict[int, tuple[int, int]]
    probes: dict[str, ex.Expr]
    init: Initialization
    machine_blocks: dict[str, object] = field(default_factory=dict)
    exciter_blocks: dict[str, object] = field(default_factory=dict)
    governor_blocks: dict[str, object] = field(default_factory=dict)


def initialize_case(case: Case, pf: PowerFlowResult | None = None) -> Initialization:
    pf = pf or solve_power_flow(case)
    machines, exciters, pmref = {}, {}, {}
    for m in case.machines:
        v = pf.voltage(m.bus)
        s = pf.generation_at(m.bus)
        mi = initialize_machine(m.params, v, s, case.omega_base)
        machines[m.id] = mi
        if m.exciter is not None:
            exciters[m.id] = initialize_exciter(m.exciter, mi.efd, mi.vt)
        if m.governor is not None:
            g = m.governor
            if not g.pmin <= mi.pm <= g.pmax:
                raise ScenarioError("initialize", f"{m.id}: mechanical power {mi.pm:.4f} outside governor limits")
        pmref[m.id] = mi.pm
    return Initialization(pf, machines, exciters, pmref)


def step_waveform(base: float, steps: list[tuple[float, float]]):
    """Piecewise-constant level starting at ``base`` with ``(time, increment)`` steps."""
    if not steps:
        return DC(base)
    points, level = [(0.0, base)], base
    for t, delta in sorted(steps):
        points.append((t, level))
        level += delta
        points.append((t, level))
    return PWL(tuple(points))


def event_intervals(case: Case, target: str, close_kind: str, open_kind: str,
                    initially_closed: bool) -> tuple[tuple[float, float], ...]:
    """Closed intervals ``[t_on, t_off)`` of a switched element from its events."""
    evs = sorted((e for e in case.events if e.target == target and e.kind in (close_kind, open_kind)),
                 key=lambda e: e.time)
    intervals, start = [], (0.0 if initially_closed else None)
    for e in evs:
        if e.kind == close_kind and start is None:
            start = e.time
        elif e.kind == open_kind and start is not None:
            intervals.append((start, e.time))
            start = None
    if start is not None:
        intervals.append((start, math.inf))
    return tuple(intervals)


def compile_case(case: Case, pf: PowerFlowResult | None = None) -> CompiledCase:
    """One netlist for the whole case; faults are split in first if needed."""
    case = place_faults(case)
    init = initialize_case(case, pf)
    pf = init.power_flow
    nl = Netlist(case.name)
    nodes = bus_nodes(nl, case)
    switched = {e.target for e in case.events if e.kind in ("open_branch", "close_branch")}
    for br in list(case.branches) + list(case.transformers):
        ends = nodes
        if br.id in switched:
            # breakers at both ends keep the matrix size fixed when the branch opens
            closed = event_intervals(case, br.id, "close_branch", "open_branch", True)
            p = (nl.node(f"{br.id}.f.re"), nl.node(f"{br.id}.f.im"))
            q = (nl.node(f"{br.id}.t.re"), nl.node(f"{br.id}.t.im"))
            for ch, tag in ((0, "r"), (1, "i")):
                nl.add(Switch(f"{br.id}.bf{tag}", nodes[br.from_bus][ch], p[ch], closed))
                nl.add(Switch(f"{br.id}.bt{tag}", q[ch], nodes[br.to_bus][ch], closed))
            ends = dict(nodes)
            ends[br.from_bus], ends[br.to_bus] = p, q
        if isinstance(br, Branch):
            compile_branch(nl, br, ends)
        else:
            compile_transformer(nl, br, ends)
    for b in case.buses:
        if b.shunt_g or b.shunt_b:
            compile_bus_shunt(nl, b.id, complex(b.shunt_g, b.shunt_b), nodes)
    for ld in case.loads:
        compile_load(nl, ld, nodes, abs(pf.voltage(ld.bus)))
    for f in case.faults:
        closed = event_intervals(case, f.id, "close_fault_switch", "open_fault_switch", False)
        mid = nodes[f.bus]
        a = (nl.node(f"{f.id}.sw.re"), nl.node(f"{f.id}.sw.im"))
        nl.add(Switch(f"{f.id}.swr", mid[0], a[0], closed))
        nl.add(Switch(f"{f.id}.swi", mid[1], a[1], closed))
        add_series_impedance(nl, f"{f.id}.z", a, (0, 0), complex(f.r, f.x))

    slack = case.slack()
    if case.machine_at(slack.id) is None:
        v = pf.voltage(slack.id)
        nl.add(VoltageSource(f"INF{slack.id}.r", nodes[slack.id][0], 0, DC(v.real)))
        nl.add(VoltageSource(f"INF{slack.id}.i", nodes[slack.id][1], 0, DC(v.imag)))

    compiled = CompiledCase(case, nl, nodes, {}, init)
    for m in case.machines:
        mi = init.machines[m.id]
        mb = build_machine_subcircuit(nl, m.id, m.params, mi, nodes[m.bus], case.omega_base)
        compiled.machine_blocks[m.id] = mb
        steps = [(e.time, e.value) for e in case.events if e.kind == "step_mechanical_power" and e.target == m.id]
        if m.exciter is not None:
            compiled.exciter_blocks[m.id] = build_exciter_subcircuit(
                nl, f"{m.id}.exc", m.exciter, init.exciters[m.id], mb.nodes["vt"], mb.nodes["efd"])
        else:
            nl.add(VoltageSource(f"{m.id}.efd.src", mb.nodes["efd"], 0, DC(mi.efd)))
        if m.governor is not None:
            ref = nl.node(f"{m.id}.pmref")
            nl.add(VoltageSource(f"{m.id}.pmref.src", ref, 0, step_waveform(init.pmref[m.id], steps)))
            compiled.governor_blocks[m.id] = build_governor_subcircuit(
                nl, f"{m.id}.gov", m.governor, init.pmref[m.id], mb.states["omega"], mb.nodes["pm"], ref)
        else:
            # units without a governor hold P_m at the initial air-gap power
            nl.add(VoltageSource(f"{m.id}.pm.src", mb.nodes["pm"], 0, step_waveform(init.pmref[m.id], steps)))

    for d in validate_netlist(nl):
        if d.code == "no-dc-path":
            n = int(d.subject)
            nl.add(Resistor(f"LEAK{n}", n, 0, NODE_LEAK_OHMS))
    compiled.probes = default_probes(compiled)
    if case.probes:
        compiled.probes = select_probes(compiled, case.probes)
    return compiled


# -- probes -------------------------------------------------------------------------------

def reference_machine(case: Case):
    """Angles are reported relative to the machine at the lowest-numbered machine bus."""
    return min(case.machines, key=lambda m: m.bus) if case.machines else None


def probe_names(case: Case) -> list[str]:
    names = []
    for m in sorted(case.machines, key=lambda m: m.bus):
        names += [f"vmag_{m.bus}", f"omega_{m.bus}", f"delta_{m.bus}", f"efd_{m.bus}", f"pm_{m.bus}", f"pe_{m.bus}"]
        if m.exciter is not None:
            names.append(f"vr_{m.bus}")
    return names


def probe_expression(compiled: CompiledCase, name: str) -> ex.Expr:
    case = compiled.case
    try:
        kind, bus_s = name.rsplit("_", 1)
        bus = int(bus_s)
    except ValueError:
        raise ValueError(f"malformed probe name {name!r}") from None
    if kind == "vmag":
        if bus not in compiled.node_map:
            raise ValueError(f"probe {name!r}: unknown bus {bus}")
        r, i = compiled.node_map[bus]
        return ex.sqrt(ex.V(r) * ex.V(r) + ex.V(i) * ex.V(i))
    m = case.machine_at(bus)
    if m is None:
        raise ValueError(f"probe {name!r}: no machine at bus {bus}")
    mb = compiled.machine_blocks[m.id]
    if kind == "omega":
        return ex.V(mb.states["omega"])
    if kind == "delta":
        ref = compiled.machine_blocks[reference_machine(case).id]
        return ex.V(mb.states["delta"]) - ex.V(ref.states["delta"])
    if kind in ("efd", "pm", "pe", "te", "vt"):
        return ex.V(mb.nodes[kind])
    if kind == "vr":
        if m.id not in compiled.exciter_blocks:
            raise ValueError(f"probe {name!r}: machine has no exciter")
        return ex.V(compiled.exciter_blocks[m.id].nodes["vr"])
    raise ValueError(f"unknown probe kind in {name!r}")


def default_probes(compiled: CompiledCase) -> dict[str, ex.Expr]:
    return {n: probe_expression(compiled, n) for n in probe_names(compiled.case)}


def select_probes(compiled: CompiledCase, names) -> dict[str, ex.Expr]:
    return {n: probe_expression(compiled, n) for n in names}


# -- running -------------------------------------------------------------------------------

def _config_for(case: Case, config: SolverConfig | None, t_stop: float | None) -> SolverConfig:
    config = config or SolverConfig(t_stop=case.t_stop)
    if t_stop is not None:
        config = replace(config, t_stop=t_stop)
    return config


def equilibrium_rates(sim: Simulator, state) -> np.ndarray:
    """``|dV/dt|`` of every capacitor at a solved state."""
    caps = np.array([c.capacitance for c in sim.caps])
    return np.abs(state.cap_current) / caps if caps.size else np.zeros(0)


def run_scenario(case: Case, config: SolverConfig | None = None, t_stop: float | None = None,
                 probes=None, compiled: CompiledCase | None = None) -> TimeSeries:
    """Power flow, initialization, equilibrium check and transient; see module docstring."""
    t0 = _time.perf_counter()
    config = _config_for(case, config, t_stop)
    try:
        compiled = compiled or compile_case(case)
        chosen = compiled.probes if probes is None else select_probes(compiled, probes)
    except ScenarioError:
        raise
    except Exception as err:  # noqa: BLE001 - tag and re-raise
        raise ScenarioError("compile", str(err)) from err
    try:
        sim = Simulator(compiled.netlist, config)
        state = sim.initial_conditions(0.0)
    except SimulationError as err:
        raise ScenarioError("initial-solve", str(err), 0.0) from err
    rates = equilibrium_rates(sim, state)
    worst = float(rates.max()) if rates.size else 0.0
    if worst > EQUILIBRIUM_RATE_TOL:
        label = sim.caps[int(rates.argmax())].label
        raise ScenarioError("equilibrium-check", f"state {label} moves at {worst:.3e}/s at t=0")
    try:
        series = sim.run(chosen, initial=state)
    except SimulationError as err:
        raise ScenarioError("transient", str(err), getattr(err, "time", None)) from err
    elapsed = _time.perf_counter() - t0
    series.meta.update(runtime_s=elapsed, newton_iterations=sim.newton_iterations, guard_hits=sim.guard_hits,
                       unknowns=sim.n, nonlinear_sources=sim.n_nonlinear, initial_max_rate=worst)
    log.info("scenario %s: %d steps in %.2f s (%d Newton iterations)", case.name, len(series.time) - 1,
             elapsed, sim.newton_iterations)
    return series


__all__ = [
    "ScenarioError", "CompiledCase", "Initialization", "place_midline_fault", "place_faults", "compile_case",
    "initialize_case", "run_scenario", "probe_names", "write_csv", "read_csv", "TimeSeries",
]
