"""Machine, exciter and governor subcircuits.

A machine occupies one bus (a real and an imaginary node).  Its six states
are integrator capacitors; the stator algebra, frame rotations and torque
are B voltage sources; two B current sources inject the Norton current into
the bus nodes.  The Norton admittance ``1/(Rs + jX'')`` is folded into the
injection expression, so the network part of the circuit does not depend
on the machines.

Field voltage and mechanical power enter through the nodes ``efd`` and
``pm``.  Each is driven by a B voltage source: a constant when the unit has
no exciter (governor), or a copy of the controller output otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import expr as ex
from .blocks import (
    INTEGRATOR_LEAK_OHMS,
    Block,
    make_expression,
    make_high_pass,
    make_integrator,
    make_lead_lag,
    make_limiter,
    make_low_pass,
    make_operator,
    saturation_output,
)
from .models import (
    ANTI_WINDUP_GAIN,
    STATE_NAMES,
    ExciterInit,
    ExciterParams,
    GovernorParams,
    MachineInit,
    MachineParams,
    machine_rates,
    norton_current,
    rotate_to_machine,
    rotate_to_network,
    subtransient,
)
from .netlist import Capacitor, DependentCurrent, DependentVoltage, Netlist, Resistor


@dataclass
class MachineBlock:
    name: str
    bus: tuple[int, int]
    states: dict[str, int]
    nodes: dict[str, int]
    devices: list[str] = field(default_factory=list)

    def v(self, key: str) -> ex.Expr:
        return ex.V(self.states[key] if key in self.states else self.nodes[key])


def build_machine_subcircuit(netlist: Netlist, name: str, params: MachineParams, init: MachineInit,
                             bus: tuple[int, int], omega_base: float) -> MachineBlock:
    """Six integrators, stator algebra and the Norton injection at ``bus``."""
    params.check()
    nl = netlist
    vr, vi = ex.V(bus[0]), ex.V(bus[1])
    # state nodes are allocated first so expressions can reference them
    st = {s: nl.node(f"{name}.{s}") for s in STATE_NAMES}
    efd = nl.node(f"{name}.efd")
    pm = nl.node(f"{name}.pm")
    sv = tuple(ex.V(st[s]) for s in STATE_NAMES)
    nodes = {"efd": efd, "pm": pm}

    def signal(key, e):
        nodes[key] = make_expression(nl, f"{name}.{key}", e).output
        return ex.V(nodes[key])

    ed2_e, eq2_e = subtransient(params, *sv[2:])
    ed2 = signal("ed2", ed2_e)
    eq2 = signal("eq2", eq2_e)
    er_e, ei_e = rotate_to_network(ed2, eq2, sv[0])
    er = signal("er", er_e)
    ei = signal("ei", ei_e)
    ir_e, ii_e = norton_current(params, er, ei, vr, vi)
    ir = signal("ir", ir_e)
    ii = signal("ii", ii_e)
    id_e, iq_e = rotate_to_machine(ir, ii, sv[0])
    id_ = signal("id", id_e)
    iq = signal("iq", iq_e)
    te = signal("te", ed2 * id_ + eq2 * iq)
    signal("vt", ex.sqrt(vr * vr + vi * vi))
    signal("pe", vr * ir + vi * ii)

    caps, rates = machine_rates(params, sv, id_, iq, ex.V(efd), ex.V(pm), omega_base, te=te, sub=(ed2, eq2))
    devices = []
    for s, c, f, x0 in zip(STATE_NAMES, caps, rates, init.state):
        # integrator pattern on pre-allocated state nodes
        nl.add(DependentCurrent(f"{name}.{s}.B", 0, st[s], f))
        nl.add(Capacitor(f"{name}.{s}.C", st[s], 0, c, x0))
        nl.add(Resistor(f"{name}.{s}.Rleak", st[s], 0, INTEGRATOR_LEAK_OHMS))
        devices += [f"{name}.{s}.B", f"{name}.{s}.C", f"{name}.{s}.Rleak"]
    nl.add(DependentCurrent(f"{name}.injr", 0, bus[0], ir))
    nl.add(DependentCurrent(f"{name}.inji", 0, bus[1], ii))
    devices += [f"{name}.injr", f"{name}.inji"]
    return MachineBlock(name, bus, st, nodes, devices)


def drive_constant(netlist: Netlist, label: str, node: int, value: float) -> None:
    netlist.add(DependentVoltage(label, node, 0, ex.Const(value)))


def drive_from(netlist: Netlist, label: str, node: int, source: int) -> None:
    netlist.add(DependentVoltage(label, node, 0, ex.V(source)))


@dataclass
class ExciterBlock:
    name: str
    vref: float
    nodes: dict[str, int]


def build_exciter_subcircuit(netlist: Netlist, name: str, p: ExciterParams, init: ExciterInit,
                             vt: int, efd_node: int) -> ExciterBlock:
    """IEEE type 1 exciter; drives ``efd_node`` and senses ``vt``."""
    p.check()
    nl = netlist
    nodes = {}
    if p.tr > 0:
        vs = make_low_pass(nl, f"{name}.sense", vt, p.tr, 1.0, init.vs).output
    else:
        vs = vt
    nodes["vs"] = vs
    # rate feedback from the machine's field-voltage node
    vf = make_high_pass(nl, f"{name}.rate", efd_node, p.tf, p.kf / p.tf, init.efd)
    nodes["vf"] = vf.output
    err = make_operator(nl, f"{name}.err", "adder", [ex.Const(init.vref), vs, vf], [1.0, -1.0, -1.0])
    nodes["err"] = err.output
    if p.limiter == "non_windup":
        xa = make_low_pass(nl, f"{name}.reg", err, p.ta, p.ka, init.vr)
    else:
        def regulator(out):
            rate = p.ka * err.out - out
            return ex.fmin(ex.fmax(rate, ANTI_WINDUP_GAIN * p.ta * (p.vrmin - out)),
                           ANTI_WINDUP_GAIN * p.ta * (p.vrmax - out))

        xa = make_integrator(nl, f"{name}.reg", p.ta, regulator, init.vr)
    nodes["xa"] = xa.output
    vr = make_limiter(nl, f"{name}.lim", xa, p.vrmin, p.vrmax)
    nodes["vr"] = vr.output
    efd = make_integrator(
        nl, f"{name}.field", p.te,
        lambda out: vr.out - p.ke * out - saturation_output(out, p.sat_a, p.sat_b),
        init.efd,
    )
    nodes["efd"] = efd.output
    drive_from(nl, f"{name}.link", efd_node, efd.output)
    return ExciterBlock(name, init.vref, nodes)


@dataclass
class GovernorBlock:
    name: str
    pmref: float
    nodes: dict[str, int]


def build_governor_subcircuit(netlist: Netlist, name: str, p: GovernorParams, pmref: float,
                              omega: int, pm_node: int, reference: int | None = None) -> GovernorBlock:
    """BPA GG governor; senses ``omega`` and drives ``pm_node``.

    ``pmref`` is the initial set point; when ``reference`` names a node, the
    set point is read from it (so it can be stepped) instead of held constant.
    """
    p.check()
    nl = netlist
    dw = 1.0 - ex.V(omega)
    u = make_operator(nl, f"{name}.gain", "gain", [dw], p.k)
    ll1 = make_lead_lag(nl, f"{name}.ll1", u, p.t2, p.t1, 0.0)
    ref = ex.Const(pmref) if reference is None else ex.V(reference)
    inputs, coeffs = [ll1, ref], [1.0, 1.0]
    if p.f_channel == "speed":
        inputs.append(dw)
        coeffs.append(p.f)
    order = make_operator(nl, f"{name}.sum", "adder", inputs, coeffs)
    lim = make_limiter(nl, f"{name}.lim", order, p.pmin, p.pmax)
    lp3 = make_low_pass(nl, f"{name}.lp3", lim, p.t3, 1.0, pmref)
    lp4 = make_low_pass(nl, f"{name}.lp4", lp3, p.t4, 1.0, pmref)
    if p.f_channel == "reheat":
        out = make_lead_lag(nl, f"{name}.ll2", lp4, p.f * p.t5, p.t5, pmref)
    else:
        out = lp4
    drive_from(nl, f"{name}.link", pm_node, out.output)
    nodes = {"u": u.output, "ll1": ll1.output, "order": order.output, "lim": lim.output,
             "lp3": lp3.output, "lp4": lp4.output, "pm": out.output}
    return GovernorBlock(name, pmref, nodes)


__all__ = [
    "MachineBlock", "ExciterBlock", "GovernorBlock", "Block", "build_machine_subcircuit",
    "build_exciter_subcircuit", "build_governor_subcircuit", "drive_constant", "drive_from",
]
