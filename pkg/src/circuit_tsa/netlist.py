"""Circuit data model: nodes, primitive devices, validation, SPICE export."""

from __future__ import annotations

import bisect
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import ClassVar

from . import expr as ex


class NetlistError(Exception):
    pass


class DuplicateLabelError(NetlistError):
    pass


class InvalidValueError(NetlistError):
    pass


# -- source waveforms ---------------------------------------------------------

@dataclass(frozen=True)
class DC:
    value: float

    def value_at(self, t: float, side: str = "right") -> float:
        return self.value

    def breakpoints(self) -> tuple[float, ...]:
        return ()

    def spice(self) -> str:
        return f"DC {_num(self.value)}"


@dataclass(frozen=True)
class PWL:
    """Piecewise-linear waveform; a repeated time encodes a jump.

    ``side`` selects the left or right limit at a jump.
    """

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        times = [p[0] for p in self.points]
        if not times or any(b < a for a, b in zip(times, times[1:])):
            raise InvalidValueError("PWL times must be non-empty and non-decreasing")

    def value_at(self, t: float, side: str = "right") -> float:
        pts = self.points
        times = [p[0] for p in pts]
        if side == "right":
            k = bisect.bisect_right(times, t)
            if k == 0:
                return pts[0][1]
            if k == len(pts):
                return pts[-1][1]
            (t0, v0), (t1, v1) = pts[k - 1], pts[k]
        else:
            k = bisect.bisect_left(times, t)
            if k == 0:
                return pts[0][1]
            if k == len(pts):
                return pts[-1][1]
            (t0, v0), (t1, v1) = pts[k - 1], pts[k]
        if t1 == t0:
            return v1
        return v0 + (v1 - v0) * (t - t0) / (t1 - t0)

    def breakpoints(self) -> tuple[float, ...]:
        return tuple(sorted({p[0] for p in self.points}))

    def spice(self) -> str:
        return "PWL(" + " ".join(f"{_num(t)} {_num(v)}" for t, v in self.points) + ")"


def step(before: float, after: float, at: float) -> PWL:
    return PWL(((0.0, before), (at, before), (at, after)))


@dataclass(frozen=True)
class Sine:
    offset: float
    amplitude: float
    frequency: float
    phase_deg: float = 0.0

    def value_at(self, t: float, side: str = "right") -> float:
        return self.offset + self.amplitude * math.sin(
            2 * math.pi * self.frequency * t + math.radians(self.phase_deg)
        )

    def breakpoints(self) -> tuple[float, ...]:
        return ()

    def spice(self) -> str:
        return (
            f"SIN({_num(self.offset)} {_num(self.amplitude)} {_num(self.frequency)} "
            f"0 0 {_num(self.phase_deg)})"
        )


Waveform = DC | PWL | Sine


# -- devices ------------------------------------------------------------------

@dataclass(frozen=True)
class Device:
    label: str
    a: int
    b: int

    prefix: ClassVar[str] = "X"
    conductive: ClassVar[bool] = False
    voltage_defined: ClassVar[bool] = False

    @property
    def nodes(self) -> tuple[int, int]:
        return (self.a, self.b)

    def check(self) -> None:
        pass

    def expressions(self) -> tuple[ex.Expr, ...]:
        return ()


@dataclass(frozen=True)
class Resistor(Device):
    resistance: float = 1.0
    prefix: ClassVar[str] = "R"
    conductive: ClassVar[bool] = True

    def check(self):
        if not self.resistance > 0:
            raise InvalidValueError(f"{self.label}: resistance must be positive")


@dataclass(frozen=True)
class Capacitor(Device):
    capacitance: float = 1.0
    initial_voltage: float = 0.0
    prefix: ClassVar[str] = "C"

    def check(self):
        if not self.capacitance > 0:
            raise InvalidValueError(f"{self.label}: capacitance must be positive")


@dataclass(frozen=True)
class Inductor(Device):
    inductance: float = 1.0
    initial_current: float = 0.0
    prefix: ClassVar[str] = "L"
    conductive: ClassVar[bool] = True
    voltage_defined: ClassVar[bool] = True

    def check(self):
        if not self.inductance > 0:
            raise InvalidValueError(f"{self.label}: inductance must be positive")


@dataclass(frozen=True)
class VoltageSource(Device):
    waveform: Waveform = DC(0.0)
    prefix: ClassVar[str] = "V"
    conductive: ClassVar[bool] = True
    voltage_defined: ClassVar[bool] = True


@dataclass(frozen=True)
class CurrentSource(Device):
    """Current ``waveform`` flows from ``a`` through the source to ``b``."""

    waveform: Waveform = DC(0.0)
    prefix: ClassVar[str] = "I"


@dataclass(frozen=True)
class DependentVoltage(Device):
    """B-source enforcing ``V(a) - V(b) = expr``."""

    expr: ex.Expr = ex.Const(0.0)
    prefix: ClassVar[str] = "B"
    conductive: ClassVar[bool] = True
    voltage_defined: ClassVar[bool] = True

    def expressions(self):
        return (self.expr,)


@dataclass(frozen=True)
class DependentCurrent(Device):
    """B-source whose current ``expr`` flows from ``a`` through the source to ``b``."""

    expr: ex.Expr = ex.Const(0.0)
    prefix: ClassVar[str] = "B"

    def expressions(self):
        return (self.expr,)


@dataclass(frozen=True)
class Switch(Device):
    """Time-controlled switch, closed on each half-open interval ``[t_on, t_off)``."""

    closed_intervals: tuple[tuple[float, float], ...] = ()
    prefix: ClassVar[str] = "S"
    conductive: ClassVar[bool] = True

    def check(self):
        last = -math.inf
        for t_on, t_off in self.closed_intervals:
            if not t_on < t_off or t_on < last:
                raise InvalidValueError(f"{self.label}: switch intervals must be sorted and disjoint")
            last = t_off

    def is_closed(self, t: float, side: str = "right") -> bool:
        for t_on, t_off in self.closed_intervals:
            if side == "right" and t_on <= t < t_off:
                return True
            if side == "left" and t_on < t <= t_off:
                return True
        return False

    def breakpoints(self) -> tuple[float, ...]:
        return tuple(t for pair in self.closed_intervals for t in pair if math.isfinite(t))


# -- netlist ------------------------------------------------------------------

class Netlist:
    """Nodes plus an ordered device list.

    Node 0 is ground.  Nodes are auto-created when a device references an
    unknown index; :meth:`node` allocates a fresh one.  After :meth:`freeze`
    the netlist is read-only and may be shared between simulations.
    """

    def __init__(self, title: str = "circuit"):
        self.title = title
        self.node_names: dict[int, str] = {0: "0"}
        self.devices: list[Device] = []
        self.ports: dict[str, int] = {}
        self._index: dict[str, int] = {}
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def node_count(self) -> int:
        return len(self.node_names)

    @property
    def nodes(self) -> list[int]:
        return sorted(self.node_names)

    def freeze(self) -> "Netlist":
        self._frozen = True
        return self

    def _writable(self):
        if self._frozen:
            raise NetlistError("netlist is frozen")

    def node(self, name: str | None = None) -> int:
        self._writable()
        idx = max(self.node_names) + 1
        self.node_names[idx] = name or str(idx)
        return idx

    def port(self, name: str, node: int | None = None) -> int:
        """Register (or allocate) a named port node."""
        if node is None:
            node = self.node(name)
        self.ports[name] = node
        return node

    def add_device(self, device: Device) -> int:
        self._writable()
        if device.label in self._index:
            raise DuplicateLabelError(f"duplicate device label {device.label!r}")
        device.check()
        for n in device.nodes:
            if n < 0:
                raise NetlistError(f"{device.label}: negative node index {n}")
            self.node_names.setdefault(n, str(n))
        self._index[device.label] = len(self.devices)
        self.devices.append(device)
        return len(self.devices) - 1

    def add(self, device: Device) -> Device:
        self.add_device(device)
        return device

    def device(self, label: str) -> Device:
        return self.devices[self._index[label]]

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def __len__(self) -> int:
        return len(self.devices)


# -- validation ---------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str
    subject: str = ""

    def __str__(self):
        return f"{self.severity}: [{self.code}] {self.message}"


def _components(edges: list[tuple[int, int]], nodes) -> dict[int, int]:
    parent = {n: n for n in nodes}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    return {n: find(n) for n in nodes}


def current_capable(device: Device) -> bool:
    """Devices whose current may be referenced by ``I(label)``."""
    return device.voltage_defined or isinstance(device, Resistor)


def validate_netlist(netlist: Netlist) -> list[Diagnostic]:
    """Return diagnostics; an empty list means the netlist is simulable."""
    diags: list[Diagnostic] = []
    if not netlist.devices:
        return [Diagnostic("error", "empty", "netlist has no devices")]

    nodes = netlist.nodes
    known = set(nodes)
    for d in netlist.devices:
        for e in d.expressions():
            refs, labels = ex.references(e)
            for n in sorted(refs - known):
                diags.append(Diagnostic("error", "unresolved", f"{d.label} references V({n}), no such node", d.label))
            for lab in sorted(labels):
                if lab not in netlist:
                    diags.append(Diagnostic("error", "unresolved", f"{d.label} references I({lab}), no such device", d.label))
                elif not current_capable(netlist.device(lab)):
                    diags.append(Diagnostic(
                        "error", "unresolved",
                        f"{d.label} references I({lab}), whose current is not an observable", d.label,
                    ))
        if d.a == d.b:
            diags.append(Diagnostic("warning", "shorted", f"{d.label} has both terminals on node {d.a}", d.label))

    touched = {n for d in netlist.devices for n in d.nodes}
    any_edges = _components([d.nodes for d in netlist.devices], nodes)
    dc_edges = _components([d.nodes for d in netlist.devices if d.conductive], nodes)
    ground_any, ground_dc = any_edges[0], dc_edges[0]
    for n in nodes:
        if n == 0:
            continue
        name = netlist.node_names[n]
        if n not in touched or any_edges[n] != ground_any:
            diags.append(Diagnostic("error", "floating", f"node {n} ({name}) is not connected to ground", str(n)))
        elif dc_edges[n] != ground_dc:
            diags.append(Diagnostic("error", "no-dc-path", f"node {n} ({name}) has no DC path to ground", str(n)))

    # loops of voltage-defined devices make the MNA matrix singular
    vloop = defaultdict(list)
    parent = {n: n for n in nodes}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for d in netlist.devices:
        if isinstance(d, (VoltageSource, Inductor)) or (isinstance(d, DependentVoltage) and not ex.references(d.expr)[1]):
            ra, rb = find(d.a), find(d.b)
            if ra == rb:
                vloop[d.label].append(d)
            else:
                parent[ra] = rb
    for label in vloop:
        diags.append(Diagnostic("warning", "voltage-loop", f"{label} closes a loop of voltage-defined devices", label))
    return diags


def errors(diags: list[Diagnostic]) -> list[Diagnostic]:
    return [d for d in diags if d.severity == "error"]


# -- SPICE-dialect export -----------------------------------------------------

def _num(v: float) -> str:
    return repr(float(v))


def card_name(device: Device) -> str:
    label = device.label
    if label[:1].upper() == device.prefix:
        return label
    return device.prefix + label


def spice_card(device: Device) -> str:
    name = card_name(device)
    a, b = device.a, device.b
    if isinstance(device, Resistor):
        return f"{name} {a} {b} {_num(device.resistance)}"
    if isinstance(device, Capacitor):
        return f"{name} {a} {b} {_num(device.capacitance)} IC={_num(device.initial_voltage)}"
    if isinstance(device, Inductor):
        return f"{name} {a} {b} {_num(device.inductance)} IC={_num(device.initial_current)}"
    if isinstance(device, (VoltageSource, CurrentSource)):
        return f"{name} {a} {b} {device.waveform.spice()}"
    if isinstance(device, DependentVoltage):
        return f"{name} {a} {b} V={{{ex.to_text(device.expr)}}}"
    if isinstance(device, DependentCurrent):
        return f"{name} {a} {b} I={{{ex.to_text(device.expr)}}}"
    if isinstance(device, Switch):
        spans = " ".join(f"{_num(t0)},{_num(t1)}" for t0, t1 in device.closed_intervals)
        return f"{name} {a} {b} SWITCH CLOSED=[{spans}]"
    raise NetlistError(f"cannot export {type(device).__name__}")


def export_spice_netlist(netlist: Netlist) -> str:
    """Serialize to a SPICE-style deck.  Deterministic for equal netlists."""
    bad = errors(validate_netlist(netlist))
    if bad:
        raise NetlistError("netlist fails validation: " + "; ".join(str(d) for d in bad))
    lines = [f"* {netlist.title}"]
    named = {n: s for n, s in sorted(netlist.node_names.items()) if s != str(n)}
    for n, s in named.items():
        lines.append(f"* node {n} = {s}")
    lines.extend(spice_card(d) for d in netlist.devices)
    lines.append(".end")
    return "\n".join(lines) + "\n"
