"""Bus-branch case description, its JSON schema, and an IEEE CDF reader.

JSON layout (``"format": 1``)::

    {
      "format": 1,
      "name": "...",
      "system_base_mva": 100.0,
      "frequency_hz": 60.0,
      "buses": [{"id": 1, "base_kv": 69.0, "kind": "slack", "v_setpoint": 1.06,
                 "p_gen_mw": 232.4, "q_gen_mvar": 0.0, "shunt_g": 0.0, "shunt_b": 0.0,
                 "v_seed": [1.06, 0.0]}],
      "branches": [{"id": "L1-2", "from": 1, "to": 2, "r": 0.01938, "x": 0.05917, "b": 0.0528}],
      "transformers": [{"id": "T4-7", "from": 4, "to": 7, "r": 0.0, "x": 0.20912, "ratio": 0.978}],
      "loads": [{"id": "LD2", "bus": 2, "kind": "constant_z", "p_mw": 21.7, "q_mvar": 12.7}],
      "machines": [{"id": "G1", "bus": 1, "mbase_mva": 615.0, "params": {...},
                    "exciter": {...} | null, "governor": {...} | null}],
      "faults": [{"id": "F1", "branch": "L2-4", "location": 0.5, "x": 0.2}],
      "events": [{"kind": "close_fault_switch", "time": 1.0, "target": "F1"}],
      "probes": ["vmag_1", "omega_2"],
      "t_stop": 20.0
    }

Powers are in MW/MVAr, impedances and shunts in per unit on the system
base, machine data on the machine base.  Parsing converts everything to
per unit on the system base; :func:`case_to_json` converts back.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .models import ExciterParams, GovernorParams, MachineParams, ModelError, params_to_dict

FORMAT_VERSION = 1
BUS_KINDS = ("slack", "PV", "PQ")
LOAD_KINDS = ("constant_z", "constant_pq")
EVENT_KINDS = ("close_fault_switch", "open_fault_switch", "open_branch", "close_branch", "step_mechanical_power")


class CaseError(ValueError):
    """Schema or cross-reference problem; ``path`` is a JSON pointer."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path or '/'}: {message}")
        self.path = path


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str = "PQ"
    base_kv: float = 1.0
    v_setpoint: float = 1.0
    p_gen: float = 0.0
    q_gen: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    v_seed: complex | None = None


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0


@dataclass(frozen=True)
class Transformer:
    id: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    ratio: float = 1.0


@dataclass(frozen=True)
class Load:
    id: str
    bus: int
    p: float
    q: float
    kind: str = "constant_z"


@dataclass(frozen=True)
class Machine:
    id: str
    bus: int
    params: MachineParams
    mbase: float
    exciter: ExciterParams | None = None
    governor: GovernorParams | None = None


@dataclass(frozen=True)
class Fault:
    id: str
    branch: str
    location: float
    x: float
    r: float = 0.0
    # set once the branch has been split: the id of the midpoint bus
    bus: int | None = None


@dataclass(frozen=True)
class Event:
    kind: str
    time: float
    target: str
    value: float = 0.0


@dataclass
class Case:
    name: str = "case"
    system_base_mva: float = 100.0
    frequency_hz: float = 60.0
    buses: list[Bus] = field(default_factory=list)
    branches: list[Branch] = field(default_factory=list)
    transformers: list[Transformer] = field(default_factory=list)
    loads: list[Load] = field(default_factory=list)
    machines: list[Machine] = field(default_factory=list)
    faults: list[Fault] = field(default_factory=list)
    events: list[Event] = field(default_factory=list)
    probes: list[str] = field(default_factory=list)
    t_stop: float = 20.0
    notes: str = ""

    @property
    def omega_base(self) -> float:
        return 2.0 * math.pi * self.frequency_hz

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def slack(self) -> Bus:
        return next(b for b in self.buses if b.kind == "slack")

    def machine_at(self, bus_id: int) -> Machine | None:
        return next((m for m in self.machines if m.bus == bus_id), None)

    def branch(self, branch_id: str) -> Branch | Transformer:
        for br in list(self.branches) + list(self.transformers):
            if br.id == branch_id:
                return br
        raise KeyError(branch_id)

    def fault(self, fault_id: str) -> Fault:
        for f in self.faults:
            if f.id == fault_id:
                return f
        raise KeyError(fault_id)

    def bus_load(self, bus_id: int) -> complex:
        return sum((complex(ld.p, ld.q) for ld in self.loads if ld.bus == bus_id), 0j)

    def copy(self, **changes) -> "Case":
        return replace(self, **{f.name: list(getattr(self, f.name)) if isinstance(getattr(self, f.name), list)
                                else getattr(self, f.name) for f in fields(self)} | changes)

    def validate(self) -> "Case":
        validate_case(self)
        return self


# -- validation -----------------------------------------------------------------

def validate_case(case: Case) -> None:
    ids = set()
    for k, b in enumerate(case.buses):
        p = f"/buses/{k}"
        if b.id in ids:
            raise CaseError(f"duplicate bus id {b.id}", p)
        ids.add(b.id)
        if b.kind not in BUS_KINDS:
            raise CaseError(f"bus kind must be one of {BUS_KINDS}", p + "/kind")
        if b.kind != "PQ" and not 0.5 < b.v_setpoint < 1.5:
            raise CaseError("voltage setpoint outside the (0.5, 1.5) p.u. band", p + "/v_setpoint")
    if sum(b.kind == "slack" for b in case.buses) != 1:
        raise CaseError("exactly one slack bus is required", "/buses")
    seen = set()
    for group in ("branches", "transformers"):
        for k, br in enumerate(getattr(case, group)):
            p = f"/{group}/{k}"
            if br.id in seen:
                raise CaseError(f"duplicate branch id {br.id!r}", p + "/id")
            seen.add(br.id)
            for end in ("from_bus", "to_bus"):
                if getattr(br, end) not in ids:
                    raise CaseError(f"branch {br.id!r} references unknown bus {getattr(br, end)}",
                                    p + ("/from" if end == "from_bus" else "/to"))
            if br.from_bus == br.to_bus:
                raise CaseError(f"branch {br.id!r} connects a bus to itself", p)
            if br.r == 0 and br.x == 0:
                raise CaseError(f"branch {br.id!r} has zero impedance", p)
            if group == "branches" and br.b < 0:
                raise CaseError(f"branch {br.id!r} has negative charging susceptance", p + "/b")
            if group == "transformers" and not br.ratio > 0:
                raise CaseError(f"transformer {br.id!r} needs a positive ratio", p + "/ratio")
    load_ids = set()
    for k, ld in enumerate(case.loads):
        p = f"/loads/{k}"
        if ld.bus not in ids:
            raise CaseError(f"load {ld.id!r} references unknown bus {ld.bus}", p + "/bus")
        if ld.kind not in LOAD_KINDS:
            raise CaseError(f"load kind must be one of {LOAD_KINDS}", p + "/kind")
        if ld.id in load_ids:
            raise CaseError(f"duplicate load id {ld.id!r}", p + "/id")
        load_ids.add(ld.id)
    machine_buses, machine_ids = set(), set()
    for k, m in enumerate(case.machines):
        p = f"/machines/{k}"
        if m.bus not in ids:
            raise CaseError(f"machine {m.id!r} references unknown bus {m.bus}", p + "/bus")
        if m.bus in machine_buses:
            raise CaseError(f"second machine at bus {m.bus}", p + "/bus")
        if m.id in machine_ids:
            raise CaseError(f"duplicate machine id {m.id!r}", p + "/id")
        if case.bus(m.bus).kind == "PQ":
            raise CaseError(f"machine {m.id!r} sits on a PQ bus", p + "/bus")
        machine_buses.add(m.bus)
        machine_ids.add(m.id)
        try:
            m.params.check()
            if m.exciter:
                m.exciter.check()
            if m.governor:
                m.governor.check()
        except ModelError as err:
            raise CaseError(str(err), p) from err
    fault_ids = set()
    for k, f in enumerate(case.faults):
        p = f"/faults/{k}"
        if f.id in fault_ids:
            raise CaseError(f"duplicate fault id {f.id!r}", p + "/id")
        fault_ids.add(f.id)
        if f.bus is not None:
            if f.bus not in ids:
                raise CaseError(f"fault {f.id!r} references unknown bus {f.bus}", p + "/bus")
        elif f.branch not in {b.id for b in case.branches}:
            raise CaseError(f"fault {f.id!r} references unknown line {f.branch!r}", p + "/branch")
        if not 0.0 < f.location < 1.0:
            raise CaseError("fault location must lie strictly inside (0, 1)", p + "/location")
        if f.x == 0 and f.r == 0:
            raise CaseError("fault impedance must be nonzero", p)
    closes: dict[str, list[float]] = {}
    for k, ev in enumerate(case.events):
        p = f"/events/{k}"
        if ev.kind not in EVENT_KINDS:
            raise CaseError(f"event kind must be one of {EVENT_KINDS}", p + "/kind")
        if not 0.0 < ev.time <= case.t_stop:
            raise CaseError(f"event time must lie in (0, {case.t_stop}]", p + "/time")
        if ev.kind.endswith("fault_switch"):
            if ev.target not in fault_ids:
                raise CaseError(f"event targets unknown fault {ev.target!r}", p + "/target")
            closes.setdefault(ev.target, []).append(ev.time if ev.kind.startswith("close") else -ev.time)
        elif ev.kind.endswith("branch"):
            if ev.target not in seen:
                raise CaseError(f"event targets unknown branch {ev.target!r}", p + "/target")
        elif ev.target not in machine_ids:
            raise CaseError(f"event targets unknown machine {ev.target!r}", p + "/target")
    for fid, times in closes.items():
        ordered = sorted(times, key=abs)
        if any((t > 0) != (k % 2 == 0) for k, t in enumerate(ordered)) or len(ordered) % 2:
            raise CaseError(f"fault {fid!r} needs alternating close/open events", "/events")


# -- JSON ------------------------------------------------------------------------

def _req(obj: dict, key: str, path: str):
    if key not in obj:
        raise CaseError(f"missing required field {key!r}", path)
    return obj[key]


def _num(obj: dict, key: str, path: str, default=None) -> float:
    if key not in obj:
        if default is None:
            raise CaseError(f"missing required field {key!r}", path)
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise CaseError("expected a finite number", f"{path}/{key}")
    return float(v)


def _list(doc: dict, key: str) -> list:
    v = doc.get(key, [])
    if not isinstance(v, list):
        raise CaseError("expected an array", f"/{key}")
    return v


def _record(cls, data, path: str, scale=None):
    if not isinstance(data, dict):
        raise CaseError("expected an object", path)
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise CaseError(f"unknown field(s) {sorted(unknown)}", path)
    try:
        return cls(**data)
    except TypeError as err:
        raise CaseError(str(err), path) from err


def parse_case(data: bytes | str | dict) -> Case:
    """Parse and validate a case document; converts to system-base per unit."""
    if isinstance(data, (bytes, str)):
        try:
            doc = json.loads(data)
        except json.JSONDecodeError as err:
            raise CaseError(f"invalid JSON: {err}") from err
    else:
        doc = data
    if not isinstance(doc, dict):
        raise CaseError("document must be an object")
    if doc.get("format") != FORMAT_VERSION:
        raise CaseError(f"unsupported format (expected {FORMAT_VERSION})", "/format")
    sbase = _num(doc, "system_base_mva", "", 100.0)
    if sbase <= 0:
        raise CaseError("must be positive", "/system_base_mva")
    case = Case(name=str(doc.get("name", "case")), system_base_mva=sbase,
                frequency_hz=_num(doc, "frequency_hz", "", 60.0), t_stop=_num(doc, "t_stop", "", 20.0),
                notes=str(doc.get("notes", "")))
    for k, b in enumerate(_list(doc, "buses")):
        p = f"/buses/{k}"
        seed = b.get("v_seed")
        case.buses.append(Bus(
            id=int(_req(b, "id", p)), kind=str(b.get("kind", "PQ")), base_kv=_num(b, "base_kv", p, 1.0),
            v_setpoint=_num(b, "v_setpoint", p, 1.0), p_gen=_num(b, "p_gen_mw", p, 0.0) / sbase,
            q_gen=_num(b, "q_gen_mvar", p, 0.0) / sbase, shunt_g=_num(b, "shunt_g", p, 0.0),
            shunt_b=_num(b, "shunt_b", p, 0.0),
            v_seed=None if seed is None else complex(seed[0] * math.cos(math.radians(seed[1])),
                                                     seed[0] * math.sin(math.radians(seed[1]))),
        ))
    for k, br in enumerate(_list(doc, "branches")):
        p = f"/branches/{k}"
        case.branches.append(Branch(str(_req(br, "id", p)), int(_req(br, "from", p)), int(_req(br, "to", p)),
                                    _num(br, "r", p, 0.0), _num(br, "x", p), _num(br, "b", p, 0.0)))
    for k, tr in enumerate(_list(doc, "transformers")):
        p = f"/transformers/{k}"
        case.transformers.append(Transformer(str(_req(tr, "id", p)), int(_req(tr, "from", p)), int(_req(tr, "to", p)),
                                             _num(tr, "r", p, 0.0), _num(tr, "x", p), _num(tr, "ratio", p, 1.0)))
    for k, ld in enumerate(_list(doc, "loads")):
        p = f"/loads/{k}"
        case.loads.append(Load(str(_req(ld, "id", p)), int(_req(ld, "bus", p)), _num(ld, "p_mw", p, 0.0) / sbase,
                               _num(ld, "q_mvar", p, 0.0) / sbase, str(ld.get("kind", "constant_z"))))
    for k, m in enumerate(_list(doc, "machines")):
        p = f"/machines/{k}"
        mbase = _num(m, "mbase_mva", p, sbase)
        raw = _record(MachineParams, _req(m, "params", p), p + "/params")
        params = raw.scaled(sbase / mbase, mbase / sbase)
        exc = m.get("exciter")
        gov = m.get("governor")
        governor = None
        if gov is not None:
            governor = _record(GovernorParams, gov, p + "/governor").scaled(mbase / sbase)
        case.machines.append(Machine(
            str(_req(m, "id", p)), int(_req(m, "bus", p)), params, mbase,
            None if exc is None else _record(ExciterParams, exc, p + "/exciter"), governor,
        ))
    for k, f in enumerate(_list(doc, "faults")):
        p = f"/faults/{k}"
        case.faults.append(Fault(str(_req(f, "id", p)), str(_req(f, "branch", p)), _num(f, "location", p),
                                 _num(f, "x", p), _num(f, "r", p, 0.0),
                                 None if f.get("bus") is None else int(f["bus"])))
    for k, ev in enumerate(_list(doc, "events")):
        p = f"/events/{k}"
        case.events.append(Event(str(_req(ev, "kind", p)), _num(ev, "time", p), str(_req(ev, "target", p)),
                                 _num(ev, "value", p, 0.0)))
    case.probes = [str(x) for x in _list(doc, "probes")]
    validate_case(case)
    return case


def load_case(path) -> Case:
    return parse_case(Path(path).read_bytes())


def case_to_dict(case: Case) -> dict:
    s = case.system_base_mva
    buses = []
    for b in case.buses:
        d = {"id": b.id, "kind": b.kind, "base_kv": b.base_kv, "v_setpoint": b.v_setpoint,
             "p_gen_mw": b.p_gen * s, "q_gen_mvar": b.q_gen * s, "shunt_g": b.shunt_g, "shunt_b": b.shunt_b}
        if b.v_seed is not None:
            d["v_seed"] = [abs(b.v_seed), math.degrees(math.atan2(b.v_seed.imag, b.v_seed.real))]
        buses.append(d)
    machines = []
    for m in case.machines:
        raw = m.params.scaled(m.mbase / s, s / m.mbase)
        machines.append({
            "id": m.id, "bus": m.bus, "mbase_mva": m.mbase, "params": params_to_dict(raw),
            "exciter": None if m.exciter is None else params_to_dict(m.exciter),
            "governor": None if m.governor is None else params_to_dict(m.governor.scaled(s / m.mbase)),
        })
    return {
        "format": FORMAT_VERSION,
        "name": case.name,
        "notes": case.notes,
        "system_base_mva": s,
        "frequency_hz": case.frequency_hz,
        "t_stop": case.t_stop,
        "buses": buses,
        "branches": [{"id": b.id, "from": b.from_bus, "to": b.to_bus, "r": b.r, "x": b.x, "b": b.b}
                     for b in case.branches],
        "transformers": [{"id": t.id, "from": t.from_bus, "to": t.to_bus, "r": t.r, "x": t.x, "ratio": t.ratio}
                         for t in case.transformers],
        "loads": [{"id": ld.id, "bus": ld.bus, "kind": ld.kind, "p_mw": ld.p * s, "q_mvar": ld.q * s}
                  for ld in case.loads],
        "machines": machines,
        "faults": [{"id": f.id, "branch": f.branch, "location": f.location, "x": f.x, "r": f.r}
                   | ({} if f.bus is None else {"bus": f.bus}) for f in case.faults],
        "events": [{"kind": e.kind, "time": e.time, "target": e.target, "value": e.value} for e in case.events],
        "probes": list(case.probes),
    }


def case_to_json(case: Case) -> str:
    return json.dumps(case_to_dict(case), indent=2) + "\n"


def shipped_case_path(name: str = "ieee14_modified") -> Path:
    return Path(__file__).with_name("data") / f"{name}.json"


def load_shipped_case(name: str = "ieee14_modified") -> Case:
    return load_case(shipped_case_path(name))


# -- IEEE common data format ---------------------------------------------------------

_CDF_KIND = {0: "PQ", 1: "PQ", 2: "PV", 3: "slack"}


def _cdf_num(field: str) -> float:
    """Fixed-column number; a blank column reads as zero."""
    return float(field) if field.strip() else 0.0


def parse_cdf(text: str, name: str = "cdf") -> Case:
    """Read the bus and branch sections of an IEEE Common Data Format file.

    Only the steady-state data is converted; machines must be added
    separately.  Branches with a nonzero final turns ratio become
    transformers; the rest become lines.
    """
    lines = text.splitlines()
    if not lines:
        raise CaseError("empty CDF file")
    sbase = float(lines[0][31:37])
    case = Case(name=name, system_base_mva=sbase)
    section = None
    used: set[str] = set()
    for raw in lines[1:]:
        if raw.startswith("BUS DATA FOLLOWS"):
            section = "bus"
            continue
        if raw.startswith("BRANCH DATA FOLLOWS"):
            section = "branch"
            continue
        if raw.startswith("-999"):
            section = None
            continue
        if section == "bus":
            bus_id = int(raw[0:4])
            kind = _CDF_KIND[int(raw[24:26])]
            vm = _cdf_num(raw[27:33])
            pl, ql = _cdf_num(raw[40:49]), _cdf_num(raw[49:59])
            pg, qg = _cdf_num(raw[59:67]), _cdf_num(raw[67:75])
            v_set = _cdf_num(raw[84:90]) or vm
            g, b = _cdf_num(raw[106:114]), _cdf_num(raw[114:122])
            case.buses.append(Bus(bus_id, kind, _cdf_num(raw[76:83]), v_set if kind != "PQ" else 1.0,
                                  pg / sbase, qg / sbase, g, b))
            if pl or ql:
                case.loads.append(Load(f"LD{bus_id}", bus_id, pl / sbase, ql / sbase))
        elif section == "branch":
            f, t = int(raw[0:4]), int(raw[5:9])
            r, x, b = _cdf_num(raw[19:29]), _cdf_num(raw[29:40]), _cdf_num(raw[40:50])
            ratio = _cdf_num(raw[76:82])
            base = f"{'T' if ratio else 'L'}{f}-{t}"
            label, k = base, 1
            while label in used:
                k += 1
                label = f"{base}#{k}"
            used.add(label)
            if ratio:
                case.transformers.append(Transformer(label, f, t, r, x, ratio))
            else:
                case.branches.append(Branch(label, f, t, r, x, b))
    validate_case(case)
    return case
