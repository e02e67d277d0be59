"""Case parsing, validation, serialization and the CDF converter."""

import json

import pytest

from circuit_tsa.case import (
    Case,
    CaseError,
    case_to_json,
    load_shipped_case,
    parse_case,
    parse_cdf,
    shipped_case_path,
)


def two_bus_doc(**extra):
    doc = {
        "format": 1,
        "name": "two-bus",
        "system_base_mva": 100.0,
        "t_stop": 5.0,
        "buses": [{"id": 1, "kind": "slack", "v_setpoint": 1.02},
                  {"id": 2, "kind": "PQ"}],
        "branches": [{"id": "L1", "from": 1, "to": 2, "r": 0.01, "x": 0.1, "b": 0.02}],
        "loads": [{"id": "LD2", "bus": 2, "p_mw": 50.0, "q_mvar": 20.0}],
    }
    doc.update(extra)
    return doc


def test_shipped_case_counts(ieee14):
    assert len(ieee14.buses) == 14
    assert len(ieee14.branches) == 17
    assert len(ieee14.transformers) == 3
    assert len(ieee14.machines) == 5
    assert sorted(m.bus for m in ieee14.machines) == [1, 2, 3, 6, 8]
    assert sum(m.governor is not None for m in ieee14.machines) == 2


def test_shipped_case_scenario():
    case = load_shipped_case()
    (fault,) = case.faults
    assert (fault.branch, fault.location, fault.x) == ("L2-4", 0.5, 0.2)
    assert [(e.kind, e.time) for e in case.events] == [("close_fault_switch", 1.0), ("open_fault_switch", 2.0)]
    assert case.t_stop == 20.0


def test_per_unit_conversion():
    case = parse_case(two_bus_doc())
    assert case.loads[0].p == pytest.approx(0.5)
    assert case.loads[0].q == pytest.approx(0.2)


def test_dangling_bus_names_branch():
    doc = two_bus_doc()
    doc["branches"][0]["to"] = 99
    with pytest.raises(CaseError, match="L1.*99") as err:
        parse_case(doc)
    assert err.value.path == "/branches/0/to"


@pytest.mark.parametrize("mutate,path", [
    (lambda d: d["buses"].append({"id": 2}), "/buses/2"),
    (lambda d: d["branches"].append(dict(d["branches"][0])), "/branches/1/id"),
    (lambda d: d["buses"][0].update(kind="PQ"), "/buses"),
    (lambda d: d.update(format=2), "/format"),
    (lambda d: d["loads"][0].update(p_mw="x"), "/loads/0/p_mw"),
    (lambda d: d.update(events=[{"kind": "close_fault_switch", "time": 1.0, "target": "nope"}]), "/events/0/target"),
    (lambda d: d.update(events=[{"kind": "open_branch", "time": 0.0, "target": "L1"}]), "/events/0/time"),
])
def test_schema_errors_carry_pointer(mutate, path):
    doc = two_bus_doc()
    mutate(doc)
    with pytest.raises(CaseError) as err:
        parse_case(doc)
    assert err.value.path == path


def test_unpaired_fault_events_rejected():
    doc = two_bus_doc(faults=[{"id": "F", "branch": "L1", "location": 0.5, "x": 0.2}],
                      events=[{"kind": "close_fault_switch", "time": 1.0, "target": "F"}])
    with pytest.raises(CaseError, match="alternating"):
        parse_case(doc)


def test_invalid_json_is_a_case_error():
    with pytest.raises(CaseError, match="invalid JSON"):
        parse_case(b"{not json")


def test_minimal_case_round_trip():
    case = parse_case(two_bus_doc())
    again = parse_case(case_to_json(case))
    assert again == case


def test_shipped_case_round_trip(ieee14):
    again = parse_case(case_to_json(ieee14))
    # base conversion is reapplied on the way back, so machine data agree to rounding
    assert again.copy(machines=[]) == ieee14.copy(machines=[])
    for a, b in zip(again.machines, ieee14.machines):
        assert (a.id, a.bus, a.mbase, a.exciter) == (b.id, b.bus, b.mbase, b.exciter)
        for part in ("params", "governor"):
            pa, pb = getattr(a, part), getattr(b, part)
            if pb is None:
                assert pa is None
                continue
            for k, v in vars(pb).items():
                assert getattr(pa, k) == (pytest.approx(v, rel=1e-12) if isinstance(v, float) else v), k


def test_shipped_file_is_the_loader_source():
    doc = json.loads(shipped_case_path().read_text())
    assert doc["format"] == 1
    assert isinstance(parse_case(doc), Case)


def _fixed(width_fields, length=130):
    line = [" "] * length
    for pos, text in width_fields:
        line[pos:pos + len(text)] = text
    return "".join(line).rstrip()


CDF = "\n".join([
    _fixed([(0, "08/19/93 UW ARCHIVE"), (31, "100.0")]),
    "BUS DATA FOLLOWS                            3 ITEMS",
    _fixed([(0, "   1"), (24, " 3"), (27, "1.060"), (59, "  0.0"), (76, "  69.0"), (84, "1.060")]),
    _fixed([(0, "   2"), (24, " 2"), (27, "1.045"), (40, "   21.7"), (49, "   12.7"), (59, "   40.0"), (76, "  69.0"),
            (84, "1.045")]),
    _fixed([(0, "   3"), (24, " 0"), (27, "1.010"), (40, "   94.2"), (49, "   19.0"), (76, "  13.8"), (114, "  0.19")]),
    "-999",
    "BRANCH DATA FOLLOWS                         2 ITEMS",
    _fixed([(0, "   1"), (5, "   2"), (19, "   0.01938"), (29, "    0.05917"), (40, "    0.0528")]),
    _fixed([(0, "   2"), (5, "   3"), (19, "   0.0"), (29, "    0.20912"), (40, "    0.0"), (76, " 0.978")]),
    "-999",
    "END OF DATA",
])


def test_cdf_converter():
    case = parse_cdf(CDF, "mini")
    assert [b.kind for b in case.buses] == ["slack", "PV", "PQ"]
    assert case.buses[1].p_gen == pytest.approx(0.4)
    assert case.buses[2].shunt_b == pytest.approx(0.19)
    assert [ld.bus for ld in case.loads] == [2, 3]
    assert case.loads[1].p == pytest.approx(0.942)
    (line,) = case.branches
    assert (line.id, line.r, line.x, line.b) == ("L1-2", 0.01938, 0.05917, 0.0528)
    (tr,) = case.transformers
    assert (tr.id, tr.ratio) == ("T2-3", 0.978)


def test_cdf_empty_rejected():
    with pytest.raises(CaseError):
        parse_cdf("")
