"""Network model: Y-bus assembly, power flow, and compilation of the grid to circuit devices.

The transient simulation works in the synchronously rotating phasor frame.
Each bus owns two circuit nodes, one per real/imaginary channel, and the
complex relation ``I = Y V`` is realized channel by channel:

* series impedance ``R + jX``: a resistor ``R`` followed by a current-
  controlled voltage source per channel, ``-X I_imag`` on the real channel
  and ``+X I_real`` on the imaginary one;
* shunt admittance ``g + jb``: a voltage-controlled current source per
  channel, ``g V_r - b V_i`` and ``b V_r + g V_i``.

Both kinds are affine in the unknowns, so the engine folds them into the
constant part of the MNA matrix.
"""

from __future__ import annotations

import cmath
import logging
from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .case import Branch, Case, Load, Transformer
from .netlist import DependentCurrent, DependentVoltage, Netlist, Resistor

log = logging.getLogger(__name__)


class GridError(ValueError):
    pass


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, worst_bus: int | None = None):
        super().__init__(message)
        self.worst_bus = worst_bus


# -- Y-bus ----------------------------------------------------------------------

@dataclass(frozen=True)
class YBus:
    bus_ids: tuple[int, ...]
    matrix: np.ndarray  # complex, N x N

    @property
    def index(self) -> dict[int, int]:
        return {b: k for k, b in enumerate(self.bus_ids)}

    def real_split(self) -> np.ndarray:
        """``[[G, -B], [B, G]]`` acting on ``[V_r; V_i]``."""
        g, b = self.matrix.real, self.matrix.imag
        return np.block([[g, -b], [b, g]])


def branch_two_port(br: Branch | Transformer) -> tuple[complex, complex, complex, complex]:
    """(Y_ff, Y_ft, Y_tf, Y_tt) of a line or tapped transformer (tap on the from side)."""
    if br.r == 0 and br.x == 0:
        raise GridError(f"branch {br.id!r} has zero impedance")
    y = 1.0 / complex(br.r, br.x)
    if isinstance(br, Transformer):
        if not br.ratio > 0:
            raise GridError(f"transformer {br.id!r} needs a positive ratio")
        n = br.ratio
        return y / (n * n), -y / n, -y / n, y
    half = 0.5j * br.b
    return y + half, -y, -y, y + half


def transformer_pi(y: complex, n: float) -> tuple[complex, complex, complex]:
    """(series, from-side shunt, to-side shunt) admittances of the tapped π."""
    return y / n, y * (1.0 - n) / (n * n), y * (n - 1.0) / n


def build_ybus(case: Case, skip: set[str] = frozenset()) -> YBus:
    """Sparse-pattern assembly through incidence matrices; ``skip`` omits branch ids."""
    ids = tuple(case.bus_ids)
    idx = {b: k for k, b in enumerate(ids)}
    n = len(ids)
    elems = [br for br in list(case.branches) + list(case.transformers) if br.id not in skip]
    m = len(elems)
    cf = np.zeros((m, n))
    ct = np.zeros((m, n))
    yff = np.zeros(m, complex)
    yft = np.zeros(m, complex)
    ytf = np.zeros(m, complex)
    ytt = np.zeros(m, complex)
    for k, br in enumerate(elems):
        if br.from_bus not in idx or br.to_bus not in idx:
            raise GridError(f"branch {br.id!r} references an unknown bus")
        cf[k, idx[br.from_bus]] = 1.0
        ct[k, idx[br.to_bus]] = 1.0
        yff[k], yft[k], ytf[k], ytt[k] = branch_two_port(br)
    yf = yff[:, None] * cf + yft[:, None] * ct
    yt = ytf[:, None] * cf + ytt[:, None] * ct
    ysh = np.array([complex(b.shunt_g, b.shunt_b) for b in case.buses])
    y = cf.T @ yf + ct.T @ yt + np.diag(ysh)
    return YBus(ids, y)


def build_ybus_naive(case: Case) -> YBus:
    """Element-by-element stamping straight from the π pictures; used as an oracle."""
    ids = tuple(case.bus_ids)
    pos = {b: k for k, b in enumerate(ids)}
    y = [[0j] * len(ids) for _ in ids]
    for br in case.branches:
        f, t = pos[br.from_bus], pos[br.to_bus]
        ys = 1 / complex(br.r, br.x)
        for a in (f, t):
            y[a][a] += ys + complex(0, br.b / 2)
        y[f][t] -= ys
        y[t][f] -= ys
    for tr in case.transformers:
        f, t = pos[tr.from_bus], pos[tr.to_bus]
        ys = 1 / complex(tr.r, tr.x)
        series, sh_f, sh_t = ys / tr.ratio, ys * (1 - tr.ratio) / tr.ratio ** 2, ys * (tr.ratio - 1) / tr.ratio
        y[f][f] += series + sh_f
        y[t][t] += series + sh_t
        y[f][t] -= series
        y[t][f] -= series
    for b in case.buses:
        y[pos[b.id]][pos[b.id]] += complex(b.shunt_g, b.shunt_b)
    return YBus(ids, np.array(y, dtype=complex))


# -- power flow -------------------------------------------------------------------

@dataclass
class PowerFlowResult:
    bus_ids: tuple[int, ...]
    voltages: np.ndarray  # complex p.u.
    injections: np.ndarray  # net complex injection S = V conj(Y V)
    generation: np.ndarray  # injection plus local load
    iterations: int
    max_mismatch: float

    def voltage(self, bus_id: int) -> complex:
        return complex(self.voltages[self.bus_ids.index(bus_id)])

    def generation_at(self, bus_id: int) -> complex:
        return complex(self.generation[self.bus_ids.index(bus_id)])


def _specified(case: Case):
    ids = case.bus_ids
    load = np.array([case.bus_load(b) for b in ids])
    gen = np.array([complex(case.bus(b).p_gen, case.bus(b).q_gen) for b in ids])
    return gen - load, load


def _start(case: Case, seed: dict[int, complex] | None) -> np.ndarray:
    v = np.ones(len(case.buses), dtype=complex)
    for k, b in enumerate(case.buses):
        if b.v_seed is not None:
            v[k] = b.v_seed
        if seed and b.id in seed:
            v[k] = seed[b.id]
        if b.kind != "PQ":
            v[k] = b.v_setpoint * v[k] / abs(v[k]) if abs(v[k]) > 0 else b.v_setpoint
    return v


def _result(case, ybus, v, load, its) -> PowerFlowResult:
    s = v * np.conj(ybus.matrix @ v)
    spec, _ = _specified(case)
    mism = 0.0
    for k, b in enumerate(case.buses):
        if b.kind == "PQ":
            mism = max(mism, abs(s[k] - spec[k]))
        elif b.kind == "PV":
            mism = max(mism, abs(s[k].real - spec[k].real), abs(abs(v[k]) - b.v_setpoint))
    return PowerFlowResult(tuple(case.bus_ids), v, s, s + load, its, mism)


def solve_power_flow(case: Case, tol: float = 1e-11, max_iter: int = 30,
                     seed: dict[int, complex] | None = None) -> PowerFlowResult:
    """Newton power flow on current-injection mismatches in rectangular form.

    Unknowns: ``V_r, V_i`` of every non-slack bus and ``Q`` of every PV bus.
    Equations: ``conj(S)/conj(V) - (Y V)`` split into real and imaginary
    parts at non-slack buses, and ``|V|^2 = V_set^2`` at PV buses.
    """
    ybus = build_ybus(case)
    Y = ybus.matrix
    spec, load = _specified(case)
    kinds = [b.kind for b in case.buses]
    n = len(kinds)
    free = [k for k in range(n) if kinds[k] != "slack"]
    pv = [k for k in range(n) if kinds[k] == "PV"]
    col = {k: j for j, k in enumerate(free)}
    qcol = {k: 2 * len(free) + j for j, k in enumerate(pv)}
    size = 2 * len(free) + len(pv)
    v = _start(case, seed)
    s = spec.copy()
    for k in pv:
        s[k] = complex(spec[k].real, (v[k] * np.conj(Y[k] @ v)).imag)
    for it in range(max_iter + 1):
        yv = Y @ v
        mis = np.conj(s) / np.conj(v) - yv
        F = np.zeros(size)
        for k in free:
            F[2 * col[k]] = mis[k].real
            F[2 * col[k] + 1] = mis[k].imag
        for k in pv:
            F[qcol[k]] = abs(v[k]) ** 2 - case.buses[k].v_setpoint ** 2
        worst = float(np.max(np.abs(F))) if size else 0.0
        if worst < tol:
            return _result(case, ybus, v, load, it)
        if it == max_iter:
            break
        J = np.zeros((size, size))
        for k in free:
            r = 2 * col[k]
            d = -np.conj(s[k]) / np.conj(v[k]) ** 2
            for m in free:
                c = 2 * col[m]
                dr = -Y[k, m] + (d if m == k else 0.0)
                di = -1j * Y[k, m] + (-1j * d if m == k else 0.0)
                J[r, c], J[r + 1, c] = dr.real, dr.imag
                J[r, c + 1], J[r + 1, c + 1] = di.real, di.imag
            if k in qcol:
                dq = -1j / np.conj(v[k])
                J[r, qcol[k]], J[r + 1, qcol[k]] = dq.real, dq.imag
        for k in pv:
            c = 2 * col[k]
            J[qcol[k], c] = 2 * v[k].real
            J[qcol[k], c + 1] = 2 * v[k].imag
        try:
            dz = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as err:
            raise PowerFlowError(f"singular power-flow Jacobian: {err}") from err
        for k in free:
            v[k] += complex(dz[2 * col[k]], dz[2 * col[k] + 1])
        for k in pv:
            s[k] = complex(s[k].real, s[k].imag + dz[qcol[k]])
    worst_row = int(np.argmax(np.abs(F)))
    bus = next((case.buses[k].id for k in free if worst_row in (2 * col[k], 2 * col[k] + 1)), None)
    raise PowerFlowError(f"power flow diverged after {max_iter} iterations (max mismatch {worst:.3e})", bus)


def solve_power_flow_gauss_seidel(case: Case, tol: float = 1e-13, max_iter: int = 200000,
                                  accel: float = 1.0) -> PowerFlowResult:
    """Classic Gauss-Seidel power flow in polar setpoint form; an independent oracle."""
    Y = build_ybus_naive(case).matrix
    spec, load = _specified(case)
    v = _start(case, None)
    kinds = [b.kind for b in case.buses]
    for it in range(1, max_iter + 1):
        change = 0.0
        for k, kind in enumerate(kinds):
            if kind == "slack":
                continue
            s = spec[k]
            if kind == "PV":
                s = complex(s.real, -(np.conj(v[k]) * (Y[k] @ v)).imag)
            others = Y[k] @ v - Y[k, k] * v[k]
            new = (np.conj(s) / np.conj(v[k]) - others) / Y[k, k]
            if kind == "PV":
                new = case.buses[k].v_setpoint * new / abs(new)
            else:
                new = v[k] + accel * (new - v[k])
            change = max(change, abs(new - v[k]))
            v[k] = new
        if change < tol:
            return _result(case, YBus(tuple(case.bus_ids), Y), v, load, it)
    raise PowerFlowError(f"Gauss-Seidel did not converge in {max_iter} sweeps")


# -- compilation to devices ----------------------------------------------------------

NodeMap = dict[int, tuple[int, int]]


def bus_nodes(netlist: Netlist, case: Case) -> NodeMap:
    """Allocate a (real, imag) node pair per bus in case order."""
    return {b.id: (netlist.node(f"bus{b.id}.re"), netlist.node(f"bus{b.id}.im")) for b in case.buses}


def add_series_impedance(netlist: Netlist, label: str, p: tuple[int, int], q: tuple[int, int], z: complex) -> list[str]:
    """Impedance ``z`` between node pairs ``p`` and ``q``; returns device labels."""
    if z.real < 0:
        raise GridError(f"{label}: negative series resistance")
    if z == 0:
        raise GridError(f"{label}: zero impedance")
    out = []
    if z.imag == 0:
        for ch in (0, 1):
            lab = f"{label}.r{'ri'[ch]}"
            netlist.add(Resistor(lab, p[ch], q[ch], z.real))
            out.append(lab)
        return out
    mid = p
    if z.real > 0:
        mid = (netlist.node(f"{label}.mid.re"), netlist.node(f"{label}.mid.im"))
        for ch in (0, 1):
            lab = f"{label}.r{'ri'[ch]}"
            netlist.add(Resistor(lab, p[ch], mid[ch], z.real))
            out.append(lab)
    lr, li = f"{label}.xr", f"{label}.xi"
    netlist.add(DependentVoltage(lr, mid[0], q[0], -z.imag * ex.I(li)))
    netlist.add(DependentVoltage(li, mid[1], q[1], z.imag * ex.I(lr)))
    return out + [lr, li]


def add_shunt_admittance(netlist: Netlist, label: str, p: tuple[int, int], y: complex) -> list[str]:
    """Shunt admittance ``y`` from node pair ``p`` to ground."""
    if y == 0:
        return []
    vr, vi = ex.V(p[0]), ex.V(p[1])
    netlist.add(DependentCurrent(f"{label}.gr", p[0], 0, y.real * vr - y.imag * vi))
    netlist.add(DependentCurrent(f"{label}.gi", p[1], 0, y.imag * vr + y.real * vi))
    return [f"{label}.gr", f"{label}.gi"]


def compile_branch(netlist: Netlist, branch: Branch, node_map: NodeMap) -> list[str]:
    """π line: series impedance plus ``jB/2`` at each end (omitted when B = 0)."""
    if branch.r == 0 and branch.x == 0:
        raise GridError(f"branch {branch.id!r} has zero impedance")
    p, q = node_map[branch.from_bus], node_map[branch.to_bus]
    out = add_series_impedance(netlist, branch.id, p, q, complex(branch.r, branch.x))
    if branch.b:
        out += add_shunt_admittance(netlist, f"{branch.id}.shf", p, 0.5j * branch.b)
        out += add_shunt_admittance(netlist, f"{branch.id}.sht", q, 0.5j * branch.b)
    return out


def compile_transformer(netlist: Netlist, tr: Transformer, node_map: NodeMap) -> list[str]:
    """Tapped π: series ``y/n`` and the two tap-dependent shunts.

    Off-nominal shunts may have negative conductance or the "wrong" sign of
    susceptance; they are realized as controlled current sources, which
    handle either sign.
    """
    if not tr.ratio > 0:
        raise GridError(f"transformer {tr.id!r} needs a positive ratio")
    if tr.r == 0 and tr.x == 0:
        raise GridError(f"transformer {tr.id!r} has zero impedance")
    p, q = node_map[tr.from_bus], node_map[tr.to_bus]
    z = complex(tr.r, tr.x)
    series, sh_f, sh_t = transformer_pi(1.0 / z, tr.ratio)
    out = add_series_impedance(netlist, tr.id, p, q, z * tr.ratio)
    if tr.ratio != 1.0:
        out += add_shunt_admittance(netlist, f"{tr.id}.shf", p, sh_f)
        out += add_shunt_admittance(netlist, f"{tr.id}.sht", q, sh_t)
    return out


def compile_bus_shunt(netlist: Netlist, bus_id: int, y: complex, node_map: NodeMap) -> list[str]:
    return add_shunt_admittance(netlist, f"SH{bus_id}", node_map[bus_id], y)


def compile_load(netlist: Netlist, load: Load, node_map: NodeMap, v_nominal: float = 1.0) -> list[str]:
    """Constant impedance sized at ``v_nominal`` or constant power through the division guard."""
    p = node_map[load.bus]
    if load.p == 0 and load.q == 0:
        log.warning("load %s has zero power; nothing emitted", load.id)
        return []
    if load.kind == "constant_z":
        if v_nominal <= 0:
            raise GridError(f"load {load.id!r}: nominal voltage must be positive")
        y = complex(load.p, -load.q) / v_nominal ** 2
        out = []
        if y.real > 0:
            for ch in (0, 1):
                lab = f"{load.id}.r{'ri'[ch]}"
                netlist.add(Resistor(lab, p[ch], 0, 1.0 / y.real))
                out.append(lab)
            y = complex(0.0, y.imag)
        return out + add_shunt_admittance(netlist, f"{load.id}.y", p, y)
    vr, vi = ex.V(p[0]), ex.V(p[1])
    mag2 = vr * vr + vi * vi
    netlist.add(DependentCurrent(f"{load.id}.pr", p[0], 0, (load.p * vr + load.q * vi) / mag2))
    netlist.add(DependentCurrent(f"{load.id}.pi", p[1], 0, (load.p * vi - load.q * vr) / mag2))
    return [f"{load.id}.pr", f"{load.id}.pi"]


def constant_pq_current(v: complex, s: complex) -> complex:
    """Load current ``conj(S / V)`` written as in the load model, ``(P - jQ) V / |V|^2``."""
    return complex(s.real, -s.imag) * v / (abs(v) ** 2)


def injected_currents(ybus: YBus, v: np.ndarray) -> np.ndarray:
    return ybus.matrix @ v


def polar(v: complex) -> tuple[float, float]:
    return abs(v), float(np.degrees(cmath.phase(v)))
