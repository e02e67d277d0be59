"""Reference integrator for whole-case scenarios.

A conventional power-system formulation, independent of the circuit path:
the network is the complex bus admittance matrix, machines inject Norton
currents, controllers are plain ODEs, and all of it is integrated as one
semi-explicit DAE with the trapezoidal rule (or backward Euler) and a dense
Newton solve on a finite-difference Jacobian.

The model equations themselves come from :mod:`circuit_tsa.models`, the
same source the circuit compiler uses, so a disagreement points at the
compilation or the circuit solver rather than at modeling choices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .case import Case
from .grid import build_ybus
from .models import (
    exciter_rates,
    governor_rates,
    machine_rates,
    norton_admittance,
    rotate_to_machine,
    rotate_to_network,
    subtransient,
)
from .scenario import event_intervals, initialize_case, place_faults, probe_names, reference_machine
from .timeseries import TimeSeries


class OracleError(RuntimeError):
    pass


def _closed(intervals, t: float, side: str) -> bool:
    for a, b in intervals:
        if side == "right" and a <= t < b:
            return True
        if side == "left" and a < t <= b:
            return True
    return False


@dataclass
class _Unit:
    """Index bookkeeping for one machine and its controllers."""

    machine: object
    bus: int            # position in the bus list
    x0: int             # first machine state in z
    exc: int | None     # first exciter state (vs, xa, efd, xf)
    gov: int | None     # first governor state (x1, x3, x4, x5)
    y: complex          # Norton admittance
    efd0: float
    pmref: float
    vref: float
    steps: list


class ReferenceModel:
    """Semi-explicit DAE ``x' = f(x, V, t)``, ``0 = g(x, V, t)`` for a case."""

    def __init__(self, case: Case, g_on: float = 1e6, g_off: float = 1e-9):
        case = place_faults(case)
        self.case = case
        self.init = init = initialize_case(case)
        pf = init.power_flow
        self.bus_ids = list(case.bus_ids)
        self.pos = {b: k for k, b in enumerate(self.bus_ids)}
        nb = len(self.bus_ids)
        self.g_on, self.g_off = g_on, g_off
        # constant-impedance loads join the base admittance; constant-power loads stay separate
        self.y_load = np.zeros(nb, complex)
        self.pq_loads = []
        for ld in case.loads:
            k = self.pos[ld.bus]
            if ld.kind == "constant_z":
                self.y_load[k] += complex(ld.p, -ld.q) / abs(pf.voltage(ld.bus)) ** 2
            else:
                self.pq_loads.append((k, complex(ld.p, ld.q)))
        self.switched = {}
        for e in case.events:
            if e.kind in ("open_branch", "close_branch") and e.target not in self.switched:
                self.switched[e.target] = event_intervals(case, e.target, "close_branch", "open_branch", True)
        self.faults = [(self.pos[f.bus], complex(f.r, f.x),
                        event_intervals(case, f.id, "close_fault_switch", "open_fault_switch", False))
                       for f in case.faults]
        self._ybus_cache = {}

        units, n = [], 0
        for m in case.machines:
            mi = init.machines[m.id]
            x0, n = n, n + 6
            exc = gov = None
            if m.exciter is not None:
                exc, n = n, n + 4
            if m.governor is not None:
                gov, n = n, n + 4
            steps = [(e.time, e.value) for e in case.events
                     if e.kind == "step_mechanical_power" and e.target == m.id]
            vref = init.exciters[m.id].vref if m.exciter is not None else 0.0
            units.append(_Unit(m, self.pos[m.bus], x0, exc, gov, norton_admittance(m.params),
                               mi.efd, init.pmref[m.id], vref, steps))
        self.units = units
        self.nx = n
        self.nb = nb
        self.n = n + 2 * nb
        slack = case.slack()
        self.fixed = None
        if case.machine_at(slack.id) is None:
            self.fixed = (self.pos[slack.id], pf.voltage(slack.id))

    # -- initial point ----------------------------------------------------------------
    def initial_vector(self) -> np.ndarray:
        z = np.zeros(self.n)
        for u in self.units:
            mi = self.init.machines[u.machine.id]
            z[u.x0: u.x0 + 6] = mi.state
            if u.exc is not None:
                ei = self.init.exciters[u.machine.id]
                z[u.exc: u.exc + 4] = (ei.vs, ei.vr, ei.efd, ei.efd)
            if u.gov is not None:
                # lead-lag state sits at its (zero) input, the lags at the set point
                z[u.gov: u.gov + 4] = (0.0, u.pmref, u.pmref, u.pmref)
        pf = self.init.power_flow
        v = np.array([pf.voltage(b) for b in self.bus_ids])
        z[self.nx: self.nx + self.nb] = v.real
        z[self.nx + self.nb:] = v.imag
        return z

    # -- network --------------------------------------------------------------------------
    def ybus(self, t: float, side: str) -> np.ndarray:
        skip = frozenset(b for b, iv in self.switched.items() if not _closed(iv, t, side))
        faults = tuple(_closed(iv, t, side) for _, _, iv in self.faults)
        key = (skip, faults)
        y = self._ybus_cache.get(key)
        if y is None:
            y = build_ybus(self.case, skip).matrix.copy()
            y[np.diag_indices(self.nb)] += self.y_load
            for (k, zf, _), closed in zip(self.faults, faults):
                # the breaker is the same finite conductance as the circuit's switch
                zs = 1.0 / (self.g_on if closed else self.g_off)
                y[k, k] += 1.0 / (zs + zf)
            self._ybus_cache[key] = y
        return y

    def _mech_ref(self, u: _Unit, t: float, side: str) -> float:
        level = u.pmref
        for ts, dv in u.steps:
            if ts < t or (ts == t and side == "right"):
                level += dv
        return level

    # -- residual pieces ------------------------------------------------------------------
    def evaluate(self, z: np.ndarray, t: float, side: str):
        """Return ``(dx, g, signals)`` at one point."""
        nx, nb = self.nx, self.nb
        v = z[nx: nx + nb] + 1j * z[nx + nb:]
        # scalar model code runs on Python floats, which is much faster than numpy scalars
        zl = z.tolist()
        vl = v.tolist()
        inj = [0j] * nb
        dx = [0.0] * nx
        signals = {}
        for u in self.units:
            p = u.machine.params
            st = zl[u.x0: u.x0 + 6]
            vt = vl[u.bus]
            ed2, eq2 = subtransient(p, *st[2:])
            er, ei = rotate_to_network(ed2, eq2, st[0])
            i = u.y * (complex(er, ei) - vt)
            inj[u.bus] += i
            id_, iq = rotate_to_machine(i.real, i.imag, st[0])
            if u.exc is not None:
                vs, xa, efd, xf = zl[u.exc: u.exc + 4]
                rates, vr = exciter_rates(u.machine.exciter, u.vref, abs(vt), vs, xa, efd, xf)
                dx[u.exc: u.exc + 4] = rates
                if u.machine.exciter.tr <= 0:
                    dx[u.exc] = 0.0
            else:
                efd, vr = u.efd0, None
            ref = self._mech_ref(u, t, side)
            if u.gov is not None:
                rates, pm, _ = governor_rates(u.machine.governor, ref, st[1], *zl[u.gov: u.gov + 4])
                dx[u.gov: u.gov + 4] = rates
            else:
                pm = ref
            caps, f = machine_rates(p, st, id_, iq, efd, pm, self.case.omega_base)
            dx[u.x0: u.x0 + 6] = [a / c for a, c in zip(f, caps)]
            signals[u.machine.id] = (efd, pm, (vt * i.conjugate()).real, vr)
        inj = np.array(inj)
        dx = np.array(dx)
        for k, s in self.pq_loads:
            inj[k] -= (s / v[k]).conjugate() if v[k] != 0 else 0.0
        mis = self.ybus(t, side) @ v - inj
        if self.fixed is not None:
            k, v0 = self.fixed
            mis[k] = v[k] - v0
        g = np.concatenate([mis.real, mis.imag])
        return dx, g, signals

    def probe(self, z: np.ndarray, t: float, side: str, names, signals=None) -> np.ndarray:
        sig = signals if signals is not None else self.evaluate(z, t, side)[2]
        nx, nb = self.nx, self.nb
        ref = reference_machine(self.case)
        ref_u = next(u for u in self.units if u.machine.id == ref.id) if ref else None
        out = []
        for name in names:
            kind, bus = name.rsplit("_", 1)
            bus = int(bus)
            if kind == "vmag":
                k = self.pos[bus]
                out.append(math.hypot(z[nx + k], z[nx + nb + k]))
                continue
            u = next(u for u in self.units if u.machine.bus == bus)
            efd, pm, pe, vr = sig[u.machine.id]
            if kind == "omega":
                out.append(z[u.x0 + 1])
            elif kind == "delta":
                out.append(z[u.x0] - z[ref_u.x0])
            elif kind == "efd":
                out.append(efd)
            elif kind == "pm":
                out.append(pm)
            elif kind == "pe":
                out.append(pe)
            elif kind == "vr":
                out.append(vr)
            else:
                raise ValueError(f"oracle has no probe {name!r}")
        return np.array(out, dtype=float)

    def breakpoints(self, t_stop: float) -> list[float]:
        pts = set()
        for iv in list(self.switched.values()) + [iv for _, _, iv in self.faults]:
            for a, b in iv:
                pts.update((a, b))
        for u in self.units:
            pts.update(ts for ts, _ in u.steps)
        return sorted(p for p in pts if 0.0 < p <= t_stop and math.isfinite(p))


class _Newton:
    """Dense Newton with a finite-difference Jacobian kept while it still contracts."""

    def __init__(self, tol: float, max_iter: int = 50):
        self.tol = tol
        self.max_iter = max_iter
        self.lu = None

    def jacobian(self, fun, z, r0):
        n = z.size
        jac = np.empty((n, n))
        for j in range(n):
            h = 1e-7 * (1.0 + abs(z[j]))
            zp = z.copy()
            zp[j] += h
            jac[:, j] = (fun(zp) - r0) / h
        return jac

    def solve(self, fun, z0, t):
        z = z0.copy()
        r = fun(z)
        res_prev = math.inf
        fresh = False
        for it in range(self.max_iter):
            res = float(np.max(np.abs(r)))
            if res <= self.tol:
                return z
            if self.lu is None or res > 0.2 * res_prev:
                if fresh and res > 0.9 * res_prev:
                    break
                self.lu = sla.lu_factor(self.jacobian(fun, z, r))
                fresh = True
            else:
                fresh = False
            z = z - sla.lu_solve(self.lu, r)
            r = fun(z)
            res_prev = res
        raise OracleError(f"reference Newton failed at t={t:.6g} (residual {float(np.max(np.abs(r))):.3e})")


def run_reference_dae(case: Case, dt: float = 1e-3, t_stop: float | None = None, probes=None,
                      method: str = "trapezoidal", tol: float = 1e-11,
                      g_on: float = 1e6, g_off: float = 1e-9) -> TimeSeries:
    """Integrate ``case`` on the fixed grid ``k*dt``, landing on every event.

    At each event the algebraic variables are re-solved with the states
    held, mirroring the circuit solver's re-initialization.
    """
    if method not in ("trapezoidal", "backward_euler"):
        raise ValueError("method must be 'trapezoidal' or 'backward_euler'")
    model = ReferenceModel(case, g_on, g_off)
    t_stop = model.case.t_stop if t_stop is None else t_stop
    names = list(probes) if probes is not None else probe_names(model.case)
    nx = model.nx
    trap = method == "trapezoidal"
    newton = _Newton(tol)

    def consistent(z, t):
        # algebraic re-solve with states frozen
        def fun(v):
            zz = z.copy()
            zz[nx:] = v
            return model.evaluate(zz, t, "right")[1]
        alg = _Newton(tol)
        out = z.copy()
        out[nx:] = alg.solve(fun, z[nx:], t)
        return out

    z = consistent(model.initial_vector(), 0.0)
    n_steps = int(round(t_stop / dt))
    times = np.arange(n_steps + 1) * dt
    samples = np.empty((n_steps + 1, len(names)))
    samples[0] = model.probe(z, 0.0, "right", names)
    bps = model.breakpoints(t_stop)
    eps = 1e-9 * dt
    bp_k = 0
    t = 0.0
    f0 = model.evaluate(z, t, "right")[0]
    prev = None  # last accepted point on the current smooth segment
    last = [None, None, None]
    for k in range(1, n_steps + 1):
        t_target = times[k]
        while True:
            if bp_k < len(bps) and bps[bp_k] < t_target - eps:
                t_next, at_bp = bps[bp_k], True
            else:
                t_next = t_target
                at_bp = bp_k < len(bps) and abs(bps[bp_k] - t_target) <= eps
            h = t_next - t
            x_old = z[:nx].copy()

            def fun(zz, t1=t_next, h=h, x_old=x_old, f0=f0):
                dx, g, sig = model.evaluate(zz, t1, "left")
                last[:] = [zz, dx, sig]
                if trap:
                    rx = zz[:nx] - x_old - 0.5 * h * (dx + f0)
                else:
                    rx = zz[:nx] - x_old - h * dx
                return np.concatenate([rx, g])

            guess = z
            if prev is not None:
                guess = z + (z - prev[1]) * (h / (t - prev[0]))
            prev = (t, z)
            z = newton.solve(fun, guess, t_next)
            t = t_next
            if at_bp:
                z = consistent(z, t)
                newton.lu = None
                prev = None
                bp_k += 1
            if at_bp or last[0] is not z:
                f0, _, sig = model.evaluate(z, t, "right")
            else:
                # the last residual evaluation was at the accepted point
                f0, sig = last[1], last[2]
            if t_next == t_target:
                break
        t = t_target
        samples[k] = model.probe(z, t, "right", names, sig)
    return TimeSeries(times, {name: samples[:, j].copy() for j, name in enumerate(names)})


class ComparisonError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelDeviation:
    max_abs: float
    rms: float
    tolerance: float | None

    @property
    def passed(self) -> bool:
        return self.tolerance is None or self.max_abs <= self.tolerance


@dataclass
class ComparisonReport:
    channels: dict[str, ChannelDeviation]
    samples: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.channels.values())

    def max_abs(self) -> dict[str, float]:
        return {k: c.max_abs for k, c in self.channels.items()}

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "samples": self.samples,
            "channels": {k: {"max_abs": c.max_abs, "rms": c.rms, "tolerance": c.tolerance, "passed": c.passed}
                         for k, c in self.channels.items()},
        }

    def format(self) -> str:
        width = max([7] + [len(k) for k in self.channels])
        lines = [f"{'channel':{width}s}  {'max_abs':>12s}  {'rms':>12s}  {'tol':>9s}  result"]
        for k, c in self.channels.items():
            tol = "-" if c.tolerance is None else f"{c.tolerance:.3g}"
            lines.append(f"{k:{width}s}  {c.max_abs:12.4e}  {c.rms:12.4e}  {tol:>9s}  {'pass' if c.passed else 'FAIL'}")
        return "\n".join(lines)


def _tolerance_for(name: str, tolerances) -> float | None:
    if tolerances is None:
        return None
    if isinstance(tolerances, (int, float)):
        return float(tolerances)
    if name in tolerances:
        return float(tolerances[name])
    # a key may name a channel kind, e.g. "omega" for every omega_<bus>
    kind = name.rsplit("_", 1)[0]
    return float(tolerances[kind]) if kind in tolerances else None


def compare_series(a: TimeSeries, b: TimeSeries, tolerances=None, channels=None) -> ComparisonReport:
    """Per-channel max-abs and RMS deviation between two series.

    Both series are resampled by linear interpolation onto the coarser of
    the two grids, restricted to the overlapping time span; a finer grid
    containing every coarse sample time reproduces those samples exactly.
    ``tolerances`` is a number, or a mapping keyed by channel name or by
    channel kind (the part before the last underscore).
    """
    names = list(channels) if channels is not None else list(a.names)
    missing = [n for n in names if n not in a.channels or n not in b.channels]
    if missing:
        raise ComparisonError(f"channels missing from one series: {', '.join(missing)}")
    lo, hi = max(a.time[0], b.time[0]), min(a.time[-1], b.time[-1])
    if not hi >= lo or a.time.size == 0 or b.time.size == 0:
        raise ComparisonError("time grids do not overlap")
    coarse = a if a.time.size <= b.time.size else b
    grid = coarse.time[(coarse.time >= lo) & (coarse.time <= hi)]
    if grid.size == 0:
        raise ComparisonError("time grids do not overlap")

    def on_grid(s: TimeSeries, name: str) -> np.ndarray:
        if s.time.shape == grid.shape and np.array_equal(s.time, grid):
            return s[name]
        return np.interp(grid, s.time, s[name])

    out = {}
    for name in names:
        d = on_grid(a, name) - on_grid(b, name)
        out[name] = ChannelDeviation(float(np.max(np.abs(d))), float(np.sqrt(np.mean(d * d))),
                                     _tolerance_for(name, tolerances))
    return ComparisonReport(out, int(grid.size))


__all__ = ["ReferenceModel", "run_reference_dae", "compare_series", "ComparisonReport", "ChannelDeviation",
           "ComparisonError", "OracleError"]
