"""Modified nodal analysis: operating points and implicit transient integration.

Unknowns are the non-ground node voltages followed by the currents of
voltage-defined devices (independent and dependent voltage sources,
inductors).  Capacitors and inductors enter through trapezoidal or
backward-Euler companion models.  Behavioral sources whose expression is
affine in the unknowns are stamped once into the constant matrix; the rest
are compiled to a single Python function that returns values and analytic
partial derivatives for every Newton iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import expr as ex
from .netlist import (
    Capacitor,
    CurrentSource,
    DependentCurrent,
    DependentVoltage,
    Inductor,
    Netlist,
    Resistor,
    Switch,
    VoltageSource,
    errors,
    validate_netlist,
)
from .timeseries import TimeSeries

log = logging.getLogger(__name__)

METHODS = ("trapezoidal", "backward_euler")


# stale-Jacobian (chord) iteration policy when reuse_jacobian is set
CHORD_CONTRACTION = 0.2
CHORD_MAX_ITERS = 4
# below this size a dense product beats the sparse one's call overhead
DENSE_MATVEC_MAX = 64


class SimulationError(Exception):
    pass


class SingularMatrixError(SimulationError):
    pass


class ConvergenceError(SimulationError):
    def __init__(self, message: str, time: float, state: "SystemState | None" = None):
        super().__init__(f"{message} (t={time:.9g} s)")
        self.time = time
        self.state = state


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    t_stop: float = 1.0
    newton_abs_tol: float = 1e-8
    newton_rel_tol: float = 1e-6
    max_newton_iters: int = 50
    integration_method: str = "trapezoidal"
    g_on: float = 1e6
    g_off: float = 1e-9
    # keep the LU factors across iterations and steps while Newton converges quickly
    reuse_jacobian: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (self.newton_abs_tol > 0 and self.newton_rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be at least 1")
        if self.integration_method not in METHODS:
            raise ValueError(f"integration_method must be one of {METHODS}")


@dataclass
class SystemState:
    time: float
    x: np.ndarray
    cap_current: np.ndarray
    ind_voltage: np.ndarray
    n_node_unknowns: int
    iterations: int = 0

    @property
    def node_voltages(self) -> np.ndarray:
        return self.x[: self.n_node_unknowns]

    @property
    def branch_currents(self) -> np.ndarray:
        return self.x[self.n_node_unknowns:]

    def copy(self) -> "SystemState":
        return replace(self, x=self.x.copy(), cap_current=self.cap_current.copy(),
                       ind_voltage=self.ind_voltage.copy())


@dataclass(frozen=True)
class SwitchEvent:
    time: float
    label: str
    closed: bool


@dataclass
class _System:
    """Linear part plus sparse-structure bookkeeping for one mode."""

    n: int
    A: sp.csr_matrix | np.ndarray
    indices: np.ndarray
    indptr: np.ndarray
    lin_data: np.ndarray
    nl_slots: np.ndarray
    lu: object = None


class Simulator:
    """One solver instance over a frozen netlist; owns its mutable state."""

    def __init__(self, netlist: Netlist, config: SolverConfig | None = None,
                 events: list[SwitchEvent] | tuple = ()):
        self.netlist = netlist
        self.config = config or SolverConfig()
        bad = errors(validate_netlist(netlist))
        if bad:
            raise SimulationError("invalid netlist: " + "; ".join(str(d) for d in bad))
        netlist.freeze()
        self.events = sorted(events, key=lambda e: e.time)
        nodes = [n for n in netlist.nodes if n != 0]
        self.node_index = {n: k for k, n in enumerate(nodes)}
        self.nv = len(nodes)
        devs = netlist.devices
        self.branch_devs = [d for d in devs if d.voltage_defined]
        self.branch_index = {d.label: self.nv + k for k, d in enumerate(self.branch_devs)}
        self.n = self.nv + len(self.branch_devs)
        self.caps = [d for d in devs if isinstance(d, Capacitor)]
        self.inds = [d for d in devs if isinstance(d, Inductor)]
        self.switches = [d for d in devs if isinstance(d, Switch)]
        self.vsrcs = [d for d in devs if isinstance(d, VoltageSource)]
        self.isrcs = [d for d in devs if isinstance(d, CurrentSource)]
        self.guard_hits = 0
        self._systems: dict[tuple, _System] = {}
        # capacitor terminals as indices into x extended by a trailing ground 0
        self._cap_a = np.array([self.idx(c.a) for c in self.caps], dtype=np.int64)
        self._cap_b = np.array([self.idx(c.b) for c in self.caps], dtype=np.int64)
        self._cap_c = np.array([c.capacitance for c in self.caps], dtype=float)
        self._cap_a_live = self._cap_a >= 0
        self._cap_b_live = self._cap_b >= 0
        self._xe = np.zeros(self.n + 1)  # x with a trailing ground entry
        self._prepare()

    # -- index helpers ----------------------------------------------------
    def idx(self, node: int) -> int:
        return -1 if node == 0 else self.node_index[node]

    def _resolve(self, leaf: ex.Expr) -> int | None:
        if isinstance(leaf, ex.Volt):
            return None if leaf.node == 0 else self.node_index[leaf.node]
        return self.branch_index[leaf.label]

    def _expand_currents(self, e: ex.Expr) -> ex.Expr:
        def fn(leaf):
            if isinstance(leaf, ex.Curr):
                d = self.netlist.device(leaf.label)
                if isinstance(d, Resistor):
                    return (ex.V(d.a) - ex.V(d.b)) / d.resistance
            return None

        return ex.substitute(e, fn)

    def _prepare(self):
        rows, cols, vals = [], [], []
        rhs_const = np.zeros(self.n)

        def stamp(r, c, v):
            if r >= 0 and c >= 0:
                rows.append(r)
                cols.append(c)
                vals.append(v)

        def conductance(a, b, g):
            ia, ib = self.idx(a), self.idx(b)
            stamp(ia, ia, g)
            stamp(ib, ib, g)
            stamp(ia, ib, -g)
            stamp(ib, ia, -g)

        self._conductance = conductance
        for d in self.netlist.devices:
            if isinstance(d, Resistor):
                conductance(d.a, d.b, 1.0 / d.resistance)
        for d in self.branch_devs:
            r, ia, ib = self.branch_index[d.label], self.idx(d.a), self.idx(d.b)
            stamp(ia, r, 1.0)
            stamp(ib, r, -1.0)
            if not isinstance(d, Inductor):
                stamp(r, ia, 1.0)
                stamp(r, ib, -1.0)

        # behavioral sources: affine ones go to the constant matrix
        nl_exprs, nl_rows = [], []  # nl_rows: list of [(row, sign)]
        for d in self.netlist.devices:
            if not isinstance(d, (DependentCurrent, DependentVoltage)):
                continue
            e = self._expand_currents(d.expr)
            if isinstance(d, DependentCurrent):
                targets = [(self.idx(d.a), 1.0), (self.idx(d.b), -1.0)]
            else:
                targets = [(self.branch_index[d.label], -1.0)]
            targets = [(r, s) for r, s in targets if r >= 0]
            aff = ex.affine_coefficients(e)
            if aff is not None:
                offset, coeffs = aff
                for r, s in targets:
                    rhs_const[r] -= s * offset
                    for leaf, c in coeffs.items():
                        col = self._resolve(leaf)
                        if col is not None:
                            stamp(r, col, s * c)
            else:
                nl_exprs.append(e)
                nl_rows.append(targets)

        self._static = (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(vals))
        self._rhs_const = rhs_const
        self.n_nonlinear = len(nl_exprs)
        if nl_exprs:
            self._batch = ex.compile_batch(nl_exprs, self._resolve)
            vr, vs, vsign = [], [], []
            for k, targets in enumerate(nl_rows):
                for r, s in targets:
                    vr.append(r)
                    vs.append(k)
                    vsign.append(s)
            self._val_rows = np.array(vr, dtype=np.int64)
            self._val_src = np.array(vs, dtype=np.int64)
            self._val_sign = np.array(vsign)
            jr, jc, js, jsign = [], [], [], []
            for k, (ei, col) in enumerate(self._batch.jac_entries):
                for r, s in nl_rows[ei]:
                    jr.append(r)
                    jc.append(col)
                    js.append(k)
                    jsign.append(s)
            self._jac_rows = np.array(jr, dtype=np.int64)
            self._jac_cols = np.array(jc, dtype=np.int64)
            self._jac_src = np.array(js, dtype=np.int64)
            self._jac_sign = np.array(jsign)
        else:
            self._batch = None
            self._jac_rows = self._jac_cols = np.zeros(0, dtype=np.int64)

    # -- per-mode systems ---------------------------------------------------
    def switch_states(self, t: float, side: str) -> tuple[bool, ...]:
        states = []
        for sw in self.switches:
            closed = sw.is_closed(t, side)
            for ev in self.events:
                if ev.label != sw.label:
                    continue
                if ev.time < t or (ev.time == t and side == "right"):
                    closed = ev.closed
            states.append(closed)
        return tuple(states)

    def _system(self, mode: str, h: float, switches: tuple[bool, ...]) -> _System:
        key = (mode, h if mode == "tran" else None, switches)
        sys_ = self._systems.get(key)
        if sys_ is not None:
            return sys_
        cfg = self.config
        rows, cols, vals = (list(a) for a in self._static)
        n = self.n + (len(self.caps) if mode == "hold" else 0)

        def stamp(r, c, v):
            if r >= 0 and c >= 0:
                rows.append(r)
                cols.append(c)
                vals.append(v)

        for sw, closed in zip(self.switches, switches):
            g = cfg.g_on if closed else cfg.g_off
            ia, ib = self.idx(sw.a), self.idx(sw.b)
            stamp(ia, ia, g)
            stamp(ib, ib, g)
            stamp(ia, ib, -g)
            stamp(ib, ia, -g)
        trap = cfg.integration_method == "trapezoidal"
        for k, c in enumerate(self.caps):
            ia, ib = self.idx(c.a), self.idx(c.b)
            if mode == "tran":
                g = (2.0 if trap else 1.0) * c.capacitance / h
                stamp(ia, ia, g)
                stamp(ib, ib, g)
                stamp(ia, ib, -g)
                stamp(ib, ia, -g)
            elif mode == "hold":
                r = self.n + k
                stamp(ia, r, 1.0)
                stamp(ib, r, -1.0)
                stamp(r, ia, 1.0)
                stamp(r, ib, -1.0)
        for ind in self.inds:
            r, ia, ib = self.branch_index[ind.label], self.idx(ind.a), self.idx(ind.b)
            if mode == "hold":
                stamp(r, r, 1.0)
            else:
                stamp(r, ia, 1.0)
                stamp(r, ib, -1.0)
                if mode == "tran":
                    stamp(r, r, -(2.0 if trap else 1.0) * ind.inductance / h)

        lin_r = np.array(rows, dtype=np.int64)
        lin_c = np.array(cols, dtype=np.int64)
        lin_v = np.array(vals, dtype=float)
        A = sp.csr_matrix((lin_v, (lin_r, lin_c)), shape=(n, n))
        if n <= DENSE_MATVEC_MAX:
            A = A.toarray()
        all_r = np.concatenate([lin_r, self._jac_rows])
        all_c = np.concatenate([lin_c, self._jac_cols])
        # column-major keys give CSC ordering directly
        keys = all_c * n + all_r
        uniq, slot = np.unique(keys, return_inverse=True)
        indices = (uniq % n).astype(np.int32)
        counts = np.bincount(uniq // n, minlength=n)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        lin_data = np.bincount(slot[: lin_r.size], weights=lin_v, minlength=uniq.size)
        sys_ = _System(n, A, indices, indptr, lin_data, slot[lin_r.size:])
        self._systems[key] = sys_
        return sys_

    # -- residual and Jacobian ----------------------------------------------
    def _nonlinear(self, x: np.ndarray, t: float, n: int, want_jac: bool, sys_: _System):
        F = np.zeros(n)
        jdata = None
        if self._batch is None:
            return F, (sys_.lin_data if want_jac else None)
        before = self._batch.guard_hits
        try:
            if want_jac:
                vals, jv = self._batch.func(x, t)
            else:
                vals = self._batch.values(x, t)
        except (ValueError, OverflowError, ZeroDivisionError) as err:
            raise SimulationError(f"expression evaluation fault at t={t}: {err}") from err
        self.guard_hits += self._batch.guard_hits - before
        F[: self.n] += np.bincount(self._val_rows, weights=vals[self._val_src] * self._val_sign,
                                   minlength=self.n)
        if want_jac:
            jdata = sys_.lin_data + np.bincount(sys_.nl_slots, weights=jv[self._jac_src] * self._jac_sign,
                                                minlength=sys_.lin_data.size)
        return F, jdata

    def assemble(self, x: np.ndarray, t: float, mode: str, h: float, switches: tuple[bool, ...],
                 rhs: np.ndarray) -> tuple[sp.csc_matrix, np.ndarray]:
        """Jacobian and residual ``F(x) = A x + f_nl(x) - rhs`` at one iterate."""
        sys_ = self._system(mode, h, switches)
        if x.size != sys_.n or rhs.size != sys_.n:
            raise SimulationError(f"dimension mismatch: expected {sys_.n} unknowns, got {x.size}")
        F_nl, jdata = self._nonlinear(x, t, sys_.n, True, sys_)
        F = sys_.A @ x + F_nl - rhs
        J = sp.csc_matrix((jdata, sys_.indices, sys_.indptr), shape=(sys_.n, sys_.n))
        return J, F

    def _newton(self, x0, t, mode, h, switches, rhs, force_factor=False):
        cfg = self.config
        sys_ = self._system(mode, h, switches)
        x = x0.copy()
        F_nl, _ = self._nonlinear(x, t, sys_.n, False, sys_)
        F = sys_.A @ x + F_nl - rhs
        refactor = force_factor or not cfg.reuse_jacobian or sys_.lu is None
        res_prev = math.inf
        for it in range(1, cfg.max_newton_iters + 1):
            if refactor:
                _, jdata = self._nonlinear(x, t, sys_.n, True, sys_)
                J = sp.csc_matrix((jdata, sys_.indices, sys_.indptr), shape=(sys_.n, sys_.n))
                try:
                    sys_.lu = splu(J)
                except RuntimeError as err:
                    raise SingularMatrixError(f"singular MNA matrix at t={t}: {err}") from err
            dx = sys_.lu.solve(-F)
            if not np.isfinite(dx).all():
                raise SingularMatrixError(f"singular MNA matrix at t={t}")
            x += dx
            F_nl, _ = self._nonlinear(x, t, sys_.n, False, sys_)
            F = sys_.A @ x + F_nl - rhs
            res = float(np.abs(F).max()) if F.size else 0.0
            step = float(np.abs(dx).max()) if dx.size else 0.0
            if not math.isfinite(res):
                break
            if res <= cfg.newton_abs_tol and (
                step <= cfg.newton_abs_tol + cfg.newton_rel_tol * float(np.max(np.abs(x)))
                or res <= 1e-3 * cfg.newton_abs_tol
            ):
                return x, it
            # a stale factorization is kept while it still contracts the residual
            refactor = not cfg.reuse_jacobian or res > CHORD_CONTRACTION * res_prev or it >= CHORD_MAX_ITERS
            res_prev = res
        raise ConvergenceError(f"Newton did not converge in {cfg.max_newton_iters} iterations "
                               f"(residual {res:.3e})", t)

    # -- source right-hand sides --------------------------------------------
    def _source_rhs(self, t: float, side: str, n: int) -> np.ndarray:
        rhs = np.zeros(n)
        rhs[: self.n] = self._rhs_const
        for v in self.vsrcs:
            rhs[self.branch_index[v.label]] += v.waveform.value_at(t, side)
        for s in self.isrcs:
            val = s.waveform.value_at(t, side)
            ia, ib = self.idx(s.a), self.idx(s.b)
            if ia >= 0:
                rhs[ia] -= val
            if ib >= 0:
                rhs[ib] += val
        return rhs

    def _vdiff(self, x, d) -> float:
        ia, ib = self.idx(d.a), self.idx(d.b)
        return (x[ia] if ia >= 0 else 0.0) - (x[ib] if ib >= 0 else 0.0)

    def _empty_state(self, t, x) -> SystemState:
        return SystemState(t, x, np.zeros(len(self.caps)), np.zeros(len(self.inds)), self.nv)

    # -- analyses -----------------------------------------------------------
    def dc_operating_point(self, t: float = 0.0, initial_guess: np.ndarray | None = None) -> SystemState:
        """Capacitors open, inductors shorted."""
        sw = self.switch_states(t, "right")
        rhs = self._source_rhs(t, "right", self.n)
        x0 = np.zeros(self.n) if initial_guess is None else np.asarray(initial_guess, dtype=float).copy()
        x, its = self._newton(x0, t, "dc", 0.0, sw, rhs, force_factor=True)
        st = self._empty_state(t, x)
        st.iterations = its
        return st

    def hold_solve(self, t: float, cap_voltages: np.ndarray, ind_currents: np.ndarray,
                   initial_guess: np.ndarray | None = None, side: str = "right") -> SystemState:
        """Solve with capacitor voltages and inductor currents held fixed.

        Used for initial conditions and for re-initialization at events; the
        returned state carries the capacitor currents implied by the rest of
        the circuit.
        """
        sw = self.switch_states(t, side)
        n = self.n + len(self.caps)
        rhs = self._source_rhs(t, side, n)
        rhs[self.n: self.n + len(self.caps)] += cap_voltages
        for ind, i0 in zip(self.inds, ind_currents):
            rhs[self.branch_index[ind.label]] += i0
        x0 = np.zeros(n)
        if initial_guess is not None:
            x0[: self.n] = initial_guess[: self.n]
        x, its = self._newton(x0, t, "hold", 0.0, sw, rhs, force_factor=True)
        st = SystemState(t, x[: self.n].copy(), x[self.n:].copy(),
                         np.array([self._vdiff(x, d) for d in self.inds]), self.nv, its)
        return st

    def initial_conditions(self, t: float = 0.0, initial_guess=None) -> SystemState:
        """Start from device initial conditions (SPICE ``UIC``)."""
        return self.hold_solve(
            t,
            np.array([c.initial_voltage for c in self.caps]),
            np.array([i.initial_current for i in self.inds]),
            initial_guess,
        )

    def cap_voltages(self, x: np.ndarray) -> np.ndarray:
        xe = self._xe
        xe[:-1] = x[: self.n]
        return xe[self._cap_a] - xe[self._cap_b]

    def _scatter_caps(self, rhs: np.ndarray, hist: np.ndarray) -> None:
        np.add.at(rhs, self._cap_a[self._cap_a_live], hist[self._cap_a_live])
        np.subtract.at(rhs, self._cap_b[self._cap_b_live], hist[self._cap_b_live])

    def step(self, state: SystemState, h: float, guess: np.ndarray | None = None) -> SystemState:
        """Advance one implicit step of size ``h`` from a converged state.

        ``guess`` seeds Newton (for example a linear extrapolation); the
        converged result does not depend on it beyond the tolerances.
        """
        cfg = self.config
        t1 = state.time + h
        # switch positions and source values over the step are those left of t1
        sw = self.switch_states(t1, "left")
        rhs = self._source_rhs(t1, "left", self.n)
        trap = cfg.integration_method == "trapezoidal"
        x = state.x
        g = (2.0 if trap else 1.0) * self._cap_c / h
        v0 = self.cap_voltages(x)
        if self.caps:
            self._scatter_caps(rhs, g * v0 + (state.cap_current if trap else 0.0))
        for k, ind in enumerate(self.inds):
            r = self.branch_index[ind.label]
            leq = (2.0 if trap else 1.0) * ind.inductance / h
            rhs[r] -= leq * x[r] + (state.ind_voltage[k] if trap else 0.0)
        x1, its = self._newton(x if guess is None else guess, t1, "tran", h, sw, rhs)
        caps = g * (self.cap_voltages(x1) - v0) - (state.cap_current if trap else 0.0)
        inds = np.array([self._vdiff(x1, d) for d in self.inds])
        return SystemState(t1, x1, caps, inds, self.nv, its)

    def step_with_retry(self, state: SystemState, h: float, guess: np.ndarray | None = None) -> SystemState:
        try:
            return self.step(state, h, guess)
        except (ConvergenceError, SingularMatrixError):
            log.warning("step at t=%.6g failed, retrying with two half steps", state.time)
        try:
            half = self.step(state, h / 2)
            return self.step(half, h / 2)
        except (ConvergenceError, SingularMatrixError) as err:
            raise ConvergenceError(f"step failed after dt/2 retry: {err}", state.time + h, state) from err

    def breakpoints(self, t_stop: float) -> list[float]:
        pts = set()
        for d in self.vsrcs + self.isrcs:
            pts.update(d.waveform.breakpoints())
        for sw in self.switches:
            pts.update(sw.breakpoints())
        pts.update(e.time for e in self.events)
        return sorted(p for p in pts if 0.0 < p <= t_stop)

    def reinitialize(self, state: SystemState) -> SystemState:
        caps = self.cap_voltages(state.x)
        inds = np.array([state.x[self.branch_index[i.label]] for i in self.inds])
        st = self.hold_solve(state.time, caps, inds, state.x, side="right")
        st.iterations = state.iterations
        return st

    def run(self, probes: dict[str, ex.Expr], start: str = "dc", t_stop: float | None = None,
            initial: SystemState | None = None) -> TimeSeries:
        """Fixed-step transient run sampled every ``dt``.

        Breakpoints (switch toggles, source corners) are landed on exactly and
        followed by a consistent re-initialization with capacitor voltages
        and inductor currents held.
        """
        cfg = self.config
        t_stop = cfg.t_stop if t_stop is None else t_stop
        if initial is not None:
            state = initial
        elif start == "dc":
            state = self.dc_operating_point(0.0)
        elif start == "uic":
            state = self.initial_conditions(0.0)
        else:
            raise ValueError("start must be 'dc' or 'uic'")
        self.initial_state = state
        probe_eval = self.compile_probes(probes)
        dt = cfg.dt
        n_steps = int(round(t_stop / dt))
        times = np.arange(n_steps + 1) * dt
        samples = np.empty((n_steps + 1, len(probes)))
        bps = self.breakpoints(t_stop)
        eps = 1e-9 * dt
        bp_k = 0
        while bp_k < len(bps) and bps[bp_k] <= eps:
            bp_k += 1
        samples[0] = probe_eval(state.x, state.time)
        self.newton_iterations = 0
        prev = None  # last accepted state on the current smooth segment
        for k in range(1, n_steps + 1):
            t_target = times[k]
            while True:
                if bp_k < len(bps) and bps[bp_k] < t_target - eps:
                    t_next, at_bp = bps[bp_k], True
                else:
                    t_next = t_target
                    at_bp = bp_k < len(bps) and abs(bps[bp_k] - t_target) <= eps
                h = t_next - state.time
                guess = None
                if prev is not None:
                    guess = state.x + (state.x - prev.x) * (h / (state.time - prev.time))
                prev, state = state, self.step_with_retry(state, h, guess)
                self.newton_iterations += state.iterations
                if at_bp:
                    state.time = t_next
                    state = self.reinitialize(state)
                    bp_k += 1
                    prev = None
                if t_next == t_target:
                    break
            state.time = t_target
            samples[k] = probe_eval(state.x, state.time)
        self.final_state = state
        return TimeSeries(times, {name: samples[:, j].copy() for j, name in enumerate(probes)})

    def compile_probes(self, probes: dict[str, ex.Expr]):
        if not probes:
            return lambda x, t: np.zeros(0)
        batch = ex.compile_batch([self._expand_currents(e) for e in probes.values()], self._resolve)
        return batch.values

    def kcl_residual(self, state: SystemState) -> float:
        """Max KCL/branch residual of an accepted state with its companion currents."""
        sys_ = self._system("hold", 0.0, self.switch_states(state.time, "right"))
        x = np.concatenate([state.x, state.cap_current])
        rhs = self._source_rhs(state.time, "right", sys_.n)
        for k, c in enumerate(self.caps):
            rhs[self.n + k] += self._vdiff(state.x, c)
        for ind, i0 in zip(self.inds, state.x[[self.branch_index[i.label] for i in self.inds]]):
            rhs[self.branch_index[ind.label]] += i0
        F_nl, _ = self._nonlinear(x, state.time, sys_.n, False, sys_)
        F = sys_.A @ x + F_nl - rhs
        return float(np.max(np.abs(F[: self.nv]))) if self.nv else 0.0

    def voltage(self, state: SystemState, node: int) -> float:
        return 0.0 if node == 0 else float(state.x[self.node_index[node]])

    def current(self, state: SystemState, label: str) -> float:
        d = self.netlist.device(label)
        if d.voltage_defined:
            return float(state.x[self.branch_index[label]])
        if isinstance(d, Resistor):
            return self._vdiff(state.x, d) / d.resistance
        if isinstance(d, Capacitor):
            return float(state.cap_current[self.caps.index(d)])
        raise SimulationError(f"current of {label} is not observable")


# -- functional entry points --------------------------------------------------

def assemble_system(netlist: Netlist, state: SystemState, config: SolverConfig, time: float):
    """Transient-mode Jacobian and residual at ``state.x`` for a step ending at ``time``."""
    sim = Simulator(netlist, config)
    h = config.dt
    if state.x.size != sim.n:
        raise SimulationError(f"dimension mismatch: expected {sim.n} unknowns, got {state.x.size}")
    sw = sim.switch_states(time, "left")
    rhs = sim._source_rhs(time, "left", sim.n)
    trap = config.integration_method == "trapezoidal"
    for k, c in enumerate(sim.caps):
        g = (2.0 if trap else 1.0) * c.capacitance / h
        hist = g * sim._vdiff(state.x, c) + (state.cap_current[k] if trap else 0.0)
        ia, ib = sim.idx(c.a), sim.idx(c.b)
        if ia >= 0:
            rhs[ia] += hist
        if ib >= 0:
            rhs[ib] -= hist
    for k, ind in enumerate(sim.inds):
        r = sim.branch_index[ind.label]
        leq = (2.0 if trap else 1.0) * ind.inductance / h
        rhs[r] -= leq * state.x[r] + (state.ind_voltage[k] if trap else 0.0)
    return sim.assemble(state.x, time, "tran", h, sw, rhs)


def solve_dc_operating_point(netlist: Netlist, config: SolverConfig | None = None,
                             initial_guess: np.ndarray | None = None) -> SystemState:
    return Simulator(netlist, config).dc_operating_point(0.0, initial_guess)


def step_transient(netlist: Netlist, state: SystemState, config: SolverConfig) -> SystemState:
    return Simulator(netlist, config).step_with_retry(state, config.dt)


def run_transient(netlist: Netlist, config: SolverConfig, events=(), probes=None,
                  start: str = "dc") -> TimeSeries:
    """Run a transient and sample ``probes`` (name -> expression or node id)."""
    sim = Simulator(netlist, config, list(events))
    return sim.run(normalize_probes(probes or {}), start=start)


def normalize_probes(probes) -> dict[str, ex.Expr]:
    out = {}
    items = probes.items() if isinstance(probes, dict) else ((str(p), p) for p in probes)
    for name, p in items:
        if isinstance(p, int):
            out[name] = ex.V(p)
        elif isinstance(p, str):
            out[name] = ex.parse_expression(p)
        else:
            out[name] = p
    return out
