"""Shared equation layer for the dynamic models.

The functions here are written with the float-or-tree helpers from
:mod:`circuit_tsa.expr`, so the same transcription evaluates numbers (used by
the reference integrator and by initialization) and builds expression trees
(used when compiling B-sources).

Machine: round-rotor sixth-order model, states ``delta, omega, eq1, ed1,
psi1d, psi2q`` (E'q, E'd and the two subtransient flux linkages), stator
algebra with speed-voltage terms at omega = 1, single subtransient
reactance ``X''d`` at the network interface.  Rotation convention: the
q-axis leads the d-axis and ``delta`` is measured from the network real
axis to the q-axis, so ``x_net = (x_d + j x_q) * exp(j (delta - pi/2))``.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, fields, replace

from scipy.optimize import root

from . import expr as ex


class ModelError(ValueError):
    pass


class InfeasibleOperatingPoint(ModelError):
    pass


# -- parameter records --------------------------------------------------------

@dataclass(frozen=True)
class MachineParams:
    """Per-unit on the system base (conversion happens when a case is parsed)."""

    xd: float
    xq: float
    xd1: float
    xq1: float
    xd2: float
    xl: float
    td01: float
    tq01: float
    td02: float
    tq02: float
    h: float
    d: float = 0.0
    rs: float = 0.0
    xq2: float | None = None
    sat_a: float = 0.0
    sat_b: float = 0.0

    def __post_init__(self):
        if self.xq2 is None:
            object.__setattr__(self, "xq2", self.xd2)

    def check(self):
        if not (self.xd >= self.xd1 >= self.xd2 > self.xl >= 0):
            raise ModelError("d-axis reactances must satisfy Xd >= X'd >= X''d > Xl >= 0")
        if not (self.xq >= self.xq1 >= self.xq2 > self.xl):
            raise ModelError("q-axis reactances must satisfy Xq >= X'q >= X''q > Xl")
        if self.xd1 == self.xl or self.xq1 == self.xl:
            raise ModelError("transient reactances must exceed Xl")
        if min(self.td01, self.tq01, self.td02, self.tq02) <= 0:
            raise ModelError("open-circuit time constants must be positive")
        if self.h <= 0:
            raise ModelError("inertia H must be positive")
        if self.rs < 0 or self.sat_b < 0:
            raise ModelError("Rs and saturation B must be non-negative")
        return self

    @property
    def x2(self) -> float:
        """Reactance of the Norton interface (X''q is taken equal to X''d)."""
        return self.xd2

    def scaled(self, z_factor: float, h_factor: float) -> "MachineParams":
        """Change of base: impedances times ``z_factor``, H and D times ``h_factor``."""
        z = {f: getattr(self, f) * z_factor for f in ("xd", "xq", "xd1", "xq1", "xd2", "xl", "rs", "xq2")}
        return replace(self, h=self.h * h_factor, d=self.d * h_factor, **z)


@dataclass(frozen=True)
class ExciterParams:
    """IEEE type 1 exciter."""

    ka: float
    ta: float
    ke: float
    te: float
    kf: float
    tf: float
    vrmax: float
    vrmin: float
    tr: float = 0.0
    sat_a: float = 0.0
    sat_b: float = 0.0
    # "non_windup": the regulator output is clamped while its state keeps integrating
    # "anti_windup": the regulator state itself is held inside the limits
    limiter: str = "non_windup"

    def check(self):
        if not self.vrmin < self.vrmax:
            raise ModelError("exciter requires VRmin < VRmax")
        if min(self.ta, self.te, self.tf) <= 0 or self.tr < 0:
            raise ModelError("exciter time constants TA, TE, TF must be positive and TR >= 0")
        if self.ka <= 0:
            raise ModelError("exciter gain KA must be positive")
        if self.limiter not in ("non_windup", "anti_windup"):
            raise ModelError("limiter must be 'non_windup' or 'anti_windup'")
        return self


@dataclass(frozen=True)
class GovernorParams:
    """BPA GG speed governor with reheat-type output filter.

    Signal chain: ``K*dw`` through ``(1+s T2)/(1+s T1)``, plus ``P_Mref``,
    limited to ``[pmin, pmax]``, then ``1/(1+s T3)``, ``1/(1+s T4)`` and
    ``(1+s F T5)/(1+s T5)``.  With ``f_channel="speed"`` the last stage is
    dropped and ``F*dw`` is added at the summing junction instead.
    """

    k: float
    t1: float
    t2: float
    t3: float
    t4: float
    t5: float
    f: float
    pmax: float
    pmin: float = 0.0
    f_channel: str = "reheat"

    def check(self):
        if self.pmax <= 0 or self.pmin >= self.pmax:
            raise ModelError("governor requires Pmax > 0 and Pmin < Pmax")
        if min(self.t1, self.t3, self.t4, self.t5) <= 0 or self.t2 < 0:
            raise ModelError("governor denominators T1, T3, T4, T5 must be positive")
        if self.f_channel not in ("reheat", "speed"):
            raise ModelError("f_channel must be 'reheat' or 'speed'")
        return self

    def scaled(self, p_factor: float) -> "GovernorParams":
        # K maps p.u. speed to p.u. power, so it scales with the power base too
        return replace(self, k=self.k * p_factor, pmax=self.pmax * p_factor, pmin=self.pmin * p_factor)


def params_to_dict(p) -> dict:
    return {f.name: getattr(p, f.name) for f in fields(p)}


# -- elementary functions -------------------------------------------------------

def saturation_quadratic(e, a: float, b: float):
    """SE(E) = B (E - A)^2 / E for E > A, else 0."""
    if b == 0.0:
        return 0.0 if not isinstance(e, ex.Expr) else ex.Const(0.0)
    excess = ex.maximum(e - a, 0.0)
    if isinstance(e, ex.Expr):
        return b * excess * excess / e
    return b * excess * excess / e if excess > 0.0 else 0.0


def rotate_to_network(xd, xq, delta):
    s, c = ex.sin(delta), ex.cos(delta)
    return xd * s + xq * c, xq * s - xd * c


def rotate_to_machine(xr, xi, delta):
    s, c = ex.sin(delta), ex.cos(delta)
    return xr * s - xi * c, xr * c + xi * s


def rotate_dq_network(x1, x2, delta, direction: str = "forward"):
    """Forward maps (d, q) to (real, imag); inverse maps back."""
    if direction == "forward":
        return rotate_to_network(x1, x2, delta)
    if direction == "inverse":
        return rotate_to_machine(x1, x2, delta)
    raise ValueError("direction must be 'forward' or 'inverse'")


# -- machine equations ----------------------------------------------------------

STATE_NAMES = ("delta", "omega", "eq1", "ed1", "psi1d", "psi2q")


def subtransient(p: MachineParams, eq1, ed1, psi1d, psi2q):
    """(E''d, E''q) from the flux states."""
    kd = (p.xd2 - p.xl) / (p.xd1 - p.xl)
    kq = (p.xq2 - p.xl) / (p.xq1 - p.xl)
    ed2 = kq * ed1 - (1.0 - kq) * psi2q
    eq2 = kd * eq1 + (1.0 - kd) * psi1d
    return ed2, eq2


def norton_admittance(p: MachineParams) -> complex:
    return 1.0 / complex(p.rs, p.x2)


def norton_current(p: MachineParams, er, ei, vr, vi):
    """Injection (E'' - V) / (Rs + j X'') in the network frame."""
    y = norton_admittance(p)
    g, b = y.real, y.imag
    dr, di = er - vr, ei - vi
    return g * dr - b * di, b * dr + g * di


def electrical_torque(ed2, eq2, id_, iq):
    return ed2 * id_ + eq2 * iq


def machine_rates(p: MachineParams, state, id_, iq, efd, pm, omega_base: float, te=None, sub=None):
    """Right-hand sides in integrator form ``C * dx/dt = f``.

    Returns ``(caps, f)``, two tuples ordered as :data:`STATE_NAMES`.
    ``te`` and ``sub`` (the pair E''d, E''q) may be supplied when already
    available as signals.
    """
    delta, omega, eq1, ed1, psi1d, psi2q = state
    ed2, eq2 = sub if sub is not None else subtransient(p, eq1, ed1, psi1d, psi2q)
    if te is None:
        te = electrical_torque(ed2, eq2, id_, iq)
    dd = p.xd1 - p.xl
    dq = p.xq1 - p.xl
    sat_d, sat_q = machine_saturation(p, ed2, eq2)
    f_delta = omega - 1.0
    f_omega = pm - te - p.d * (omega - 1.0)
    f_eq1 = efd - eq1 - (p.xd - p.xd1) * (id_ - (p.xd1 - p.xd2) / (dd * dd) * (psi1d + dd * id_ - eq1)) - sat_d
    f_psi1d = -psi1d + eq1 - dd * id_
    f_ed1 = -ed1 + (p.xq - p.xq1) * (iq - (p.xq1 - p.xq2) / (dq * dq) * (psi2q + dq * iq + ed1)) - sat_q
    f_psi2q = -psi2q - ed1 - dq * iq
    caps = (1.0 / omega_base, 2.0 * p.h, p.td01, p.tq01, p.td02, p.tq02)
    return caps, (f_delta, f_omega, f_eq1, f_ed1, f_psi1d, f_psi2q)


def machine_saturation(p: MachineParams, ed2, eq2):
    """Saturation terms on the subtransient flux magnitude (zero without data)."""
    if p.sat_b == 0.0:
        zero = ex.Const(0.0) if isinstance(ed2, ex.Expr) or isinstance(eq2, ex.Expr) else 0.0
        return zero, zero
    psi = ex.sqrt(ed2 * ed2 + eq2 * eq2)
    se = saturation_quadratic(psi, p.sat_a, p.sat_b)
    return se * eq2, se * (p.xq - p.xl) / (p.xd - p.xl) * ed2


def machine_terminal(p: MachineParams, state, vr, vi):
    """Network-frame Norton current and dq quantities at given terminal voltage."""
    delta = state[0]
    ed2, eq2 = subtransient(p, *state[2:])
    er, ei = rotate_to_network(ed2, eq2, delta)
    ir, ii = norton_current(p, er, ei, vr, vi)
    id_, iq = rotate_to_machine(ir, ii, delta)
    return ir, ii, id_, iq


@dataclass(frozen=True)
class MachineInit:
    state: tuple[float, ...]
    efd: float
    pm: float
    id: float
    iq: float
    vt: float


def initialize_machine(p: MachineParams, v: complex, s: complex, omega_base: float = 2 * math.pi * 60) -> MachineInit:
    """Steady state for terminal voltage ``v`` and injected power ``s`` (p.u.)."""
    if abs(v) == 0:
        raise InfeasibleOperatingPoint("terminal voltage is zero")
    i = (s / v).conjugate()
    delta = cmath.phase(v + complex(p.rs, p.xq) * i)
    vd, vq = rotate_to_machine(v.real, v.imag, delta)
    id_, iq = rotate_to_machine(i.real, i.imag, delta)
    eq1 = vq + p.rs * iq + p.xd1 * id_
    efd = eq1 + (p.xd - p.xd1) * id_
    psi1d = eq1 - (p.xd1 - p.xl) * id_
    ed1 = (p.xq - p.xq1) * iq
    psi2q = -ed1 - (p.xq1 - p.xl) * iq
    state = (delta, 1.0, eq1, ed1, psi1d, psi2q)
    if p.sat_b != 0.0:
        state, efd = _refine_saturated(p, state, efd, v, i, omega_base)
        _, _, id_, iq = machine_terminal(p, state, v.real, v.imag)
    ed2, eq2 = subtransient(p, *state[2:])
    pm = electrical_torque(ed2, eq2, id_, iq)
    if efd < 0:
        raise InfeasibleOperatingPoint(f"required field voltage is negative ({efd:.4f})")
    return MachineInit(tuple(float(x) for x in state), float(efd), float(pm), float(id_), float(iq), abs(v))


def _refine_saturated(p, state, efd, v, i, omega_base):
    # unknowns: delta, eq1, ed1, psi1d, psi2q, efd; conditions: the four flux
    # rates vanish and the Norton current equals the power-flow current
    def residual(z):
        delta, eq1, ed1, psi1d, psi2q, e_fd = z
        st = (delta, 1.0, eq1, ed1, psi1d, psi2q)
        ir, ii, id_, iq = machine_terminal(p, st, v.real, v.imag)
        _, f = machine_rates(p, st, id_, iq, e_fd, 0.0, omega_base)
        return [f[2], f[3], f[4], f[5], ir - i.real, ii - i.imag]

    z0 = [state[0], state[2], state[3], state[4], state[5], efd]
    sol = root(residual, z0, method="hybr", tol=1e-13)
    # judge by the residual: hybr reports slow progress once it is already at round-off
    if max(abs(r) for r in residual(sol.x)) > 1e-9:
        raise InfeasibleOperatingPoint(f"saturated machine initialization failed: {sol.message}")
    delta, eq1, ed1, psi1d, psi2q, e_fd = sol.x
    return (delta, 1.0, eq1, ed1, psi1d, psi2q), e_fd


# -- controllers ------------------------------------------------------------------

@dataclass(frozen=True)
class ExciterInit:
    vref: float
    vr: float
    vs: float
    efd: float


def initialize_exciter(p: ExciterParams, efd: float, vt: float) -> ExciterInit:
    vr = (p.ke + saturation_quadratic(efd, p.sat_a, p.sat_b)) * efd
    if not p.vrmin <= vr <= p.vrmax:
        raise InfeasibleOperatingPoint(f"exciter output {vr:.4f} outside [{p.vrmin}, {p.vrmax}]")
    return ExciterInit(vref=vt + vr / p.ka, vr=vr, vs=vt, efd=efd)


def exciter_rates(p: ExciterParams, vref, vt, vs, xa, efd, xf):
    """Direct ODE form of the exciter (states: sensed voltage, regulator, Efd, rate-feedback lag).

    Returns ``(rates, vr)``.  Used by the reference integrator.
    """
    vf = p.kf / p.tf * (efd - xf)
    err = vref - (vs if p.tr > 0 else vt) - vf
    dvs = (vt - vs) / p.tr if p.tr > 0 else 0.0
    dxa = (p.ka * err - xa) / p.ta
    if p.limiter == "anti_windup":
        dxa = ex.minimum(ex.maximum(dxa, ANTI_WINDUP_GAIN * (p.vrmin - xa)), ANTI_WINDUP_GAIN * (p.vrmax - xa))
    vr = ex.limit(xa, p.vrmin, p.vrmax)
    defd = (vr - p.ke * efd - saturation_quadratic(efd, p.sat_a, p.sat_b) * efd) / p.te
    dxf = (efd - xf) / p.tf
    return (dvs, dxa, defd, dxf), vr


# stiffness of the soft state limit in the anti-windup regulator, 1/s
ANTI_WINDUP_GAIN = 1000.0


def governor_rates(p: GovernorParams, pmref, omega, x1, x3, x4, x5):
    """Direct ODE form of the governor; returns ``(rates, pm, limited_order)``."""
    dw = 1.0 - omega
    u = p.k * dw
    y1 = x1 + p.t2 / p.t1 * (u - x1)
    order = y1 + pmref + (p.f * dw if p.f_channel == "speed" else 0.0)
    lim = ex.limit(order, p.pmin, p.pmax)
    d1 = (u - x1) / p.t1
    d3 = (lim - x3) / p.t3
    d4 = (x3 - x4) / p.t4
    if p.f_channel == "reheat":
        d5 = (x4 - x5) / p.t5
        pm = x5 + p.f * (x4 - x5)
    else:
        d5 = 0.0 * x5
        pm = x4
    return (d1, d3, d4, d5), pm, lim
