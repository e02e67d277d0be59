"""Control blocks as circuit fragments.

Each constructor adds devices to a shared :class:`Netlist`, allocating fresh
internal nodes from it, and returns a :class:`Block` naming the output node.
Inputs are node indices of already-built signals.  Signals are voltages
referenced to ground.

* operators: a single B voltage source evaluating the gain, weighted sum
  or product;
* low-pass ``K/(1+sT)``: gain source, series ``R = 1`` and ``C = T`` to
  ground;
* high-pass ``K sT/(1+sT)``: ``K (in - lowpass(in))``;
* lead-lag ``(1+sT1)/(1+sT2)``: low-pass plus a high-pass scaled by
  ``T1/T2``, summed;
* integrator: B current source into ``C = tau``;
* limiter and saturation: B voltage sources.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import expr as ex
from .models import saturation_quadratic
from .netlist import Capacitor, DependentCurrent, DependentVoltage, Netlist, Resistor


class BlockError(ValueError):
    pass


# leakage across integrator capacitors so every node keeps a DC path
INTEGRATOR_LEAK_OHMS = 1e12


@dataclass
class Block:
    name: str
    output: int
    inputs: dict[str, int] = field(default_factory=dict)
    params: dict[str, float] = field(default_factory=dict)
    devices: list[str] = field(default_factory=list)
    # capacitor label -> output node whose value defines its initial condition
    states: dict[str, int] = field(default_factory=dict)

    @property
    def out(self) -> ex.Expr:
        return ex.V(self.output)


def _signal(x) -> ex.Expr:
    """Node index or expression to expression."""
    if isinstance(x, ex.Expr):
        return x
    if isinstance(x, Block):
        return x.out
    return ex.V(int(x))


def _node_of(x) -> int:
    if isinstance(x, Block):
        return x.output
    return int(x)


def make_operator(netlist: Netlist, name: str, kind: str, inputs, coeffs=None) -> Block:
    """``gain``: K*x;  ``adder``: sum K_n x_n;  ``product``: prod x_n."""
    inputs = list(inputs)
    if not inputs:
        raise BlockError(f"{name}: operator needs at least one input")
    sig = [_signal(x) for x in inputs]
    if kind == "gain":
        if len(sig) != 1:
            raise BlockError(f"{name}: gain takes exactly one input")
        k = 1.0 if coeffs is None else float(coeffs if not isinstance(coeffs, (list, tuple)) else coeffs[0])
        e = ex.mul(k, sig[0])
        params = {"K": k}
    elif kind == "adder":
        ks = [1.0] * len(sig) if coeffs is None else [float(c) for c in coeffs]
        if len(ks) != len(sig):
            raise BlockError(f"{name}: {len(sig)} inputs but {len(ks)} coefficients")
        e = ex.mul(ks[0], sig[0])
        for k, s in zip(ks[1:], sig[1:]):
            e = ex.add(e, ex.mul(k, s))
        params = {f"K{n + 1}": k for n, k in enumerate(ks)}
    elif kind == "product":
        if len(sig) < 2:
            raise BlockError(f"{name}: product needs at least two inputs")
        e = sig[0]
        for s in sig[1:]:
            e = ex.mul(e, s)
        params = {}
    else:
        raise BlockError(f"{name}: unknown operator kind {kind!r}")
    out = netlist.node(f"{name}.out")
    netlist.add(DependentVoltage(f"{name}.B", out, 0, e))
    ins = {f"in{n + 1}": _node_of(x) for n, x in enumerate(inputs) if not isinstance(x, ex.Expr)}
    return Block(name, out, ins, params, [f"{name}.B"])


def make_expression(netlist: Netlist, name: str, e: ex.Expr) -> Block:
    """Output node driven by an arbitrary expression (a bare B voltage source)."""
    out = netlist.node(f"{name}.out")
    netlist.add(DependentVoltage(f"{name}.B", out, 0, e))
    return Block(name, out, {}, {}, [f"{name}.B"])


def make_low_pass(netlist: Netlist, name: str, inp, T: float, K: float = 1.0, initial: float = 0.0) -> Block:
    """``K/(1+sT)`` realized as gain source, 1 ohm and ``C = T``.

    ``initial`` is the capacitor (output) voltage used by a held-initial-
    condition start; a DC operating point ignores it.
    """
    if not T > 0:
        raise BlockError(f"{name}: time constant must be positive")
    drive = netlist.node(f"{name}.drive")
    out = netlist.node(f"{name}.out")
    netlist.add(DependentVoltage(f"{name}.B", drive, 0, ex.mul(K, _signal(inp))))
    netlist.add(Resistor(f"{name}.R", drive, out, 1.0))
    netlist.add(Capacitor(f"{name}.C", out, 0, T, initial))
    ins = {} if isinstance(inp, ex.Expr) else {"in": _node_of(inp)}
    return Block(name, out, ins, {"T": T, "K": K}, [f"{name}.B", f"{name}.R", f"{name}.C"], {f"{name}.C": out})


def make_high_pass(netlist: Netlist, name: str, inp, T: float, K: float = 1.0, initial_input: float = 0.0) -> Block:
    """``K sT/(1+sT)`` as ``K (in - lowpass(in))``; ``initial_input`` seeds the inner low-pass."""
    if not T > 0:
        raise BlockError(f"{name}: time constant must be positive")
    lp = make_low_pass(netlist, f"{name}.lp", inp, T, 1.0, initial_input)
    out = netlist.node(f"{name}.out")
    netlist.add(DependentVoltage(f"{name}.B", out, 0, ex.mul(K, ex.sub(_signal(inp), lp.out))))
    ins = {} if isinstance(inp, ex.Expr) else {"in": _node_of(inp)}
    return Block(name, out, ins, {"T": T, "K": K}, lp.devices + [f"{name}.B"], lp.states)


def make_lead_lag(netlist: Netlist, name: str, inp, T1: float, T2: float, initial_input: float = 0.0) -> Block:
    """``(1+sT1)/(1+sT2)`` as low-pass channel plus high-pass channel scaled by ``T1/T2``."""
    if not T2 > 0:
        raise BlockError(f"{name}: T2 must be positive")
    if T1 < 0:
        raise BlockError(f"{name}: T1 must be non-negative")
    lp = make_low_pass(netlist, f"{name}.lp", inp, T2, 1.0, initial_input)
    channels = [lp]
    coeffs = [1.0]
    devices = list(lp.devices)
    states = dict(lp.states)
    if T1 > 0:
        hp = make_high_pass(netlist, f"{name}.hp", inp, T2, T1 / T2, initial_input)
        channels.append(hp)
        coeffs.append(1.0)
        devices += hp.devices
        states.update(hp.states)
    add = make_operator(netlist, f"{name}.sum", "adder", channels, coeffs)
    ins = {} if isinstance(inp, ex.Expr) else {"in": _node_of(inp)}
    return Block(name, add.output, ins, {"T1": T1, "T2": T2}, devices + add.devices, states)


def make_integrator(netlist: Netlist, name: str, tau: float, integrand, initial: float = 0.0) -> Block:
    """``tau dVo/dt = f``: B current ``f`` into ``C = tau``.

    ``integrand`` may be a callable taking the output signal, for feedback
    terms such as ``-K V_o``.
    """
    if not tau > 0:
        raise BlockError(f"{name}: tau must be positive")
    out = netlist.node(f"{name}.out")
    if callable(integrand):
        integrand = integrand(ex.V(out))
    netlist.add(DependentCurrent(f"{name}.B", 0, out, integrand))
    netlist.add(Capacitor(f"{name}.C", out, 0, tau, initial))
    netlist.add(Resistor(f"{name}.Rleak", out, 0, INTEGRATOR_LEAK_OHMS))
    return Block(name, out, {}, {"tau": tau}, [f"{name}.B", f"{name}.C", f"{name}.Rleak"], {f"{name}.C": out})


def make_limiter(netlist: Netlist, name: str, inp, lo: float, hi: float) -> Block:
    if not lo < hi:
        raise BlockError(f"{name}: limiter requires lo < hi")
    out = netlist.node(f"{name}.out")
    netlist.add(DependentVoltage(f"{name}.B", out, 0, ex.clamp(_signal(inp), lo, hi)))
    ins = {} if isinstance(inp, ex.Expr) else {"in": _node_of(inp)}
    return Block(name, out, ins, {"lo": lo, "hi": hi}, [f"{name}.B"])


def make_saturation(netlist: Netlist, name: str, inp, A: float, B: float) -> Block:
    """Output ``SE(V) V`` with ``SE(E) = B (E - A)^2 / E`` above ``A``."""
    if B < 0:
        raise BlockError(f"{name}: saturation coefficient B must be non-negative")
    x = _signal(inp)
    out = netlist.node(f"{name}.out")
    netlist.add(DependentVoltage(f"{name}.B", out, 0, saturation_output(x, A, B)))
    ins = {} if isinstance(inp, ex.Expr) else {"in": _node_of(inp)}
    return Block(name, out, ins, {"A": A, "B": B}, [f"{name}.B"])


def saturation_output(x, A: float, B: float):
    """``SE(x) * x``, simplified to ``B max(x - A, 0)^2`` to avoid dividing by ``x``."""
    if B == 0:
        return ex.Const(0.0) if isinstance(x, ex.Expr) else 0.0
    excess = ex.maximum(x - A, 0.0)
    return B * excess * excess


def step_response(kind: str, t: float, **p) -> float:
    """Closed-form unit-step responses used by tests and documentation."""
    if kind == "low_pass":
        return p.get("K", 1.0) * (1.0 - math.exp(-t / p["T"]))
    if kind == "high_pass":
        return p.get("K", 1.0) * math.exp(-t / p["T"])
    if kind == "lead_lag":
        return 1.0 + (p["T1"] / p["T2"] - 1.0) * math.exp(-t / p["T2"])
    raise ValueError(kind)


__all__ = [
    "Block", "BlockError", "make_operator", "make_expression", "make_low_pass", "make_high_pass",
    "make_lead_lag", "make_integrator", "make_limiter", "make_saturation", "saturation_output",
    "saturation_quadratic", "step_response",
]
