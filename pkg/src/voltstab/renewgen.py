"""Steady-state injection models for condensers, induction generators and PV plants.

Each machine kind maps to one of two power-flow behaviours: a voltage
controlled bus (:class:`PVBus`) or a fixed complex injection
(:class:`PQInjection`). The squirrel-cage generator is the only kind whose
injection depends on the solved terminal voltage.

Induction-machine sign convention
---------------------------------
The stator equations below carry ``+R_s i_s``, i.e. stator currents are
positive *out of* the machine (generator convention) while rotor currents
are positive *into* the rotor. Flux linkages use the usual relations written
with the motor-convention stator current ``-i_s``::

    psi_s = -(x_ls + x_m) i_s + x_m i_r
    psi_r = -x_m i_s + (x_lr + x_m) i_r

Slip is ``(w_s - w_r) / w_s``, negative while generating. All quantities are
per-unit on the machine rating with ``w_s = 1``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .netmodel import BusKind, Machine, MachineKind, NetworkCase


class InfeasibleDispatchError(ValueError):
    def __init__(self, p_target: float, p_max: float):
        self.p_target = p_target
        self.p_max = p_max
        super().__init__(f"requested {p_target:.6g} pu exceeds pull-out power {p_max:.6g} pu")


@dataclass(frozen=True)
class PVBus:
    p_set: float
    v_set: float
    q_min: float
    q_max: float


@dataclass(frozen=True)
class PQInjection:
    p: float
    q: float


@dataclass(frozen=True)
class BusModelSpec:
    bus: int
    mode: PVBus | PQInjection
    source_kind: MachineKind


@dataclass(frozen=True)
class SCIGParams:
    r_s: float = 0.01
    r_r: float = 0.01
    x_ls: float = 0.1
    x_lr: float = 0.1
    x_m: float = 3.5
    rating: float = 60.0
    b_cap: float | None = None  # None: size for zero no-load draw at 1.0 pu

    def __post_init__(self):
        for name in ("r_s", "r_r", "x_ls", "x_lr", "x_m"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.b_cap is not None and self.b_cap < 0:
            raise ValueError("b_cap must be non-negative")

    @classmethod
    def from_machine(cls, machine: Machine) -> "SCIGParams":
        values = {k: v for k, v in machine.param_dict.items() if k in _SCIG_FIELDS}
        return cls(**{"rating": machine.rating, **values})

    @property
    def capacitor(self) -> float:
        return self.b_cap if self.b_cap is not None else size_capacitor(self)


_SCIG_FIELDS = {f.name for f in dataclasses.fields(SCIGParams)}


@dataclass(frozen=True)
class SCIGState:
    slip: float
    psi_ds: float
    psi_qs: float
    psi_dr: float
    psi_qr: float
    i_ds: float
    i_qs: float
    i_dr: float
    i_qr: float
    u_ds: float
    u_qs: float
    p_grid: float
    q_grid: float
    q_machine: float

    def residuals(self, params: SCIGParams) -> np.ndarray:
        return flux_derivatives(self, params)


@dataclass(frozen=True)
class DFIGParams:
    r_s: float = 0.01
    x_prime: float = 0.2
    q_min: float = 0.0
    q_max: float = 0.0
    rating: float = 60.0

    def __post_init__(self):
        if self.x_prime <= 0:
            raise ValueError("x_prime must be positive")
        if self.q_min > self.q_max:
            raise ValueError("q_min must not exceed q_max")


@dataclass(frozen=True)
class DFIGOperatingPoint:
    v_ds: float
    v_qs: float
    i_ds: float
    i_qs: float
    e_d: float
    e_q: float
    p_w: float
    q_w: float
    slip: float


def pf_q_limits(p: float, power_factor: float = 0.95) -> tuple[float, float]:
    """Symmetric reactive range allowed at active power ``p`` and the given power factor."""
    q = abs(p) * math.tan(math.acos(power_factor))
    return -q, q


# ---------------------------------------------------------------------------
# Synchronous condensers and voltage-controlling plants

def _require(machine: Machine, kind: MachineKind) -> None:
    if machine.kind is not kind:
        raise TypeError(f"expected a {kind.value} machine, got {machine.kind.value}")


def sc_bus_model(machine: Machine) -> BusModelSpec:
    _require(machine, MachineKind.SYNC_CONDENSER)
    return BusModelSpec(machine.bus, PVBus(0.0, machine.v_set, machine.q_min, machine.q_max),
                        machine.kind)


def dfig_bus_model(machine: Machine) -> BusModelSpec:
    _require(machine, MachineKind.DFIG)
    return BusModelSpec(machine.bus, PVBus(machine.p_set, machine.v_set, machine.q_min,
                                           machine.q_max), machine.kind)


def solar_pv_bus_model(machine: Machine) -> BusModelSpec:
    _require(machine, MachineKind.SOLAR_PV)
    return BusModelSpec(machine.bus, PVBus(machine.p_set, machine.v_set, machine.q_min,
                                           machine.q_max), machine.kind)


def sync_gen_bus_model(machine: Machine) -> BusModelSpec:
    _require(machine, MachineKind.SYNC_GEN)
    return BusModelSpec(machine.bus, PVBus(machine.p_set, machine.v_set, machine.q_min,
                                           machine.q_max), machine.kind)


def scig_bus_model(machine: Machine, params: SCIGParams | None = None,
                   v_estimate: float = 1.0) -> BusModelSpec:
    """Fixed (P, Q) injection for a squirrel-cage generator at the estimated terminal voltage.

    Output is in MW/MVar. The power flow re-evaluates this against the solved
    voltage until the pair is self-consistent.
    """
    _require(machine, MachineKind.SCIG)
    params = params or SCIGParams.from_machine(machine)
    state = scig_equilibrium(v_estimate, machine.p_set / params.rating, params)
    return BusModelSpec(machine.bus, PQInjection(machine.p_set, state.q_grid * params.rating),
                        machine.kind)


def bus_model(machine: Machine, v_estimate: float = 1.0) -> BusModelSpec:
    """Dispatch on machine kind; total over :class:`MachineKind`."""
    if machine.kind is MachineKind.SCIG:
        return scig_bus_model(machine, v_estimate=v_estimate)
    return _PV_MODELS[machine.kind](machine)


_PV_MODELS = {
    MachineKind.SYNC_GEN: sync_gen_bus_model,
    MachineKind.SYNC_CONDENSER: sc_bus_model,
    MachineKind.DFIG: dfig_bus_model,
    MachineKind.SOLAR_PV: solar_pv_bus_model,
}


# ---------------------------------------------------------------------------
# Squirrel-cage induction generator

def _currents(slip: float, v: float, p: SCIGParams) -> np.ndarray:
    """Solve the zero-derivative stator/rotor equations for (i_ds, i_qs, i_dr, i_qr).

    Terminal voltage is aligned with the d axis; rotor windings are shorted.
    """
    xs, xr, xm = p.x_ls + p.x_m, p.x_lr + p.x_m, p.x_m
    # rows: d-stator, q-stator, d-rotor, q-rotor; each is the residual with fluxes
    # substituted, written as A @ i = rhs
    a = np.array([
        [p.r_s, -xs, 0.0, xm],
        [xs, p.r_s, -xm, 0.0],
        [0.0, -slip * xm, -p.r_r, slip * xr],
        [slip * xm, 0.0, -slip * xr, -p.r_r],
    ])
    rhs = np.array([-v, 0.0, 0.0, 0.0])
    return np.linalg.solve(a, rhs)


def _state(slip: float, v: float, p: SCIGParams) -> SCIGState:
    i_ds, i_qs, i_dr, i_qr = _currents(slip, v, p)
    xs, xr, xm = p.x_ls + p.x_m, p.x_lr + p.x_m, p.x_m
    psi_ds = -xs * i_ds + xm * i_dr
    psi_qs = -xs * i_qs + xm * i_qr
    psi_dr = -xm * i_ds + xr * i_dr
    psi_qr = -xm * i_qs + xr * i_qr
    p_out = v * i_ds
    q_mach = -v * i_qs
    values = (psi_ds, psi_qs, psi_dr, psi_qr, i_ds, i_qs, i_dr, i_qr, v, 0.0,
              p_out, q_mach + p.capacitor * v * v, q_mach)
    return SCIGState(float(slip), *map(float, values))


def flux_derivatives(state: SCIGState, p: SCIGParams, w_s: float = 1.0) -> np.ndarray:
    """Right-hand sides of the four flux equations; all zero at equilibrium."""
    s = state
    return np.array([
        s.u_ds + w_s * s.psi_qs + p.r_s * s.i_ds,
        s.u_qs - w_s * s.psi_ds + p.r_s * s.i_qs,
        0.0 + s.slip * w_s * s.psi_qr - p.r_r * s.i_dr,
        0.0 - s.slip * w_s * s.psi_dr - p.r_r * s.i_qr,
    ])


def electrical_power(slip: float, v: float, params: SCIGParams) -> float:
    """Active power delivered to the grid at the given slip (machine pu)."""
    i_ds = _currents(slip, v, params)[0]
    return v * i_ds


def size_capacitor(params: SCIGParams) -> float:
    """Capacitor susceptance cancelling the no-load reactive draw at 1.0 pu voltage."""
    p = dataclasses.replace(params, b_cap=0.0)
    return -scig_equilibrium(1.0, 0.0, p).q_machine


def pull_out(v: float, params: SCIGParams) -> tuple[float, float]:
    """Return (slip, power) at the generating pull-out point."""
    res = minimize_scalar(lambda s: -electrical_power(s, v, params), bounds=(-2.0, 0.0),
                          method="bounded", options={"xatol": 1e-12})
    return float(res.x), -float(res.fun)


def scig_equilibrium(v_terminal: float, p_target: float, params: SCIGParams) -> SCIGState:
    """Steady state delivering ``p_target`` (machine pu) at terminal voltage ``v_terminal``.

    The generating slip lies between the pull-out slip and zero, where the
    delivered power is monotone in slip, so a bracketing root finder is used.
    """
    if p_target < 0:
        raise ValueError("p_target must be non-negative")
    s_po, p_max = pull_out(v_terminal, params)
    if p_target > p_max:
        raise InfeasibleDispatchError(p_target, p_max)
    # at zero slip the stator copper loss makes delivered power slightly negative
    f = lambda s: electrical_power(s, v_terminal, params) - p_target
    slip = brentq(f, s_po, 0.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return _state(slip, v_terminal, params)


# ---------------------------------------------------------------------------
# Doubly-fed induction generator

def dfig_algebraic_state(v_ds: float, v_qs: float, i_ds: float, i_qs: float, slip: float,
                         params: DFIGParams, v_dr: float = 0.0, v_qr: float = 0.0,
                         i_dr: float = 0.0, i_qr: float = 0.0) -> DFIGOperatingPoint:
    """Internal voltage and grid powers from the stator algebraic equations."""
    e_d = v_ds + params.r_s * i_ds - params.x_prime * i_qs
    e_q = v_qs + params.r_s * i_qs + params.x_prime * i_ds
    p_w = v_ds * i_ds + v_qs * i_qs - v_dr * i_dr - v_qr * i_qr
    q_w = v_qs * i_ds - v_ds * i_qs
    return DFIGOperatingPoint(v_ds, v_qs, i_ds, i_qs, e_d, e_q, p_w, q_w, slip)


def dfig_stator_voltage(e_d: float, e_q: float, i_ds: float, i_qs: float,
                        params: DFIGParams) -> tuple[float, float]:
    v_ds = -params.r_s * i_ds + params.x_prime * i_qs + e_d
    v_qs = -params.r_s * i_qs - params.x_prime * i_ds + e_q
    return v_ds, v_qs


# ---------------------------------------------------------------------------
# Scenario construction

RENEWABLE_KINDS = (MachineKind.SCIG, MachineKind.DFIG, MachineKind.SOLAR_PV)


def substitute_renewable(case: NetworkCase, kind: MachineKind | str, bus: int = 2,
                         rating: float = 60.0, v_set: float = 1.0,
                         power_factor: float = 0.95) -> NetworkCase:
    """Replace the synchronous generator at ``bus`` with one renewable plant.

    The plant is dispatched at its rating. DFIG and PV plants regulate voltage
    inside a power-factor derived reactive range; the SCIG runs as a
    voltage-dependent PQ injection and the bus loses voltage control.
    """
    kind = MachineKind(kind)
    if kind not in RENEWABLE_KINDS:
        raise ValueError(f"{kind.value} is not a renewable plant kind")
    if bus == case.slack_bus:
        raise ValueError("the slack machine cannot be replaced")
    q_min, q_max = pf_q_limits(rating, power_factor)
    if kind is MachineKind.SCIG:
        q_min = q_max = 0.0
    plant = Machine(bus, kind, rating, v_set, q_min, q_max, rating)
    machines = [m for m in case.machines
                if not (m.bus == bus and m.kind is MachineKind.SYNC_GEN)] + [plant]
    machines.sort(key=lambda m: m.bus)
    new_kind = BusKind.PQ if kind is MachineKind.SCIG else BusKind.PV
    if new_kind is BusKind.PQ and any(m.bus == bus and m is not plant and m.in_service
                                      and m.kind is not MachineKind.SCIG for m in machines):
        new_kind = BusKind.PV
    buses = tuple(dataclasses.replace(b, kind=new_kind,
                                      v_setpoint=v_set if new_kind is BusKind.PV else None)
                  if b.id == bus else b for b in case.buses)
    return dataclasses.replace(case, buses=buses, machines=tuple(machines))
