"""Newton-Raphson AC power flow in polar coordinates with reactive-limit switching.

Residual ordering, used by :func:`mismatch` and :func:`jacobian` alike:
active-power residuals for every non-slack bus in case bus order, followed by
reactive-power residuals for every PQ bus in case bus order. Residuals are
``specified - calculated``; the Jacobian is that of the *calculated*
injections with respect to ``(theta, V)``, so a Newton step solves
``J @ dx = residual``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import renewgen
from .netmodel import AdmittanceMatrix, BusKind, MachineKind, NetworkCase, build_admittance

_DENSE_LIMIT = 300


@dataclass(frozen=True)
class SolverSettings:
    tolerance: float = 1e-8
    max_iterations: int = 50
    enforce_q_limits: bool = False
    flat_start: bool = True
    # reactive limits are only checked once the mismatch norm is below this
    q_check_threshold: float = 1e-3
    max_switches: int = 4
    divergence_threshold: float = 1e6
    # voltage-dependent (SCIG) injections: outer fixed-point loop
    injection_tolerance: float = 1e-6
    max_injection_updates: int = 30

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class SwitchEvent:
    iteration: int
    bus: int
    to_kind: BusKind
    limit: str  # "q_max", "q_min" or "release"


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    """Bus quantities are arrays in case bus order; powers are per-unit on the case base."""

    bus_ids: tuple[int, ...]
    v: np.ndarray
    theta: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    final_kind: tuple[BusKind, ...]
    at_limit: tuple[str | None, ...]
    iterations: int
    converged: bool
    max_mismatch: float
    switch_events: tuple[SwitchEvent, ...] = ()
    frozen_buses: tuple[int, ...] = ()
    message: str = ""

    def index(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)

    def voltage(self, bus_id: int) -> float:
        return float(self.v[self.index(bus_id)])


_SLACK, _PV, _PQ = 0, 1, 2
_CODE = {BusKind.SLACK: _SLACK, BusKind.PV: _PV, BusKind.PQ: _PQ}
_KIND = {v: k for k, v in _CODE.items()}


@dataclass
class BusInjections:
    """Per-bus specified quantities (per-unit) derived from loads and machine bus models."""

    kind: np.ndarray  # base bus-type codes before any limit switching
    v_set: np.ndarray
    p_gen: np.ndarray
    q_fixed: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    voltage_dependent: list[int] = field(default_factory=list)

    @property
    def p_spec(self) -> np.ndarray:
        return self.p_gen - self.p_load


def bus_injections(case: NetworkCase, v_estimate: np.ndarray | None = None) -> BusInjections:
    n = len(case.buses)
    index = {b.id: i for i, b in enumerate(case.buses)}
    base = case.base_mva
    kind = np.full(n, _PQ)
    v_set = np.ones(n)
    p_gen, q_fixed, q_min, q_max = (np.zeros(n) for _ in range(4))
    p_load, q_load = np.zeros(n), np.zeros(n)
    for ld in case.loads:
        p_load[index[ld.bus]] += ld.p / base
        q_load[index[ld.bus]] += ld.q / base
    regulating = np.zeros(n, dtype=bool)
    voltage_dependent = []
    for m in case.machines:
        if not m.in_service:
            continue
        i = index[m.bus]
        v_est = 1.0 if v_estimate is None else float(v_estimate[i])
        spec = renewgen.bus_model(m, v_est)
        mode = spec.mode
        if isinstance(mode, renewgen.PQInjection):
            p_gen[i] += mode.p / base
            q_fixed[i] += mode.q / base
            if m.kind is MachineKind.SCIG:
                voltage_dependent.append(i)
            continue
        p_gen[i] += mode.p_set / base
        if mode.q_max - mode.q_min <= 1e-12:
            # a collapsed reactive range is a fixed injection
            q_fixed[i] += mode.q_min / base
            continue
        q_min[i] += mode.q_min / base
        q_max[i] += mode.q_max / base
        if not regulating[i]:
            v_set[i] = mode.v_set
        regulating[i] = True
    for b in case.buses:
        i = index[b.id]
        if b.kind is BusKind.SLACK:
            kind[i] = _SLACK
            v_set[i] = b.v_setpoint if b.v_setpoint else v_set[i]
        elif b.kind is BusKind.PV and regulating[i]:
            kind[i] = _PV
    return BusInjections(kind, v_set, p_gen, q_fixed, p_load, q_load, q_min, q_max,
                         voltage_dependent)


def _partition(kinds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pvpq = np.flatnonzero(kinds != _SLACK)
    pq = np.flatnonzero(kinds == _PQ)
    return pvpq, pq


def _codes(case: NetworkCase, bus_kinds: Sequence[BusKind] | None) -> np.ndarray:
    if bus_kinds is None:
        return bus_injections(case).kind
    return np.array([_CODE[BusKind(k)] for k in bus_kinds])


def _dS_dV(y, vc: np.ndarray):
    """Derivatives of complex injections S = V conj(Y V) w.r.t. angle and magnitude."""
    current = y @ vc
    vnorm = vc / np.abs(vc)
    if sp.issparse(y):
        dv, di, dn = sp.diags(vc), sp.diags(current), sp.diags(vnorm)
        ds_dva = 1j * dv @ np.conj(di - y @ dv)
        ds_dvm = dv @ np.conj(y @ dn) + np.conj(di) @ dn
        return ds_dva, ds_dvm
    ds_dva = 1j * vc[:, None] * np.conj(np.diag(current) - y * vc[None, :])
    ds_dvm = vc[:, None] * np.conj(y * vnorm[None, :]) + np.diag(np.conj(current) * vnorm)
    return ds_dva, ds_dvm


def _assemble(y, vc, pvpq, pq):
    ds_dva, ds_dvm = _dS_dV(y, vc)
    if sp.issparse(y):
        j11 = ds_dva[pvpq][:, pvpq].real
        j12 = ds_dvm[pvpq][:, pq].real
        j21 = ds_dva[pq][:, pvpq].imag
        j22 = ds_dvm[pq][:, pq].imag
        return sp.bmat([[j11, j12], [j21, j22]], format="csr")
    return np.block([
        [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
        [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
    ])


def mismatch(case: NetworkCase, y: AdmittanceMatrix, v, theta,
             bus_kinds: Sequence[BusKind] | None = None, q_gen=None) -> np.ndarray:
    """Power residuals ``specified - calculated`` in the module's fixed ordering.

    ``q_gen`` optionally pins the controllable machine reactive output (per-unit)
    of buses that were switched from PV to PQ; otherwise their machine Q is zero.
    """
    inj = bus_injections(case, np.asarray(v, dtype=float))
    kinds = _codes(case, bus_kinds)
    q_pin = np.zeros(len(kinds)) if q_gen is None else np.asarray(q_gen, dtype=float)
    q_spec = inj.q_fixed - inj.q_load + np.where(inj.kind == _PV, q_pin, 0.0)
    return _residual(y.matrix, np.asarray(v, float), np.asarray(theta, float), inj.p_spec,
                     q_spec, *_partition(kinds))


def _residual(y, v, theta, p_spec, q_spec, pvpq, pq) -> np.ndarray:
    vc = v * np.exp(1j * theta)
    s = vc * np.conj(y @ vc)
    return np.concatenate([p_spec[pvpq] - s.real[pvpq], q_spec[pq] - s.imag[pq]])


def jacobian(case: NetworkCase, y: AdmittanceMatrix, v, theta,
             bus_kinds: Sequence[BusKind] | None = None) -> sp.csr_matrix:
    """Sparse d(P, Q)_calculated / d(theta, V) in the residual ordering."""
    pvpq, pq = _partition(_codes(case, bus_kinds))
    vc = np.asarray(v, float) * np.exp(1j * np.asarray(theta, float))
    return sp.csr_matrix(_assemble(y.matrix, vc, pvpq, pq))


# ---------------------------------------------------------------------------

def solve(case: NetworkCase, y: AdmittanceMatrix | None = None,
          settings: SolverSettings = SolverSettings(),
          warm_start: PowerFlowSolution | None = None) -> PowerFlowSolution:
    """Solve the power flow; never raises on non-convergence (``converged=False`` instead)."""
    if y is None:
        y = build_admittance(case)
    ymat = y.matrix if len(case.buses) > _DENSE_LIMIT else y.dense()

    v_est = warm_start.v if warm_start is not None else None
    try:
        inj = bus_injections(case, v_est)
    except renewgen.InfeasibleDispatchError as exc:
        return _failed(case, str(exc))
    sol = _newton(case, ymat, inj, settings, warm_start)
    if not inj.voltage_dependent or not sol.converged:
        return sol

    iterations = sol.iterations
    for _ in range(settings.max_injection_updates):
        try:
            new = bus_injections(case, sol.v)
        except renewgen.InfeasibleDispatchError as exc:
            return dataclasses.replace(sol, converged=False, message=str(exc))
        idx = inj.voltage_dependent
        if np.max(np.abs(new.q_fixed[idx] - inj.q_fixed[idx])) < settings.injection_tolerance:
            return dataclasses.replace(sol, iterations=iterations)
        inj = new
        sol = _newton(case, ymat, inj, settings, sol)
        iterations += sol.iterations
        if not sol.converged:
            return dataclasses.replace(sol, iterations=iterations)
    return dataclasses.replace(sol, converged=False, iterations=iterations,
                               message="voltage-dependent injections did not settle")


def _failed(case: NetworkCase, message: str) -> PowerFlowSolution:
    n = len(case.buses)
    nan = np.full(n, np.nan)
    return PowerFlowSolution(case.bus_ids, nan, nan, nan, nan, nan, nan,
                             tuple(b.kind for b in case.buses), (None,) * n, 0, False,
                             float("inf"), message=message)


def _newton(case: NetworkCase, ymat, inj: BusInjections, settings: SolverSettings,
            warm_start: PowerFlowSolution | None) -> PowerFlowSolution:
    n = len(case.buses)
    ids = case.bus_ids
    kinds = inj.kind.copy()
    # +1 pinned at q_max, -1 pinned at q_min, 0 regulating
    pinned = np.zeros(n, dtype=int)
    if warm_start is not None:
        v = np.array(warm_start.v, dtype=float)
        theta = np.array(warm_start.theta, dtype=float)
        for i, lim in enumerate(warm_start.at_limit):
            if inj.kind[i] == _PV and lim is not None:
                kinds[i] = _PQ
                pinned[i] = 1 if lim == "q_max" else -1
    elif settings.flat_start:
        v, theta = np.ones(n), np.zeros(n)
    else:
        v = np.array([b.v_init for b in case.buses], dtype=float)
        theta = np.radians([b.angle_init_deg for b in case.buses])
    regulated = kinds != _PQ
    v[regulated] = inj.v_set[regulated]

    switches = np.zeros(n, dtype=int)
    frozen: set[int] = set()
    events: list[SwitchEvent] = []
    limits_active = settings.enforce_q_limits and bool(np.any(inj.kind == _PV))

    def q_spec():
        pin = np.where(pinned > 0, inj.q_max, np.where(pinned < 0, inj.q_min, 0.0))
        return inj.q_fixed - inj.q_load + pin

    p_spec = inj.p_spec
    pvpq, pq = _partition(kinds)
    qs = q_spec()
    iterations = 0
    converged = False
    message = ""
    while True:
        f = _residual(ymat, v, theta, p_spec, qs, pvpq, pq)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        if not np.isfinite(norm) or norm > settings.divergence_threshold:
            message = "mismatch diverged"
            break
        if limits_active and norm < settings.q_check_threshold:
            changed = _check_limits(ymat, v, theta, inj, kinds, pinned, switches, frozen,
                                    events, iterations, settings.max_switches, ids)
            if changed:
                pvpq, pq = _partition(kinds)
                qs = q_spec()
                continue
        if norm < settings.tolerance:
            converged = True
            break
        if iterations >= settings.max_iterations:
            message = "iteration limit reached"
            break
        vc = v * np.exp(1j * theta)
        jac = _assemble(ymat, vc, pvpq, pq)
        try:
            if sp.issparse(jac):
                dx = sp.linalg.spsolve(jac.tocsc(), f)
            else:
                dx = np.linalg.solve(jac, f)
        except (np.linalg.LinAlgError, RuntimeError):
            message = "singular Jacobian"
            break
        iterations += 1
        theta[pvpq] += dx[:len(pvpq)]
        v[pq] += dx[len(pvpq):]
        if np.any(v[pq] <= 0.0):
            message = "non-positive voltage magnitude"
            break

    vc = v * np.exp(1j * theta)
    s = vc * np.conj(ymat @ vc)
    at_limit = tuple("q_max" if p > 0 else "q_min" if p < 0 else None for p in pinned)
    return PowerFlowSolution(
        ids, v, theta, s.real.copy(), s.imag.copy(), s.real + inj.p_load, s.imag + inj.q_load,
        tuple(_KIND[k] for k in kinds), at_limit, iterations, converged,
        norm if np.isfinite(norm) else float("inf"), tuple(events),
        tuple(ids[i] for i in sorted(frozen)), message)


def _check_limits(ymat, v, theta, inj, kinds, pinned, switches, frozen, events,
                  iteration, max_switches, ids) -> bool:
    vc = v * np.exp(1j * theta)
    q_calc = (vc * np.conj(ymat @ vc)).imag
    q_ctrl = q_calc + inj.q_load - inj.q_fixed
    eps = 1e-9
    changed = False
    for i in np.flatnonzero(inj.kind == _PV):
        if i in frozen:
            continue
        if kinds[i] == _PV:
            if q_ctrl[i] > inj.q_max[i] + eps:
                pinned[i], limit = 1, "q_max"
            elif q_ctrl[i] < inj.q_min[i] - eps:
                pinned[i], limit = -1, "q_min"
            else:
                continue
            kinds[i] = _PQ
            to_kind = BusKind.PQ
        else:
            release = (pinned[i] > 0 and v[i] > inj.v_set[i]) or \
                      (pinned[i] < 0 and v[i] < inj.v_set[i])
            if not release:
                continue
            if switches[i] >= max_switches:
                frozen.add(i)
                continue
            kinds[i] = _PV
            pinned[i] = 0
            v[i] = inj.v_set[i]
            limit, to_kind = "release", BusKind.PV
        switches[i] += 1
        events.append(SwitchEvent(iteration, ids[i], to_kind, limit))
        changed = True
    return changed
