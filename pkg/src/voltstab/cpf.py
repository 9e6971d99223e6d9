"""Stepwise continuation power flow: P-V curves, nose point and critical bus.

The system load is grown from its base value in fixed MW steps, each step
warm-started from the last converged point. When a step fails the step is
halved and retried from that point; tracing ends once the step falls below
``min_step``. The last converged point is the nose.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import acpf
from .acpf import PowerFlowSolution, SolverSettings
from .netmodel import BusKind, MachineKind, NetworkCase, build_admittance, scale_loads


class InfeasibleBaseError(RuntimeError):
    """The unstressed case has no power-flow solution."""

    def __init__(self, message: str, solution: PowerFlowSolution | None = None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class ContinuationSettings:
    initial_step: float = 1.0
    min_step: float = 0.0625
    max_total_load: float | None = None
    # "constant_pf" grows Q with P; "p_only" grows active load only
    load_growth: str = "constant_pf"
    # "slack": slack bus picks up all growth; "proportional": synchronous
    # generators scale with the load, the slack covers the remainder
    dispatch: str = "slack"
    # a step whose voltages move more than this is taken as a jump off the upper branch
    max_voltage_step: float = 0.1

    def __post_init__(self):
        if not 0 < self.min_step <= self.initial_step:
            raise ValueError("require 0 < min_step <= initial_step")
        if self.load_growth not in ("constant_pf", "p_only"):
            raise ValueError(f"unknown load growth {self.load_growth!r}")
        if self.dispatch not in ("slack", "proportional"):
            raise ValueError(f"unknown dispatch {self.dispatch!r}")


@dataclass(frozen=True, eq=False)
class PVCurvePoint:
    total_load: float
    v: np.ndarray
    kinds: tuple[BusKind, ...]
    p_gen: np.ndarray


@dataclass(frozen=True, eq=False)
class PVCurveSet:
    bus_ids: tuple[int, ...]
    points: tuple[PVCurvePoint, ...]
    base_total_load: float
    load_buses: frozenset[int]
    label: str = "base"
    solves: int = 0
    newton_iterations: int = 0

    @property
    def nose_total_load(self) -> float:
        return self.points[-1].total_load

    @property
    def nose_v(self) -> np.ndarray:
        return self.points[-1].v

    def series(self, bus_id: int) -> tuple[np.ndarray, np.ndarray]:
        """(total load, voltage) arrays for one bus."""
        i = self.bus_ids.index(bus_id)
        return (np.array([p.total_load for p in self.points]),
                np.array([p.v[i] for p in self.points]))


def stressed_case(case: NetworkCase, delta_mw: float,
                  settings: ContinuationSettings = ContinuationSettings()) -> NetworkCase:
    """The case with ``delta_mw`` of extra scalable load and the configured dispatch."""
    stressed = scale_loads(case, delta_mw, settings.load_growth)
    if settings.dispatch == "proportional" and delta_mw > 0:
        k = (case.total_load() + delta_mw) / case.total_load()
        slack = case.slack_bus
        machines = tuple(dataclasses.replace(m, p_set=m.p_set * k)
                         if m.kind is MachineKind.SYNC_GEN and m.bus != slack else m
                         for m in stressed.machines)
        stressed = dataclasses.replace(stressed, machines=machines)
    return stressed


def _point(total: float, sol: PowerFlowSolution) -> PVCurvePoint:
    return PVCurvePoint(total, sol.v.copy(), sol.final_kind, sol.p_gen.copy())


def trace_pv(case: NetworkCase, outages: Iterable[int] = (),
             settings: ContinuationSettings = ContinuationSettings(),
             solver: SolverSettings = SolverSettings(), label: str = "base") -> PVCurveSet:
    y = build_admittance(case, outages)
    base_total = case.total_load()
    sol = acpf.solve(case, y, solver)
    if not sol.converged:
        raise InfeasibleBaseError(f"base case does not converge ({sol.message})", sol)
    points = [_point(base_total, sol)]
    solves, iterations = 1, sol.iterations
    cap = settings.max_total_load
    delta = 0.0
    step = settings.initial_step
    while step >= settings.min_step:
        target = delta + step
        clamped = cap is not None and base_total + target >= cap
        if clamped:
            target = cap - base_total
            if target <= delta:
                break
        trial = acpf.solve(stressed_case(case, target, settings), y, solver, warm_start=sol)
        solves += 1
        iterations += trial.iterations
        if trial.converged and np.max(np.abs(trial.v - sol.v)) <= settings.max_voltage_step:
            delta, sol = target, trial
            points.append(_point(base_total + delta, sol))
            if clamped:
                break
        else:
            step /= 2.0
    return PVCurveSet(case.bus_ids, tuple(points), base_total, case.load_buses, label,
                      solves, iterations)


def loadability_margin(curves: PVCurveSet) -> float:
    """MW between the base operating point and the nose."""
    if not curves.points:
        raise ValueError("empty curve")
    return curves.nose_total_load - curves.base_total_load


def critical_bus(curves: PVCurveSet, eligible: Iterable[int] | None = None,
                 tie_tolerance: float = 1e-6) -> int:
    """Lowest-voltage eligible bus at the nose; near-ties go to the lowest bus id.

    By default the candidates are load buses that are PQ at the nose, which
    includes generator buses that have hit a reactive limit.
    """
    if not curves.points:
        raise ValueError("empty curve")
    nose = curves.points[-1]
    if eligible is None:
        eligible = [b for b, k in zip(curves.bus_ids, nose.kinds)
                    if k is BusKind.PQ and b in curves.load_buses]
    eligible = sorted(set(eligible))
    if not eligible:
        raise ValueError("no eligible buses")
    volts = {b: float(nose.v[curves.bus_ids.index(b)]) for b in eligible}
    lowest = min(volts.values())
    return min(b for b in eligible if volts[b] <= lowest + tie_tolerance)
