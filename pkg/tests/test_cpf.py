import dataclasses
import math

import numpy as np
import pytest

from conftest import two_bus
from voltstab import acpf
from voltstab.cpf import (ContinuationSettings, InfeasibleBaseError, critical_bus,
                          loadability_margin, stressed_case, trace_pv)
from voltstab.netmodel import BusKind

FINE = ContinuationSettings(min_step=1 / 64)


def test_two_bus_nose_x01():
    curves = trace_pv(two_bus(x=0.1, p_mw=100.0))
    assert curves.nose_total_load == pytest.approx(500.0, rel=5e-3)
    assert curves.nose_v[1] == pytest.approx(1 / math.sqrt(2), abs=0.01)
    assert loadability_margin(curves) == pytest.approx(400.0, rel=5e-3)
    assert curves.base_total_load == 100.0


@pytest.mark.parametrize("x", [0.05, 0.17, 0.33, 0.5])
def test_two_bus_nose_oracle(x):
    curves = trace_pv(two_bus(x=x, p_mw=10.0), settings=FINE)
    p_max = 100.0 / (2 * x)
    assert abs(curves.nose_total_load / p_max - 1) < 5e-3
    assert abs(curves.nose_v[1] - 1 / math.sqrt(2)) < 0.01


def test_nose_voltage_error_bound_at_default_step():
    # near the nose 1 - P/Pmax ~ 4 dV^2, so the frontier gap bounds the voltage error
    x = 0.43
    curves = trace_pv(two_bus(x=x, p_mw=10.0))
    p_max = 100.0 / (2 * x)
    gap = p_max - curves.nose_total_load
    assert 0 <= gap < ContinuationSettings().min_step
    bound = 0.5 * math.sqrt(ContinuationSettings().min_step / p_max) + 1e-3
    assert abs(curves.nose_v[1] - 1 / math.sqrt(2)) < bound


def test_two_bus_voltage_strictly_decreasing():
    _, v = trace_pv(two_bus(x=0.2, p_mw=50.0)).series(2)
    assert np.all(np.diff(v) < 0)


def test_points_strictly_increasing(case14_no_sc):
    curves = trace_pv(case14_no_sc)
    loads = [p.total_load for p in curves.points]
    assert np.all(np.diff(loads) > 0)
    assert curves.nose_total_load == loads[-1]
    assert curves.base_total_load == pytest.approx(259.0)


def test_equivalence_with_cold_starts():
    # P_max = 100 / (2x) is not on the step grid, so the nose Jacobian stays regular
    case = two_bus(x=0.23, p_mw=50.0)
    curves = trace_pv(case)
    for point in curves.points:
        cold = acpf.solve(stressed_case(case, point.total_load - 50.0))
        assert cold.converged
        assert np.max(np.abs(cold.v - point.v)) < 1e-6


def test_points_satisfy_power_flow(case14_sc):
    curves = trace_pv(case14_sc)
    for point in curves.points[::25] + (curves.points[-1],):
        stressed = stressed_case(case14_sc, point.total_load - curves.base_total_load)
        sol = acpf.solve(stressed)
        assert sol.converged and sol.max_mismatch < 1e-8
        assert np.max(np.abs(sol.v - point.v)) < 1e-6


def test_zero_growth_cap(case14_sc):
    capped = trace_pv(case14_sc, settings=ContinuationSettings(max_total_load=259.0))
    assert len(capped.points) == 1
    assert loadability_margin(capped) == 0.0
    base = acpf.solve(case14_sc)
    np.testing.assert_allclose(capped.points[0].v, base.v, atol=1e-12)


def test_cap_clamps_last_point(case14_sc):
    capped = trace_pv(case14_sc, settings=ContinuationSettings(max_total_load=300.5))
    assert capped.nose_total_load == 300.5


def test_base_critical_buses(case14_no_sc, case14_sc):
    off = trace_pv(case14_no_sc)
    assert critical_bus(off) == 14
    nose = off.nose_v
    load_pq = [i for i, b in enumerate(off.bus_ids) if b in off.load_buses
               and off.points[-1].kinds[i] is BusKind.PQ]
    assert off.bus_ids[min(load_pq, key=lambda i: nose[i])] == 14
    on = trace_pv(case14_sc)
    assert critical_bus(on) == 5
    assert loadability_margin(on) >= loadability_margin(off)


def test_critical_bus_two_bus():
    assert critical_bus(trace_pv(two_bus())) == 2


def test_critical_bus_tie_break():
    curves = trace_pv(two_bus(), settings=ContinuationSettings(max_total_load=100.0))
    assert critical_bus(curves, eligible=[2, 1], tie_tolerance=1.0) == 1
    with pytest.raises(ValueError):
        critical_bus(curves, eligible=[])


def test_step_halving_refinement(case14_no_sc):
    for case in (two_bus(x=0.3, p_mw=20.0), case14_no_sc):
        coarse = trace_pv(case, settings=ContinuationSettings(initial_step=2.0))
        fine = trace_pv(case, settings=ContinuationSettings(initial_step=1.0))
        assert fine.nose_total_load >= coarse.nose_total_load - 2.0


def test_critical_bus_invariant_under_base_rescale(case14_no_sc):
    k = 2.5
    case = case14_no_sc
    buses = tuple(dataclasses.replace(b, shunt_g=b.shunt_g / k, shunt_b=b.shunt_b / k)
                  for b in case.buses)
    branches = tuple(dataclasses.replace(br, r=br.r * k, x=br.x * k,
                                         b_charging=br.b_charging / k) for br in case.branches)
    rescaled = dataclasses.replace(case, base_mva=case.base_mva * k, buses=buses,
                                   branches=branches)
    a, b = trace_pv(case), trace_pv(rescaled)
    assert critical_bus(a) == critical_bus(b)
    assert a.nose_total_load == pytest.approx(b.nose_total_load, abs=1e-9)


def test_infeasible_base():
    with pytest.raises(InfeasibleBaseError) as info:
        trace_pv(two_bus(x=0.1, p_mw=900.0))
    assert info.value.solution is not None and not info.value.solution.converged


def test_settings_validation():
    with pytest.raises(ValueError):
        ContinuationSettings(min_step=2.0, initial_step=1.0)
    with pytest.raises(ValueError):
        ContinuationSettings(load_growth="zip")
    with pytest.raises(ValueError):
        ContinuationSettings(dispatch="market")


def test_p_only_growth_keeps_reactive_load(case14_no_sc):
    s = ContinuationSettings(load_growth="p_only")
    stressed = stressed_case(case14_no_sc, 100.0, s)
    assert [ld.q for ld in stressed.loads] == [ld.q for ld in case14_no_sc.loads]


def test_proportional_dispatch_scales_generators(case14_no_sc):
    s = ContinuationSettings(dispatch="proportional")
    stressed = stressed_case(case14_no_sc, 259.0, s)
    gen2 = next(m for m in stressed.machines if m.bus == 2)
    assert gen2.p_set == pytest.approx(80.0)
