"""(N-1)/(N-2) line-outage enumeration, topology screening, sweeps and critical-bus statistics."""
from __future__ import annotations

import dataclasses
import enum
import itertools
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .acpf import SolverSettings
from .cpf import (ContinuationSettings, InfeasibleBaseError, PVCurveSet, critical_bus,
                  loadability_margin, trace_pv)
from .netmodel import NetworkCase, check_connectivity


class Infeasibility(str, enum.Enum):
    ISLANDED = "Islanded"
    BASE_DIVERGED = "BaseDiverged"


@dataclass(frozen=True)
class ContingencySpec:
    id: int
    outages: frozenset[int]
    label: str

    def __post_init__(self):
        if len(self.outages) not in (1, 2):
            raise ValueError("a contingency outages one or two branches")


@dataclass(frozen=True, eq=False)
class ContingencyResult:
    spec: ContingencySpec
    feasible: bool
    infeasibility_reason: Infeasibility | None = None
    critical_bus: int | None = None
    margin: float | None = None
    curves: PVCurveSet | None = None


@dataclass(frozen=True)
class CriticalBusReport:
    rows: tuple[tuple[str, int | None], ...]
    histogram: dict[int, int] = field(default_factory=dict)
    infeasible: tuple[tuple[str, str], ...] = ()

    @property
    def modal_bus(self) -> int:
        """Most frequent critical bus; ties go to the lowest bus id."""
        if not self.histogram:
            raise ValueError("no feasible contingencies to take a mode over")
        top = max(self.histogram.values())
        return min(b for b, c in self.histogram.items() if c == top)


def enumerate_contingencies(case: NetworkCase, order: int) -> list[ContingencySpec]:
    """One spec per eligible branch (order 1) or per unordered eligible pair (order 2)."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    eligible = sorted((br for br in case.branches if br.outage_eligible), key=lambda b: b.id)
    groups = itertools.combinations(eligible, order)
    return [ContingencySpec(i, frozenset(b.id for b in grp), " + ".join(b.name for b in grp))
            for i, grp in enumerate(groups, start=1)]


def screen(case: NetworkCase, spec: ContingencySpec | Iterable[int]) -> Infeasibility | None:
    """``Islanded`` when a load or generator bus loses its path to the slack, else ``None``."""
    outages = spec.outages if isinstance(spec, ContingencySpec) else frozenset(spec)
    report = check_connectivity(case, outages)
    active = case.load_buses | {m.bus for m in case.machines if m.in_service}
    if active - report.slack_island:
        return Infeasibility.ISLANDED
    return None


def run_one(case: NetworkCase, spec: ContingencySpec, settings: ContinuationSettings,
            solver: SolverSettings = SolverSettings()) -> ContingencyResult:
    verdict = screen(case, spec)
    if verdict is not None:
        return ContingencyResult(spec, False, verdict)
    try:
        curves = trace_pv(case, spec.outages, settings, solver, label=spec.label)
    except InfeasibleBaseError:
        return ContingencyResult(spec, False, Infeasibility.BASE_DIVERGED)
    return ContingencyResult(spec, True, None, critical_bus(curves), loadability_margin(curves),
                             curves)


def _run_chunk(args):
    case, specs, settings, solver = args
    return [run_one(case, s, settings, solver) for s in specs]


def run_sweep(case: NetworkCase, specs: Sequence[ContingencySpec],
              settings: ContinuationSettings = ContinuationSettings(),
              solver: SolverSettings = SolverSettings(),
              workers: int = 1) -> list[ContingencyResult]:
    """Evaluate every spec; results come back in spec order whatever the worker count."""
    specs = list(specs)
    if workers <= 1 or len(specs) <= 1:
        return [run_one(case, s, settings, solver) for s in specs]
    workers = min(workers, len(specs))
    # strided chunks balance the cost of cheap (islanded) and expensive specs
    chunks = [specs[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_chunk, [(case, ch, settings, solver) for ch in chunks]))
    results: list[ContingencyResult] = [None] * len(specs)  # type: ignore[list-item]
    for offset, part in enumerate(parts):
        results[offset::workers] = part
    return results


def aggregate(results: Sequence[ContingencyResult]) -> CriticalBusReport:
    counts = Counter(r.critical_bus for r in results if r.feasible)
    rows = tuple((r.spec.label, r.critical_bus) for r in results)
    infeasible = tuple((r.spec.label, r.infeasibility_reason.value)
                       for r in results if not r.feasible)
    return CriticalBusReport(rows, dict(sorted(counts.items())), infeasible)


SENSITIVITY_VARIANTS = (
    ("qlim_off/constant_pf", False, "constant_pf"),
    ("qlim_off/p_only", False, "p_only"),
    ("qlim_on/constant_pf", True, "constant_pf"),
    ("qlim_on/p_only", True, "p_only"),
)


def sensitivity(case: NetworkCase, spec: ContingencySpec,
                settings: ContinuationSettings = ContinuationSettings(),
                solver: SolverSettings = SolverSettings()) -> dict[str, int | None]:
    """Critical bus of one contingency under each reactive-limit / load-growth variant.

    ``None`` marks a variant under which the contingency is infeasible.
    """
    out = {}
    for name, qlim, growth in SENSITIVITY_VARIANTS:
        r = run_one(case, spec, dataclasses.replace(settings, load_growth=growth),
                    dataclasses.replace(solver, enforce_q_limits=qlim))
        out[name] = r.critical_bus
    return out
