"""Command-line entry point: run configuration, pipeline orchestration and output files."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import __version__
from .acpf import SolverSettings
from .contingency import (ContingencyResult, CriticalBusReport, aggregate,
                          enumerate_contingencies, run_sweep)
from .cpf import (ContinuationSettings, InfeasibleBaseError, PVCurveSet, critical_bus,
                  loadability_margin, trace_pv)
from .netmodel import CaseError, MachineKind, NetworkCase, apply_sc_mode, parse_case
from .renewgen import substitute_renewable
from .report import emit_histogram, emit_pv_csv, emit_summary

log = logging.getLogger("voltstab")

EXIT_OK = 0
EXIT_PARSE = 3
EXIT_INFEASIBLE_BASE = 4
EXIT_IO = 5

OUTPUT_FILES = ("pv_curves.csv", "summary.csv", "summary.json", "histogram.csv")


@dataclass(frozen=True)
class RenewableScenario:
    kind: MachineKind
    bus: int = 2
    rating: float = 60.0

    @classmethod
    def parse(cls, text: str) -> "RenewableScenario":
        """``kind[:bus[:mva]]``, e.g. ``DFIG:2:60``."""
        parts = text.split(":")
        if not 1 <= len(parts) <= 3:
            raise ValueError(f"bad renewable scenario {text!r}")
        kinds = {k.value.lower(): k for k in MachineKind}
        kind = kinds.get(parts[0].lower())
        if kind is None:
            raise ValueError(f"unknown machine kind {parts[0]!r}")
        bus = int(parts[1]) if len(parts) > 1 else 2
        rating = float(parts[2]) if len(parts) > 2 else 60.0
        return cls(kind, bus, rating)


@dataclass(frozen=True)
class RunConfig:
    case_path: Path | None = None  # None: bundled IEEE 14-bus case
    sidecar_path: Path | None = None
    sc_mode: str = "with"
    contingency_order: int = 1
    step_mw: float = 1.0
    renewable: RenewableScenario | None = None
    output_dir: Path = Path("out")
    workers: int = 1
    q_limits: bool = False
    load_growth: str = "constant_pf"

    def __post_init__(self):
        if self.sc_mode not in ("with", "without"):
            raise ValueError("sc_mode must be 'with' or 'without'")
        if self.contingency_order not in (0, 1, 2):
            raise ValueError("contingency_order must be 0, 1 or 2")
        if not self.step_mw > 0:
            raise ValueError("step_mw must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    @property
    def solver(self) -> SolverSettings:
        return SolverSettings(enforce_q_limits=self.q_limits)

    @property
    def continuation(self) -> ContinuationSettings:
        return ContinuationSettings(initial_step=self.step_mw,
                                    min_step=min(0.0625, self.step_mw),
                                    load_growth=self.load_growth)

    def echo(self) -> dict:
        """Everything that determines the outputs; ``workers`` is deliberately absent."""
        return {
            "case_path": str(self.case_path) if self.case_path else "<bundled ieee14>",
            "sidecar_path": str(self.sidecar_path) if self.sidecar_path else None,
            "sc_mode": self.sc_mode,
            "contingency_order": self.contingency_order,
            "step_mw": self.step_mw,
            "renewable": None if self.renewable is None else {
                "kind": self.renewable.kind.value, "bus": self.renewable.bus,
                "rating_mva": self.renewable.rating},
            "q_limits": self.q_limits,
            "load_growth": self.load_growth,
        }


@dataclass(frozen=True, eq=False)
class RunReport:
    config: RunConfig
    base: PVCurveSet
    base_critical_bus: int
    base_margin: float
    results: tuple[ContingencyResult, ...]
    report: CriticalBusReport
    input_sha256: str
    timing: dict = field(default_factory=dict)
    solves: int = 0
    newton_iterations: int = 0
    files: tuple[Path, ...] = ()


class RunError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read_inputs(config: RunConfig) -> tuple[str, str | None]:
    try:
        if config.case_path is None:
            data = resources.files("voltstab") / "data"
            case_text = (data / "ieee14.cdf").read_text(encoding="utf-8")
            sidecar_path = config.sidecar_path
            sidecar = (data / "ieee14.toml").read_text(encoding="utf-8") \
                if sidecar_path is None else Path(sidecar_path).read_text(encoding="utf-8")
        else:
            case_text = Path(config.case_path).read_text(encoding="utf-8")
            sidecar = (Path(config.sidecar_path).read_text(encoding="utf-8")
                       if config.sidecar_path else None)
    except OSError as exc:
        raise RunError(f"cannot read input: {exc}", EXIT_PARSE) from exc
    return case_text, sidecar


def _input_hash(case_text: str, sidecar: str | None) -> str:
    h = hashlib.sha256()
    for blob in (case_text, sidecar or ""):
        data = blob.encode("utf-8")
        h.update(f"blob {len(data)}\0".encode())
        h.update(data)
    return h.hexdigest()


def prepare_case(config: RunConfig, case_text: str, sidecar: str | None) -> NetworkCase:
    try:
        case = parse_case(case_text, sidecar)
        case = apply_sc_mode(case, config.sc_mode == "with")
        if config.renewable is not None:
            r = config.renewable
            case = substitute_renewable(case, r.kind, r.bus, r.rating)
    except (CaseError, ValueError) as exc:
        raise RunError(f"invalid case: {exc}", EXIT_PARSE) from exc
    return case


def _contingency_rows(results) -> list[dict]:
    rows = []
    for r in results:
        rows.append({
            "line_contingency_number": r.spec.id,
            "line_name": r.spec.label,
            "feasible": r.feasible,
            "infeasibility_reason": r.infeasibility_reason.value if r.infeasibility_reason else None,
            "critical_bus": r.critical_bus,
            "margin_mw": round(r.margin, 6) if r.margin is not None else None,
            "nose_total_load_mw": round(r.curves.nose_total_load, 6) if r.curves else None,
        })
    return rows


def _write_outputs(out: Path, base: PVCurveSet, results, report: CriticalBusReport,
                   extra: dict) -> tuple[Path, ...]:
    written: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        curves = [base] + [r.curves for r in results if r.curves is not None]
        written.append(out / "pv_curves.csv")
        emit_pv_csv(curves, written[-1])
        written.extend([out / "summary.csv", out / "summary.json"])
        emit_summary(report, out / "summary.csv", extra)
        written.append(out / "histogram.csv")
        emit_histogram(report, written[-1])
    except OSError as exc:
        for p in written:
            p.unlink(missing_ok=True)
        raise RunError(f"cannot write outputs to {out}: {exc}", EXIT_IO) from exc
    return tuple(written)


def run(config: RunConfig) -> RunReport:
    """parse -> SC mode -> renewable -> base trace -> enumerate -> sweep -> aggregate -> write."""
    timing: dict[str, float] = {}
    t0 = time.perf_counter()
    case_text, sidecar = _read_inputs(config)
    case = prepare_case(config, case_text, sidecar)
    timing["parse_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        base = trace_pv(case, (), config.continuation, config.solver, label="base")
    except InfeasibleBaseError as exc:
        raise RunError(f"base case has no power-flow solution: {exc}",
                       EXIT_INFEASIBLE_BASE) from exc
    base_bus = critical_bus(base)
    base_margin = loadability_margin(base)
    timing["base_trace_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    specs = enumerate_contingencies(case, config.contingency_order) \
        if config.contingency_order else []
    results = tuple(run_sweep(case, specs, config.continuation, config.solver, config.workers))
    report = aggregate(results)
    timing["sweep_s"] = time.perf_counter() - t0

    digest = _input_hash(case_text, sidecar)
    extra = {
        "version": __version__,
        "config": config.echo(),
        "input_sha256": digest,
        "solver_settings": dataclasses.asdict(config.solver),
        "continuation_settings": dataclasses.asdict(config.continuation),
        "base_case": {
            "total_load_mw": round(base.base_total_load, 6),
            "nose_total_load_mw": round(base.nose_total_load, 6),
            "margin_mw": round(base_margin, 6),
            "critical_bus": base_bus,
        },
        "contingencies": _contingency_rows(results),
    }
    t0 = time.perf_counter()
    files = _write_outputs(Path(config.output_dir), base, results, report, extra)
    timing["write_s"] = time.perf_counter() - t0

    solves = base.solves + sum(r.curves.solves for r in results if r.curves)
    iters = base.newton_iterations + sum(r.curves.newton_iterations for r in results if r.curves)
    return RunReport(config, base, base_bus, base_margin, results, report, digest, timing,
                     solves, iters, files)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="voltstab",
        description="P-V curve and contingency screening for static voltage stability.")
    p.add_argument("--case", type=Path, help="IEEE CDF case file (default: bundled IEEE 14-bus)")
    p.add_argument("--sidecar", type=Path, help="TOML sidecar with machine data")
    p.add_argument("--sc", choices=("with", "without"), default="with",
                   help="synchronous condensers in or out of service")
    p.add_argument("--order", type=int, choices=(0, 1, 2), default=1,
                   help="0: base case only, 1: N-1, 2: N-2")
    p.add_argument("--step-mw", type=float, default=1.0, help="initial load step in MW")
    p.add_argument("--renewable", metavar="KIND[:BUS[:MVA]]",
                   help="replace the generator at BUS with SCIG, DFIG or SolarPV")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel sweep processes")
    p.add_argument("--q-limits", choices=("on", "off"), default="off",
                   help="enforce generator reactive limits")
    p.add_argument("--load-growth", choices=("constant_pf", "p_only"), default="constant_pf")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        renewable = RenewableScenario.parse(args.renewable) if args.renewable else None
        config = RunConfig(args.case, args.sidecar, args.sc, args.order, args.step_mw, renewable,
                           args.out, args.workers, args.q_limits == "on", args.load_growth)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        result = run(config)
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    log.info("timing %s; %d solves, %d Newton iterations", result.timing, result.solves,
             result.newton_iterations)
    print(f"base critical bus {result.base_critical_bus}, margin {result.base_margin:.3f} MW")
    if result.results:
        n_ok = sum(r.feasible for r in result.results)
        mode = result.report.modal_bus if result.report.histogram else None
        print(f"{len(result.results)} contingencies, {n_ok} feasible, modal critical bus {mode}")
    print(f"wrote {', '.join(str(p) for p in result.files)}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
