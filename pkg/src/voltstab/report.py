"""CSV/JSON serialization of P-V curves and critical-bus summaries.

Every number is written with six decimals so outputs are byte-stable across
platforms and worker counts.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Mapping

from .contingency import CriticalBusReport
from .cpf import PVCurveSet

PV_HEADER = ("contingency_label", "total_load_mw", "bus", "v_pu")
SUMMARY_HEADER = ("line_contingency_number", "line_name", "critical_bus")
HISTOGRAM_HEADER = ("bus", "frequency")


def fmt(x: float) -> str:
    return f"{x:.6f}"


def emit_pv_csv(curves: PVCurveSet | Iterable[PVCurveSet], path) -> Path:
    path = Path(path)
    if isinstance(curves, PVCurveSet):
        curves = [curves]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PV_HEADER)
        for cs in curves:
            for point in cs.points:
                for bus, v in zip(cs.bus_ids, point.v):
                    w.writerow((cs.label, fmt(point.total_load), bus, fmt(v)))
    return path


def read_pv_csv(path) -> dict[str, list[tuple[float, dict[int, float]]]]:
    """Inverse of :func:`emit_pv_csv`: label -> [(total load, {bus: v}), ...]."""
    out: dict[str, list[tuple[float, dict[int, float]]]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader)) != PV_HEADER:
            raise ValueError("not a P-V curve file")
        for label, load, bus, v in reader:
            series = out.setdefault(label, [])
            total = float(load)
            if not series or series[-1][0] != total:
                series.append((total, {}))
            series[-1][1][int(bus)] = float(v)
    return out


def summary_dict(report: CriticalBusReport) -> dict:
    reasons = dict(report.infeasible)
    rows = [{"line_contingency_number": i, "line_name": label,
             "critical_bus": bus, "infeasibility_reason": reasons.get(label)}
            for i, (label, bus) in enumerate(report.rows, start=1)]
    return {
        "rows": rows,
        "histogram": [{"bus": b, "frequency": c} for b, c in sorted(report.histogram.items())],
        "modal_bus": report.modal_bus if report.histogram else None,
        "modal_tie_break": "lowest bus id",
    }


def emit_summary(report: CriticalBusReport, path, extra: Mapping | None = None) -> tuple[Path, Path]:
    """Write the summary CSV and its JSON twin (same stem, ``.json``)."""
    path = Path(path)
    data = summary_dict(report)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for row in data["rows"]:
            bus = row["critical_bus"]
            w.writerow((row["line_contingency_number"], row["line_name"],
                        bus if bus is not None else row["infeasibility_reason"]))
        fh.write("\n")
        w.writerow(HISTOGRAM_HEADER)
        for row in data["histogram"]:
            w.writerow((row["bus"], row["frequency"]))
    json_path = path.with_suffix(".json")
    if extra:
        data = {**extra, **data}
    json_path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path, json_path


def emit_histogram(report: CriticalBusReport, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTOGRAM_HEADER)
        for bus, count in sorted(report.histogram.items()):
            w.writerow((bus, count))
    return path


def read_summary_csv(path) -> tuple[list[tuple[int, str, str]], dict[int, int]]:
    rows: list[tuple[int, str, str]] = []
    hist: dict[int, int] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader)) != SUMMARY_HEADER:
            raise ValueError("not a summary file")
        section = "rows"
        for rec in reader:
            if not rec:
                section = "gap"
                continue
            if section == "gap":
                if tuple(rec) != HISTOGRAM_HEADER:
                    raise ValueError("missing histogram header")
                section = "hist"
                continue
            if section == "rows":
                rows.append((int(rec[0]), rec[1], rec[2]))
            else:
                hist[int(rec[0])] = int(rec[1])
    return rows, hist
