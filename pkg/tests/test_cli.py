import json

import pytest

from conftest import two_bus
from voltstab import cli
from voltstab.cli import RenewableScenario, RunConfig, main, run
from voltstab.contingency import aggregate
from voltstab.cpf import ContinuationSettings, trace_pv
from voltstab.netmodel import MachineKind, serialize_case
from voltstab.report import (emit_histogram, emit_pv_csv, emit_summary, read_pv_csv,
                             read_summary_csv)


@pytest.fixture(scope="module")
def case1_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("case1")
    return run(RunConfig(sc_mode="without", contingency_order=1, output_dir=out)), out


def test_single_point_csv(tmp_path, case14_no_sc):
    curves = trace_pv(case14_no_sc, settings=ContinuationSettings(max_total_load=259.0))
    path = emit_pv_csv(curves, tmp_path / "pv.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "contingency_label,total_load_mw,bus,v_pu"
    assert len(lines) == 1 + 14
    assert lines[1] == "base,259.000000,1,1.060000"


def test_pv_csv_round_trip(tmp_path, case14_sc):
    curves = trace_pv(case14_sc, settings=ContinuationSettings(initial_step=10.0))
    back = read_pv_csv(emit_pv_csv(curves, tmp_path / "pv.csv"))["base"]
    assert len(back) == len(curves.points)
    for (load, volts), point in zip(back, curves.points):
        assert load == round(point.total_load, 6)
        assert [volts[b] for b in curves.bus_ids] == [round(float(v), 6) for v in point.v]


def test_base_curve_file_minimum_at_bus_14(case1_run):
    _, out = case1_run
    base = read_pv_csv(out / "pv_curves.csv")["base"]
    _, nose = base[-1]
    assert min(nose, key=nose.get) == 14


def test_case1_summary_histogram(case1_run):
    report, out = case1_run
    text = (out / "summary.csv").read_text()
    assert "\nbus,frequency\n" in text and "\n14,12\n" in text
    rows, hist = read_summary_csv(out / "summary.csv")
    assert len(rows) == 16 and rows[0] == (1, "Line_0001_0002/1", "14")
    assert hist == report.report.histogram
    assert (out / "histogram.csv").read_text().splitlines()[0] == "bus,frequency"


def test_summary_schema_traceable(case1_run):
    report, out = case1_run
    data = json.loads((out / "summary.json").read_text())
    assert set(data) >= {"config", "input_sha256", "solver_settings", "continuation_settings",
                         "base_case", "contingencies", "rows", "histogram", "modal_bus"}
    assert "workers" not in data["config"]
    assert len(data["input_sha256"]) == 64
    assert data["base_case"]["critical_bus"] == report.base_critical_bus == 14
    assert data["base_case"]["margin_mw"] == round(report.base_margin, 6)
    for row, res in zip(data["contingencies"], report.results):
        assert row["line_name"] == res.spec.label
        assert row["critical_bus"] == res.critical_bus
        assert row["margin_mw"] == round(res.margin, 6)
        assert row["nose_total_load_mw"] == round(res.curves.nose_total_load, 6)
    csv_rows, _ = read_summary_csv(out / "summary.csv")
    assert [(r["line_contingency_number"], r["line_name"], str(r["critical_bus"]))
            for r in data["rows"]] == csv_rows
    assert {h["bus"]: h["frequency"] for h in data["histogram"]} == report.report.histogram
    assert data["modal_bus"] == 14


def test_empty_report_files(tmp_path):
    report = aggregate([])
    csv_path, json_path = emit_summary(report, tmp_path / "summary.csv")
    assert csv_path.read_text() == "line_contingency_number,line_name,critical_bus\n\nbus,frequency\n"
    assert json.loads(json_path.read_text())["rows"] == []
    assert emit_histogram(report, tmp_path / "h.csv").read_text() == "bus,frequency\n"


def test_order0_with_sc(tmp_path):
    report = run(RunConfig(sc_mode="with", contingency_order=0, output_dir=tmp_path))
    assert report.base_critical_bus == 5 and report.results == ()
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(cli.OUTPUT_FILES)


def test_missing_case_file(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["--case", str(tmp_path / "nope.cdf"), "--out", str(out), "--order", "0"])
    assert code == cli.EXIT_PARSE
    assert not out.exists()
    assert "cannot read input" in capsys.readouterr().err


def test_malformed_case(tmp_path):
    bad = tmp_path / "bad.cdf"
    bad.write_text("garbage\n")
    out = tmp_path / "out"
    assert main(["--case", str(bad), "--out", str(out)]) == cli.EXIT_PARSE
    assert not out.exists()


def test_infeasible_base(tmp_path):
    case_file = tmp_path / "heavy.cdf"
    case_file.write_text(serialize_case(two_bus(x=0.1, p_mw=900.0)))
    out = tmp_path / "out"
    assert main(["--case", str(case_file), "--out", str(out), "--order", "0"]) == \
        cli.EXIT_INFEASIBLE_BASE
    assert not out.exists()


def test_unwritable_output_removes_partials(tmp_path):
    blocker = tmp_path / "out"
    blocker.write_text("a file where the directory should go")
    assert main(["--out", str(blocker), "--order", "0"]) == cli.EXIT_IO
    assert blocker.read_text().startswith("a file")


def test_partial_write_cleanup(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise OSError("disk full")
    monkeypatch.setattr(cli, "emit_histogram", boom)
    assert main(["--out", str(tmp_path), "--order", "0"]) == cli.EXIT_IO
    assert list(tmp_path.iterdir()) == []


def test_workers_byte_identical(tmp_path):
    outs = []
    for workers in (1, 2):
        out = tmp_path / f"w{workers}"
        assert main(["--sc", "with", "--order", "1", "--workers", str(workers),
                     "--out", str(out)]) == 0
        outs.append(out)
    for name in cli.OUTPUT_FILES:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_renewable_flag(tmp_path, capsys):
    assert main(["--renewable", "dfig:2:60", "--order", "0", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "summary.json").read_text())
    assert data["config"]["renewable"] == {"kind": "DFIG", "bus": 2, "rating_mva": 60.0}
    assert "base critical bus" in capsys.readouterr().out


def test_renewable_scenario_parse():
    assert RenewableScenario.parse("SCIG") == RenewableScenario(MachineKind.SCIG, 2, 60.0)
    assert RenewableScenario.parse("solarpv:9:25") == \
        RenewableScenario(MachineKind.SOLAR_PV, 9, 25.0)
    with pytest.raises(ValueError):
        RenewableScenario.parse("windmill")


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(step_mw=0)
    with pytest.raises(ValueError):
        RunConfig(workers=0)
    with pytest.raises(ValueError):
        RunConfig(sc_mode="maybe")
    assert main(["--step-mw", "-1"]) == 2


def test_step_config_changes_settings():
    cfg = RunConfig(step_mw=0.5)
    assert cfg.continuation.initial_step == 0.5 and cfg.continuation.min_step == 0.0625
    assert not cfg.solver.enforce_q_limits
    assert RunConfig(q_limits=True).solver.enforce_q_limits


def test_input_hash_depends_on_sidecar():
    assert cli._input_hash("a", None) != cli._input_hash("a", "b")
    assert len(cli._input_hash("a", None)) == 64
