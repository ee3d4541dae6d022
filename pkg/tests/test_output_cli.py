import json
import math

import pytest

from aitp_sim.cli import main
from aitp_sim.engine import run_simulation
from aitp_sim.errors import IoError
from aitp_sim.metrics import METRIC_DEFINITIONS
from aitp_sim.output import (
    METRICS_COLUMNS, SUMMARY_COLUMNS, emit_outputs, load_report, parse_messages_cell, read_csv,
    save_report,
)
from aitp_sim.scenario import Mode, ScenarioConfig, dump_scenario

SMALL = dict(n_devices=12, n_aggregators=3, rounds=4, validation_rows=200)


@pytest.fixture(scope="module")
def reports():
    cfg = ScenarioConfig(**SMALL)
    return [run_simulation(cfg.replace(mode=m)) for m in Mode]


def _same(a, b):
    return a == b or (isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b))


def test_empty_report_header_only(tmp_path):
    rep = run_simulation(ScenarioConfig(**{**SMALL, "rounds": 0}))
    emit_outputs(rep, tmp_path)
    assert (tmp_path / "metrics.csv").read_text() == ",".join(METRICS_COLUMNS) + "\n"
    assert read_csv(tmp_path / "metrics.csv") == []
    assert len(read_csv(tmp_path / "summary.csv")) == 1


def test_three_modes_three_summary_rows(tmp_path, reports):
    emit_outputs(reports, tmp_path)
    rows = read_csv(tmp_path / "summary.csv")
    assert [r["mode"] for r in rows] == ["AITP", "CAIP", "NAP"]
    assert list(rows[0]) == list(SUMMARY_COLUMNS)


def test_csv_reparse_equals_report(tmp_path, reports):
    emit_outputs(reports, tmp_path)
    rows = read_csv(tmp_path / "metrics.csv")
    flat = [(r, m) for r in reports for m in r.rounds]
    assert len(rows) == len(flat)
    for row, (rep, m) in zip(rows, flat):
        assert row["mode"] == rep.mode and row["round"] == m.round
        assert row["t_network_bps"] == m.t_network
        assert row["mean_latency_s"] == m.mean_latency
        assert row["energy_efficiency_bpj"] == m.energy_efficiency
        assert _same(row["accuracy"], m.accuracy)
        assert row["learning_skipped"] is m.learning_skipped
        assert parse_messages_cell(str(row["aggregator_messages"])) == m.aggregator_messages
    for row, rep in zip(read_csv(tmp_path / "summary.csv"), reports):
        for k in SUMMARY_COLUMNS[4:-1]:
            assert _same(row[k], rep.summary[k])


def test_manifest(tmp_path, reports):
    emit_outputs(reports, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 42 and man["spec_version"]
    assert man["metric_definitions"] == METRIC_DEFINITIONS
    assert {"privacy_loss", "robustness"} <= set(man["metric_definitions"])
    assert man["columns"]["metrics.csv"] == list(METRICS_COLUMNS)
    assert man["config"]["n_devices"] == "12"


def test_emit_to_unwritable_path(tmp_path, reports):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        emit_outputs(reports, blocker / "sub")


def test_report_json_roundtrip(tmp_path, reports):
    for rep in reports:
        p = tmp_path / f"{rep.mode}.json"
        save_report(rep, p)
        back = load_report(p)
        assert back.summary.keys() == rep.summary.keys()
        assert all(_same(back.summary[k], rep.summary[k]) for k in rep.summary)
        for a, b in zip(back.rounds, rep.rounds):
            for k, v in vars(b).items():
                if k != "accuracy":
                    assert getattr(a, k) == v, k
            assert _same(a.accuracy, b.accuracy)


# -- CLI ---------------------------------------------------------------------

def _scenario(tmp_path, **kw):
    p = tmp_path / "s.txt"
    p.write_text(dump_scenario(ScenarioConfig(**{**SMALL, **kw})))
    return str(p)


def test_cli_run_all_modes(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--scenario", _scenario(tmp_path), "--mode", "all", "--seed", "7",
                 "--rounds", "3", "--out", str(out), "--failure", "1:aggregator:1"])
    assert code == 0
    rows = read_csv(out / "summary.csv")
    assert [r["mode"] for r in rows] == ["AITP", "CAIP", "NAP"]
    assert all(r["seed"] == 7 and r["rounds"] == 3 for r in rows)
    assert "latency_ms" in capsys.readouterr().out


def test_cli_sweep(tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--scenario", _scenario(tmp_path), "--devices", "6,9", "--rounds", "2",
                 "--out", str(out)]) == 0
    rows = read_csv(out / "summary.csv")
    assert [(r["mode"], r["n_devices"]) for r in rows] == [
        ("AITP", 6), ("CAIP", 6), ("NAP", 6), ("AITP", 9), ("CAIP", 9), ("NAP", 9)]


@pytest.mark.parametrize("argv", [
    ["run", "--out", "X", "--mode", "fast"],
    ["run", "--out", "X", "--devices", "2"],
    ["run", "--out", "X", "--failure", "nonsense"],
    ["run", "--out", "X", "--seed", "-1"],
    ["sweep", "--out", "X", "--devices", "a,b"],
    ["run"],
])
def test_cli_invalid_input_exit_1(argv, tmp_path):
    argv = [a if a != "X" else str(tmp_path / "o") for a in argv]
    assert main(argv) == 1


def test_cli_bad_scenario_exit_1(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("n_devicez = 3\n")
    assert main(["run", "--scenario", str(p), "--out", str(tmp_path / "o")]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_runtime_error_exit_2(tmp_path):
    # a huge learning rate makes local training diverge
    s = _scenario(tmp_path, learning_rate=100.0, local_epochs=200, dp_enabled=False, rounds=2)
    assert main(["run", "--scenario", s, "--out", str(tmp_path / "o")]) == 2


def test_cli_wall_clock_exit_3(tmp_path):
    s = _scenario(tmp_path, wall_clock_limit=1e-9, rounds=5)
    out = tmp_path / "o"
    assert main(["run", "--scenario", s, "--mode", "nap", "--out", str(out)]) == 3
    assert (out / "metrics.csv").exists()
