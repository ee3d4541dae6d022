"""CSV/JSON emission for simulation reports.

Floats are written with ``repr`` so a text round trip reproduces every bit.
Nothing time-dependent (wall clock, timestamps) goes into ``metrics.csv``,
which keeps repeated runs byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from . import __version__
from .errors import IoError
from .metrics import METRIC_DEFINITIONS, DeviceRecord, RoundMetrics

SPEC_VERSION = "1.0"

METRICS_COLUMNS = (
    "mode", "n_devices", "seed", "round",
    "t_network_bps", "mean_latency_s", "energy_efficiency_bpj",
    "total_energy_j", "central_energy_j", "privacy_loss",
    "live_devices", "live_aggregators", "mcs_violations", "learning_skipped",
    "fl_round_latency_s", "excluded_devices", "objective", "accuracy",
    "aggregator_messages", "message_kinds",
)

SUMMARY_COLUMNS = (
    "mode", "n_devices", "seed", "rounds",
    "latency_ms", "throughput_gbps", "energy_efficiency_bpj",
    "privacy_loss", "robustness", "initial_accuracy", "final_accuracy",
    "mcs_violations", "aborted",
)

# RoundMetrics attribute behind each numeric metrics.csv column
_ROUND_ATTRS = {
    "t_network_bps": "t_network",
    "mean_latency_s": "mean_latency",
    "energy_efficiency_bpj": "energy_efficiency",
    "total_energy_j": "total_energy",
    "central_energy_j": "central_energy",
    "privacy_loss": "privacy_loss",
    "live_devices": "live_devices",
    "live_aggregators": "live_aggregators",
    "mcs_violations": "mcs_violations",
    "learning_skipped": "learning_skipped",
    "fl_round_latency_s": "fl_round_latency",
    "excluded_devices": "excluded_devices",
    "objective": "objective",
    "accuracy": "accuracy",
}


def fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _messages_cell(messages: dict) -> str:
    return ";".join(f"{k}:{v}" for k, v in sorted(messages.items()))


def parse_messages_cell(cell: str) -> dict[int, int]:
    if not cell:
        return {}
    out = {}
    for part in cell.split(";"):
        k, v = part.split(":")
        out[int(k)] = int(v)
    return out


def metrics_rows(report) -> list[list[str]]:
    rows = []
    for m in report.rounds:
        row = [report.mode, str(report.n_devices), str(report.seed), str(m.round)]
        for col in METRICS_COLUMNS[4:-2]:
            row.append(fmt(getattr(m, _ROUND_ATTRS[col])))
        row.append(_messages_cell(m.aggregator_messages))
        row.append("|".join(m.message_kinds))
        rows.append(row)
    return rows


def summary_row(report) -> list[str]:
    s = report.summary
    row = [report.mode, str(report.n_devices), str(report.seed), str(len(report.rounds))]
    for col in SUMMARY_COLUMNS[4:-1]:
        row.append(fmt(s[col]))
    row.append(fmt(bool(report.aborted)))
    return row


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def metrics_csv(reports) -> str:
    return _csv_text(METRICS_COLUMNS, [row for r in reports for row in metrics_rows(r)])


def summary_csv(reports) -> str:
    return _csv_text(SUMMARY_COLUMNS, [summary_row(r) for r in reports])


def manifest(reports) -> dict:
    first = reports[0] if reports else None
    return {
        "spec_version": SPEC_VERSION,
        "package_version": __version__,
        "seed": first.seed if first else None,
        "config": first.config if first else {},
        "runs": [
            {"mode": r.mode, "n_devices": r.n_devices, "seed": r.seed,
             "aborted": r.aborted, "error": r.error}
            for r in reports
        ],
        "metric_definitions": METRIC_DEFINITIONS,
        "columns": {"metrics.csv": list(METRICS_COLUMNS), "summary.csv": list(SUMMARY_COLUMNS)},
    }


def emit_outputs(reports, out_dir) -> dict[str, Path]:
    """Write ``metrics.csv``, ``summary.csv`` and ``manifest.json`` into ``out_dir``."""
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    out = Path(out_dir)
    files = {
        "metrics.csv": metrics_csv(reports),
        "summary.csv": summary_csv(reports),
        "manifest.json": json.dumps(manifest(reports), indent=2, sort_keys=True) + "\n",
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, text in files.items():
            p = out / name
            with open(p, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            paths[name] = p
    except OSError as exc:
        raise IoError(f"cannot write outputs to {out}: {exc}") from exc
    return paths


def _cell_value(text: str):
    if text in ("true", "false"):
        return text == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def read_csv(path) -> list[dict]:
    """Parse one of the emitted CSVs back into typed dicts."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return [{k: _cell_value(v) for k, v in row.items()} for row in csv.DictReader(fh)]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


# --------------------------------------------------------------------------
# Lossless JSON form of a report

def _enc_float(x: float):
    return x if math.isfinite(x) else repr(x)


def _dec_float(x) -> float:
    return float(x)


def report_to_dict(report) -> dict:
    return {
        "config": report.config,
        "mode": report.mode,
        "n_devices": report.n_devices,
        "seed": report.seed,
        "summary": {k: (_enc_float(v) if isinstance(v, float) else v) for k, v in report.summary.items()},
        "wall_clock_s": report.wall_clock_s,
        "aborted": report.aborted,
        "error": report.error,
        "rounds": [_round_to_dict(m) for m in report.rounds],
    }


def _round_to_dict(m: RoundMetrics) -> dict:
    d = {}
    for name, val in vars(m).items():
        if name == "devices":
            d[name] = [{k: (_enc_float(v) if isinstance(v, float) else v) for k, v in vars(rec).items()}
                       for rec in val]
        elif name == "aggregator_messages":
            d[name] = [[k, v] for k, v in sorted(val.items())]
        elif name == "message_kinds":
            d[name] = list(val)
        elif isinstance(val, float):
            d[name] = _enc_float(val)
        else:
            d[name] = val
    return d


def report_from_dict(d: dict):
    from .engine import SimulationReport

    rounds = []
    for rd in d["rounds"]:
        kw = dict(rd)
        kw["devices"] = [
            DeviceRecord(**{k: (_dec_float(v) if k not in ("device_id", "outage") else v) for k, v in rec.items()})
            for rec in rd["devices"]
        ]
        kw["aggregator_messages"] = {int(k): int(v) for k, v in rd["aggregator_messages"]}
        kw["message_kinds"] = tuple(rd["message_kinds"])
        for name in ("t_network", "mean_latency", "energy_efficiency", "total_energy", "central_energy",
                     "privacy_loss", "fl_round_latency", "objective", "accuracy"):
            kw[name] = _dec_float(kw[name])
        rounds.append(RoundMetrics(**kw))
    summary = {k: (_dec_float(v) if isinstance(v, (float, str)) else v) for k, v in d["summary"].items()}
    return SimulationReport(
        config=d["config"], mode=d["mode"], n_devices=d["n_devices"], seed=d["seed"],
        rounds=rounds, summary=summary, wall_clock_s=d["wall_clock_s"],
        aborted=d["aborted"], error=d["error"],
    )


def save_report(report, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report_to_dict(report), fh, sort_keys=True)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_report(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return report_from_dict(json.load(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


__all__ = [
    "METRICS_COLUMNS", "SUMMARY_COLUMNS", "SPEC_VERSION", "emit_outputs", "metrics_csv",
    "summary_csv", "manifest", "read_csv", "parse_messages_cell", "report_to_dict",
    "report_from_dict", "save_report", "load_report",
]
