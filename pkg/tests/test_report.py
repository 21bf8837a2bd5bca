"""Rendering: CSV flattening, figures, result directory layout."""

from __future__ import annotations

import csv
import json

from coins.radio import (
    MS,
    SECOND,
    SpectrumLog,
    SpectrumSample,
    export_psd_histogram,
)
from coins.report import (
    attempt_rows,
    render_histogram,
    render_report,
    render_run_figure,
    write_attempts_csv,
)
from coins.repostore import ResultRecord

REPORT = {
    "verdict": "fail",
    "cause": "environment",
    "attempts": [
        {"index": 0, "channel": 2, "occupancy": {"2": 1.0}, "passed": False,
         "tx_data": "deadbeef", "rx_data": "", "crashed": [], "notes": "report mismatch"},
        {"index": 1, "channel": 1, "occupancy": {"0": 0.2, "1": 0.0, "2": 1.0},
         "passed": True, "tx_data": "deadbeef", "rx_data": "deadbeef",
         "crashed": [], "notes": ""},
    ],
    "subsets": [
        {"subset": 0, "devices": {"tx": "srd-a-01", "rx": "srd-a-02"},
         "attempt": {"index": 0, "channel": 0, "occupancy": {"0": 0.0},
                     "passed": True, "tx_data": "deadbeef",
                     "rx_data": "deadbeef", "crashed": [], "notes": ""}},
    ],
}


def test_attempt_rows_flatten_both_kinds():
    rows = attempt_rows(REPORT)
    assert len(rows) == 3
    assert rows[0]["kind"] == "attempt"
    assert rows[0]["occupancy"] == 1.0
    assert rows[2]["kind"] == "subset"
    assert rows[2]["devices"] == "rx=srd-a-02 tx=srd-a-01"


def test_write_attempts_csv(tmp_path):
    path = write_attempts_csv(REPORT, tmp_path / "attempts.csv")
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 3
    assert rows[0]["channel"] == "2"
    assert rows[0]["passed"] == "False"
    assert rows[1]["tx_data"] == "deadbeef"
    assert rows[2]["kind"] == "subset"


def test_render_run_figure_writes_png(tmp_path):
    path = render_run_figure(REPORT, tmp_path / "report.png")
    data = path.read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    assert len(data) > 1000


def test_render_run_figure_handles_empty_report(tmp_path):
    path = render_run_figure({"verdict": "error", "cause": None},
                             tmp_path / "empty.png")
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_render_report_directory(tmp_path):
    record = ResultRecord(
        commit_id="c" * 64, run_id="r000001", verdict="fail",
        files={"report.json": json.dumps(REPORT).encode(),
               "build.log": b"step 1 ok\n"},
        debug_log="== tx:srd-a-01 ==\n0 flash ok\n")
    written = render_report(record, tmp_path / "out")
    names = sorted(p.name for p in written)
    assert names == ["attempts.csv", "build.log", "debug.log", "report.json",
                     "report.png"]
    assert (tmp_path / "out" / "debug.log").read_text().startswith("== tx")


def make_log() -> SpectrumLog:
    samples = []
    for second in range(3):
        for k in range(10):
            power = -100.0 if k % 2 else -40.0 - second
            samples.append(SpectrumSample(second * SECOND + k * MS, 0, power))
    return SpectrumLog(device_id="d0001", band="SRD868", period_us=MS,
                       samples=samples)


def test_render_histogram_files(tmp_path):
    hist = export_psd_histogram(make_log(), bin_width_db=2.0,
                                time_bin_us=SECOND)
    csv_path, png_path = render_histogram(hist, tmp_path, stem="survey")
    assert csv_path.name == "survey.csv"
    assert csv_path.read_text() == hist.to_csv()
    assert png_path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
