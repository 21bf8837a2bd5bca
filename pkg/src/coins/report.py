"""Rendering of stored run results and spectrum surveys to files.

Everything here writes artifacts: delimited text next to figures, so a
run can be inspected with nothing but a file browser. The server never
imports this module; rendering happens where the files are wanted.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be fixed first)

from .radio import PsdHistogram  # noqa: E402
from .repostore import ResultRecord  # noqa: E402

_CSV_FIELDS = ("kind", "index", "channel", "occupancy", "passed", "tx_data",
               "rx_data", "crashed", "notes", "devices")


def attempt_rows(report: dict) -> list[dict]:
    """Flatten a run report's attempts and subsets into CSV-ready rows."""
    rows = []

    def row_of(kind: str, attempt: dict, devices: str = "") -> dict:
        channel = attempt["channel"]
        return {
            "kind": kind,
            "index": attempt["index"],
            "channel": channel,
            "occupancy": attempt["occupancy"].get(str(channel), ""),
            "passed": attempt["passed"],
            "tx_data": attempt["tx_data"] or "",
            "rx_data": attempt["rx_data"] or "",
            "crashed": " ".join(attempt["crashed"]),
            "notes": attempt["notes"],
            "devices": devices,
        }

    for attempt in report.get("attempts", ()):
        rows.append(row_of("attempt", attempt))
    for subset in report.get("subsets", ()):
        devices = " ".join(f"{role}={name}"
                           for role, name in sorted(subset["devices"].items()))
        rows.append(row_of("subset", subset["attempt"], devices))
    return rows


def write_attempts_csv(report: dict, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for row in attempt_rows(report):
            writer.writerow(row)
    return path


def render_run_figure(report: dict, path: str | Path) -> Path:
    """Per-attempt channel occupancy, colored by outcome, plus the last
    sensed occupancy map."""
    path = Path(path)
    rows = attempt_rows(report)
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.6))

    if rows:
        labels = [f"{r['kind'][0]}{r['index']} ch{r['channel']}" for r in rows]
        values = [float(r["occupancy"] or 0.0) for r in rows]
        colors = ["#2a9d4e" if r["passed"] else "#c63f3f" for r in rows]
        left.bar(range(len(rows)), values, color=colors)
        left.set_xticks(range(len(rows)), labels, rotation=45, ha="right",
                        fontsize=8)
        left.set_ylim(0, 1.05)
    else:
        left.text(0.5, 0.5, "no attempts ran", ha="center", va="center")
    left.set_ylabel("occupancy at attempt")
    left.set_title(f"verdict: {report.get('verdict', '?')}"
                   + (f" ({report['cause']})" if report.get("cause") else ""))

    last_map = {}
    for source in (report.get("attempts", ()),
                   [s["attempt"] for s in report.get("subsets", ())]):
        for attempt in source:
            last_map = attempt["occupancy"] or last_map
    if last_map:
        channels = sorted(last_map, key=int)
        right.bar(channels, [last_map[c] for c in channels], color="#4464ad")
        right.set_ylim(0, 1.05)
    else:
        right.text(0.5, 0.5, "no spectrum data", ha="center", va="center")
    right.set_xlabel("channel")
    right.set_ylabel("sensed occupancy")
    right.set_title("last spectrum sweep")

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_report(record: ResultRecord, out_dir: str | Path) -> list[Path]:
    """Write a result record to a directory: stored files verbatim, the
    debug log, and (when a report is present) CSV plus figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, data in sorted(record.files.items()):
        target = out / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        written.append(target)
    debug = out / "debug.log"
    debug.write_text(record.debug_log)
    written.append(debug)
    if "report.json" in record.files:
        report = json.loads(record.files["report.json"])
        written.append(write_attempts_csv(report, out / "attempts.csv"))
        written.append(render_run_figure(report, out / "report.png"))
    return written


def render_histogram(hist: PsdHistogram, out_dir: str | Path,
                     stem: str = "spectrum") -> tuple[Path, Path]:
    """Survey artifacts: the histogram CSV and a two-panel figure
    (time-resolved power heat map, marginal distribution)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    csv_path.write_text(hist.to_csv())

    fig, (heat, marg) = plt.subplots(1, 2, figsize=(9, 3.6))
    matrix = [list(row) for row in hist.counts]
    if matrix:
        image = heat.imshow(
            [list(col) for col in zip(*matrix)], aspect="auto", origin="lower",
            extent=(hist.time_edges_us[0] / 1e6, hist.time_edges_us[-1] / 1e6,
                    hist.power_edges_dbm[0], hist.power_edges_dbm[-1]),
            cmap="viridis")
        fig.colorbar(image, ax=heat, label="samples")
    heat.set_xlabel("time [s]")
    heat.set_ylabel("power [dBm]")
    heat.set_title("received power over time")

    marginal = hist.marginal
    centers = [(lo + hi) / 2 for lo, hi in
               zip(hist.power_edges_dbm[:-1], hist.power_edges_dbm[1:])]
    width = (hist.power_edges_dbm[1] - hist.power_edges_dbm[0]
             if len(hist.power_edges_dbm) > 1 else 1.0)
    marg.bar(centers, marginal, width=width * 0.9, color="#4464ad")
    marg.set_xlabel("power [dBm]")
    marg.set_ylabel("samples")
    marg.set_title("power distribution")

    fig.tight_layout()
    png_path = out / f"{stem}.png"
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return csv_path, png_path
