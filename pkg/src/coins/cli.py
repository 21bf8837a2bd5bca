"""Operator command line.

``coins serve`` hosts the whole testbed in one process: registry, radio
medium, device daemons, repo store, pipeline and the HTTP API all share a
single virtual clock, so a fixed RNG seed gives a fully deterministic
session. Every other verb is a thin synchronous HTTP client of a running
server; ``COINS_ADDR`` (or ``--addr``) says where that server lives.

Exit codes: 0 ok, 2 connectivity, 3 config or rejected input, 4 not found.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import sys
import urllib.error
import urllib.request
from pathlib import Path

from . import report as report_mod
from .radio import MS, SpectrumLog, SpectrumSample, VirtualClock, export_psd_histogram
from .repostore import ResultRecord
from .system import Testbed, default_fleet_path

DEFAULT_ADDR = "http://127.0.0.1:7667"

EXIT_OK = 0
EXIT_CONNECT = 2
EXIT_CONFIG = 3
EXIT_NOT_FOUND = 4


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class Client:
    """Tiny JSON-over-HTTP client for the testbed API."""

    def __init__(self, addr: str):
        self.base = addr.rstrip("/")
        if not self.base.startswith("http"):
            self.base = "http://" + self.base

    def call(self, method: str, path: str, body: dict | None = None):
        data = json.dumps(body).encode() if body is not None else None
        req = urllib.request.Request(
            self.base + path, data=data, method=method,
            headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=120) as resp:
                return json.loads(resp.read())
        except urllib.error.HTTPError as err:
            try:
                message = json.loads(err.read()).get("error", err.reason)
            except (ValueError, AttributeError):
                message = str(err.reason)
            code = EXIT_NOT_FOUND if err.code == 404 else EXIT_CONFIG
            raise CliFailure(code, f"{err.code}: {message}") from None
        except urllib.error.URLError as err:
            raise CliFailure(
                EXIT_CONNECT, f"cannot reach {self.base}: {err.reason}") from None


def read_tree(root: Path) -> dict[str, bytes]:
    if not root.is_dir():
        raise CliFailure(EXIT_CONFIG, f"{root} is not a directory")
    tree = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            tree[path.relative_to(root).as_posix()] = path.read_bytes()
    if not tree:
        raise CliFailure(EXIT_CONFIG, f"{root} contains no files")
    return tree


def _emit(args, payload, human) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        human()


# -- verbs ---------------------------------------------------------------------


def build_server(args):
    """Construct the testbed plus its HTTP server without serving yet."""
    from .httpapi import make_server

    addr = args.addr or os.environ.get("COINS_ADDR") or DEFAULT_ADDR
    addr = addr.removeprefix("http://").rstrip("/")
    host, _, port_text = addr.partition(":")
    try:
        port = int(port_text or "7667")
    except ValueError:
        raise CliFailure(EXIT_CONFIG, f"bad address {addr!r}") from None

    clock = VirtualClock(mode=args.time_mode, factor=args.time_factor)
    bed = Testbed(args.data, seed=args.rng_seed, clock=clock)
    if not args.no_seed:
        try:
            seeded = bed.seed_fleet(args.seed_file)
        except (OSError, ValueError, KeyError, TypeError) as err:
            raise CliFailure(
                EXIT_CONFIG,
                f"bad seed file {args.seed_file}: {err}") from None
        print(f"seeded {seeded} devices", flush=True)
    if args.scenario:
        added = bed.load_scenario(args.scenario)
        print(f"loaded {added} interferers from {args.scenario}", flush=True)

    try:
        server = make_server(bed, host or "127.0.0.1", port)
    except OSError as err:
        raise CliFailure(EXIT_CONFIG,
                         f"cannot bind {args.addr}: {err}") from None
    return bed, server


def cmd_serve(args) -> int:
    _, server = build_server(args)
    bound = server.server_address
    print(f"serving on http://{bound[0]}:{bound[1]} (data: {args.data})",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_seed(args) -> int:
    text = default_fleet_path().read_text()
    if args.out:
        Path(args.out).write_text(text)
        count = len(json.loads(text)["devices"])
        print(f"wrote {count} devices to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_push(args, client: Client) -> int:
    tree = read_tree(Path(args.dir))
    files = {path: base64.b64encode(data).decode()
             for path, data in tree.items()}
    body = {"files": files}
    if args.ref:
        body["tag"] = args.ref
    committed = client.call("POST", "/commits", body)
    run = client.call("POST", "/hooks", {"commit": committed["commit"]})

    def human():
        print(f"commit {committed['commit'][:12]}  run {run['run_id']}")
        for event in run["history"]:
            mark = "ok" if event["ok"] else f"FAILED: {event['reason']}"
            print(f"  {event['stage']:<16} {mark}")
        line = f"verdict: {run['verdict']}"
        if run.get("cause"):
            line += f" ({run['cause']})"
        print(line)

    _emit(args, run, human)
    if run["verdict"] == "error":
        return EXIT_CONFIG
    return EXIT_OK


def cmd_tag(args, client: Client) -> int:
    result = client.call("POST", "/tags",
                         {"tag": args.name, "target": args.commit})
    _emit(args, result,
          lambda: print(f"{args.name} -> {result['commit'][:12]}"))
    return EXIT_OK


def cmd_status(args, client: Client) -> int:
    if args.run_id:
        runs = [client.call("GET", f"/runs/{args.run_id}")]
    else:
        runs = client.call("GET", "/runs")

    def human():
        if not runs:
            print("no runs")
        for run in runs:
            state = run["stage"]
            if run["failed"]:
                state = f"Failed({run['failure_stage']})"
            line = f"{run['run_id']}  {state:<18} {run['verdict'] or '-'}"
            if run.get("cause"):
                line += f" ({run['cause']})"
            print(line)

    _emit(args, runs if args.run_id is None else runs[0], human)
    return EXIT_OK


def cmd_report(args, client: Client) -> int:
    run = client.call("GET", f"/runs/{args.run_id}")
    if run["commit"] is None:
        raise CliFailure(EXIT_CONFIG,
                         f"run {args.run_id} failed before any commit resolved")
    result = client.call(
        "GET", f"/commits/{run['commit']}/results/{args.run_id}")
    record = ResultRecord(
        commit_id=result["commit"], run_id=result["run_id"],
        verdict=result["verdict"],
        files={name: base64.b64decode(data)
               for name, data in result["files"].items()},
        debug_log=result["debug_log"])
    out_dir = Path(args.out or f"report-{args.run_id}")
    written = report_mod.render_report(record, out_dir)

    def human():
        line = f"{run['run_id']}  verdict: {run['verdict']}"
        if run.get("cause"):
            line += f" ({run['cause']})"
        print(line)
        if run.get("notification"):
            print(f"notification: {run['notification']}")
        report_blob = record.files.get("report.json")
        if report_blob:
            payload = json.loads(report_blob)
            for attempt in payload.get("attempts", []):
                mark = "pass" if attempt["passed"] else "fail"
                print(f"  attempt {attempt['index']}: channel "
                      f"{attempt['channel']} {mark}")
        for path in written:
            print(f"wrote {path}")

    _emit(args, {"run": run, "written": [str(p) for p in written]}, human)
    return EXIT_OK


def cmd_devices(args, client: Client) -> int:
    query = []
    if args.type:
        query.append(f"type={args.type}")
    if args.environment:
        query.append(f"environment={args.environment}")
    if args.state:
        query.append(f"state={args.state}")
    suffix = "?" + "&".join(query) if query else ""
    records = client.call("GET", "/devices" + suffix)

    def human():
        if not records:
            print("no matching devices")
            return
        for rec in records:
            x, y, z = rec["position"]
            print(f"{rec['name']:<12} {rec['node_type']:<10} "
                  f"{rec['environment']:<8} {rec['state']:<12} "
                  f"({x:.1f}, {y:.1f}, {z:.1f})")
        print(f"{len(records)} devices")

    _emit(args, records, human)
    return EXIT_OK


def cmd_sense(args, client: Client) -> int:
    path = (f"/spectrum/{args.device}/{args.channel}"
            f"?band={args.band}&window_ms={args.window_ms}"
            f"&period_ms={args.period_ms}")
    body = client.call("GET", path)

    def human():
        print(f"{args.device} channel {body['channel']} ({body['band']}): "
              f"occupancy {body['occupancy']:.3f} "
              f"over {len(body['samples'])} samples")

    _emit(args, body, human)
    return EXIT_OK


def cmd_histogram(args, client: Client) -> int:
    path = (f"/spectrum/{args.device}/{args.channel}"
            f"?band={args.band}&window_ms={args.window_ms}"
            f"&period_ms={args.period_ms}")
    body = client.call("GET", path)
    log = SpectrumLog(
        device_id=body["device_id"], band=body["band"],
        period_us=body["period_us"],
        samples=[SpectrumSample(t_us, body["channel"], psd)
                 for t_us, psd in body["samples"]])
    hist = export_psd_histogram(log, bin_width_db=args.bin_width,
                                time_bin_us=args.time_bin_ms * MS)
    out_dir = Path(args.out or ".")
    stem = args.stem or f"psd-{args.device}-ch{args.channel}"
    written = report_mod.render_histogram(hist, out_dir, stem)
    print(f"occupancy {body['occupancy']:.3f}")
    for path_out in written:
        print(f"wrote {path_out}")
    return EXIT_OK


# -- argument plumbing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coins",
        description="CI orchestration for a simulated wireless testbed")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--addr", default=None,
                        help="server address (default $COINS_ADDR or "
                             f"{DEFAULT_ADDR})")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("serve", parents=[common],
                       help="run the testbed server in-process")
    p.add_argument("--data", default="coins-data",
                   help="state directory (default ./coins-data)")
    p.add_argument("--seed-file", default=None,
                   help="fleet layout JSON (default: built-in fleet)")
    p.add_argument("--no-seed", action="store_true",
                   help="start with an empty registry")
    p.add_argument("--scenario", default=None,
                   help="interferer scenario JSON to load at startup")
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--time-mode", choices=("fast", "scaled"), default="fast")
    p.add_argument("--time-factor", type=float, default=10.0,
                   help="virtual-to-wall speedup in scaled mode")

    p = sub.add_parser("seed", parents=[common], help="export the built-in fleet layout")
    p.add_argument("--out", default=None, help="write here instead of stdout")

    p = sub.add_parser("push", parents=[common], help="commit a directory and run the pipeline")
    p.add_argument("dir")
    p.add_argument("--ref", default=None, help="also tag the commit")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("tag", parents=[common], help="bind a tag to a commit")
    p.add_argument("commit")
    p.add_argument("name")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("status", parents=[common], help="show run states")
    p.add_argument("run_id", nargs="?", default=None)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("report", parents=[common], help="fetch a run's results and render them")
    p.add_argument("run_id")
    p.add_argument("--out", default=None,
                   help="output directory (default report-<run_id>)")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("devices", parents=[common], help="list registered devices")
    p.add_argument("--type", default=None)
    p.add_argument("--environment", default=None)
    p.add_argument("--state", default=None)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("sense", parents=[common], help="measure occupancy at a device")
    p.add_argument("device")
    p.add_argument("channel", type=int)
    p.add_argument("--band", default="SRD868")
    p.add_argument("--window-ms", type=int, default=1000)
    p.add_argument("--period-ms", type=int, default=1)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("histogram", parents=[common],
                       help="export a PSD histogram (CSV + figure)")
    p.add_argument("device")
    p.add_argument("channel", type=int)
    p.add_argument("--band", default="SRD868")
    p.add_argument("--window-ms", type=int, default=10000)
    p.add_argument("--period-ms", type=int, default=1)
    p.add_argument("--bin-width", type=float, default=2.0)
    p.add_argument("--time-bin-ms", type=int, default=1000)
    p.add_argument("--out", default=None)
    p.add_argument("--stem", default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "serve":
            return cmd_serve(args)
        if args.verb == "seed":
            return cmd_seed(args)
        addr = args.addr or os.environ.get("COINS_ADDR") or DEFAULT_ADDR
        client = Client(addr)
        handler = {
            "push": cmd_push,
            "tag": cmd_tag,
            "status": cmd_status,
            "report": cmd_report,
            "devices": cmd_devices,
            "sense": cmd_sense,
            "histogram": cmd_histogram,
        }[args.verb]
        return handler(args, client)
    except CliFailure as failure:
        print(f"error: {failure}", file=sys.stderr)
        return failure.code


if __name__ == "__main__":
    sys.exit(main())
