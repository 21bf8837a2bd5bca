"""HTTP face of the testbed.

JSON in, JSON out, served by the stdlib HTTP server. The medium and the
pipeline are single-threaded by design, so every request holds one big
lock: correctness first, throughput irrelevant at testbed scale.

Devices registered via ``POST /devices`` are external: the testbed does
not heartbeat for them, their owners do. ``GET /availability`` is the
liveness probe; calling it evaluates heartbeat age and flips states.
"""

from __future__ import annotations

import base64
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .pipeline import PipelineError
from .radio import MS, RadioError, UnsupportedChannel
from .registry import (
    DuplicateName,
    InvalidDescriptor,
    RegistryError,
    ReservationConflict,
    UnknownDevice,
)
from .repostore import (
    AmbiguousRef,
    BadPath,
    ConfigInvalid,
    ConfigSyntax,
    DuplicateRun,
    StoreError,
    TagExists,
    UnknownRef,
)
from .system import Testbed

MAX_CLOCK_ADVANCE_US = 24 * 3600 * 1_000_000


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


_BAD_REQUEST = (PipelineError, InvalidDescriptor, BadPath, ConfigSyntax,
                ConfigInvalid, AmbiguousRef, UnsupportedChannel, RadioError)
_NOT_FOUND = (UnknownDevice, UnknownRef)
_CONFLICT = (DuplicateName, TagExists, DuplicateRun, ReservationConflict)


def _status_of(exc: Exception) -> int:
    if isinstance(exc, ApiError):
        return exc.status
    if isinstance(exc, _NOT_FOUND):
        return 404
    if isinstance(exc, _CONFLICT):
        return 409
    if isinstance(exc, _BAD_REQUEST):
        return 400
    if isinstance(exc, (RegistryError, StoreError)):
        return 400
    return 500


def _require(body: dict, key: str, kind=str):
    value = body.get(key)
    if not isinstance(value, kind) or (kind is str and not value):
        raise ApiError(400, f"body needs {key!r} ({kind.__name__})")
    return value


class Api:
    """Route table and handlers, independent of the transport."""

    def __init__(self, testbed: Testbed):
        self.bed = testbed
        self.lock = threading.Lock()
        self.routes = [
            ("POST", re.compile(r"/devices$"), self.post_device),
            ("GET", re.compile(r"/devices$"), self.get_devices),
            ("GET", re.compile(r"/devices/(?P<device_id>[^/]+)$"), self.get_device),
            ("POST", re.compile(r"/devices/(?P<device_id>[^/]+)/heartbeat$"),
             self.post_heartbeat),
            ("GET", re.compile(r"/availability$"), self.get_availability),
            ("POST", re.compile(r"/warnings$"), self.post_warning),
            ("GET", re.compile(r"/warnings$"), self.get_warnings),
            ("GET", re.compile(r"/alerts$"), self.get_alerts),
            ("POST", re.compile(r"/clock$"), self.post_clock),
            ("POST", re.compile(r"/commits$"), self.post_commit),
            ("POST", re.compile(r"/tags$"), self.post_tag),
            ("GET", re.compile(r"/commits/(?P<ref>[^/]+)/results$"),
             self.get_result_list),
            ("GET", re.compile(r"/commits/(?P<ref>[^/]+)/results/(?P<run_id>[^/]+)$"),
             self.get_result),
            ("POST", re.compile(r"/hooks$"), self.post_hook),
            ("GET", re.compile(r"/runs$"), self.get_runs),
            ("GET", re.compile(r"/runs/(?P<run_id>[^/]+)$"), self.get_run),
            ("GET", re.compile(r"/spectrum/(?P<name>[^/]+)/(?P<channel>\d+)$"),
             self.get_spectrum),
        ]

    def dispatch(self, method: str, path: str, query: dict,
                 body: dict) -> tuple[int, dict | list]:
        for route_method, pattern, handler in self.routes:
            match = pattern.fullmatch(path)
            if match is None:
                continue
            if route_method != method:
                continue
            with self.lock:
                return handler(body=body, query=query, **match.groupdict())
        raise ApiError(404, f"no such resource {path!r}")

    # -- registry -------------------------------------------------------------

    def post_device(self, body, query):
        name = _require(body, "name")
        node_type = _require(body, "node_type")
        environment = _require(body, "environment")
        position = body.get("position")
        record = self.bed.register_external(name, node_type, position,
                                            environment,
                                            body.get("cluster", ""))
        return 201, record.to_json()

    def get_devices(self, body, query):
        records = self.bed.registry.list_devices(
            node_type=query.get("type"), environment=query.get("environment"),
            state=query.get("state"))
        return 200, [r.to_json() for r in records]

    def _find_device(self, device_id: str):
        registry = self.bed.registry
        try:
            return registry.get(device_id)
        except UnknownDevice:
            return registry.by_name(device_id)  # allow names in URLs

    def get_device(self, body, query, device_id):
        return 200, self._find_device(device_id).to_json()

    def post_heartbeat(self, body, query, device_id):
        record = self._find_device(device_id)
        metrics = body.get("metrics", {})
        if not isinstance(metrics, dict):
            raise ApiError(400, "metrics must be an object")
        alerts = self.bed.registry.heartbeat(record.device_id, metrics)
        return 200, {"device_id": record.device_id,
                     "t_us": self.bed.clock.now_us,
                     "alerts": [a.to_json() for a in alerts]}

    def get_availability(self, body, query):
        return 200, self.bed.registry.availability_sweep()

    def post_warning(self, body, query):
        rule = self.bed.registry.add_warning_rule(
            _require(body, "metric"), _require(body, "op"),
            _require(body, "threshold", (int, float)))
        return 201, rule.to_json()

    def get_warnings(self, body, query):
        return 200, [r.to_json() for r in self.bed.registry.rules]

    def get_alerts(self, body, query):
        device = query.get("device")
        device_id = self._find_device(device).device_id if device else None
        return 200, [a.to_json() for a in self.bed.registry.alerts(device_id)]

    # -- simulation control ----------------------------------------------------

    def post_clock(self, body, query):
        advance = _require(body, "advance_us", int)
        if not 0 < advance <= MAX_CLOCK_ADVANCE_US:
            raise ApiError(400, f"advance_us must be in (0, {MAX_CLOCK_ADVANCE_US}]")
        self.bed.medium.run_until(self.bed.medium.now + advance)
        return 200, {"t_us": self.bed.medium.now}

    # -- store -------------------------------------------------------------------

    def post_commit(self, body, query):
        files = _require(body, "files", dict)
        tree = {}
        for path, encoded in files.items():
            if not isinstance(encoded, str):
                raise ApiError(400, f"file {path!r} must be base64 text")
            try:
                tree[path] = base64.b64decode(encoded, validate=True)
            except (ValueError, TypeError):
                raise ApiError(400, f"file {path!r} is not valid base64") from None
        commit = self.bed.store.put_tree(tree, parent=body.get("parent"))
        if body.get("tag"):
            self.bed.store.tag(body["tag"], commit)
        return 201, {"commit": commit}

    def post_tag(self, body, query):
        tag = _require(body, "tag")
        target = _require(body, "target")
        self.bed.store.tag(tag, target)
        return 201, {"tag": tag, "commit": self.bed.store.resolve(tag)}

    def get_result_list(self, body, query, ref):
        return 200, {"commit": self.bed.store.resolve(ref),
                     "runs": self.bed.store.list_runs(ref)}

    def get_result(self, body, query, ref, run_id):
        record = self.bed.store.get_results(ref, run_id)
        return 200, {
            "commit": record.commit_id,
            "run_id": record.run_id,
            "verdict": record.verdict,
            "files": {name: base64.b64encode(data).decode()
                      for name, data in sorted(record.files.items())},
            "debug_log": record.debug_log,
        }

    # -- runs ----------------------------------------------------------------------

    def _run_json(self, run) -> dict:
        payload = run.to_json()
        outbox = self.bed.pipeline.outbox_dir / f"{run.run_id}.json"
        payload["notification"] = str(outbox) if outbox.exists() else None
        return payload

    def post_hook(self, body, query):
        run = self.bed.pipeline.handle_hook_event(body)
        self.bed.pipeline.run_to_completion(run)
        return 201, self._run_json(run)

    def get_runs(self, body, query):
        return 200, [self._run_json(run)
                     for run in self.bed.pipeline.runs.values()]

    def get_run(self, body, query, run_id):
        run = self.bed.pipeline.runs.get(run_id)
        if run is None:
            raise ApiError(404, f"no run {run_id!r}")
        return 200, self._run_json(run)

    # -- spectrum ---------------------------------------------------------------------

    def get_spectrum(self, body, query, name, channel):
        record = self._find_device(name)
        band = query.get("band", "SRD868")
        try:
            window_ms = int(query.get("window_ms", "1000"))
            period_ms = int(query.get("period_ms", "1"))
        except ValueError:
            raise ApiError(400, "window_ms and period_ms must be integers") from None
        if not 0 < window_ms <= 600_000 or not 0 < period_ms <= window_ms:
            raise ApiError(400, "bad sensing window")
        occupancy, log = self.bed.medium.sense(
            record.device_id, band, int(channel), window_ms * MS,
            period_us=period_ms * MS)
        return 200, {
            "device_id": record.device_id,
            "band": band,
            "channel": int(channel),
            "period_us": log.period_us,
            "occupancy": occupancy,
            "samples": [[s.t_us, s.psd_dbm] for s in log.samples],
        }


def make_server(testbed: Testbed, host: str = "127.0.0.1",
                port: int = 0) -> ThreadingHTTPServer:
    """Build an HTTP server bound to the testbed; port 0 picks a free one."""
    api = Api(testbed)

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _reply(self, status: int, payload) -> None:
            data = json.dumps(payload, sort_keys=True).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _handle(self, method: str) -> None:
            path, _, raw_query = self.path.partition("?")
            query = {}
            for pair in raw_query.split("&"):
                if pair:
                    key, _, value = pair.partition("=")
                    query[key] = value
            body = {}
            length = int(self.headers.get("Content-Length") or 0)
            if length:
                try:
                    body = json.loads(self.rfile.read(length))
                except json.JSONDecodeError:
                    self._reply(400, {"error": "body is not valid JSON"})
                    return
                if not isinstance(body, dict):
                    self._reply(400, {"error": "body must be a JSON object"})
                    return
            try:
                status, payload = api.dispatch(method, path, query, body)
            except Exception as exc:  # mapped onto HTTP statuses
                status = _status_of(exc)
                payload = {"error": str(exc)}
            self._reply(status, payload)

        def do_GET(self):
            self._handle("GET")

        def do_POST(self):
            self._handle("POST")

    server = ThreadingHTTPServer((host, port), Handler)
    server.api = api
    return server
