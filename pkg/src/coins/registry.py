"""Testbed device registry: descriptors, liveness, warnings and atomic
reservation of device sets for runs.

The registry is the single source of truth for where a device sits and
which radios it carries; the medium queries it through
:meth:`Registry.node_radio_info`. State survives restarts through an
append-only JSONL journal that is replayed on construction.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .radio import SECOND, RadioSpec, VirtualClock, distance

HEARTBEAT_PERIOD_US = 10 * SECOND
# A device is stale once it misses this many heartbeat periods in a row.
LIVENESS_WINDOW = 3
MAX_Z_M = 9.3


class RegistryError(Exception):
    """Base class for registry errors."""


class DuplicateName(RegistryError):
    """Name already registered with a conflicting descriptor."""


class InvalidDescriptor(RegistryError):
    """Descriptor fields out of range or of the wrong shape."""


class UnknownDevice(RegistryError):
    """No device with that id or name."""


class ReservationConflict(RegistryError):
    """A requested device is not available for reservation."""


@dataclass(frozen=True)
class NodeProfile:
    """Hardware composition of one fleet node type."""

    node_type: str
    radios: tuple[RadioSpec, ...]
    description: str


# Fleet node types and their transceivers. Sensitivities are set at the
# energy-detection threshold so every in-park link clears them; per-part
# differences show up in band membership and TX power instead.
NODE_PROFILES: dict[str, NodeProfile] = {
    "SRD_A": NodeProfile("SRD_A", (
        RadioSpec("AT86RF212", "SRD868", 5, 200e3, 10.0, -90.0),
        RadioSpec("CC2500", "ISM2400", 16, 2e6, 1.0, -90.0),
    ), "dual sub-GHz / 2.4 GHz short-range node, variant A"),
    "SRD_B": NodeProfile("SRD_B", (
        RadioSpec("CC1101", "SRD868", 5, 200e3, 10.0, -90.0),
        RadioSpec("AT86RF231", "ISM2400", 16, 2e6, 3.0, -90.0),
    ), "dual sub-GHz / 2.4 GHz short-range node, variant B"),
    "LPWA": NodeProfile("LPWA", (
        RadioSpec("SX1272", "SRD868", 5, 200e3, 14.0, -90.0),
    ), "long-range sub-GHz node"),
    "UWB": NodeProfile("UWB", (
        RadioSpec("DW1000", "UWB", 6, 499.2e6, -10.0, -90.0),
    ), "ultra-wideband ranging node"),
    "UHF_SENSE": NodeProfile("UHF_SENSE", (
        RadioSpec("TDA18219HN", "UHF", 49, 8e6, -40.0, -90.0),
    ), "UHF spectrum sensing receiver"),
    "INFRA": NodeProfile("INFRA", (
        RadioSpec("WL1837", "WIFI5", 8, 20e6, 15.0, -90.0),
    ), "infrastructure host with 5 GHz backhaul"),
}

STATES = ("available", "unavailable", "reserved")
ENVIRONMENTS = ("outdoor", "indoor")


@dataclass
class DeviceRecord:
    device_id: str
    name: str
    node_type: str
    position: tuple[float, float, float]
    environment: str
    cluster: str = ""
    state: str = "available"
    reserved_by: str | None = None
    last_seen_us: int = 0
    metrics: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "device_id": self.device_id,
            "name": self.name,
            "node_type": self.node_type,
            "position": list(self.position),
            "environment": self.environment,
            "cluster": self.cluster,
            "state": self.state,
            "reserved_by": self.reserved_by,
            "last_seen_us": self.last_seen_us,
            "metrics": dict(self.metrics),
            "radios": [{
                "transceiver": r.transceiver,
                "band": r.band,
                "channel_count": r.channel_count,
                "channel_width_hz": r.channel_width_hz,
                "tx_power_dbm": r.tx_power_dbm,
                "sensitivity_dbm": r.sensitivity_dbm,
            } for r in NODE_PROFILES[self.node_type].radios],
        }


@dataclass(frozen=True)
class WarningRule:
    rule_id: str
    metric: str
    op: str  # "gt" | "lt"
    threshold: float

    def violated_by(self, value: float) -> bool:
        return value > self.threshold if self.op == "gt" else value < self.threshold

    def to_json(self) -> dict:
        return {"rule_id": self.rule_id, "metric": self.metric,
                "op": self.op, "threshold": self.threshold}


@dataclass(frozen=True)
class Alert:
    alert_id: str
    device_id: str
    device_name: str
    rule_id: str
    metric: str
    value: float
    threshold: float
    op: str
    t_us: int

    def to_json(self) -> dict:
        return {"alert_id": self.alert_id, "device_id": self.device_id,
                "device_name": self.device_name, "rule_id": self.rule_id,
                "metric": self.metric, "value": self.value,
                "threshold": self.threshold, "op": self.op, "t_us": self.t_us}


def _check_position(position) -> tuple[float, float, float]:
    try:
        x, y, z = (float(v) for v in position)
    except (TypeError, ValueError):
        raise InvalidDescriptor(f"position must be three numbers, got {position!r}") from None
    if not all(math.isfinite(v) for v in (x, y, z)):
        raise InvalidDescriptor("position must be finite")
    if x < 0 or y < 0 or z < 0:
        raise InvalidDescriptor("coordinates are site-relative and non-negative")
    if z > MAX_Z_M:
        raise InvalidDescriptor(f"z={z} above the tallest mounting point ({MAX_Z_M} m)")
    return (x, y, z)


class Registry:
    """In-memory registry with an optional append-only journal."""

    def __init__(self, clock: VirtualClock | None = None,
                 journal_path: str | Path | None = None):
        self.clock = clock or VirtualClock()
        self._lock = threading.RLock()
        self._devices: dict[str, DeviceRecord] = {}
        self._by_name: dict[str, str] = {}
        self._rules: dict[str, WarningRule] = {}
        self._alerts: list[Alert] = []
        self._reservations: dict[str, list[str]] = {}
        self._journal_path = Path(journal_path) if journal_path else None
        self._replaying = False
        if self._journal_path and self._journal_path.exists():
            self._replay()

    # -- journal -------------------------------------------------------------

    def _journal(self, record: dict) -> None:
        if self._journal_path is None or self._replaying:
            return
        with self._journal_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _replay(self) -> None:
        self._replaying = True
        try:
            for line in self._journal_path.read_text().splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                op = entry.pop("op")
                if op == "register":
                    self.register(entry["name"], entry["node_type"],
                                  entry["position"], entry["environment"],
                                  cluster=entry.get("cluster", ""))
                elif op == "heartbeat":
                    # Replay against the recorded clock, not the live one.
                    self.heartbeat(entry["device_id"], entry["metrics"],
                                   _at_us=entry["t_us"])
                elif op == "rule":
                    self.add_warning_rule(entry["metric"], entry["op_kind"],
                                          entry["threshold"])
                elif op == "sweep":
                    for device_id, state in entry["flips"].items():
                        if device_id in self._devices:
                            self._devices[device_id].state = state
                elif op == "reserve":
                    self.reserve(entry["run_id"], entry["device_ids"])
                elif op == "release":
                    self.release(entry["run_id"])
        finally:
            self._replaying = False

    # -- registration --------------------------------------------------------

    def register(self, name: str, node_type: str, position, environment: str,
                 cluster: str = "") -> DeviceRecord:
        if not isinstance(name, str) or not name.strip():
            raise InvalidDescriptor("name must be a non-empty string")
        name = name.strip()
        if len(name) > 64:
            raise InvalidDescriptor("name longer than 64 characters")
        if node_type not in NODE_PROFILES:
            raise InvalidDescriptor(
                f"unknown node type {node_type!r}, expected one of {sorted(NODE_PROFILES)}")
        if environment not in ENVIRONMENTS:
            raise InvalidDescriptor(f"environment must be one of {ENVIRONMENTS}")
        pos = _check_position(position)
        with self._lock:
            existing_id = self._by_name.get(name)
            if existing_id is not None:
                record = self._devices[existing_id]
                if record.node_type != node_type:
                    raise DuplicateName(
                        f"{name!r} is already a {record.node_type} node")
                # Idempotent re-registration refreshes the descriptor but
                # never touches reservation or liveness state.
                record.position = pos
                record.environment = environment
                record.cluster = cluster
                self._journal({"op": "register", "name": name, "node_type": node_type,
                               "position": list(pos), "environment": environment,
                               "cluster": cluster})
                return record
            device_id = f"d{len(self._devices) + 1:04d}"
            record = DeviceRecord(device_id, name, node_type, pos, environment,
                                  cluster=cluster, last_seen_us=self.clock.now_us)
            self._devices[device_id] = record
            self._by_name[name] = device_id
            self._journal({"op": "register", "name": name, "node_type": node_type,
                           "position": list(pos), "environment": environment,
                           "cluster": cluster})
            return record

    def get(self, device_id: str) -> DeviceRecord:
        with self._lock:
            record = self._devices.get(device_id)
            if record is None:
                raise UnknownDevice(f"no device {device_id!r}")
            return record

    def by_name(self, name: str) -> DeviceRecord:
        with self._lock:
            device_id = self._by_name.get(name)
            if device_id is None:
                raise UnknownDevice(f"no device named {name!r}")
            return self._devices[device_id]

    def __len__(self) -> int:
        return len(self._devices)

    # -- directory protocol for the medium ------------------------------------

    def node_radio_info(self, device_id: str):
        with self._lock:
            record = self._devices.get(device_id)
            if record is None:
                return None
            radios = list(NODE_PROFILES[record.node_type].radios)
            return (record.position, record.environment, radios)

    # -- liveness and warnings -------------------------------------------------

    def heartbeat(self, device_id: str, metrics: dict | None = None,
                  _at_us: int | None = None) -> list[Alert]:
        metrics = metrics or {}
        for key, value in metrics.items():
            if not isinstance(key, str) or not isinstance(value, (int, float)) \
                    or isinstance(value, bool) or not math.isfinite(value):
                raise InvalidDescriptor(f"metric {key!r}={value!r} must be a finite number")
        with self._lock:
            record = self.get(device_id)
            now = self.clock.now_us if _at_us is None else _at_us
            record.last_seen_us = now
            record.metrics.update(metrics)
            if record.state == "unavailable":
                record.state = "available"
            raised = []
            for rule in self._rules.values():
                if rule.metric in metrics and rule.violated_by(metrics[rule.metric]):
                    alert = Alert(f"a{len(self._alerts) + 1:05d}", record.device_id,
                                  record.name, rule.rule_id, rule.metric,
                                  float(metrics[rule.metric]), rule.threshold,
                                  rule.op, now)
                    self._alerts.append(alert)
                    raised.append(alert)
            self._journal({"op": "heartbeat", "device_id": device_id,
                           "metrics": metrics, "t_us": now})
            return raised

    def add_warning_rule(self, metric: str, op: str, threshold: float) -> WarningRule:
        if op not in ("gt", "lt"):
            raise InvalidDescriptor(f"rule op must be 'gt' or 'lt', not {op!r}")
        if not isinstance(metric, str) or not metric:
            raise InvalidDescriptor("rule metric must be a non-empty string")
        with self._lock:
            rule = WarningRule(f"w{len(self._rules) + 1:03d}", metric, op, float(threshold))
            self._rules[rule.rule_id] = rule
            self._journal({"op": "rule", "metric": metric, "op_kind": op,
                           "threshold": float(threshold)})
            return rule

    @property
    def rules(self) -> list[WarningRule]:
        with self._lock:
            return list(self._rules.values())

    def alerts(self, device_id: str | None = None) -> list[Alert]:
        with self._lock:
            if device_id is None:
                return list(self._alerts)
            return [a for a in self._alerts if a.device_id == device_id]

    def availability_sweep(self) -> dict:
        """Flip devices between available and unavailable based on heartbeat
        age. Reserved devices are left alone: the run holding them decides
        their fate."""
        stale_after = LIVENESS_WINDOW * HEARTBEAT_PERIOD_US
        with self._lock:
            now = self.clock.now_us
            flips: dict[str, str] = {}
            stale_names = []
            for record in self._devices.values():
                if record.state == "reserved":
                    continue
                stale = now - record.last_seen_us > stale_after
                if stale:
                    stale_names.append(record.name)
                if stale and record.state == "available":
                    record.state = "unavailable"
                    flips[record.device_id] = "unavailable"
                elif not stale and record.state == "unavailable":
                    record.state = "available"
                    flips[record.device_id] = "available"
            report = {
                "t_us": now,
                "checked": len(self._devices),
                "stale": sorted(stale_names),
                "flipped": {self._devices[d].name: s for d, s in flips.items()},
            }
            self._journal({"op": "sweep", "flips": flips})
            return report

    # -- queries ----------------------------------------------------------------

    def list_devices(self, node_type: str | None = None, environment: str | None = None,
                     state: str | None = None,
                     within: tuple[tuple[float, float, float], float] | None = None,
                     ) -> list[DeviceRecord]:
        if node_type is not None and node_type not in NODE_PROFILES:
            raise InvalidDescriptor(f"unknown node type {node_type!r}")
        if environment is not None and environment not in ENVIRONMENTS:
            raise InvalidDescriptor(f"unknown environment {environment!r}")
        if state is not None and state not in STATES:
            raise InvalidDescriptor(f"unknown state {state!r}")
        with self._lock:
            records = list(self._devices.values())
        if node_type is not None:
            records = [r for r in records if r.node_type == node_type]
        if environment is not None:
            records = [r for r in records if r.environment == environment]
        if state is not None:
            records = [r for r in records if r.state == state]
        if within is not None:
            center, radius = within
            center = _check_position(center)
            if radius < 0:
                raise InvalidDescriptor("radius must be non-negative")
            records = [r for r in records if distance(r.position, center) <= radius]
        return sorted(records, key=lambda r: r.name)

    # -- reservations -------------------------------------------------------------

    def reserve(self, run_id: str, device_ids: list[str]) -> list[DeviceRecord]:
        """Atomically reserve a device set for a run: all or none."""
        if not device_ids:
            raise ReservationConflict("empty reservation")
        if len(set(device_ids)) != len(device_ids):
            raise ReservationConflict("duplicate device in reservation")
        with self._lock:
            if run_id in self._reservations:
                raise ReservationConflict(f"run {run_id!r} already holds a reservation")
            records = [self.get(d) for d in device_ids]
            blocked = [r.name for r in records if r.state != "available"]
            if blocked:
                raise ReservationConflict(
                    f"not available: {', '.join(sorted(blocked))}")
            for record in records:
                record.state = "reserved"
                record.reserved_by = run_id
            self._reservations[run_id] = list(device_ids)
            self._journal({"op": "reserve", "run_id": run_id, "device_ids": device_ids})
            return records

    def release(self, run_id: str) -> list[str]:
        with self._lock:
            device_ids = self._reservations.pop(run_id, [])
            for device_id in device_ids:
                record = self._devices.get(device_id)
                if record is not None and record.reserved_by == run_id:
                    record.state = "available"
                    record.reserved_by = None
            if device_ids:
                self._journal({"op": "release", "run_id": run_id})
            return device_ids

    def reserved_for(self, run_id: str) -> list[str]:
        with self._lock:
            return list(self._reservations.get(run_id, []))

    def is_reserved_by(self, device_id: str, run_id: str) -> bool:
        with self._lock:
            record = self._devices.get(device_id)
            return record is not None and record.state == "reserved" \
                and record.reserved_by == run_id
