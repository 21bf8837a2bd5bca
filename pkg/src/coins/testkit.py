"""Test orchestration: drive flashed devices through the minimal link test.

The controller side of a run. Given a deployment config and the commit's
controller spec, it senses the spectrum, picks a channel, boots receiver
then transmitter, collects both reports over the serial protocol and
applies the pass rule: both nodes must report the same non-empty bytes.

Failure classification is deliberately mechanical and ordered:

* ``environment``: every failed attempt ran on a channel whose measured
  occupancy reached the jam threshold. Retrying may help.
* ``hardware``: identical firmware passed on some device subsets and
  failed on others with clear spectrum. Retrying the same devices will
  not help; swapping them might.
* ``software``: every subset failed with clear spectrum. The commit is
  at fault.
* ``unknown``: nothing above applies (no attempt produced an outcome).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .device import DeviceDaemon
from .lcsp import LcspResponse
from .radio import MS, Medium, select_channel
from .repostore import ConfigInvalid, DeploymentConfig
from . import kvconf


class TestkitError(Exception):
    """Base class for controller-side orchestration errors."""


class InsufficientDevices(TestkitError):
    """Redundancy asked for more device subsets than the roles provide."""


# ---------------------------------------------------------------------------
# Controller spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControllerSpec:
    """Knobs for one test run, parsed from the commit's test entry file."""

    payload: bytes | None = None
    tx_role: str = "tx"
    rx_role: str = "rx"
    tx_start_delay_ms: int = 50
    sense_window_ms: int = 200
    exec_deadline_ms: int = 5000
    exec_budget: int = 1_000_000


def parse_controller_spec(tree: dict[str, bytes], path: str) -> ControllerSpec:
    if path not in tree:
        raise ConfigInvalid(f"no controller spec at {path!r}")
    try:
        text = tree[path].decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigInvalid(f"{path}: not UTF-8") from None
    try:
        sections = kvconf.Sections(kvconf.parse_kv(text))
    except kvconf.KvSyntaxError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from None

    kwargs = {}
    payload_raw = sections.get("test", "payload")
    if payload_raw is not None:
        try:
            kwargs["payload"] = bytes.fromhex(payload_raw)
        except ValueError:
            raise ConfigInvalid(f"{path}: payload must be hex") from None
    for key in ("tx_role", "rx_role"):
        value = sections.get("test", key)
        if value is not None:
            kwargs[key] = value
    for key, minimum in (("tx_start_delay_ms", 0), ("sense_window_ms", 1),
                         ("exec_deadline_ms", 1), ("exec_budget", 1)):
        value = sections.get("test", key)
        if value is None:
            continue
        try:
            number = int(value)
        except ValueError:
            raise ConfigInvalid(f"{path}: {key} must be an integer") from None
        if number < minimum:
            raise ConfigInvalid(f"{path}: {key} must be >= {minimum}")
        kwargs[key] = number
    stray = sections.unclaimed()
    if stray:
        raise ConfigInvalid(
            f"{path}: unknown setting [{stray[0].section}] {stray[0].key} "
            f"(line {stray[0].line_no})")
    return ControllerSpec(**kwargs)


# ---------------------------------------------------------------------------
# Attempts and reports
# ---------------------------------------------------------------------------


@dataclass
class Attempt:
    index: int
    channel: int
    occupancy: dict[int, float]
    passed: bool
    tx_data: bytes | None
    rx_data: bytes | None
    crashed: tuple[str, ...] = ()
    notes: str = ""

    def outcome(self) -> tuple[bool, float]:
        return self.passed, self.occupancy.get(self.channel, 0.0)

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "channel": self.channel,
            "occupancy": {str(ch): round(occ, 4)
                          for ch, occ in sorted(self.occupancy.items())},
            "passed": self.passed,
            "tx_data": self.tx_data.hex() if self.tx_data is not None else None,
            "rx_data": self.rx_data.hex() if self.rx_data is not None else None,
            "crashed": list(self.crashed),
            "notes": self.notes,
        }


@dataclass
class SubsetResult:
    subset: int
    devices: dict[str, str]  # role -> device name
    attempt: Attempt

    def to_json(self) -> dict:
        return {"subset": self.subset, "devices": dict(self.devices),
                "attempt": self.attempt.to_json()}


@dataclass
class TestReport:
    verdict: str  # "pass" | "fail"
    cause: str | None
    attempts: list[Attempt] = field(default_factory=list)
    subsets: list[SubsetResult] = field(default_factory=list)
    hardware_suspects: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "cause": self.cause,
            "attempts": [a.to_json() for a in self.attempts],
            "subsets": [s.to_json() for s in self.subsets],
            "hardware_suspects": list(self.hardware_suspects),
        }


def classify_failure(outcomes: list[tuple[bool, float]],
                     jam_threshold: float) -> str:
    """Apply the ordered cause rule to (passed, occupancy) outcomes."""
    failures = [occ for passed, occ in outcomes if not passed]
    passes = sum(1 for passed, _ in outcomes if passed)
    if not failures:
        return "unknown"
    if all(occ >= jam_threshold for occ in failures):
        return "environment"
    if passes:
        return "hardware"
    if all(occ < jam_threshold for occ in failures):
        return "software"
    return "unknown"


# ---------------------------------------------------------------------------
# Channel selection
# ---------------------------------------------------------------------------


def sense_candidates(medium: Medium, device_id: str, config: DeploymentConfig,
                     spec: ControllerSpec,
                     channels: tuple[int, ...] | None = None) -> dict[int, float]:
    """Measure occupancy on the given channels (default: all candidates).

    Sequential energy-detection sweeps at the sensing device; virtual
    time advances by one window per channel.
    """
    result = {}
    for channel in (config.candidates if channels is None else channels):
        occupancy, _ = medium.sense(device_id, config.band, channel,
                                    spec.sense_window_ms * MS)
        result[channel] = occupancy
    return result


def _pick(config: DeploymentConfig, occupancy: dict[int, float]) -> int:
    return select_channel({ch: occupancy[ch] for ch in config.candidates
                           if ch in occupancy})


# ---------------------------------------------------------------------------
# Single attempt
# ---------------------------------------------------------------------------


def _collect(response: LcspResponse) -> bytes | None:
    return response.body if response.status == "OK" else None


def run_attempt(medium: Medium, config: DeploymentConfig, spec: ControllerSpec,
                tx: DeviceDaemon, rx: DeviceDaemon, channel: int,
                occupancy: dict[int, float], index: int = 0) -> Attempt:
    """Boot receiver then transmitter on one channel and apply the pass rule."""
    attempt = Attempt(index, channel, occupancy, False, None, None)
    started = []
    rx_boot = rx.start_run(channel=channel, band=config.band, start_delay_ms=0,
                           budget=spec.exec_budget)
    if rx_boot.status != "OK":
        attempt.crashed = (spec.rx_role,)
        attempt.notes = f"rx boot failed: {rx_boot.reason}"
        return attempt
    started.append(rx)
    tx_boot = tx.start_run(channel=channel, band=config.band,
                           start_delay_ms=spec.tx_start_delay_ms,
                           budget=spec.exec_budget)
    if tx_boot.status != "OK":
        rx.target.abort()
        attempt.crashed = (spec.tx_role,)
        attempt.notes = f"tx boot failed: {tx_boot.reason}"
        return attempt
    started.append(tx)

    procs = [d.target.proc for d in started]
    deadline = medium.now + spec.exec_deadline_ms * MS
    if not medium.run_processes(procs, deadline):
        for daemon in started:
            daemon.target.abort()
        attempt.notes = "deadline exceeded"
        return attempt

    crashed = tuple(role for role, daemon in
                    ((spec.tx_role, tx), (spec.rx_role, rx))
                    if daemon.status() == "crashed")
    attempt.crashed = crashed
    attempt.tx_data = _collect(tx.result())
    attempt.rx_data = _collect(rx.result())
    if crashed:
        attempt.notes = "crashed: " + ", ".join(crashed)
        return attempt
    attempt.passed = (attempt.tx_data is not None and attempt.tx_data != b""
                      and attempt.rx_data == attempt.tx_data
                      and (spec.payload is None
                           or attempt.tx_data == spec.payload))
    if not attempt.passed and not attempt.notes:
        attempt.notes = "report mismatch"
    return attempt


# ---------------------------------------------------------------------------
# Retry flow
# ---------------------------------------------------------------------------


def run_with_retry(medium: Medium, config: DeploymentConfig,
                   spec: ControllerSpec, tx: DeviceDaemon,
                   rx: DeviceDaemon) -> TestReport:
    """Run the link test, retrying only environment-caused failures.

    ``reselect_channel`` gates every sensing-based pick: off means the
    channel is pinned for the whole run (the fixed channel, or the first
    candidate), on means a fresh sense-and-pick on each attempt after the
    policy chose the first. Occupancy of the channel in use is always
    measured, because failure classification needs it.
    """
    attempts: list[Attempt] = []
    for index in range(config.max_attempts):
        retrying = index > 0
        if not config.reselect_channel:
            channel = (config.fixed_channel
                       if config.channel_policy == "fixed"
                       else config.candidates[0])
            occupancy = sense_candidates(medium, rx.device_id, config, spec,
                                         channels=(channel,))
        elif config.channel_policy == "fixed" and not retrying:
            channel = config.fixed_channel
            occupancy = sense_candidates(medium, rx.device_id, config, spec,
                                         channels=(channel,))
        else:
            occupancy = sense_candidates(medium, rx.device_id, config, spec)
            channel = _pick(config, occupancy)
        attempt = run_attempt(medium, config, spec, tx, rx, channel,
                              occupancy, index)
        attempts.append(attempt)
        if attempt.passed:
            return TestReport("pass", None, attempts)
        if classify_failure([attempt.outcome()], config.jam_threshold) \
                != "environment":
            break
    cause = classify_failure([attempts[-1].outcome()], config.jam_threshold)
    return TestReport("fail", cause, attempts)


# ---------------------------------------------------------------------------
# Redundant subsets
# ---------------------------------------------------------------------------


def run_redundant(medium: Medium, config: DeploymentConfig,
                  spec: ControllerSpec,
                  groups: dict[str, list[DeviceDaemon]]) -> TestReport:
    """Run the same test on ``subsets`` disjoint device pairs concurrently.

    Subset i gets its own channel (offset from the sensed pick) so the
    copies do not collide with each other. The verdict is the majority;
    a minority of failing subsets on clear spectrum names its devices as
    hardware suspects instead of failing the commit.
    """
    k = config.subsets
    for role in (spec.tx_role, spec.rx_role):
        have = len(groups.get(role, ()))
        if have < k:
            raise InsufficientDevices(
                f"role {role!r} has {have} device(s), need {k}")
    if k > len(config.candidates):
        raise InsufficientDevices(
            f"{k} subsets need {k} channels, have {len(config.candidates)}")

    txs = sorted(groups[spec.tx_role], key=lambda d: d.name)[:k]
    rxs = sorted(groups[spec.rx_role], key=lambda d: d.name)[:k]

    occupancy = sense_candidates(medium, rxs[0].device_id, config, spec)
    base = (config.fixed_channel if config.channel_policy == "fixed"
            else _pick(config, occupancy))
    base_pos = config.candidates.index(base) if base in config.candidates else 0
    channels = [config.candidates[(base_pos + i) % len(config.candidates)]
                for i in range(k)]

    subsets: list[SubsetResult] = []
    running: list[tuple[int, DeviceDaemon, DeviceDaemon]] = []
    for i in range(k):
        attempt = Attempt(i, channels[i], occupancy, False, None, None)
        subsets.append(SubsetResult(i, {spec.tx_role: txs[i].name,
                                        spec.rx_role: rxs[i].name}, attempt))
        rx_boot = rxs[i].start_run(channel=channels[i], band=config.band,
                                   start_delay_ms=0, budget=spec.exec_budget)
        if rx_boot.status != "OK":
            attempt.crashed = (spec.rx_role,)
            attempt.notes = f"rx boot failed: {rx_boot.reason}"
            continue
        tx_boot = txs[i].start_run(channel=channels[i], band=config.band,
                                   start_delay_ms=spec.tx_start_delay_ms,
                                   budget=spec.exec_budget)
        if tx_boot.status != "OK":
            rxs[i].target.abort()
            attempt.crashed = (spec.tx_role,)
            attempt.notes = f"tx boot failed: {tx_boot.reason}"
            continue
        running.append((i, txs[i], rxs[i]))

    procs = [d.target.proc for _, tx, rx in running for d in (tx, rx)]
    deadline = medium.now + spec.exec_deadline_ms * MS
    finished = medium.run_processes(procs, deadline) if procs else True

    for i, tx, rx in running:
        attempt = subsets[i].attempt
        if not finished and (not tx.target.proc.done or not rx.target.proc.done):
            tx.target.abort()
            rx.target.abort()
            attempt.notes = "deadline exceeded"
            continue
        crashed = tuple(role for role, daemon in
                        ((spec.tx_role, tx), (spec.rx_role, rx))
                        if daemon.status() == "crashed")
        attempt.crashed = crashed
        attempt.tx_data = _collect(tx.result())
        attempt.rx_data = _collect(rx.result())
        if crashed:
            attempt.notes = "crashed: " + ", ".join(crashed)
            continue
        attempt.passed = (attempt.tx_data is not None and attempt.tx_data != b""
                          and attempt.rx_data == attempt.tx_data
                          and (spec.payload is None
                               or attempt.tx_data == spec.payload))
        if not attempt.passed:
            attempt.notes = "report mismatch"

    outcomes = [s.attempt.outcome() for s in subsets]
    passes = sum(1 for passed, _ in outcomes if passed)
    if passes * 2 > k:
        suspects = sorted({name for s in subsets if not s.attempt.passed
                           for name in s.devices.values()})
        return TestReport("pass", None, subsets=subsets,
                          hardware_suspects=suspects)
    return TestReport("fail", classify_failure(outcomes, config.jam_threshold),
                      subsets=subsets)
