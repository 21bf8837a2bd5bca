"""Deterministic discrete-event radio medium.

All simulated activity shares one virtual clock (integer microseconds) and
one event queue owned by the medium: firmware VMs, interferers, sensing
sweeps and the device daemons' housekeeping all advance time only through
it. Reception uses a log-distance path loss model plus an SINR gate against
the sum of co-channel overlapping emissions; sensing is energy detection
against a fixed threshold. With a fixed seed and schedule the whole event
trace is reproducible bit for bit.
"""

from __future__ import annotations

import heapq
import json
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

MS = 1000
SECOND = 1_000_000


class RadioError(Exception):
    """Base class for medium errors."""


class UnsupportedChannel(RadioError):
    """Channel index or band not served by the device's radios."""


# ---------------------------------------------------------------------------
# Virtual time
# ---------------------------------------------------------------------------


class VirtualClock:
    """Monotonic virtual clock in integer microseconds.

    ``fast`` mode advances instantly; ``scaled`` mode sleeps wall-clock
    time proportional to the virtual delta (factor 10 means 10x faster
    than real time).
    """

    def __init__(self, mode: str = "fast", factor: float = 10.0):
        if mode not in ("fast", "scaled"):
            raise ValueError(f"unknown time mode {mode!r}")
        if mode == "scaled" and factor <= 0:
            raise ValueError("scale factor must be positive")
        self.mode = mode
        self.factor = factor
        self.now_us = 0

    def advance_to(self, t_us: int) -> None:
        if t_us < self.now_us:
            raise ValueError(f"clock cannot move backwards ({t_us} < {self.now_us})")
        if self.mode == "scaled" and t_us > self.now_us:
            time.sleep((t_us - self.now_us) / SECOND / self.factor)
        self.now_us = t_us


# ---------------------------------------------------------------------------
# Channel plans and propagation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Channel:
    index: int
    center_hz: float
    width_hz: float


@dataclass(frozen=True)
class ChannelPlan:
    band: str
    channels: tuple[Channel, ...]
    airtime_us_per_byte: int

    def __post_init__(self):
        spans = sorted((c.center_hz - c.width_hz / 2, c.center_hz + c.width_hz / 2)
                       for c in self.channels)
        for (lo1, hi1), (lo2, hi2) in zip(spans, spans[1:]):
            if hi1 > lo2:
                raise ValueError(f"overlapping channels in plan {self.band}")

    def channel(self, index: int) -> Channel:
        for c in self.channels:
            if c.index == index:
                return c
        raise UnsupportedChannel(f"band {self.band} has no channel {index}")

    @property
    def indices(self) -> list[int]:
        return [c.index for c in self.channels]


def _plan(band: str, first_center_hz: float, width_hz: float, spacing_hz: float,
          count: int, airtime_us: int) -> ChannelPlan:
    chans = tuple(Channel(i, first_center_hz + i * spacing_hz, width_hz) for i in range(count))
    return ChannelPlan(band, chans, airtime_us)


# Default channel plans. SRD868 uses 200 kHz channels across the unlicensed
# 868 MHz band; the others are coarse but non-overlapping stand-ins.
DEFAULT_PLANS: dict[str, ChannelPlan] = {
    "SRD868": _plan("SRD868", 868.1e6, 200e3, 200e3, 5, 320),
    "ISM2400": _plan("ISM2400", 2405e6, 2e6, 5e6, 16, 32),
    "UWB": _plan("UWB", 3750e6, 499.2e6, 500e6, 6, 2),
    "UHF": _plan("UHF", 474e6, 8e6, 8e6, 49, 100),
    "WIFI5": _plan("WIFI5", 5180e6, 20e6, 20e6, 8, 1),
}


@dataclass(frozen=True)
class RadioSpec:
    """One transceiver of a target node."""

    transceiver: str
    band: str
    channel_count: int
    channel_width_hz: float
    tx_power_dbm: float
    sensitivity_dbm: float

    def __post_init__(self):
        if self.channel_count < 1:
            raise ValueError("channel_count must be >= 1")
        if self.channel_width_hz <= 0:
            raise ValueError("channel_width must be positive")


@dataclass(frozen=True)
class Propagation:
    """Log-distance path loss with environment-dependent exponent.

    PL(d) = pl0_db + 10 * n * log10(d / d0_m), clamped at d0. A link
    between endpoints in different environments uses the worse exponent.
    """

    pl0_db: float = 40.0
    d0_m: float = 1.0
    exponent_outdoor: float = 2.9
    exponent_indoor: float = 3.5
    sinr_min_db: float = 6.0
    noise_floor_dbm: float = -100.0
    ed_threshold_dbm: float = -90.0

    def exponent(self, *environments: str) -> float:
        return max(self.exponent_indoor if env == "indoor" else self.exponent_outdoor
                   for env in environments)

    def path_loss_db(self, distance_m: float, exponent: float) -> float:
        d = max(distance_m, self.d0_m)
        return self.pl0_db + 10.0 * exponent * math.log10(d / self.d0_m)

    def received_dbm(self, tx_power_dbm: float, distance_m: float, exponent: float) -> float:
        return tx_power_dbm - self.path_loss_db(distance_m, exponent)


def mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def dbm(milliwatts: float) -> float:
    return 10.0 * math.log10(milliwatts) if milliwatts > 0 else -math.inf


def distance(a, b) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


# ---------------------------------------------------------------------------
# Emission sources
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transmission:
    tx_device: str
    band: str
    channel: int
    start_us: int
    duration_us: int
    power_dbm: float
    payload: bytes
    position: tuple[float, float, float]
    environment: str

    @property
    def end_us(self) -> int:
        return self.start_us + self.duration_us

    def active_at(self, t_us: int) -> bool:
        return self.start_us <= t_us < self.end_us

    def overlaps(self, start_us: int, end_us: int) -> bool:
        return self.start_us < end_us and self.end_us > start_us


@dataclass(frozen=True)
class InterfererProfile:
    """A duty-cycled emission source declared by a scenario file."""

    name: str
    kind: str  # periodic_duty_cycle | random_on_off
    band: str
    channel: int | str  # channel index, or "sweep" to cycle per period
    duty: float
    period_us: int
    power_dbm: float
    position: tuple[float, float, float]
    environment: str = "outdoor"

    def __post_init__(self):
        if self.kind not in ("periodic_duty_cycle", "random_on_off"):
            raise ValueError(f"unknown interferer kind {self.kind!r}")
        if not 0.0 <= self.duty <= 1.0:
            raise ValueError("duty must be within [0, 1]")
        if self.period_us <= 0:
            raise ValueError("period must be positive")

    def _period_on(self, k: int, seed: int) -> bool:
        if self.kind == "periodic_duty_cycle":
            return True
        # Per-period Bernoulli draw keyed by (seed, name, period index) so
        # activity is a pure function of time regardless of query order.
        return random.Random(f"{seed}:{self.name}:{k}").random() < self.duty

    def _period_channel(self, k: int, plan: ChannelPlan) -> int:
        if self.channel == "sweep":
            return plan.indices[k % len(plan.indices)]
        return int(self.channel)

    def active_at(self, t_us: int, channel: int, plan: ChannelPlan, seed: int) -> bool:
        k, phase = divmod(t_us, self.period_us)
        if self._period_channel(k, plan) != channel:
            return False
        if not self._period_on(k, seed):
            return False
        if self.kind == "periodic_duty_cycle":
            return phase < self.duty * self.period_us
        return True

    def active_during(self, start_us: int, end_us: int, channel: int,
                      plan: ChannelPlan, seed: int) -> bool:
        """Whether the source is on at any instant of [start, end)."""
        if end_us <= start_us:
            return False
        for k in range(start_us // self.period_us, (end_us - 1) // self.period_us + 1):
            if self._period_channel(k, plan) != channel or not self._period_on(k, seed):
                continue
            on_end = (k * self.period_us + self.duty * self.period_us
                      if self.kind == "periodic_duty_cycle"
                      else (k + 1) * self.period_us)
            if k * self.period_us < end_us and on_end > start_us:
                return True
        return False


def load_scenario(path: str | Path) -> list[InterfererProfile]:
    """Load interferer declarations from a scenario JSON file."""
    data = json.loads(Path(path).read_text())
    profiles = []
    for i, raw in enumerate(data.get("interferers", [])):
        channel = raw.get("channel", 0)
        if channel != "sweep":
            channel = int(channel)
        profiles.append(InterfererProfile(
            name=raw.get("name", f"interferer-{i}"),
            kind=raw["kind"],
            band=raw.get("band", "SRD868"),
            channel=channel,
            duty=float(raw["duty"]),
            period_us=int(raw.get("period_ms", 100)) * MS,
            power_dbm=float(raw["power_dbm"]),
            position=tuple(float(v) for v in raw["position"]),
            environment=raw.get("environment", "outdoor"),
        ))
    return profiles


# ---------------------------------------------------------------------------
# Sensing output
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectrumSample:
    t_us: int
    channel: int
    psd_dbm: float


@dataclass
class SpectrumLog:
    device_id: str
    band: str
    period_us: int
    samples: list[SpectrumSample] = field(default_factory=list)

    def occupancy(self, threshold_dbm: float) -> float:
        if not self.samples:
            return 0.0
        hits = sum(1 for s in self.samples if s.psd_dbm >= threshold_dbm)
        return hits / len(self.samples)


def select_channel(occupancy_by_channel: dict[int, float]) -> int:
    """Pick the least-occupied channel; ties break to the lowest index."""
    if not occupancy_by_channel:
        raise ValueError("no channels sensed")
    return min(occupancy_by_channel, key=lambda ch: (occupancy_by_channel[ch], ch))


@dataclass
class PsdHistogram:
    """Time x power-bin counts over a spectrum log, plus the marginal."""

    time_edges_us: list[int]
    power_edges_dbm: list[float]
    counts: list[list[int]]  # counts[time_bin][power_bin]

    @property
    def marginal(self) -> list[int]:
        return [sum(row[j] for row in self.counts) for j in range(len(self.power_edges_dbm) - 1)]

    @property
    def total(self) -> int:
        return sum(self.marginal)

    def to_csv(self) -> str:
        """Wide CSV: time_start_us, time_end_us, one count column per power
        bin (labeled by the bin's lower edge in dBm), marginal row last."""
        header = ["time_start_us", "time_end_us"]
        header += [f"bin_{lo:.1f}dBm" for lo in self.power_edges_dbm[:-1]]
        lines = [",".join(header)]
        for i, row in enumerate(self.counts):
            cells = [str(self.time_edges_us[i]), str(self.time_edges_us[i + 1])]
            cells += [str(c) for c in row]
            lines.append(",".join(cells))
        lines.append(",".join(["marginal", ""] + [str(c) for c in self.marginal]))
        return "\n".join(lines) + "\n"


def export_psd_histogram(log: SpectrumLog, bin_width_db: float = 2.0,
                         time_bin_us: int = SECOND) -> PsdHistogram:
    """Bin a spectrum log into a time x power histogram.

    Every sample lands in exactly one (time, power) cell, so the counts
    partition the log.
    """
    if not log.samples:
        raise ValueError("spectrum log is empty")
    if bin_width_db <= 0 or time_bin_us <= 0:
        raise ValueError("bin widths must be positive")
    t0 = log.samples[0].t_us
    t_last = log.samples[-1].t_us
    n_time = (t_last - t0) // time_bin_us + 1
    time_edges = [t0 + i * time_bin_us for i in range(n_time + 1)]

    lo = math.floor(min(s.psd_dbm for s in log.samples) / bin_width_db) * bin_width_db
    hi = math.floor(max(s.psd_dbm for s in log.samples) / bin_width_db) * bin_width_db + bin_width_db
    n_power = max(1, round((hi - lo) / bin_width_db))
    power_edges = [lo + j * bin_width_db for j in range(n_power + 1)]

    counts = [[0] * n_power for _ in range(n_time)]
    for s in log.samples:
        ti = min((s.t_us - t0) // time_bin_us, n_time - 1)
        pj = min(int((s.psd_dbm - lo) // bin_width_db), n_power - 1)
        counts[ti][pj] += 1
    return PsdHistogram(time_edges, power_edges, counts)


# ---------------------------------------------------------------------------
# Process commands (yielded by firmware VMs and other simulated actors)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WaitCmd:
    until_us: int


@dataclass(frozen=True)
class TxCmd:
    port: "RadioPort"
    channel: int
    power_dbm: float
    payload: bytes


@dataclass(frozen=True)
class RxCmd:
    port: "RadioPort"
    channel: int
    timeout_us: int


@dataclass(frozen=True)
class SenseCmd:
    port: "RadioPort"
    channel: int
    window_us: int


class _Process:
    def __init__(self, pid: int, gen, name: str):
        self.pid = pid
        self.gen = gen
        self.name = name
        self.done = False
        self.result = None
        self.error: BaseException | None = None


class _Listener:
    def __init__(self, device_id, band, channel, since_us, until_us, proc,
                 sensitivity_dbm, rx_transform):
        self.device_id = device_id
        self.band = band
        self.channel = channel
        self.since_us = since_us
        self.until_us = until_us
        self.proc = proc
        self.sensitivity_dbm = sensitivity_dbm
        self.rx_transform = rx_transform
        self.active = True


@dataclass
class RadioPort:
    """Binds one device's radio for one band to the medium."""

    medium: "Medium"
    device_id: str
    band: str
    radio: RadioSpec
    tx_transform: object = None  # callable(bytes) -> bytes, fault hook
    rx_transform: object = None

    def check_channel(self, channel: int) -> bool:
        plan = self.medium.plan(self.band)
        return channel in plan.indices and 0 <= channel < self.radio.channel_count

    def clamp_power(self, power_dbm: float) -> float:
        return min(power_dbm, self.radio.tx_power_dbm)

    def now(self) -> int:
        return self.medium.now


class Medium:
    """Single-threaded discrete-event scheduler plus radio state."""

    def __init__(self, clock: VirtualClock | None = None, seed: int = 0,
                 propagation: Propagation | None = None,
                 plans: dict[str, ChannelPlan] | None = None,
                 directory=None):
        self.clock = clock or VirtualClock()
        self.seed = seed
        self.propagation = propagation or Propagation()
        self.plans = dict(plans or DEFAULT_PLANS)
        # directory resolves device_id -> (position, environment, [RadioSpec]);
        # the registry is the single source of truth for positions.
        self.directory = directory
        self.transmissions: list[Transmission] = []
        self.interferers: list[InterfererProfile] = []
        self._heap: list[tuple[int, int, object]] = []
        self._seq = 0
        self._listeners: dict[tuple[str, int], list[_Listener]] = {}
        self._procs: list[_Process] = []

    # -- scheduling ---------------------------------------------------------

    @property
    def now(self) -> int:
        return self.clock.now_us

    def plan(self, band: str) -> ChannelPlan:
        if band not in self.plans:
            raise UnsupportedChannel(f"unknown band {band!r}")
        return self.plans[band]

    def at(self, t_us: int, fn) -> None:
        if t_us < self.now:
            raise ValueError("cannot schedule in the past")
        heapq.heappush(self._heap, (t_us, self._next_seq(), fn))

    def every(self, period_us: int, fn, first_at_us: int | None = None) -> None:
        """Schedule ``fn`` periodically, forever."""
        start = self.now + period_us if first_at_us is None else first_at_us

        def tick():
            fn()
            self.at(self.now + period_us, tick)

        self.at(start, tick)

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def add_process(self, gen, name: str = "proc", start_us: int | None = None) -> _Process:
        proc = _Process(len(self._procs), gen, name)
        self._procs.append(proc)
        start = self.now if start_us is None else start_us
        self.at(start, lambda: self._step(proc, None))
        return proc

    def run_until(self, t_us: int) -> None:
        """Process all events at or before ``t_us``, then land the clock there."""
        while self._heap and self._heap[0][0] <= t_us:
            t, _, fn = heapq.heappop(self._heap)
            self.clock.advance_to(t)
            fn()
        self.clock.advance_to(max(t_us, self.now))

    def run_processes(self, procs: list[_Process], deadline_us: int) -> bool:
        """Drive events until the given processes finish or the deadline hits.

        Returns True when all finished in time. The clock stops at the
        finishing event (not the deadline) on success.
        """
        while not all(p.done for p in procs):
            if not self._heap or self._heap[0][0] > deadline_us:
                self.clock.advance_to(deadline_us)
                return False
            t, _, fn = heapq.heappop(self._heap)
            self.clock.advance_to(t)
            fn()
        return True

    def _step(self, proc: _Process, value) -> None:
        if proc.done:
            return
        try:
            cmd = proc.gen.send(value)
        except StopIteration as stop:
            proc.done = True
            proc.result = stop.value
            return
        except Exception as exc:  # VM traps and port errors end the process
            proc.done = True
            proc.error = exc
            return
        self._dispatch(proc, cmd)

    def _dispatch(self, proc: _Process, cmd) -> None:
        if isinstance(cmd, WaitCmd):
            self.at(max(cmd.until_us, self.now), lambda: self._step(proc, None))
        elif isinstance(cmd, TxCmd):
            tx = self.schedule_tx(cmd.port.device_id, cmd.port.band, cmd.channel,
                                  cmd.payload, cmd.power_dbm,
                                  tx_transform=cmd.port.tx_transform)
            self._step(proc, tx)
        elif isinstance(cmd, RxCmd):
            self._listen(cmd.port, cmd.channel, cmd.timeout_us, proc)
        elif isinstance(cmd, SenseCmd):
            self._sense_async(cmd.port, cmd.channel, cmd.window_us, proc)
        else:
            proc.done = True
            proc.error = RadioError(f"unknown process command {cmd!r}")

    # -- radio state --------------------------------------------------------

    def _node(self, device_id: str):
        info = self.directory.node_radio_info(device_id) if self.directory else None
        if info is None:
            raise RadioError(f"device {device_id!r} not known to the medium")
        return info  # (position, environment, [RadioSpec])

    def _radio_for(self, device_id: str, band: str) -> RadioSpec:
        _, _, radios = self._node(device_id)
        for r in radios:
            if r.band == band:
                return r
        raise UnsupportedChannel(f"{device_id} has no radio for band {band}")

    def port(self, device_id: str, band: str, tx_transform=None, rx_transform=None) -> RadioPort:
        radio = self._radio_for(device_id, band)
        return RadioPort(self, device_id, band, radio, tx_transform, rx_transform)

    def add_interferer(self, profile: InterfererProfile) -> None:
        self.plan(profile.band)  # validate band
        if profile.channel != "sweep":
            self.plan(profile.band).channel(int(profile.channel))
        self.interferers.append(profile)

    def schedule_tx(self, device_id: str, band: str, channel: int, payload: bytes,
                    power_dbm: float | None = None, start_us: int | None = None,
                    tx_transform=None) -> Transmission:
        """Enqueue a transmission; reception is evaluated at its end time."""
        plan = self.plan(band)
        plan.channel(channel)
        radio = self._radio_for(device_id, band)
        if channel >= radio.channel_count:
            raise UnsupportedChannel(f"{device_id} radio caps at {radio.channel_count} channels")
        position, environment, _ = self._node(device_id)
        if tx_transform is not None:
            payload = tx_transform(payload)
        power = radio.tx_power_dbm if power_dbm is None else min(power_dbm, radio.tx_power_dbm)
        start = self.now if start_us is None else start_us
        tx = Transmission(device_id, band, channel, start,
                          max(1, len(payload)) * plan.airtime_us_per_byte,
                          power, bytes(payload), tuple(position), environment)
        self.transmissions.append(tx)
        self.at(tx.end_us, lambda: self._deliver(tx))
        return tx

    def _listen(self, port: RadioPort, channel: int, timeout_us: int, proc: _Process) -> None:
        listener = _Listener(port.device_id, port.band, channel, self.now,
                             self.now + timeout_us, proc,
                             port.radio.sensitivity_dbm, port.rx_transform)
        self._listeners.setdefault((port.band, channel), []).append(listener)

        def expire():
            if listener.active:
                listener.active = False
                self._step(proc, None)

        self.at(listener.until_us, expire)

    def _deliver(self, tx: Transmission) -> None:
        """Terminal event of a transmission: offer it to every covered listener."""
        listeners = self._listeners.get((tx.band, tx.channel), [])
        for listener in list(listeners):
            if not listener.active:
                listeners.remove(listener)
                continue
            if listener.device_id == tx.tx_device:
                continue
            if listener.since_us > tx.start_us or listener.until_us < tx.end_us:
                continue
            if not self._receivable(tx, listener):
                continue
            listener.active = False
            listeners.remove(listener)
            payload = tx.payload
            if listener.rx_transform is not None:
                payload = listener.rx_transform(payload)
            self._step(listener.proc, payload)

    def _receivable(self, tx: Transmission, listener: _Listener) -> bool:
        position, environment, _ = self._node(listener.device_id)
        prop = self.propagation
        exponent = prop.exponent(tx.environment, environment)
        rx_dbm = prop.received_dbm(tx.power_dbm, distance(tx.position, position), exponent)
        if rx_dbm < listener.sensitivity_dbm:
            return False
        interference_mw = mw(prop.noise_floor_dbm)
        for other in self.transmissions:
            if other is tx or other.band != tx.band or other.channel != tx.channel:
                continue
            if not other.overlaps(tx.start_us, tx.end_us):
                continue
            exp = prop.exponent(other.environment, environment)
            interference_mw += mw(prop.received_dbm(
                other.power_dbm, distance(other.position, position), exp))
        plan = self.plan(tx.band)
        for interferer in self.interferers:
            if interferer.band != tx.band:
                continue
            if not interferer.active_during(tx.start_us, tx.end_us, tx.channel, plan, self.seed):
                continue
            exp = prop.exponent(interferer.environment, environment)
            interference_mw += mw(prop.received_dbm(
                interferer.power_dbm, distance(interferer.position, position), exp))
        sinr_db = rx_dbm - dbm(interference_mw)
        return sinr_db >= prop.sinr_min_db

    # -- sensing ------------------------------------------------------------

    def psd_dbm(self, position, environment: str, band: str, channel: int, t_us: int) -> float:
        """Instantaneous received power at a location on one channel."""
        prop = self.propagation
        total_mw = mw(prop.noise_floor_dbm)
        for tx in self.transmissions:
            if tx.band != band or tx.channel != channel or not tx.active_at(t_us):
                continue
            exp = prop.exponent(tx.environment, environment)
            total_mw += mw(prop.received_dbm(tx.power_dbm, distance(tx.position, position), exp))
        plan = self.plan(band)
        for interferer in self.interferers:
            if interferer.band != band:
                continue
            if not interferer.active_at(t_us, channel, plan, self.seed):
                continue
            exp = prop.exponent(interferer.environment, environment)
            total_mw += mw(prop.received_dbm(
                interferer.power_dbm, distance(interferer.position, position), exp))
        return dbm(total_mw)

    def _sample_schedule(self, device_id: str, band: str, channel: int,
                         window_us: int, period_us: int) -> SpectrumLog:
        plan = self.plan(band)
        plan.channel(channel)
        self._radio_for(device_id, band)
        log = SpectrumLog(device_id, band, period_us)
        n = max(1, window_us // period_us)
        start = self.now

        def sample(t):
            position, environment, _ = self._node(device_id)
            log.samples.append(SpectrumSample(
                t, channel, self.psd_dbm(position, environment, band, channel, t)))

        for i in range(n):
            t = start + i * period_us
            self.at(t, lambda t=t: sample(t))
        return log

    def sense(self, device_id: str, band: str, channel: int, window_us: int,
              period_us: int = MS) -> tuple[float, SpectrumLog]:
        """Energy-detection sweep: sample PSD across the window and return
        the fraction of samples at or above the detection threshold."""
        log = self._sample_schedule(device_id, band, channel, window_us, period_us)
        self.run_until(self.now + window_us)
        return log.occupancy(self.propagation.ed_threshold_dbm), log

    def _sense_async(self, port: RadioPort, channel: int, window_us: int,
                     proc: _Process) -> None:
        log = self._sample_schedule(port.device_id, port.band, channel, window_us, MS)
        end = self.now + window_us

        def finish():
            self._step(proc, log.occupancy(self.propagation.ed_threshold_dbm))

        self.at(end, finish)
