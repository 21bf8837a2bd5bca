"""Emulated target devices and their infrastructure daemons.

A target node is the device under test: it accepts firmware over a
block-wise development interface, runs it as a sandboxed VM process on
the shared medium, and answers a serial control protocol (``/status``,
``/run``, ``/result``, ``/log``). The device daemon is the infrastructure
side: it builds nothing itself, but flashes images handed to it by the
pipeline, keeps the registry heartbeat alive independently of whatever
the firmware does, and owns the fault-injection knobs used in tests.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import firmware as fw
from . import kvconf
from .lcsp import LcspClient, LcspRequest, LcspResponse, SerialChannel, error, ok
from .radio import MS, Medium, UnsupportedChannel
from .registry import HEARTBEAT_PERIOD_US, Registry

FLASH_BLOCK = 256
FLASH_CAPACITY = 64 * 1024
BUILD_OUTPUT_QUOTA = 1024 * 1024
BUILD_WALL_TIMEOUT_S = 60.0


class DeviceError(Exception):
    """Base class for device-side errors."""


class BuildSpecError(DeviceError):
    """Build spec file malformed or its step graph inconsistent."""


class BuildFailed(DeviceError):
    def __init__(self, message: str, log: str):
        super().__init__(message)
        self.log = log


class NotReserved(DeviceError):
    """Deploy attempted without holding the device's reservation."""


class StorageFull(DeviceError):
    """Image exceeds the node's flash capacity."""


class TargetBusy(DeviceError):
    """Operation refused while firmware is running."""


class FlashVerifyFailed(DeviceError):
    """Assembled image does not match the announced checksum."""


class TargetCrash(DeviceError):
    def __init__(self, kind: str, log: str):
        super().__init__(f"target crashed: {kind}")
        self.kind = kind
        self.log = log


# ---------------------------------------------------------------------------
# Build specs and the builder
# ---------------------------------------------------------------------------

_STEP_OPS = ("compile_firmware", "copy", "checksum")


@dataclass(frozen=True)
class BuildStep:
    op: str
    source: str
    output: str
    line_no: int


@dataclass(frozen=True)
class BuildSpec:
    steps: tuple[BuildStep, ...]
    images: dict[str, str]  # role -> artifact path
    cache_inputs: tuple[str, ...] | None  # None: derive from step sources


@dataclass(frozen=True)
class FirmwareImage:
    role: str
    bytecode: bytes
    checksum: str
    built_from: str
    source_path: str


@dataclass
class BuildResult:
    images: dict[str, FirmwareImage]
    steps_executed: int
    log: str
    cache_key: str
    cached: bool
    wall_s: float


def parse_build_spec(text: str) -> BuildSpec:
    try:
        sections = kvconf.Sections(kvconf.parse_kv(text))
    except kvconf.KvSyntaxError as exc:
        raise BuildSpecError(str(exc)) from None
    steps = []
    outputs: set[str] = set()
    for entry in sections.get_all("steps", "step"):
        parts = entry.value.split()
        if len(parts) != 4 or parts[2] != "->":
            raise BuildSpecError(
                f"line {entry.line_no}: step must be '<op> <input> -> <output>'")
        op, source, _, output = parts
        if op not in _STEP_OPS:
            raise BuildSpecError(f"line {entry.line_no}: unknown op {op!r}")
        if output in outputs:
            raise BuildSpecError(f"line {entry.line_no}: {output!r} produced twice")
        outputs.add(output)
        steps.append(BuildStep(op, source, output, entry.line_no))
    if not steps:
        raise BuildSpecError("build spec has no [steps]")

    images = {}
    for entry in sections.items("images"):
        if entry.key in images:
            raise BuildSpecError(f"line {entry.line_no}: image role {entry.key!r} repeated")
        if entry.value not in outputs:
            raise BuildSpecError(
                f"line {entry.line_no}: image {entry.value!r} is not produced by any step")
        images[entry.key] = entry.value
    if not images:
        raise BuildSpecError("build spec maps no [images] roles")

    cache_raw = sections.get("cache", "inputs")
    cache_inputs = tuple(cache_raw.split()) if cache_raw is not None else None

    stray = sections.unclaimed()
    if stray:
        raise BuildSpecError(
            f"line {stray[0].line_no}: unknown setting [{stray[0].section}] {stray[0].key}")
    return BuildSpec(tuple(steps), images, cache_inputs)


class Builder:
    """Executes build specs against commit trees, with content caching.

    A cache hit replays nothing: the stored artifacts are returned
    byte-identical, only re-stamped with the requesting commit.
    """

    def __init__(self, work_dir: str | Path):
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self._cache: dict[str, BuildResult] = {}
        self._count = 0

    def cache_key(self, spec_text: str, spec: BuildSpec, tree: dict[str, bytes]) -> str:
        if spec.cache_inputs is not None:
            inputs = spec.cache_inputs
        else:
            inputs = tuple(s.source for s in spec.steps if s.source in tree)
        h = hashlib.sha256(spec_text.encode())
        for path in sorted(set(inputs)):
            h.update(path.encode())
            h.update(b"\x00")
            h.update(hashlib.sha256(tree.get(path, b"")).digest())
        return h.hexdigest()

    def build(self, tree: dict[str, bytes], commit_id: str, spec_path: str) -> BuildResult:
        if spec_path not in tree:
            raise BuildSpecError(f"no build spec at {spec_path!r}")
        spec_text = tree[spec_path].decode("utf-8", errors="replace")
        spec = parse_build_spec(spec_text)
        key = self.cache_key(spec_text, spec, tree)
        hit = self._cache.get(key)
        if hit is not None:
            images = {role: FirmwareImage(img.role, img.bytecode, img.checksum,
                                          commit_id, img.source_path)
                      for role, img in hit.images.items()}
            return BuildResult(images, 0, hit.log + "cache hit: all steps skipped\n",
                               key, True, 0.0)

        started = time.monotonic()
        self._count += 1
        sandbox = self.work_dir / f"build-{self._count:04d}"
        sandbox.mkdir(parents=True, exist_ok=True)
        produced: dict[str, bytes] = {}
        source_of: dict[str, str] = {}
        log_lines = []
        written = 0
        for i, step in enumerate(spec.steps, start=1):
            if time.monotonic() - started > BUILD_WALL_TIMEOUT_S:
                raise BuildFailed("build timed out", "\n".join(log_lines) + "\n")
            if step.source in produced:
                data = produced[step.source]
            elif step.source in tree:
                data = tree[step.source]
            else:
                log_lines.append(f"step {i}: {step.op} {step.source}: no such input")
                raise BuildFailed(f"input {step.source!r} not found",
                                  "\n".join(log_lines) + "\n")
            try:
                if step.op == "compile_firmware":
                    out = fw.compile_source(data.decode("utf-8", errors="replace"))
                elif step.op == "copy":
                    out = data
                else:
                    out = hashlib.sha256(data).hexdigest().encode() + b"\n"
            except fw.CompileError as exc:
                log_lines.append(f"step {i}: {step.op} {step.source}: {exc}")
                raise BuildFailed(f"{step.source}: {exc}",
                                  "\n".join(log_lines) + "\n") from None
            written += len(out)
            if written > BUILD_OUTPUT_QUOTA:
                log_lines.append(f"step {i}: output quota exceeded")
                raise BuildFailed("build output quota exceeded",
                                  "\n".join(log_lines) + "\n")
            produced[step.output] = out
            source_of[step.output] = (source_of.get(step.source, step.source))
            target = sandbox / step.output.replace("/", "__")
            target.write_bytes(out)
            log_lines.append(f"step {i}: {step.op} {step.source} -> {step.output} "
                             f"({len(out)} bytes)")

        images = {}
        for role, path in spec.images.items():
            images[role] = FirmwareImage(
                role, produced[path], hashlib.sha256(produced[path]).hexdigest(),
                commit_id, source_of.get(path, path))
        log_lines.append(f"built {len(images)} image(s) in {len(spec.steps)} step(s)")
        result = BuildResult(images, len(spec.steps), "\n".join(log_lines) + "\n",
                             key, False, time.monotonic() - started)
        self._cache[key] = result
        return result


# ---------------------------------------------------------------------------
# Target node
# ---------------------------------------------------------------------------


class TargetNode:
    """The device under test: flashable storage plus a firmware sandbox.

    States: ``empty`` (no image), ``flashed-idle``, ``running``,
    ``crashed``. Flashing is allowed in every state except ``running``;
    a crashed node recovers by being re-flashed.
    """

    def __init__(self, device_id: str, name: str, medium: Medium):
        self.device_id = device_id
        self.name = name
        self.medium = medium
        self.state = "empty"
        self.image: FirmwareImage | None = None
        self.vm: fw.FirmwareVM | None = None
        self.proc = None
        self.has_result = False
        self.log: list[tuple[int, str]] = []
        self.tx_transform = None
        self.rx_transform = None
        self._flash_buffer: bytearray | None = None
        self._flash_blocks: set[int] = set()
        self._flash_checksum = ""
        self._pending_image: FirmwareImage | None = None

    def _note(self, message: str) -> None:
        self.log.append((self.medium.now, message))

    # -- development interface (flash) --------------------------------------

    def flash_begin(self, image: FirmwareImage) -> set[int]:
        """Open a transfer; returns block indices already present so an
        interrupted transfer resumes instead of starting over."""
        self._refresh()
        if self.state == "running":
            raise TargetBusy("cannot flash while firmware runs")
        size = len(image.bytecode)
        if size == 0:
            raise FlashVerifyFailed("empty image")
        if size > FLASH_CAPACITY:
            raise StorageFull(f"image is {size} bytes, capacity {FLASH_CAPACITY}")
        if (self._flash_buffer is not None and self._flash_checksum == image.checksum
                and len(self._flash_buffer) == size):
            self._note(f"flash resume at {len(self._flash_blocks)} blocks")
            return set(self._flash_blocks)
        self._flash_buffer = bytearray(size)
        self._flash_blocks = set()
        self._flash_checksum = image.checksum
        self._pending_image = image
        self._note(f"flash begin size={size} blocks={(size + FLASH_BLOCK - 1) // FLASH_BLOCK}")
        return set()

    def flash_block(self, index: int, data: bytes) -> int:
        if self._flash_buffer is None:
            raise FlashVerifyFailed("no transfer in progress")
        total = (len(self._flash_buffer) + FLASH_BLOCK - 1) // FLASH_BLOCK
        if not 0 <= index < total:
            raise FlashVerifyFailed(f"block {index} outside image")
        start = index * FLASH_BLOCK
        expected = min(FLASH_BLOCK, len(self._flash_buffer) - start)
        if len(data) != expected:
            raise FlashVerifyFailed(f"block {index} is {len(data)} bytes, want {expected}")
        self._flash_buffer[start:start + len(data)] = data
        self._flash_blocks.add(index)
        return index

    def flash_finalize(self) -> None:
        if self._flash_buffer is None:
            raise FlashVerifyFailed("no transfer in progress")
        total = (len(self._flash_buffer) + FLASH_BLOCK - 1) // FLASH_BLOCK
        missing = total - len(self._flash_blocks)
        if missing:
            # Transfer stays open: the writer resumes from the blocks
            # that did arrive instead of starting over.
            self._note(f"flash incomplete: {missing} block(s) missing")
            raise FlashVerifyFailed(f"{missing} block(s) never arrived")
        buffer, image = self._flash_buffer, self._pending_image
        self._flash_buffer = None
        self._flash_blocks = set()
        self._pending_image = None
        digest = hashlib.sha256(bytes(buffer)).hexdigest()
        if digest != image.checksum:
            self._note("flash failed: checksum mismatch")
            raise FlashVerifyFailed("assembled image does not match checksum")
        self.image = FirmwareImage(image.role, bytes(buffer), digest,
                                   image.built_from, image.source_path)
        self.state = "flashed-idle"
        self.vm = None
        self.proc = None
        self.has_result = False
        self._note(f"flash ok role={image.role} checksum={digest[:12]}")

    # -- execution -----------------------------------------------------------

    def _refresh(self) -> None:
        if self.state == "running" and self.proc is not None and self.proc.done:
            if isinstance(self.proc.error, fw.FirmwareTrap):
                self.state = "crashed"
                self._note(f"crashed: {self.proc.error.kind}")
            elif self.proc.error is not None:
                self.state = "crashed"
                self._note(f"crashed: {self.proc.error}")
            else:
                self.state = "flashed-idle"
                self.has_result = True
                self._note("run finished")

    def exec_start(self, channel: int = 0, start_delay_ms: int = 50,
                   band: str = "SRD868", budget: int = fw.DEFAULT_BUDGET) -> None:
        self._refresh()
        if self.state == "running":
            raise TargetBusy("firmware already running")
        if self.state == "crashed":
            raise TargetCrash("not-bootable", self.render_log())
        if self.state != "flashed-idle":
            raise TargetBusy("no firmware flashed")
        try:
            program = fw.load(self.image.bytecode)
        except (fw.FormatError, fw.VerifyError) as exc:
            self.state = "crashed"
            self._note(f"boot rejected image: {exc}")
            raise TargetCrash("bad-image", self.render_log()) from None
        try:
            port = self.medium.port(self.device_id, band,
                                    tx_transform=self.tx_transform,
                                    rx_transform=self.rx_transform)
            if not port.check_channel(channel):
                raise UnsupportedChannel(f"{band} has no channel {channel}")
        except UnsupportedChannel as exc:
            self._note(f"exec refused: {exc}")
            raise
        self.vm = fw.FirmwareVM(program, port, channel=channel, budget=budget)
        self.proc = self.medium.add_process(
            self.vm.execute(), name=f"{self.name}:fw",
            start_us=self.medium.now + start_delay_ms * MS)
        self.state = "running"
        self.has_result = False
        self._note(f"run scheduled channel={channel} delay={start_delay_ms}ms")

    def abort(self) -> None:
        self._refresh()
        if self.state == "running":
            self.proc.done = True
            self.state = "flashed-idle"
            self._note("run aborted by controller")

    def render_result(self) -> bytes:
        report = self.vm.report if self.vm is not None else None
        if report is None:
            return b""
        if isinstance(report, bytes):
            return report
        return str(report).encode("ascii")

    def render_log(self) -> str:
        lines = [f"{t} {message}" for t, message in self.log]
        if self.vm is not None:
            lines += [f"{t} fw: {message}" for t, message in self.vm.event_log]
        lines.sort(key=lambda s: int(s.split(" ", 1)[0]))
        return "\n".join(lines) + ("\n" if lines else "")

    # -- serial control server ------------------------------------------------

    def handle_request(self, request: LcspRequest) -> LcspResponse:
        self._refresh()
        if request.method == "GET" and request.resource == "/status":
            return ok(self.state.encode())
        if request.method == "GET" and request.resource == "/result":
            if self.state == "running":
                return error("busy")
            if self.state == "crashed":
                kind = (self.vm.trap.kind if self.vm is not None and self.vm.trap
                        else "crash")
                return error(f"crashed: {kind}")
            if not self.has_result:
                return error("no result")
            return ok(self.render_result())
        if request.method == "GET" and request.resource == "/log":
            text = self.render_log().encode()
            return ok(text[-4096:])
        if request.method == "POST" and request.resource == "/run":
            return self._handle_run(request.body)
        return error("unknown resource")

    def _handle_run(self, body: bytes) -> LcspResponse:
        params = {}
        for pair in body.decode("ascii", errors="replace").split("&"):
            if not pair:
                continue
            key, sep, value = pair.partition("=")
            if not sep:
                return error(f"bad parameter {pair!r}")
            params[key] = value
        try:
            channel = int(params.pop("channel", "0"))
            delay = int(params.pop("start_delay_ms", "50"))
            budget = int(params.pop("budget", str(fw.DEFAULT_BUDGET)))
        except ValueError:
            return error("run parameters must be integers")
        band = params.pop("band", "SRD868")
        if params:
            return error(f"unknown run parameter {sorted(params)[0]!r}")
        if delay < 0 or budget < 1:
            return error("bad run parameters")
        try:
            self.exec_start(channel=channel, start_delay_ms=delay, band=band,
                            budget=budget)
        except TargetBusy as exc:
            return error(str(exc))
        except TargetCrash as exc:
            return error(f"crashed: {exc.kind}")
        except UnsupportedChannel as exc:
            return error(str(exc))
        return ok(b"started")


# ---------------------------------------------------------------------------
# Device daemon
# ---------------------------------------------------------------------------


@dataclass
class FaultKnobs:
    """Deterministic fault injection for tests and drills."""

    corrupt_flash_blocks: int = 0     # corrupt the payload of N blocks, once each
    drop_flash_block_acks: int = 0    # pretend N block transfers never happened
    corrupt_rx: bool = False          # target radio flips received bits
    corrupt_tx: bool = False          # target radio flips transmitted bits


def _bitflip(data: bytes) -> bytes:
    return bytes(b ^ 0xFF for b in data)


class DeviceDaemon:
    """Infrastructure-side agent for one registered device.

    Owns the serial link to its target node and the liveness heartbeat.
    The heartbeat is scheduled directly on the medium, so nothing the
    firmware does (trapping, spinning, jamming) can silence it.
    """

    def __init__(self, registry: Registry, medium: Medium, device_id: str):
        record = registry.get(device_id)
        self.registry = registry
        self.medium = medium
        self.device_id = device_id
        self.name = record.name
        self.target = TargetNode(device_id, record.name, medium)
        self.channel = SerialChannel()
        self.channel.server_handler = self.target.handle_request
        self.client = LcspClient(self.channel)
        self.faults = FaultKnobs()
        self.flash_count = 0
        self.run_count = 0
        self._beating = False

    # -- liveness --------------------------------------------------------------

    def start_heartbeats(self) -> None:
        if self._beating:
            return
        self._beating = True
        self.medium.every(HEARTBEAT_PERIOD_US, self._beat)

    def _beat(self) -> None:
        self.registry.heartbeat(self.device_id, {
            "uptime_s": self.medium.now / 1_000_000,
            "flash_count": self.flash_count,
            "run_count": self.run_count,
        })

    # -- deploy ------------------------------------------------------------------

    def deploy(self, image: FirmwareImage, run_id: str) -> None:
        """Reservation-gated flash: the daemon only reprograms hardware that
        the calling run actually holds."""
        if not self.registry.is_reserved_by(self.device_id, run_id):
            raise NotReserved(f"{self.name} is not reserved by {run_id}")
        if len(image.bytecode) > FLASH_CAPACITY:
            raise StorageFull(f"{len(image.bytecode)} bytes exceed flash capacity")
        self.flash(image)

    def flash(self, image: FirmwareImage, max_attempts: int = 2) -> None:
        """Block-wise transfer with resume; retries once on a verify failure."""
        if self.target.state == "running":
            raise TargetBusy(f"{self.name} is running firmware")
        blocks = [image.bytecode[i:i + FLASH_BLOCK]
                  for i in range(0, len(image.bytecode), FLASH_BLOCK)]
        last_error: FlashVerifyFailed | None = None
        for _ in range(max_attempts):
            present = self.target.flash_begin(image)
            for index, data in enumerate(blocks):
                if index in present:
                    continue
                if self.faults.drop_flash_block_acks > 0:
                    self.faults.drop_flash_block_acks -= 1
                    continue  # block never sent; resume will carry it
                payload = data
                if self.faults.corrupt_flash_blocks > 0:
                    self.faults.corrupt_flash_blocks -= 1
                    payload = _bitflip(data)
                self.target.flash_block(index, payload)
            try:
                self.target.flash_finalize()
                self.flash_count += 1
                return
            except FlashVerifyFailed as exc:
                last_error = exc
        raise last_error

    # -- run control ---------------------------------------------------------------

    def start_run(self, channel: int, band: str, start_delay_ms: int = 50,
                  budget: int = fw.DEFAULT_BUDGET) -> LcspResponse:
        self.target.tx_transform = _bitflip if self.faults.corrupt_tx else None
        self.target.rx_transform = _bitflip if self.faults.corrupt_rx else None
        body = (f"channel={channel}&start_delay_ms={start_delay_ms}"
                f"&band={band}&budget={budget}").encode()
        response = self.client.call(LcspRequest("POST", "/run", body))
        if response.status == "OK":
            self.run_count += 1
        return response

    def status(self) -> str:
        return self.client.call(LcspRequest("GET", "/status")).body.decode()

    def result(self) -> LcspResponse:
        return self.client.call(LcspRequest("GET", "/result"))

    def device_log(self) -> str:
        return self.client.call(LcspRequest("GET", "/log")).body.decode()
