"""Build pipeline, flash protocol, target execution and daemon liveness."""

from __future__ import annotations

import hashlib

import pytest

from coins import firmware as fw
from coins.device import (
    FLASH_BLOCK,
    FLASH_CAPACITY,
    Builder,
    BuildFailed,
    BuildSpecError,
    DeviceDaemon,
    FirmwareImage,
    FlashVerifyFailed,
    NotReserved,
    StorageFull,
    TargetBusy,
    TargetNode,
    parse_build_spec,
)
from coins.lcsp import LcspRequest
from coins.radio import MS, SECOND, Medium, VirtualClock
from coins.registry import Registry

TX_SOURCE = """\
SET_CHANNEL 0
TX DEADBEEF
REPORT 0
"""

RX_SOURCE = """\
SET_CHANNEL 0
RX TIMEOUT 500
REPORT RX_DATA
"""

BUILD_SPEC = """\
[steps]
step = compile_firmware fw/tx.fw -> out/tx.img
step = compile_firmware fw/rx.fw -> out/rx.img

[images]
tx = out/tx.img
rx = out/rx.img
"""


def base_tree() -> dict[str, bytes]:
    return {
        "build.spec": BUILD_SPEC.encode(),
        "fw/tx.fw": TX_SOURCE.encode(),
        "fw/rx.fw": RX_SOURCE.encode(),
    }


def image_of(source: str, role: str = "tx") -> FirmwareImage:
    code = fw.compile_source(source)
    return FirmwareImage(role, code, hashlib.sha256(code).hexdigest(), "c" * 64,
                         f"fw/{role}.fw")


def raw_image(data: bytes, role: str = "tx") -> FirmwareImage:
    return FirmwareImage(role, data, hashlib.sha256(data).hexdigest(), "c" * 64,
                         f"fw/{role}.bin")


def make_bench(*names: str):
    clock = VirtualClock()
    registry = Registry(clock)
    medium = Medium(clock, seed=7, directory=registry)
    daemons = {}
    for i, name in enumerate(names):
        record = registry.register(name=name, node_type="SRD_A",
                                   position=(5.0 + 10.0 * i, 5.0, 3.5),
                                   environment="outdoor")
        daemons[name] = DeviceDaemon(registry, medium, record.device_id)
    return registry, medium, daemons


# ---------------------------------------------------------------------------
# Build spec parsing
# ---------------------------------------------------------------------------


def test_parse_build_spec_minimal():
    spec = parse_build_spec(BUILD_SPEC)
    assert [s.op for s in spec.steps] == ["compile_firmware", "compile_firmware"]
    assert spec.steps[0].source == "fw/tx.fw"
    assert spec.steps[0].output == "out/tx.img"
    assert spec.images == {"tx": "out/tx.img", "rx": "out/rx.img"}
    assert spec.cache_inputs is None


def test_parse_build_spec_cache_inputs():
    text = BUILD_SPEC + "\n[cache]\ninputs = fw/tx.fw fw/rx.fw\n"
    assert parse_build_spec(text).cache_inputs == ("fw/tx.fw", "fw/rx.fw")


@pytest.mark.parametrize("line", [
    "step = compile_firmware fw/tx.fw out/tx.img",
    "step = compile_firmware -> out/tx.img",
    "step = link fw/tx.fw -> out/tx.img",
    "step = compile_firmware a b -> out/tx.img",
])
def test_parse_build_spec_bad_step(line):
    text = f"[steps]\n{line}\n[images]\ntx = out/tx.img\n"
    with pytest.raises(BuildSpecError):
        parse_build_spec(text)


def test_parse_build_spec_duplicate_output():
    text = ("[steps]\n"
            "step = copy a -> out/x\n"
            "step = copy b -> out/x\n"
            "[images]\nx = out/x\n")
    with pytest.raises(BuildSpecError, match="produced twice"):
        parse_build_spec(text)


def test_parse_build_spec_image_not_produced():
    text = "[steps]\nstep = copy a -> out/x\n[images]\ntx = out/y\n"
    with pytest.raises(BuildSpecError, match="not produced"):
        parse_build_spec(text)


def test_parse_build_spec_requires_steps_and_images():
    with pytest.raises(BuildSpecError, match="no \\[steps\\]"):
        parse_build_spec("[images]\ntx = out/x\n")
    with pytest.raises(BuildSpecError, match="no \\[images\\]"):
        parse_build_spec("[steps]\nstep = copy a -> out/x\n")


def test_parse_build_spec_unknown_key():
    text = BUILD_SPEC + "\n[steps]\nstep2 = copy a -> b\n"
    with pytest.raises(BuildSpecError, match="unknown setting"):
        parse_build_spec(text)


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------


def test_build_produces_loadable_images(tmp_path):
    builder = Builder(tmp_path)
    result = builder.build(base_tree(), "a" * 64, "build.spec")
    assert result.steps_executed == 2
    assert not result.cached
    assert set(result.images) == {"tx", "rx"}
    image = result.images["tx"]
    assert image.checksum == hashlib.sha256(image.bytecode).hexdigest()
    assert image.built_from == "a" * 64
    assert image.source_path == "fw/tx.fw"
    fw.load(image.bytecode)
    assert "step 1: compile_firmware fw/tx.fw -> out/tx.img" in result.log


def test_build_chained_steps(tmp_path):
    tree = base_tree()
    tree["build.spec"] = (
        "[steps]\n"
        "step = compile_firmware fw/tx.fw -> out/tx.img\n"
        "step = checksum out/tx.img -> out/tx.sum\n"
        "step = copy out/tx.img -> out/final.img\n"
        "[images]\ntx = out/final.img\n").encode()
    builder = Builder(tmp_path)
    result = builder.build(tree, "a" * 64, "build.spec")
    image = result.images["tx"]
    assert image.bytecode == fw.compile_source(TX_SOURCE)
    # chain traces back to the original tree file
    assert image.source_path == "fw/tx.fw"


def test_build_cache_hit_is_exact_and_free(tmp_path):
    builder = Builder(tmp_path)
    first = builder.build(base_tree(), "a" * 64, "build.spec")
    second = builder.build(base_tree(), "b" * 64, "build.spec")
    assert second.cached
    assert second.steps_executed == 0
    assert second.cache_key == first.cache_key
    for role in first.images:
        assert second.images[role].bytecode == first.images[role].bytecode
        assert second.images[role].checksum == first.images[role].checksum
        assert second.images[role].built_from == "b" * 64
    assert "cache hit" in second.log


def test_build_cache_miss_on_source_change(tmp_path):
    builder = Builder(tmp_path)
    first = builder.build(base_tree(), "a" * 64, "build.spec")
    tree = base_tree()
    tree["fw/tx.fw"] = TX_SOURCE.replace("DEADBEEF", "CAFE").encode()
    second = builder.build(tree, "b" * 64, "build.spec")
    assert not second.cached
    assert second.cache_key != first.cache_key
    assert second.images["tx"].bytecode != first.images["tx"].bytecode


def test_build_cache_miss_on_spec_change(tmp_path):
    builder = Builder(tmp_path)
    first = builder.build(base_tree(), "a" * 64, "build.spec")
    tree = base_tree()
    tree["build.spec"] = (BUILD_SPEC + "# tweak\n").encode()
    second = builder.build(tree, "a" * 64, "build.spec")
    assert not second.cached
    assert second.cache_key != first.cache_key


def test_build_cache_inputs_override_is_literal(tmp_path):
    # With [cache] restricted to the tx source, an rx edit reuses the
    # stale artifact: the override means exactly what it says.
    tree = base_tree()
    tree["build.spec"] = (BUILD_SPEC + "[cache]\ninputs = fw/tx.fw\n").encode()
    builder = Builder(tmp_path)
    first = builder.build(tree, "a" * 64, "build.spec")
    tree2 = dict(tree)
    tree2["fw/rx.fw"] = RX_SOURCE.replace("500", "900").encode()
    second = builder.build(tree2, "b" * 64, "build.spec")
    assert second.cached
    assert second.images["rx"].bytecode == first.images["rx"].bytecode


def test_build_compile_error_carries_log(tmp_path):
    tree = base_tree()
    tree["fw/tx.fw"] = b"SET_CHANNEL 0\nEXPLODE\n"
    builder = Builder(tmp_path)
    with pytest.raises(BuildFailed) as info:
        builder.build(tree, "a" * 64, "build.spec")
    assert "line 2" in str(info.value)
    assert "fw/tx.fw" in info.value.log


def test_build_missing_input(tmp_path):
    tree = base_tree()
    del tree["fw/rx.fw"]
    with pytest.raises(BuildFailed, match="not found"):
        Builder(tmp_path).build(tree, "a" * 64, "build.spec")


def test_build_missing_spec(tmp_path):
    with pytest.raises(BuildSpecError, match="no build spec"):
        Builder(tmp_path).build({}, "a" * 64, "nope.spec")


def test_build_output_quota(tmp_path):
    tree = {
        "build.spec": ("[steps]\nstep = copy big.bin -> out/big\n"
                       "[images]\ntx = out/big\n").encode(),
        "big.bin": b"\x00" * (1024 * 1024 + 1),
    }
    with pytest.raises(BuildFailed, match="quota"):
        Builder(tmp_path).build(tree, "a" * 64, "build.spec")


def test_build_failure_is_not_cached(tmp_path):
    builder = Builder(tmp_path)
    tree = base_tree()
    tree["fw/tx.fw"] = b"EXPLODE\n"
    with pytest.raises(BuildFailed):
        builder.build(tree, "a" * 64, "build.spec")
    fixed = base_tree()
    result = builder.build(fixed, "a" * 64, "build.spec")
    assert not result.cached
    assert result.steps_executed == 2


# ---------------------------------------------------------------------------
# Flash protocol
# ---------------------------------------------------------------------------


def big_image() -> FirmwareImage:
    lines = ["SET_CHANNEL 0"] + ["REPORT 0"] * 60
    return image_of("\n".join(lines) + "\n")


def test_flash_happy_path():
    _, _, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    image = big_image()
    assert len(image.bytecode) > 2 * FLASH_BLOCK
    daemon.flash(image)
    assert daemon.target.state == "flashed-idle"
    assert daemon.target.image.bytecode == image.bytecode
    assert daemon.flash_count == 1


def test_flash_corrupt_block_fails_then_retry_succeeds():
    _, _, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    daemon.faults.corrupt_flash_blocks = 1
    daemon.flash(big_image())
    assert daemon.target.state == "flashed-idle"
    assert "checksum mismatch" in daemon.target.render_log()


def test_flash_corruption_exhausts_attempts():
    _, _, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    daemon.faults.corrupt_flash_blocks = 1
    with pytest.raises(FlashVerifyFailed, match="checksum"):
        daemon.flash(big_image(), max_attempts=1)
    assert daemon.target.state == "empty"


def test_flash_resumes_after_dropped_blocks():
    _, _, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    daemon.faults.drop_flash_block_acks = 2
    daemon.flash(big_image())
    assert daemon.target.state == "flashed-idle"
    assert "flash resume" in daemon.target.render_log()


def test_flash_begin_with_new_image_restarts():
    _, medium, daemons = make_bench("srd-a-01")
    target = daemons["srd-a-01"].target
    a, b = big_image(), image_of(TX_SOURCE)
    target.flash_begin(a)
    target.flash_block(0, a.bytecode[:FLASH_BLOCK])
    assert target.flash_begin(b) == set()
    total = (len(b.bytecode) + FLASH_BLOCK - 1) // FLASH_BLOCK
    for i in range(total):
        target.flash_block(i, b.bytecode[i * FLASH_BLOCK:(i + 1) * FLASH_BLOCK])
    target.flash_finalize()
    assert target.image.bytecode == b.bytecode


def test_flash_block_validation():
    _, _, daemons = make_bench("srd-a-01")
    target = daemons["srd-a-01"].target
    image = big_image()
    target.flash_begin(image)
    with pytest.raises(FlashVerifyFailed, match="outside"):
        target.flash_block(99, b"\x00" * FLASH_BLOCK)
    with pytest.raises(FlashVerifyFailed, match="bytes"):
        target.flash_block(0, b"\x00" * 10)


def test_flash_finalize_without_begin():
    _, _, daemons = make_bench("srd-a-01")
    with pytest.raises(FlashVerifyFailed, match="no transfer"):
        daemons["srd-a-01"].target.flash_finalize()


def test_flash_rejects_oversize_and_empty():
    _, _, daemons = make_bench("srd-a-01")
    target = daemons["srd-a-01"].target
    with pytest.raises(StorageFull):
        target.flash_begin(raw_image(b"\x00" * (FLASH_CAPACITY + 1)))
    with pytest.raises(FlashVerifyFailed, match="empty"):
        target.flash_begin(raw_image(b""))


# ---------------------------------------------------------------------------
# Execution over the serial control protocol
# ---------------------------------------------------------------------------


def deploy_pair(registry, medium, daemons, tx_name="srd-a-01", rx_name="srd-a-02"):
    tx, rx = daemons[tx_name], daemons[rx_name]
    ids = [tx.device_id, rx.device_id]
    registry.reserve("r000001", ids)
    tx.deploy(image_of(TX_SOURCE, "tx"), "r000001")
    rx.deploy(image_of(RX_SOURCE, "rx"), "r000001")
    return tx, rx


def test_exec_pair_end_to_end():
    registry, medium, daemons = make_bench("srd-a-01", "srd-a-02")
    tx, rx = deploy_pair(registry, medium, daemons)
    assert rx.status() == "flashed-idle"
    assert rx.start_run(channel=0, band="SRD868", start_delay_ms=10).status == "OK"
    assert tx.start_run(channel=0, band="SRD868", start_delay_ms=50).status == "OK"
    assert rx.status() == "running"
    assert rx.result().status == "ERROR"
    done = medium.run_processes([tx.target.proc, rx.target.proc], SECOND)
    assert done
    assert rx.status() == "flashed-idle"
    response = rx.result()
    assert response.status == "OK"
    assert response.body == bytes.fromhex("DEADBEEF")
    assert tx.result().body == b"0"


def test_exec_requires_firmware():
    _, _, daemons = make_bench("srd-a-01")
    response = daemons["srd-a-01"].start_run(channel=0, band="SRD868")
    assert response.status == "ERROR"
    assert "no firmware" in response.reason


def test_exec_while_running_is_busy():
    registry, medium, daemons = make_bench("srd-a-01", "srd-a-02")
    tx, _ = deploy_pair(registry, medium, daemons)
    assert tx.start_run(channel=0, band="SRD868").status == "OK"
    again = tx.start_run(channel=0, band="SRD868")
    assert again.status == "ERROR"
    assert "running" in again.reason


def test_exec_bad_parameters():
    registry, medium, daemons = make_bench("srd-a-01", "srd-a-02")
    tx, _ = deploy_pair(registry, medium, daemons)
    for body in [b"channel=abc", b"chan=0", b"channel", b"start_delay_ms=-1"]:
        response = tx.client.call(LcspRequest("POST", "/run", body))
        assert response.status == "ERROR", body


def test_exec_unsupported_channel_reported():
    registry, medium, daemons = make_bench("srd-a-01", "srd-a-02")
    tx, _ = deploy_pair(registry, medium, daemons)
    response = tx.start_run(channel=77, band="SRD868")
    assert response.status == "ERROR"
    assert tx.status() == "flashed-idle"


def test_bad_image_crashes_at_boot():
    registry, medium, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    registry.reserve("r000001", [daemon.device_id])
    daemon.deploy(raw_image(b"this is not firmware at all, not even close"),
                  "r000001")
    response = daemon.start_run(channel=0, band="SRD868")
    assert response.status == "ERROR"
    assert "bad-image" in response.reason
    assert daemon.status() == "crashed"
    # recovery path: a correct image re-flashes and boots
    daemon.deploy(image_of(TX_SOURCE), "r000001")
    assert daemon.status() == "flashed-idle"


def test_crashed_node_refuses_exec_until_reflashed():
    registry, medium, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    registry.reserve("r000001", [daemon.device_id])
    daemon.deploy(image_of("REPORT RX_COUNT / RX_COUNT\n"), "r000001")
    assert daemon.start_run(channel=0, band="SRD868").status == "OK"
    medium.run_processes([daemon.target.proc], SECOND)
    assert daemon.status() == "crashed"
    response = daemon.result()
    assert response.status == "ERROR"
    assert "div-zero" in response.reason
    again = daemon.start_run(channel=0, band="SRD868")
    assert again.status == "ERROR"
    assert "crashed" in again.reason


def test_trap_report_in_log():
    registry, medium, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    registry.reserve("r000001", [daemon.device_id])
    daemon.deploy(image_of("REPORT RX_COUNT / RX_COUNT\n"), "r000001")
    daemon.start_run(channel=0, band="SRD868")
    medium.run_processes([daemon.target.proc], SECOND)
    log = daemon.device_log()
    assert "trap div-zero" in log
    assert "crashed: div-zero" in log


def test_log_is_timestamped_and_bounded():
    registry, medium, daemons = make_bench("srd-a-01", "srd-a-02")
    tx, _ = deploy_pair(registry, medium, daemons)
    tx.start_run(channel=0, band="SRD868", start_delay_ms=10)
    medium.run_processes([tx.target.proc], SECOND)
    log = tx.device_log()
    lines = log.strip().splitlines()
    assert all(line.split(" ", 1)[0].isdigit() for line in lines)
    assert len(log.encode()) <= 4096
    assert any("run finished" in line for line in lines)


def test_unknown_resource():
    _, _, daemons = make_bench("srd-a-01")
    response = daemons["srd-a-01"].client.call(LcspRequest("GET", "/nope"))
    assert response.status == "ERROR"
    assert "unknown resource" in response.reason


def test_abort_stops_long_run():
    registry, medium, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    registry.reserve("r000001", [daemon.device_id])
    daemon.deploy(image_of("LOOP 10000\nSENSE WINDOW 10\nEND\nREPORT 1\n"),
                  "r000001")
    daemon.start_run(channel=0, band="SRD868", start_delay_ms=0)
    medium.run_until(medium.now + SECOND)
    assert daemon.status() == "running"
    daemon.target.abort()
    assert daemon.status() == "flashed-idle"
    assert daemon.target.proc.done
    medium.run_until(medium.now + SECOND)  # nothing left over explodes


def test_result_empty_report_is_empty_body():
    registry, medium, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    registry.reserve("r000001", [daemon.device_id])
    daemon.deploy(image_of("SET_CHANNEL 1\n"), "r000001")
    daemon.start_run(channel=0, band="SRD868")
    medium.run_processes([daemon.target.proc], SECOND)
    response = daemon.result()
    assert response.status == "OK"
    assert response.body == b""


# ---------------------------------------------------------------------------
# Daemon: reservations, heartbeats, fault knobs
# ---------------------------------------------------------------------------


def test_deploy_requires_reservation():
    registry, medium, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    with pytest.raises(NotReserved):
        daemon.deploy(image_of(TX_SOURCE), "r000001")
    registry.reserve("r000001", [daemon.device_id])
    daemon.deploy(image_of(TX_SOURCE), "r000001")
    with pytest.raises(NotReserved):
        daemon.deploy(image_of(TX_SOURCE), "r000002")


def test_deploy_oversize_image():
    registry, medium, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    registry.reserve("r000001", [daemon.device_id])
    with pytest.raises(StorageFull):
        daemon.deploy(raw_image(b"\x00" * (FLASH_CAPACITY + 1)), "r000001")


def test_flash_refused_while_running():
    registry, medium, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    registry.reserve("r000001", [daemon.device_id])
    daemon.deploy(image_of("LOOP 100\nSENSE WINDOW 10\nEND\n"), "r000001")
    daemon.start_run(channel=0, band="SRD868", start_delay_ms=0)
    medium.run_until(medium.now + 100 * MS)
    with pytest.raises(TargetBusy):
        daemon.flash(image_of(TX_SOURCE))


def test_heartbeats_keep_device_available():
    registry, medium, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    daemon.start_heartbeats()
    medium.run_until(35 * SECOND)
    report = registry.availability_sweep()
    assert report["stale"] == []
    record = registry.get(daemon.device_id)
    assert record.state == "available"
    assert record.metrics["uptime_s"] == pytest.approx(30.0)
    assert record.metrics["flash_count"] == 0


def test_heartbeats_survive_firmware_crash():
    registry, medium, daemons = make_bench("srd-a-01")
    daemon = daemons["srd-a-01"]
    daemon.start_heartbeats()
    registry.reserve("r000001", [daemon.device_id])
    daemon.deploy(image_of("LOOP 1000000\nREPORT 1\nEND\n"), "r000001")
    daemon.start_run(channel=0, band="SRD868", budget=50_000)
    medium.run_until(45 * SECOND)
    assert daemon.status() == "crashed"
    registry.release("r000001")
    report = registry.availability_sweep()
    assert report["stale"] == []
    assert registry.get(daemon.device_id).state == "available"


def test_silent_daemon_goes_stale():
    registry, medium, daemons = make_bench("srd-a-01", "srd-a-02")
    daemons["srd-a-01"].start_heartbeats()
    medium.run_until(40 * SECOND)
    report = registry.availability_sweep()
    assert report["stale"] == ["srd-a-02"]


def test_corrupt_tx_knob_garbles_payload():
    registry, medium, daemons = make_bench("srd-a-01", "srd-a-02")
    tx, rx = deploy_pair(registry, medium, daemons)
    tx.faults.corrupt_tx = True
    rx.start_run(channel=0, band="SRD868", start_delay_ms=10)
    tx.start_run(channel=0, band="SRD868", start_delay_ms=50)
    assert medium.run_processes([tx.target.proc, rx.target.proc], SECOND)
    garbled = rx.result().body
    assert garbled != bytes.fromhex("DEADBEEF")
    assert garbled == bytes(b ^ 0xFF for b in bytes.fromhex("DEADBEEF"))


def test_run_count_tracks_successful_starts():
    registry, medium, daemons = make_bench("srd-a-01", "srd-a-02")
    tx, _ = deploy_pair(registry, medium, daemons)
    tx.start_run(channel=0, band="SRD868")
    medium.run_processes([tx.target.proc], SECOND)
    tx.start_run(channel=0, band="SRD868")
    medium.run_processes([tx.target.proc], SECOND)
    assert tx.run_count == 2
    bad = tx.start_run(channel=99, band="SRD868")
    assert bad.status == "ERROR"
    assert tx.run_count == 2
