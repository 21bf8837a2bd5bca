"""Acceptance suite: one test per shipped guarantee.

Each test stands alone and builds its own testbed; the conftest hook
prints a one-line PASS/FAIL verdict per criterion at the end of the run.
"""

import json
import random
import threading
import time
from pathlib import Path
from types import SimpleNamespace

import pytest

from coins import cli, lcsp
from coins.pipeline import STAGES
from coins.radio import MS, SECOND, export_psd_histogram, select_channel
from coins.system import Testbed

REPO = Path(__file__).resolve().parent.parent
SCENARIOS = REPO / "scenarios"

RX_FW = "RX TIMEOUT 500\nREPORT RX_DATA\n"


def fleet_bed(tmp_path, seed=0, scenario=None) -> Testbed:
    bed = Testbed(tmp_path / "data", seed=seed)
    bed.seed_fleet()
    if scenario:
        bed.load_scenario(SCENARIOS / "interference" / scenario)
    return bed


def push_dir(bed: Testbed, scenario_dir: Path):
    return bed.push(cli.read_tree(scenario_dir))


# ---------------------------------------------------------------------------
# 1. End-to-end CI cycle over live HTTP
# ---------------------------------------------------------------------------


def test_criterion_01_end_to_end_cycle(tmp_path, capsys):
    args = SimpleNamespace(
        addr="127.0.0.1:0", data=str(tmp_path / "data"), seed_file=None,
        no_seed=False, scenario=None, rng_seed=0, time_mode="fast",
        time_factor=10.0)
    bed, server = cli.build_server(args)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    addr = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        capsys.readouterr()
        started = time.perf_counter()
        code = cli.main(["push", str(SCENARIOS / "min-test"),
                         "--addr", addr, "--json"])
        elapsed = time.perf_counter() - started
        assert code == 0
        assert elapsed < 10.0

        run = json.loads(capsys.readouterr().out)
        assert run["stage"] == "Reported"
        assert run["verdict"] == "pass"
        assert run["failed"] is False

        journal = tmp_path / "data" / "journal" / f"{run['run_id']}.jsonl"
        events = [json.loads(line) for line in
                  journal.read_text().splitlines()]
        stages = [e["stage"] for e in events if e["event"] == "stage"]
        assert stages == list(STAGES)
        assert all(e["ok"] for e in events if e["event"] == "stage")
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)


# ---------------------------------------------------------------------------
# 2. assertEqual semantics: environment vs software causes
# ---------------------------------------------------------------------------


def test_criterion_02_failure_causes(tmp_path):
    jammed = fleet_bed(tmp_path / "a", scenario="jammer-ch0.json")
    run = push_dir(jammed, SCENARIOS / "jammer-env")
    assert run.verdict == "fail"
    assert run.cause == "environment"

    clean = fleet_bed(tmp_path / "b")
    run = push_dir(clean, SCENARIOS / "fw-channel-bug")
    assert run.verdict == "fail"
    assert run.cause == "software"


# ---------------------------------------------------------------------------
# 3. Jammed-channel retry, exact attempt counts
# ---------------------------------------------------------------------------


def test_criterion_03_retry_attempt_counts(tmp_path):
    bed = fleet_bed(tmp_path / "on", scenario="jammer-ch0.json")
    run = push_dir(bed, SCENARIOS / "jammer-retry-on")
    assert run.verdict == "pass"
    assert len(run.report.attempts) == 1
    assert run.report.attempts[0].channel == 1

    bed = fleet_bed(tmp_path / "off", scenario="jammer-ch0.json")
    run = push_dir(bed, SCENARIOS / "jammer-retry-off")
    assert run.verdict == "fail"
    assert run.cause == "environment"
    assert len(run.report.attempts) == 3
    assert [a.channel for a in run.report.attempts] == [0, 0, 0]


# ---------------------------------------------------------------------------
# 4. Disjoint-subset redundancy flags the corrupt pair
# ---------------------------------------------------------------------------


def test_criterion_04_redundancy_isolation(tmp_path):
    bed = fleet_bed(tmp_path)
    bad_id = bed.registry.by_name("srd-b-02").device_id
    bed.daemons[bad_id].faults.corrupt_tx = True

    run = push_dir(bed, SCENARIOS / "redundancy")
    assert run.verdict == "pass"
    report = run.report
    assert len(report.subsets) == 3

    failing = [s for s in report.subsets if not s.attempt.passed]
    assert len(failing) == 1
    flagged = set(failing[0].devices.values())
    assert "srd-b-02" in flagged
    assert set(report.hardware_suspects) == flagged

    # brute-force disjointness across subsets
    seen: set[str] = set()
    for subset in report.subsets:
        members = set(subset.devices.values())
        assert len(members) == 2
        assert not members & seen
        seen |= members


# ---------------------------------------------------------------------------
# 5. Warm rebuild skips every step and keeps checksums
# ---------------------------------------------------------------------------


def test_criterion_05_incremental_build(tmp_path):
    bed = fleet_bed(tmp_path)
    tree = cli.read_tree(SCENARIOS / "min-test")
    cold = bed.push(tree)
    assert cold.verdict == "pass"
    assert cold.build.cached is False
    assert cold.build.steps_executed == 2

    tree["README.md"] = b"same firmware, new docs\n"
    warm = bed.push(tree)
    assert warm.verdict == "pass"
    assert warm.commit_id != cold.commit_id
    assert warm.build.cached is True
    assert warm.build.steps_executed == 0
    for role in ("tx", "rx"):
        assert warm.build.images[role].checksum == \
            cold.build.images[role].checksum
    assert warm.build.wall_s < cold.build.wall_s


# ---------------------------------------------------------------------------
# 6. Channel-selection oracle: exhaustive argmin agreement
# ---------------------------------------------------------------------------


def test_criterion_06_channel_selection_oracle():
    rng = random.Random(20210819)
    for _ in range(1000):
        channels = rng.sample(range(16), rng.randint(1, 8))
        occupancy = {ch: rng.choice((0.0, 0.1, 0.25, 0.5, 0.5, 1.0))
                     for ch in channels}
        best = None
        for ch in sorted(occupancy):
            if best is None or occupancy[ch] < occupancy[best]:
                best = ch
        assert select_channel(occupancy) == best


# ---------------------------------------------------------------------------
# 7. Sensing accuracy and histogram determinism
# ---------------------------------------------------------------------------


def test_criterion_07_sensing_accuracy(tmp_path):
    def measure(where):
        bed = fleet_bed(where, seed=0, scenario="duty30-ch2.json")
        sensor = bed.registry.by_name("srd-a-02").device_id
        occupancy, log = bed.medium.sense(sensor, "SRD868", 2,
                                          10 * SECOND, period_us=MS)
        return occupancy, log

    occupancy, log = measure(tmp_path / "one")
    assert len(log.samples) == 10_000
    assert abs(occupancy - 0.30) <= 0.02

    hist = export_psd_histogram(log, bin_width_db=2.0, time_bin_us=SECOND)
    occupancy_again, log_again = measure(tmp_path / "two")
    hist_again = export_psd_histogram(log_again, bin_width_db=2.0,
                                      time_bin_us=SECOND)
    assert occupancy_again == occupancy
    assert hist_again.to_csv().encode() == hist.to_csv().encode()


# ---------------------------------------------------------------------------
# 8. LCSP conformance: corpus, prefixes, fuzzing
# ---------------------------------------------------------------------------


def test_criterion_08_lcsp_conformance():
    corpus = Path(lcsp.__file__).parent / "data" / "lcsp_corpus"
    cases = sorted(corpus.glob("*.json"))
    assert cases
    for meta_path in cases:
        meta = json.loads(meta_path.read_text())
        wire = meta_path.with_suffix(".wire").read_bytes()
        message, used = lcsp.decode(wire, meta["role"])
        assert used == len(wire)
        assert lcsp.encode(message) == wire

    # randomized strict prefixes never yield a message
    rng = random.Random(8)
    printable = "".join(chr(c) for c in range(0x21, 0x7F))
    for _ in range(100_000):
        if rng.random() < 0.5:
            resource = "/" + "".join(rng.choices(printable, k=rng.randint(0, 24)))
            method = rng.choice(("GET", "POST"))
            body = rng.randbytes(rng.randint(0, 64)) if method == "POST" else b""
            message = lcsp.LcspRequest(method, resource, body)
            role = "server"
        else:
            if rng.random() < 0.5:
                message = lcsp.LcspResponse("OK", None,
                                            rng.randbytes(rng.randint(0, 64)))
            else:
                reason = "".join(rng.choices(printable, k=rng.randint(1, 32)))
                message = lcsp.LcspResponse("ERROR", reason)
            role = "client"
        wire = lcsp.encode(message)
        cut = rng.randrange(len(wire))
        with pytest.raises(lcsp.NeedMoreData):
            lcsp.decode(wire[:cut], role)

    # fuzz the decoder for 60 seconds; only typed errors may escape
    rng = random.Random(88)
    samples = [p.read_bytes() for p in sorted(corpus.glob("*.wire"))]
    deadline = time.monotonic() + 60.0
    rounds = 0
    while time.monotonic() < deadline:
        rounds += 1
        if rng.random() < 0.5:
            data = rng.randbytes(rng.randint(0, 512))
        else:
            data = bytearray(rng.choice(samples))
            for _ in range(rng.randint(1, 8)):
                data[rng.randrange(len(data))] = rng.randrange(256)
            data = bytes(data)
        for role in ("client", "server"):
            try:
                message, used = lcsp.decode(data, role)
            except lcsp.LcspError:
                continue
            assert 0 < used <= len(data)
            again, used_again = lcsp.decode(data[:used], role)
            assert again == message
            assert used_again == used
    assert rounds > 1000


# ---------------------------------------------------------------------------
# 9. Isolation: malicious firmware cannot hurt the daemon
# ---------------------------------------------------------------------------

MALICIOUS_TX = [
    "REPORT 1 / 0\n",
    "SET_CHANNEL 9\nTX DEADBEEF\nREPORT DEADBEEF\n",
    "LOOP 1000000\nREPORT 1 + 1\nEND\n",
    "LOOP 1000000\nTX DEADBEEF\nEND\n",
    "RX TIMEOUT 60000\nREPORT RX_DATA\n",
    "TX DEADBEEF REPEAT 10000 INTERVAL 10\nREPORT DEADBEEF\n",
    "TX DEADBEEF\nREPORT CAFE\n",
    "TX DEADBEEF\n",
    "TX CAFE\nREPORT CAFE\n",
    "LOOP 1000000\nSENSE WINDOW 1\nEND\n",
    "REPORT OCCUPANCY\n",
    "",
    "TX\n",
    "FROBNICATE 1\n",
    "TX " + "AB" * 300 + "\nREPORT 1\n",
    "LOOP 2\n" * 9 + "TX AA\n" + "END\n" * 9,
    "TX AA\n" * 25000,
    "REPORT\n",
    "LOOP 2\nRX TIMEOUT 2000\nEND\nREPORT RX_DATA\n",
    "SENSE WINDOW 60000\nREPORT OCCUPANCY\n",
]

DEPLOY_PAIR = """\
[devices]
tx = alpha
rx = beta

[build]
spec = fw/build.spec

[test]
entry = test/controller.conf

[channel]
policy = fixed:0
"""

BUILD_PAIR = """\
[steps]
step = compile_firmware fw/tx.fw -> out/tx.img
step = compile_firmware fw/rx.fw -> out/rx.img

[images]
tx = out/tx.img
rx = out/rx.img
"""

CONTROLLER_PAIR = """\
[test]
payload = deadbeef
exec_deadline_ms = 3000
exec_budget = 50000
"""


def test_criterion_09_firmware_isolation(tmp_path):
    assert len(MALICIOUS_TX) == 20
    bed = Testbed(tmp_path / "data", seed=0)
    bed.register_hosted("alpha", "SRD_A", (5.0, 5.0, 3.5), "outdoor")
    bed.register_hosted("beta", "SRD_A", (10.0, 5.0, 3.5), "outdoor")

    for index, source in enumerate(MALICIOUS_TX):
        tree = {
            "coins.deploy": DEPLOY_PAIR.encode(),
            "fw/build.spec": BUILD_PAIR.encode(),
            "fw/tx.fw": source.encode(),
            "fw/rx.fw": RX_FW.encode(),
            "test/controller.conf": CONTROLLER_PAIR.encode(),
            "case.txt": f"malicious source {index}\n".encode(),
        }
        run = bed.push(tree)
        assert run.verdict != "pass", f"source {index} slipped through"

        bed.registry.availability_sweep()
        for name in ("alpha", "beta"):
            record = bed.registry.by_name(name)
            assert record.state == "available", \
                f"{name} knocked out by source {index}"


# ---------------------------------------------------------------------------
# 10. Registry liveness and warning flow over HTTP
# ---------------------------------------------------------------------------


def test_criterion_10_registry_api_conformance(tmp_path):
    from coins.httpapi import make_server

    bed = Testbed(tmp_path / "data", seed=0)
    server = make_server(bed)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    addr = f"http://127.0.0.1:{server.server_address[1]}"

    import urllib.request

    def call(method, path, body=None):
        data = json.dumps(body).encode() if body is not None else None
        req = urllib.request.Request(addr + path, data=data, method=method)
        with urllib.request.urlopen(req, timeout=30) as resp:
            return json.loads(resp.read())

    try:
        for name in ("ext-a", "ext-b"):
            record = call("POST", "/devices", {
                "name": name, "node_type": "UWB",
                "position": [1.0, 1.0, 1.5], "environment": "indoor"})
            assert record["state"] == "available"
        names = {r["name"] for r in call("GET", "/devices")}
        assert names == {"ext-a", "ext-b"}

        call("POST", "/devices/ext-a/heartbeat", {"metrics": {}})
        call("POST", "/devices/ext-b/heartbeat", {"metrics": {}})

        # 40 virtual seconds of silence from ext-a only
        call("POST", "/clock", {"advance_us": 40 * 1_000_000})
        call("POST", "/devices/ext-b/heartbeat", {"metrics": {}})
        call("GET", "/availability")
        assert call("GET", "/devices/ext-a")["state"] == "unavailable"
        assert call("GET", "/devices/ext-b")["state"] == "available"

        # exactly one alert per violating heartbeat
        call("POST", "/warnings",
             {"metric": "temp_c", "op": "gt", "threshold": 60})
        beat = call("POST", "/devices/ext-b/heartbeat",
                    {"metrics": {"temp_c": 71.0}})
        assert len(beat["alerts"]) == 1
        beat = call("POST", "/devices/ext-b/heartbeat",
                    {"metrics": {"temp_c": 45.0}})
        assert beat["alerts"] == []
        beat = call("POST", "/devices/ext-b/heartbeat",
                    {"metrics": {"temp_c": 92.0}})
        assert len(beat["alerts"]) == 1
        alerts = call("GET", "/alerts?device=ext-b")
        assert len(alerts) == 2
        assert [a["value"] for a in alerts] == [71.0, 92.0]
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)
