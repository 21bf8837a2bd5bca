#!/usr/bin/env python3
"""Regenerate the LCSP conformance corpus under src/coins/data/lcsp_corpus/.

Each case is a pair NNN.wire (exact frame bytes) + NNN.json (decode role and
the expected message fields). Round-trip identity over this corpus is part of
the acceptance suite.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from coins import lcsp  # noqa: E402

OUT = Path(__file__).resolve().parents[1] / "src" / "coins" / "data" / "lcsp_corpus"

CASES = [
    ("server", lcsp.LcspRequest("GET", "/status")),
    ("server", lcsp.LcspRequest("GET", "/result")),
    ("server", lcsp.LcspRequest("GET", "/log")),
    ("server", lcsp.LcspRequest("GET", "/a")),
    ("server", lcsp.LcspRequest("GET", "/fw/deep/path-with_odd.chars~")),
    ("server", lcsp.LcspRequest("POST", "/run", b"")),
    ("server", lcsp.LcspRequest("POST", "/run", b"channel=1&start_delay_ms=50")),
    ("server", lcsp.LcspRequest("POST", "/radio/tx", b"\xde\xad\xbe\xef\x00")),
    ("server", lcsp.LcspRequest("POST", "/x", bytes(range(256)))),
    ("server", lcsp.LcspRequest("POST", "/max", b"\xff" * lcsp.MAX_REQUEST_BODY)),
    ("client", lcsp.LcspResponse("OK", None, b"")),
    ("client", lcsp.LcspResponse("OK", None, b"idle")),
    ("client", lcsp.LcspResponse("OK", None, b"\xde\xad\xbe\xef")),
    ("client", lcsp.LcspResponse("OK", None, b"\r\nOK 0\r\n")),  # body that looks like a frame
    ("client", lcsp.LcspResponse("OK", None, bytes(255 for _ in range(lcsp.MAX_RESPONSE_BODY)))),
    ("client", lcsp.LcspResponse("ERROR", "unknown resource")),
    ("client", lcsp.LcspResponse("ERROR", "busy")),
    ("client", lcsp.LcspResponse("ERROR", "x" * lcsp.MAX_REASON)),
]


def describe(role: str, msg) -> dict:
    if isinstance(msg, lcsp.LcspRequest):
        return {
            "role": role,
            "kind": "request",
            "method": msg.method,
            "resource": msg.resource,
            "body_hex": msg.body.hex(),
        }
    return {
        "role": role,
        "kind": "response",
        "status": msg.status,
        "reason": msg.reason,
        "body_hex": msg.body.hex(),
    }


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    for old in OUT.glob("*"):
        old.unlink()
    for i, (role, msg) in enumerate(CASES):
        wire = lcsp.encode(msg)
        (OUT / f"{i:03d}.wire").write_bytes(wire)
        (OUT / f"{i:03d}.json").write_text(json.dumps(describe(role, msg), indent=1) + "\n")
    print(f"wrote {len(CASES)} cases to {OUT}")


if __name__ == "__main__":
    main()
