#!/usr/bin/env python3
"""Generate src/coins/data/seed_fleet.json, the default device layout.

79 target devices over two sites: an outdoor park of 55 x 60 m (pole
mounts at 3.5 m, building mounts between 2.0 and 9.3 m) and an indoor
hall of 28.4 x 16.6 m whose coordinates are offset to x >= 60 so the
two spaces never overlap. Deterministic by construction; rerunning the
script reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "src" / "coins" / "data" / "seed_fleet.json"

PARK_X, PARK_Y = 55.0, 60.0
HALL_X0 = 60.0
HALL_X, HALL_Y = 28.4, 16.6
POLE_Z = 3.5
INDOOR_Z = 2.0
BUILDING_Z = [9.3, 6.5, 2.0]  # mounting heights on the surrounding buildings


def park_grid(count: int, cols: int, jitter: random.Random,
              x_phase: float = 0.0) -> list[tuple[float, float, float]]:
    rows = -(-count // cols)
    positions = []
    for i in range(count):
        col, row = i % cols, i // cols
        x = (col + 0.5) * PARK_X / cols + x_phase
        y = (row + 0.5) * PARK_Y / rows
        x += jitter.uniform(-1.5, 1.5)
        y += jitter.uniform(-1.5, 1.5)
        positions.append((round(min(max(x, 0.5), PARK_X - 0.5), 2),
                          round(min(max(y, 0.5), PARK_Y - 0.5), 2), POLE_Z))
    return positions


def hall_grid(count: int, cols: int, jitter: random.Random) -> list[tuple[float, float, float]]:
    rows = -(-count // cols)
    positions = []
    for i in range(count):
        col, row = i % cols, i // cols
        x = HALL_X0 + (col + 0.5) * HALL_X / cols + jitter.uniform(-0.6, 0.6)
        y = (row + 0.5) * HALL_Y / rows + jitter.uniform(-0.6, 0.6)
        positions.append((round(x, 2), round(y, 2), INDOOR_Z))
    return positions


def main() -> None:
    rng = random.Random(2021)
    devices = []

    def add(name, node_type, environment, position, cluster):
        devices.append({
            "name": name,
            "node_type": node_type,
            "environment": environment,
            "position": list(position),
            "cluster": cluster,
        })

    for i, pos in enumerate(park_grid(21, 7, rng), start=1):
        add(f"srd-a-{i:02d}", "SRD_A", "outdoor", pos, "park")
    for i, pos in enumerate(park_grid(21, 7, rng, x_phase=2.0), start=1):
        add(f"srd-b-{i:02d}", "SRD_B", "outdoor", pos, "park")

    # LPWA: three building mounts outdoors plus one indoor gateway
    lpwa_sites = [(2.0, 4.0), (52.0, 30.0), (27.0, 58.0)]
    for i, ((x, y), z) in enumerate(zip(lpwa_sites, BUILDING_Z), start=1):
        add(f"lpwa-{i:02d}", "LPWA", "outdoor", (x, y, z), "park")
    add("lpwa-04", "LPWA", "indoor", (HALL_X0 + 14.2, 8.3, INDOOR_Z), "hall")

    for i, pos in enumerate(park_grid(11, 4, rng, x_phase=-2.0), start=1):
        add(f"uwb-{i:02d}", "UWB", "outdoor", pos, "park")
    for i, pos in enumerate(hall_grid(20, 5, rng), start=12):
        add(f"uwb-{i:02d}", "UWB", "indoor", pos, "hall")

    # spectrum sensing pair, high on opposite buildings
    add("uhf-01", "UHF_SENSE", "outdoor", (1.0, 1.0, 9.3), "park")
    add("uhf-02", "UHF_SENSE", "outdoor", (54.0, 59.0, 7.5), "park")

    assert len(devices) == 79, len(devices)
    OUT.write_text(json.dumps({"devices": devices}, indent=1) + "\n")
    print(f"wrote {OUT} ({len(devices)} devices)")


if __name__ == "__main__":
    main()
