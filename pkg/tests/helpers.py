"""Shared fixtures-in-plain-code for the test suite."""

from __future__ import annotations

from coins.radio import Medium, RadioSpec

SRD = RadioSpec("AT86RF212", "SRD868", 5, 200e3, 10.0, -90.0)
ISM = RadioSpec("AT86RF231", "ISM2400", 16, 2e6, 3.0, -90.0)


class StaticDirectory:
    """Minimal registry stand-in: id -> (position, environment, radios)."""

    def __init__(self):
        self.nodes = {}

    def add(self, device_id, position, environment="outdoor", radios=(SRD,)):
        self.nodes[device_id] = (tuple(position), environment, list(radios))

    def node_radio_info(self, device_id):
        return self.nodes.get(device_id)


def make_medium(seed=0, **nodes) -> Medium:
    directory = StaticDirectory()
    for name, position in nodes.items():
        directory.add(name, position)
    return Medium(seed=seed, directory=directory)
