"""Testbed assembly: one object wiring every subsystem together.

A ``Testbed`` owns the virtual clock, the registry (with its journal),
the radio medium, the repo store, the build cache and one device daemon
per hosted device, plus the pipeline that drives runs across all of
them. Restarting a testbed on the same data directory replays the
registry journal and re-attaches daemons to every known device.

Devices registered through :meth:`register_external` get no daemon:
they represent hardware whose owner reports liveness through the HTTP
API instead of being hosted by this process.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .device import Builder, DeviceDaemon
from .pipeline import Pipeline, PipelineRun
from .radio import Medium, VirtualClock, load_scenario
from .registry import DeviceRecord, Registry
from .repostore import RepoStore


def default_fleet_path():
    return resources.files("coins").joinpath("data/seed_fleet.json")


class Testbed:
    __test__ = False  # not a pytest class, despite the name

    def __init__(self, data_dir: str | Path, seed: int = 0,
                 clock: VirtualClock | None = None):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock or VirtualClock()
        self.registry = Registry(self.clock,
                                 journal_path=self.data_dir / "registry.jsonl")
        self.medium = Medium(self.clock, seed=seed, directory=self.registry)
        self.store = RepoStore(self.data_dir / "store")
        self.builder = Builder(self.data_dir / "builds")
        self.daemons: dict[str, DeviceDaemon] = {}
        self.pipeline = Pipeline(self.store, self.registry, self.medium,
                                 self.builder, self.daemons,
                                 self.data_dir / "outbox",
                                 self.data_dir / "journal")
        # a journal replay may have restored devices; host them again
        for record in self.registry.list_devices():
            self._attach(record.device_id)

    def _attach(self, device_id: str) -> DeviceDaemon:
        if device_id in self.daemons:
            return self.daemons[device_id]
        daemon = DeviceDaemon(self.registry, self.medium, device_id)
        daemon.start_heartbeats()
        self.daemons[device_id] = daemon
        return daemon

    # -- population ----------------------------------------------------------

    def register_hosted(self, name: str, node_type: str, position,
                        environment: str, cluster: str = "") -> DeviceRecord:
        """Register a device this testbed hosts (daemon plus heartbeats)."""
        record = self.registry.register(name=name, node_type=node_type,
                                        position=position,
                                        environment=environment,
                                        cluster=cluster)
        self._attach(record.device_id)
        return record

    def register_external(self, name: str, node_type: str, position,
                          environment: str, cluster: str = "") -> DeviceRecord:
        """Register a device whose owner reports liveness over the API."""
        return self.registry.register(name=name, node_type=node_type,
                                      position=position,
                                      environment=environment,
                                      cluster=cluster)

    def seed_fleet(self, path: str | Path | None = None) -> int:
        """Load a fleet layout file and host every device in it."""
        if path is None:
            text = default_fleet_path().read_text()
        else:
            text = Path(path).read_text()
        layout = json.loads(text)
        count = 0
        for entry in layout["devices"]:
            self.register_hosted(entry["name"], entry["node_type"],
                                 tuple(entry["position"]),
                                 entry["environment"],
                                 entry.get("cluster", ""))
            count += 1
        return count

    def load_scenario(self, path: str | Path) -> int:
        """Add the interferers declared by a scenario file to the medium."""
        profiles = load_scenario(path)
        for profile in profiles:
            self.medium.add_interferer(profile)
        return len(profiles)

    # -- convenience ------------------------------------------------------------

    def push(self, tree: dict[str, bytes], ref: str | None = None) -> PipelineRun:
        """Commit a tree, trigger a run for it and drive it to the end."""
        commit = self.store.put_tree(tree)
        if ref is not None:
            self.store.tag(ref, commit)
        run = self.pipeline.handle_hook_event({"commit": commit})
        return self.pipeline.run_to_completion(run)
