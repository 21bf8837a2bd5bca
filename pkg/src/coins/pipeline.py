"""Commit-to-report orchestration.

One push becomes one run. A run walks a fixed stage ladder:

    Triggered -> Fetched -> DevicesSelected -> Deployed -> Built
              -> Flashed -> Tested -> Reported

``advance`` completes exactly one stage; any stage can instead move the
run to the terminal failed state, which names the stage and reason. A
test that runs to completion and fails its assertion is NOT a pipeline
failure: it reaches Reported with verdict "fail". Infrastructure
problems (bad config, no devices, build or flash errors) produce
verdict "error".

Both terminals store a result record in the repo store, append to the
run journal and write exactly one notification file to the outbox.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .device import Builder, BuildResult, DeviceDaemon, DeviceError
from .radio import Medium, SECOND
from .registry import Registry, RegistryError
from .repostore import DeploymentConfig, RepoStore, StoreError
from .testkit import (
    ControllerSpec,
    TestkitError,
    TestReport,
    parse_controller_spec,
    run_redundant,
    run_with_retry,
)
from . import repostore

STAGES = ("Triggered", "Fetched", "DevicesSelected", "Deployed", "Built",
          "Flashed", "Tested", "Reported")
STAGE_TIMEOUT_US = 60 * SECOND


class PipelineError(Exception):
    """Malformed hook event or misuse of the run API."""


@dataclass
class PipelineRun:
    run_id: str
    ref: str
    created_wall: float
    created_virtual: int
    stage: str = "Triggered"
    failed: bool = False
    failure_stage: str | None = None
    failure_reason: str | None = None
    commit_id: str | None = None
    verdict: str | None = None
    cause: str | None = None
    selected: dict[str, tuple[str, ...]] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    finished_virtual: int | None = None
    # working state, not serialized
    tree: dict[str, bytes] | None = None
    config: DeploymentConfig | None = None
    spec: ControllerSpec | None = None
    daemons: dict[str, list[DeviceDaemon]] = field(default_factory=dict)
    build: BuildResult | None = None
    report: TestReport | None = None

    @property
    def terminal(self) -> bool:
        return self.failed or self.stage == "Reported"

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "ref": self.ref,
            "commit": self.commit_id,
            "stage": self.stage,
            "failed": self.failed,
            "failure_stage": self.failure_stage,
            "failure_reason": self.failure_reason,
            "verdict": self.verdict,
            "cause": self.cause,
            "devices": {role: list(ids) for role, ids in self.selected.items()},
            "history": list(self.history),
            "created_virtual_us": self.created_virtual,
            "finished_virtual_us": self.finished_virtual,
        }


class Pipeline:
    """Drives runs against one store, one registry and one medium."""

    def __init__(self, store: RepoStore, registry: Registry, medium: Medium,
                 builder: Builder, daemons: dict[str, DeviceDaemon],
                 outbox_dir, journal_dir):
        self.store = store
        self.registry = registry
        self.medium = medium
        self.builder = builder
        self.daemons = daemons  # device_id -> daemon
        self.outbox_dir = Path(outbox_dir)
        self.journal_dir = Path(journal_dir)
        self.outbox_dir.mkdir(parents=True, exist_ok=True)
        self.journal_dir.mkdir(parents=True, exist_ok=True)
        self.runs: dict[str, PipelineRun] = {}
        self._counter = 0
        self._active: dict[tuple[str, str], str] = {}

    # -- triggering ---------------------------------------------------------

    def handle_hook_event(self, event: dict) -> PipelineRun:
        """Turn a push notification into a run, coalescing duplicates.

        Re-notifying a (ref, commit) pair whose run is still in flight
        returns that run instead of spawning a second one.
        """
        if not isinstance(event, dict) or not isinstance(event.get("commit"), str):
            raise PipelineError("hook event needs a 'commit' string")
        commit = event["commit"]
        ref = event.get("ref", commit)
        if not isinstance(ref, str):
            raise PipelineError("hook 'ref' must be a string")
        key = (commit, ref)
        active_id = self._active.get(key)
        if active_id is not None and not self.runs[active_id].terminal:
            return self.runs[active_id]
        self._counter += 1
        run = PipelineRun(run_id=f"r{self._counter:06d}", ref=commit,
                          created_wall=time.time(),
                          created_virtual=self.medium.now)
        self.runs[run.run_id] = run
        self._active[key] = run.run_id
        self._journal(run, "trigger", {"ref": ref, "commit": commit})
        self._record(run, "Triggered", True)
        return run

    # -- journal and notifications -------------------------------------------

    def _journal(self, run: PipelineRun, event: str, extra: dict | None = None) -> None:
        line = {"t_wall": round(time.time(), 3), "t_virtual_us": self.medium.now,
                "run_id": run.run_id, "event": event}
        if extra:
            line.update(extra)
        path = self.journal_dir / f"{run.run_id}.jsonl"
        with open(path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(line, sort_keys=True) + "\n")

    def _record(self, run: PipelineRun, stage: str, ok: bool,
                reason: str | None = None) -> None:
        entry = {"stage": stage, "ok": ok, "t_virtual_us": self.medium.now,
                 "t_wall": round(time.time(), 3)}
        if reason:
            entry["reason"] = reason
        run.history.append(entry)
        extra = {"stage": stage, "ok": ok}
        if reason:
            extra["reason"] = reason
        self._journal(run, "stage", extra)

    def _notify(self, run: PipelineRun) -> None:
        payload = {
            "run_id": run.run_id,
            "ref": run.ref,
            "commit": run.commit_id,
            "verdict": run.verdict,
            "cause": run.cause,
            "failed_stage": run.failure_stage,
            "reason": run.failure_reason,
            "t_virtual_us": self.medium.now,
            "t_wall": round(time.time(), 3),
        }
        path = self.outbox_dir / f"{run.run_id}.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(json.dumps(payload, indent=1, sort_keys=True).encode())
        os.replace(tmp, path)

    # -- failure path ----------------------------------------------------------

    def _fail(self, run: PipelineRun, stage: str, reason: str) -> None:
        run.failed = True
        run.failure_stage = stage
        run.failure_reason = reason
        run.verdict = "error"
        run.finished_virtual = self.medium.now
        self._record(run, stage, False, reason)
        self._release(run)
        self._store_results(run)
        self._notify(run)
        self._journal(run, "finished", {"verdict": "error", "reason": reason})

    def _release(self, run: PipelineRun) -> None:
        try:
            self.registry.release(run.run_id)
        except RegistryError:
            pass

    def _store_results(self, run: PipelineRun) -> None:
        if run.commit_id is None:
            return  # nothing resolvable to attach results to
        files = {}
        debug_parts = []
        if run.report is not None:
            report_json = {
                "run_id": run.run_id,
                "commit": run.commit_id,
                "verdict": run.verdict,
                "cause": run.cause,
                "devices": {role: list(ids) for role, ids in run.selected.items()},
                **run.report.to_json(),
            }
            files["report.json"] = json.dumps(report_json, indent=1,
                                              sort_keys=True).encode()
        if run.build is not None:
            files["build.log"] = run.build.log.encode()
        if run.failure_reason:
            debug_parts.append(f"failed at {run.failure_stage}: {run.failure_reason}")
        for role, daemons in sorted(run.daemons.items()):
            for daemon in daemons:
                debug_parts.append(f"== {role}:{daemon.name} ==")
                debug_parts.append(daemon.target.render_log())
        try:
            self.store.store_results(run.commit_id, run.run_id,
                                     run.verdict or "error", files,
                                     "\n".join(debug_parts))
        except StoreError as exc:
            self._journal(run, "results-error", {"reason": str(exc)})

    # -- stages ----------------------------------------------------------------

    def advance(self, run: PipelineRun) -> PipelineRun:
        """Complete the next stage (or fail trying)."""
        if run.terminal:
            return run
        stage = STAGES[STAGES.index(run.stage) + 1]
        started = self.medium.now
        handler = getattr(self, f"_stage_{stage.lower()}")
        failure = handler(run)
        if failure is not None:
            self._fail(run, stage, failure)
            return run
        if self.medium.now - started > STAGE_TIMEOUT_US:
            self._fail(run, stage,
                       f"stage exceeded {STAGE_TIMEOUT_US // SECOND}s of testbed time")
            return run
        run.stage = stage
        self._record(run, stage, True)
        if stage == "Reported":
            run.finished_virtual = self.medium.now
            self._journal(run, "finished",
                          {"verdict": run.verdict, "cause": run.cause})
        return run

    def run_to_completion(self, run: PipelineRun) -> PipelineRun:
        while not run.terminal:
            self.advance(run)
        return run

    def _stage_fetched(self, run: PipelineRun) -> str | None:
        try:
            run.commit_id = self.store.resolve(run.ref)
            run.tree = self.store.get_tree(run.commit_id)
            run.config = repostore.parse_deployment_config(run.tree)
            run.spec = parse_controller_spec(run.tree, run.config.test_entry)
        except StoreError as exc:
            return str(exc)
        for role in (run.spec.tx_role, run.spec.rx_role):
            if role not in run.config.roles:
                return f"controller role {role!r} is not a deployment role"
        return None

    def _stage_devicesselected(self, run: PipelineRun) -> str | None:
        claimed: set[str] = set()
        selected: dict[str, tuple[str, ...]] = {}
        for role, selector in run.config.roles.items():
            if selector.name is not None:
                try:
                    record = self.registry.by_name(selector.name)
                except RegistryError as exc:
                    return str(exc)
                if record.state != "available":
                    return f"device {selector.name!r} is {record.state}"
                if record.device_id in claimed:
                    return f"device {selector.name!r} claimed by two roles"
                claimed.add(record.device_id)
                selected[role] = (record.device_id,)
                continue
            matches = [r for r in self.registry.list_devices(
                node_type=selector.node_type, environment=selector.environment,
                state="available") if r.device_id not in claimed]
            if len(matches) < selector.count:
                return (f"role {role!r} needs {selector.count} "
                        f"{selector.node_type} device(s), found {len(matches)}")
            chosen = matches[:selector.count]
            claimed.update(r.device_id for r in chosen)
            selected[role] = tuple(r.device_id for r in chosen)
        for role in (run.spec.tx_role, run.spec.rx_role):
            if len(selected[role]) < run.config.subsets:
                return (f"role {role!r} has {len(selected[role])} device(s), "
                        f"redundancy needs {run.config.subsets}")
        run.selected = selected
        return None

    def _stage_deployed(self, run: PipelineRun) -> str | None:
        all_ids = sorted({i for ids in run.selected.values() for i in ids})
        missing = [i for i in all_ids if i not in self.daemons]
        if missing:
            return f"no daemon serves {missing[0]}"
        try:
            self.registry.reserve(run.run_id, all_ids)
        except RegistryError as exc:
            return str(exc)
        run.daemons = {role: [self.daemons[i] for i in ids]
                       for role, ids in run.selected.items()}
        return None

    def _stage_built(self, run: PipelineRun) -> str | None:
        try:
            run.build = self.builder.build(run.tree, run.commit_id,
                                           run.config.build_spec)
        except DeviceError as exc:
            if hasattr(exc, "log"):
                self._journal(run, "build-log", {"log": exc.log})
            return f"build failed: {exc}"
        for role in run.selected:
            if role not in run.build.images:
                return f"build produced no image for role {role!r}"
        return None

    def _stage_flashed(self, run: PipelineRun) -> str | None:
        for role, daemons in run.daemons.items():
            image = run.build.images[role]
            for daemon in daemons:
                try:
                    daemon.deploy(image, run.run_id)
                except DeviceError as exc:
                    return f"flash of {daemon.name} failed: {exc}"
        return None

    def _stage_tested(self, run: PipelineRun) -> str | None:
        try:
            if run.config.subsets > 1:
                run.report = run_redundant(self.medium, run.config, run.spec,
                                           run.daemons)
            else:
                tx = run.daemons[run.spec.tx_role][0]
                rx = run.daemons[run.spec.rx_role][0]
                run.report = run_with_retry(self.medium, run.config, run.spec,
                                            tx, rx)
        except TestkitError as exc:
            return str(exc)
        run.verdict = run.report.verdict
        run.cause = run.report.cause
        return None

    def _stage_reported(self, run: PipelineRun) -> str | None:
        self._release(run)
        self._store_results(run)
        self._notify(run)
        return None
