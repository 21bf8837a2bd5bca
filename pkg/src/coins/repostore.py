"""Content-addressed commit store with tags, per-run result artifacts and
the deployment config parser.

Commits are immutable snapshots of a file tree; the commit id is a sha256
over the canonicalized tree plus the parent id, so identical content pushed
twice maps to the same commit. Tags bind a name to a commit exactly once.
Results are write-once per (commit, run). All writes go through a
temp-file rename so a crashed writer never leaves a half commit behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

from . import kvconf
from .radio import DEFAULT_PLANS
from .registry import ENVIRONMENTS, NODE_PROFILES

CONFIG_PATH = "coins.deploy"
_TAG_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,63}$")
_ROLE_RE = re.compile(r"^[a-z][a-z0-9_-]{0,31}$")
MIN_PREFIX = 7


class StoreError(Exception):
    """Base class for store errors."""


class BadPath(StoreError):
    """Tree path escapes the tree or is not in canonical form."""


class UnknownRef(StoreError):
    """Commit id, prefix or tag does not resolve."""


class AmbiguousRef(StoreError):
    """Prefix matches more than one commit."""


class TagExists(StoreError):
    """Tags are immutable; rebinding is refused."""


class DuplicateRun(StoreError):
    """Results for this (commit, run) were already stored."""


class MissingConfig(StoreError):
    """The tree has no deployment config file."""


class ConfigSyntax(StoreError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"{CONFIG_PATH}:{line_no}: {message}")
        self.line_no = line_no


class ConfigInvalid(StoreError):
    """Config parses but asks for something impossible."""


def check_tree_path(path: str) -> str:
    """Validate a tree-relative path in canonical POSIX form."""
    if not isinstance(path, str) or not path:
        raise BadPath("empty path")
    if path.startswith("/") or "\\" in path:
        raise BadPath(f"path must be relative with forward slashes: {path!r}")
    parts = path.split("/")
    if any(part in ("", ".", "..") for part in parts):
        raise BadPath(f"path must be normalized without dot segments: {path!r}")
    if not all(re.match(r"^[A-Za-z0-9._-]+$", part) for part in parts):
        raise BadPath(f"path has characters outside [A-Za-z0-9._-]: {path!r}")
    return path


def tree_hash(tree: dict[str, bytes], parent: str | None) -> str:
    """Canonical content hash: sorted paths, length-prefixed, plus parent."""
    h = hashlib.sha256()
    for path in sorted(tree):
        data = tree[path]
        h.update(path.encode("utf-8"))
        h.update(b"\x00")
        h.update(str(len(data)).encode("ascii"))
        h.update(b"\x00")
        h.update(data)
        h.update(b"\x01")
    h.update((parent or "").encode("ascii"))
    return h.hexdigest()


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


@dataclass(frozen=True)
class ResultRecord:
    commit_id: str
    run_id: str
    verdict: str
    files: dict[str, bytes]
    debug_log: str


class RepoStore:
    """Commit, tag and result storage rooted at one directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        for sub in ("objects", "commits", "tags", "results"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    # -- objects ---------------------------------------------------------------

    def _object_path(self, digest: str) -> Path:
        return self.root / "objects" / digest[:2] / digest[2:]

    def _put_object(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self._object_path(digest)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            _write_atomic(path, data)
        return digest

    def _get_object(self, digest: str) -> bytes:
        path = self._object_path(digest)
        if not path.exists():
            raise UnknownRef(f"missing object {digest}")
        return path.read_bytes()

    # -- commits ---------------------------------------------------------------

    def put_tree(self, tree: dict[str, bytes], parent: str | None = None) -> str:
        """Store a snapshot; returns its commit id. Idempotent on content."""
        if not tree:
            raise BadPath("refusing to commit an empty tree")
        for path, data in tree.items():
            check_tree_path(path)
            if not isinstance(data, bytes):
                raise BadPath(f"content of {path!r} must be bytes")
        if parent is not None:
            parent = self.resolve(parent)
        commit_id = tree_hash(tree, parent)
        commit_path = self.root / "commits" / f"{commit_id}.json"
        if commit_path.exists():
            return commit_id
        manifest = {
            "commit_id": commit_id,
            "parent": parent,
            "files": {path: self._put_object(data) for path, data in sorted(tree.items())},
        }
        _write_atomic(commit_path, json.dumps(manifest, indent=1, sort_keys=True).encode())
        return commit_id

    def has_commit(self, commit_id: str) -> bool:
        return (self.root / "commits" / f"{commit_id}.json").exists()

    def _manifest(self, commit_id: str) -> dict:
        path = self.root / "commits" / f"{commit_id}.json"
        if not path.exists():
            raise UnknownRef(f"unknown commit {commit_id!r}")
        return json.loads(path.read_text())

    def get_tree(self, ref: str) -> dict[str, bytes]:
        manifest = self._manifest(self.resolve(ref))
        return {path: self._get_object(digest)
                for path, digest in manifest["files"].items()}

    def parent(self, ref: str) -> str | None:
        return self._manifest(self.resolve(ref))["parent"]

    def list_commits(self) -> list[str]:
        return sorted(p.stem for p in (self.root / "commits").glob("*.json"))

    def resolve(self, ref: str) -> str:
        """Resolve a full id, unique id prefix, or tag name to a commit id."""
        if not isinstance(ref, str) or not ref:
            raise UnknownRef("empty ref")
        if self.has_commit(ref):
            return ref
        tag_path = self.root / "tags" / ref if _TAG_RE.match(ref) else None
        if tag_path is not None and tag_path.exists():
            return tag_path.read_text().strip()
        if len(ref) >= MIN_PREFIX and re.fullmatch(r"[0-9a-f]+", ref):
            matches = [c for c in self.list_commits() if c.startswith(ref)]
            if len(matches) > 1:
                raise AmbiguousRef(f"{ref!r} matches {len(matches)} commits")
            if matches:
                return matches[0]
        raise UnknownRef(f"{ref!r} is not a commit, prefix or tag")

    # -- tags --------------------------------------------------------------------

    def tag(self, name: str, ref: str) -> str:
        if not _TAG_RE.match(name or ""):
            raise StoreError(f"bad tag name {name!r}")
        commit_id = self.resolve(ref)
        path = self.root / "tags" / name
        if path.exists():
            bound = path.read_text().strip()
            if bound == commit_id:
                return commit_id  # re-binding to the same target is a no-op
            raise TagExists(f"tag {name!r} already bound to {bound[:12]}")
        _write_atomic(path, (commit_id + "\n").encode())
        return commit_id

    def list_tags(self) -> dict[str, str]:
        return {p.name: p.read_text().strip()
                for p in sorted((self.root / "tags").iterdir()) if p.is_file()}

    # -- results -----------------------------------------------------------------

    def store_results(self, ref: str, run_id: str, verdict: str,
                      files: dict[str, bytes] | None = None,
                      debug_log: str = "") -> ResultRecord:
        commit_id = self.resolve(ref)
        if not re.fullmatch(r"[A-Za-z0-9._-]+", run_id or ""):
            raise StoreError(f"bad run id {run_id!r}")
        run_dir = self.root / "results" / commit_id / run_id
        if run_dir.exists():
            raise DuplicateRun(f"results for {commit_id[:12]}/{run_id} already stored")
        files = files or {}
        for path in files:
            check_tree_path(path)
        staging = run_dir.with_name(run_id + ".tmp")
        if staging.exists():
            for leftover in sorted(staging.rglob("*"), reverse=True):
                leftover.unlink() if leftover.is_file() else leftover.rmdir()
            staging.rmdir()
        staging.mkdir(parents=True)
        (staging / "verdict.json").write_bytes(json.dumps(
            {"run_id": run_id, "verdict": verdict, "files": sorted(files)},
            indent=1, sort_keys=True).encode())
        (staging / "debug.log").write_bytes(debug_log.encode())
        for path, data in files.items():
            target = staging / "files" / path
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        os.replace(staging, run_dir)
        return ResultRecord(commit_id, run_id, verdict, dict(files), debug_log)

    def get_results(self, ref: str, run_id: str) -> ResultRecord:
        commit_id = self.resolve(ref)
        run_dir = self.root / "results" / commit_id / run_id
        if not run_dir.exists():
            raise UnknownRef(f"no results for {commit_id[:12]}/{run_id}")
        meta = json.loads((run_dir / "verdict.json").read_text())
        files = {}
        files_dir = run_dir / "files"
        if files_dir.exists():
            for file_path in sorted(files_dir.rglob("*")):
                if file_path.is_file():
                    files[str(file_path.relative_to(files_dir))] = file_path.read_bytes()
        return ResultRecord(commit_id, run_id, meta["verdict"], files,
                            (run_dir / "debug.log").read_text())

    def list_runs(self, ref: str) -> list[str]:
        commit_dir = self.root / "results" / self.resolve(ref)
        if not commit_dir.exists():
            return []
        return sorted(p.name for p in commit_dir.iterdir() if p.is_dir())


# ---------------------------------------------------------------------------
# Deployment config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoleSelector:
    """Which device(s) may fill a role: a concrete name or a typed query."""

    role: str
    name: str | None = None
    node_type: str | None = None
    environment: str | None = None
    count: int = 1


@dataclass(frozen=True)
class DeploymentConfig:
    roles: dict[str, RoleSelector]
    build_spec: str
    test_entry: str
    channel_policy: str  # "fixed" | "sense_and_select"
    fixed_channel: int | None
    band: str
    candidates: tuple[int, ...]
    max_attempts: int
    reselect_channel: bool
    jam_threshold: float
    subsets: int


def _parse_selector(role: str, value: str, line_no: int) -> RoleSelector:
    if not _ROLE_RE.match(role):
        raise ConfigSyntax(line_no, f"bad role name {role!r}")
    if ":" not in value:
        if not value:
            raise ConfigSyntax(line_no, f"role {role!r} needs a device name or selector")
        return RoleSelector(role, name=value)
    fields = {}
    for token in value.split():
        key, sep, val = token.partition(":")
        if not sep or key not in ("type", "env", "count") or not val:
            raise ConfigSyntax(line_no, f"bad selector token {token!r}")
        if key in fields:
            raise ConfigSyntax(line_no, f"repeated selector key {key!r}")
        fields[key] = val
    if "type" not in fields:
        raise ConfigSyntax(line_no, "typed selector needs type:<node_type>")
    node_type = fields["type"]
    if node_type not in NODE_PROFILES:
        raise ConfigInvalid(f"line {line_no}: unknown node type {node_type!r}")
    environment = fields.get("env")
    if environment is not None and environment not in ENVIRONMENTS:
        raise ConfigInvalid(f"line {line_no}: unknown environment {environment!r}")
    try:
        count = int(fields.get("count", "1"))
    except ValueError:
        raise ConfigSyntax(line_no, f"count must be an integer") from None
    if count < 1:
        raise ConfigInvalid(f"line {line_no}: count must be >= 1")
    return RoleSelector(role, node_type=node_type, environment=environment, count=count)


def _parse_bool(raw: str, line_no_hint: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ConfigInvalid(f"{line_no_hint}: expected a boolean, got {raw!r}")


def parse_deployment_config(tree: dict[str, bytes]) -> DeploymentConfig:
    """Parse and fully validate the tree's ``coins.deploy``."""
    if CONFIG_PATH not in tree:
        raise MissingConfig(f"tree has no {CONFIG_PATH}")
    try:
        text = tree[CONFIG_PATH].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigSyntax(0, f"not valid UTF-8: {exc}") from None
    try:
        sections = kvconf.Sections(kvconf.parse_kv(text))
    except kvconf.KvSyntaxError as exc:
        raise ConfigSyntax(exc.line_no, exc.message) from None

    roles: dict[str, RoleSelector] = {}
    for entry in sections.items("devices"):
        if entry.key in roles:
            raise ConfigInvalid(f"line {entry.line_no}: role {entry.key!r} defined twice")
        roles[entry.key] = _parse_selector(entry.key, entry.value, entry.line_no)
    if not roles:
        raise ConfigInvalid("a [devices] section with role assignments is required")
    for required in ("tx", "rx"):
        if required not in roles:
            raise ConfigInvalid(f"the minimal test needs a {required!r} role")

    build_spec = sections.get("build", "spec")
    if not build_spec:
        raise ConfigInvalid("[build] spec = <path> is required")
    test_entry = sections.get("test", "entry")
    if not test_entry:
        raise ConfigInvalid("[test] entry = <path> is required")
    for label, path in (("build spec", build_spec), ("test entry", test_entry)):
        try:
            check_tree_path(path)
        except BadPath as exc:
            raise ConfigInvalid(f"{label}: {exc}") from None
        if path not in tree:
            raise ConfigInvalid(f"{label} {path!r} is not in the tree")

    band = sections.get("channel", "band", "SRD868")
    if band not in DEFAULT_PLANS:
        raise ConfigInvalid(f"unknown band {band!r}")
    plan = DEFAULT_PLANS[band]

    policy_raw = sections.get("channel", "policy", "sense_and_select")
    fixed_channel = None
    if policy_raw == "sense_and_select":
        policy = "sense_and_select"
    elif policy_raw.startswith("fixed:"):
        policy = "fixed"
        try:
            fixed_channel = int(policy_raw.split(":", 1)[1])
        except ValueError:
            raise ConfigInvalid(f"bad fixed channel in {policy_raw!r}") from None
        if fixed_channel not in plan.indices:
            raise ConfigInvalid(f"channel {fixed_channel} not in band {band}")
    else:
        raise ConfigInvalid(f"channel policy must be 'fixed:<n>' or "
                            f"'sense_and_select', got {policy_raw!r}")

    candidates_raw = sections.get("channel", "candidates")
    if candidates_raw is None:
        candidates = tuple(plan.indices)
    else:
        try:
            candidates = tuple(int(tok) for tok in candidates_raw.split())
        except ValueError:
            raise ConfigInvalid(f"candidates must be integers: {candidates_raw!r}") from None
        if not candidates:
            raise ConfigInvalid("candidates must name at least one channel")
        if len(set(candidates)) != len(candidates):
            raise ConfigInvalid("candidates repeat a channel")
        outside = [c for c in candidates if c not in plan.indices]
        if outside:
            raise ConfigInvalid(f"candidates {outside} not in band {band}")

    attempts_raw = sections.get("retry", "max_attempts", "1")
    try:
        max_attempts = int(attempts_raw)
    except ValueError:
        raise ConfigInvalid(f"max_attempts must be an integer, got {attempts_raw!r}") from None
    if max_attempts < 1:
        raise ConfigInvalid("max_attempts must be >= 1")
    reselect = _parse_bool(sections.get("retry", "reselect_channel", "true"),
                           "retry.reselect_channel")
    jam_raw = sections.get("retry", "jam_threshold", "0.5")
    try:
        jam_threshold = float(jam_raw)
    except ValueError:
        raise ConfigInvalid(f"jam_threshold must be a number, got {jam_raw!r}") from None
    if not 0.0 < jam_threshold <= 1.0:
        raise ConfigInvalid("jam_threshold must be in (0, 1]")

    subsets_raw = sections.get("redundancy", "subsets", "1")
    try:
        subsets = int(subsets_raw)
    except ValueError:
        raise ConfigInvalid(f"subsets must be an integer, got {subsets_raw!r}") from None
    if subsets < 1:
        raise ConfigInvalid("subsets must be >= 1")

    stray = sections.unclaimed()
    if stray:
        first = stray[0]
        raise ConfigInvalid(
            f"line {first.line_no}: unknown setting [{first.section}] {first.key}")

    return DeploymentConfig(
        roles=roles,
        build_spec=build_spec,
        test_entry=test_entry,
        channel_policy=policy,
        fixed_channel=fixed_channel,
        band=band,
        candidates=candidates,
        max_attempts=max_attempts,
        reselect_channel=reselect,
        jam_threshold=jam_threshold,
        subsets=subsets,
    )
