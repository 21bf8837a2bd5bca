"""Line-oriented ``key = value`` config format with ``[section]`` headers.

Shared by the deployment config, the build spec, and the test controller
file. The format is deliberately strict: every line is either blank, a
``#`` comment, a section header, or a single ``key = value`` assignment.
Anything else is a syntax error with a line number.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

_SECTION_RE = re.compile(r"^\[([A-Za-z0-9_.-]+)\]$")
_KEY_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class KvSyntaxError(ValueError):
    """Malformed line in a key/value config file."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
        self.message = message


@dataclass(frozen=True)
class Entry:
    section: str
    key: str
    value: str
    line_no: int


def parse_kv(text: str) -> list[Entry]:
    """Parse config text into an ordered list of entries.

    Keys may repeat; consumers decide whether repetition is list-valued
    or an error. Entries before any section header get section "".
    """
    entries: list[Entry] = []
    section = ""
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1)
            continue
        if "=" not in line:
            raise KvSyntaxError(line_no, f"expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not _KEY_RE.match(key):
            raise KvSyntaxError(line_no, f"bad key {key!r}")
        entries.append(Entry(section, key, value, line_no))
    return entries


class Sections:
    """Convenience view over parsed entries with strict-consumption checks."""

    def __init__(self, entries: list[Entry]):
        self.entries = entries
        self._claimed: set[int] = set()

    def sections(self) -> list[str]:
        seen: list[str] = []
        for e in self.entries:
            if e.section not in seen:
                seen.append(e.section)
        return seen

    def get_all(self, section: str, key: str) -> list[Entry]:
        out = []
        for i, e in enumerate(self.entries):
            if e.section == section and e.key == key:
                self._claimed.add(i)
                out.append(e)
        return out

    def get(self, section: str, key: str, default: str | None = None) -> str | None:
        found = self.get_all(section, key)
        if not found:
            return default
        if len(found) > 1:
            raise KvSyntaxError(found[1].line_no, f"duplicate key {key!r} in [{section}]")
        return found[0].value

    def items(self, section: str) -> list[Entry]:
        out = []
        for i, e in enumerate(self.entries):
            if e.section == section:
                self._claimed.add(i)
                out.append(e)
        return out

    def unclaimed(self) -> list[Entry]:
        """Entries never looked at by the consumer; strict parsers reject these."""
        return [e for i, e in enumerate(self.entries) if i not in self._claimed]
