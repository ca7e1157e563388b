"""Hostname resolution with a pluggable static table for `.local` names."""

from __future__ import annotations

import ipaddress
import socket
from dataclasses import dataclass, field
from pathlib import Path


class ResolveFailed(OSError):
    pass


@dataclass
class HostTable:
    """Static hostname-to-IP map; one `hostname ip` pair per line on disk."""

    entries: dict[str, str] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "HostTable":
        entries = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"hosts line {lineno}: expected 'hostname ip'")
            hostname, ip = parts
            entries[hostname] = ip
        return cls(entries=entries)

    @classmethod
    def load(cls, path) -> "HostTable":
        return cls.parse(Path(path).read_text())


def resolve_host(name: str, table: HostTable | None = None) -> str:
    """Table hit wins, then the system resolver; IP literals pass through."""
    try:
        ipaddress.ip_address(name)
        return name
    except ValueError:
        pass
    if table is not None and name in table.entries:
        return table.entries[name]
    try:
        return socket.gethostbyname(name)
    except OSError as exc:
        raise ResolveFailed(f"cannot resolve {name!r}: {exc}") from exc
