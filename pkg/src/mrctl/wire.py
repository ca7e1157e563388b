"""Socket plumbing shared by the control and data planes.

Control connections exchange newline-delimited UTF-8 JSON objects.  Data
connections exchange frames: a 4-byte big-endian length prefix followed by
a JSON payload.
"""

from __future__ import annotations

import json
import socket
import struct
import threading

_LEN = struct.Struct(">I")

MAX_FRAME = 64 * 1024 * 1024  # sanity cap on a single frame


def parse_hostport(uri: str, default_port: int = 11311) -> tuple[str, int]:
    """Accepts ``host:port``, ``http://host:port`` or bare ``host``."""
    text = uri.strip()
    for scheme in ("http://", "https://", "tcp://"):
        if text.startswith(scheme):
            text = text[len(scheme):]
            break
    text = text.rstrip("/")
    if ":" in text:
        host, _, port = text.rpartition(":")
        return host, int(port)
    return text, default_port


def recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly n bytes; None on clean EOF before any byte of this read."""
    chunks = []
    got = 0
    while got < n:
        data = sock.recv(n - got)
        if not data:
            return None
        chunks.append(data)
        got += len(data)
    return b"".join(chunks)


def send_frame(sock: socket.socket, obj) -> None:
    payload = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    sock.sendall(_LEN.pack(len(payload)) + payload)


def recv_frame(sock: socket.socket):
    """Next length-prefixed JSON frame, or None on EOF at a frame boundary."""
    header = recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise ValueError(f"frame of {length} bytes exceeds cap")
    payload = recv_exact(sock, length)
    if payload is None:
        raise ConnectionError("connection closed mid-frame")
    return json.loads(payload.decode("utf-8"))


class LineChannel:
    """Thread-safe JSON-lines channel over a connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._rfile = sock.makefile("rb")
        self._wlock = threading.Lock()

    def send(self, obj) -> None:
        data = json.dumps(obj, separators=(",", ":")).encode("utf-8") + b"\n"
        with self._wlock:
            self.sock.sendall(data)

    def recv(self):
        """Next JSON object, or None on EOF."""
        line = self._rfile.readline()
        if not line:
            return None
        return json.loads(line.decode("utf-8"))

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._rfile.close()
        except OSError:
            pass
        self.sock.close()


def connect(host: str, port: int, timeout: float | None = 5.0) -> socket.socket:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock
