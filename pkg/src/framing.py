"""
Broker wire codec: a 4-byte big-endian length followed by a UTF-8 JSON
object carrying an ``op`` field.
"""

from __future__ import annotations

import json
import socket
import struct
from typing import Optional

from .errors import BadFrameError

HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 16 * 1024 * 1024

OPS = frozenset({"DECLARE", "PUBLISH", "SUBSCRIBE", "DELIVER", "ACK", "NACK", "ERROR"})


def canonical(body: dict) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_frame(body: dict) -> bytes:
    data = canonical(body)
    if len(data) > MAX_FRAME_BYTES:
        raise BadFrameError(f"frame of {len(data)} bytes exceeds {MAX_FRAME_BYTES}")
    return HEADER.pack(len(data)) + data


def decode_body(data: bytes) -> dict:
    try:
        body = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BadFrameError(f"frame body is not UTF-8 JSON: {e}")
    if not isinstance(body, dict) or not isinstance(body.get("op"), str):
        raise BadFrameError("frame body must be an object with an 'op' string")
    return body


def _recv_exactly(sock: socket.socket, n: int) -> Optional[bytes]:
    """``n`` bytes, or None on a clean EOF before the first byte."""
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            if remaining == n:
                return None
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> Optional[dict]:
    """Next frame body, or None when the peer closed the connection."""
    header = _recv_exactly(sock, HEADER.size)
    if header is None:
        return None
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise BadFrameError(f"frame of {length} bytes exceeds {MAX_FRAME_BYTES}", fatal=True)
    data = _recv_exactly(sock, length) if length else b""
    if data is None:
        raise ConnectionError("connection closed mid-frame")
    return decode_body(data)


def send_frame(sock: socket.socket, body: dict) -> None:
    sock.sendall(encode_frame(body))


def error_body(code: str, detail: str) -> dict:
    return {"op": "ERROR", "code": code, "detail": detail}
