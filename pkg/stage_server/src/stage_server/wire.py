"""Framing for the stage protocol: 4-byte big-endian length + canonical JSON.

Message flow per connection: client sends HELLO {type, version, stage_kind};
server answers ACK (or NACK and closes on version/kind mismatch).  Then one
REQUEST {type, correlation_id, stage_kind, payload} at a time, each answered
by RESPONSE {type, correlation_id, status, payload}; status "ok" on success,
an error code otherwise, with the connection kept alive.
"""

from __future__ import annotations

import hashlib
import json
import struct

PROTOCOL_VERSION = 1
STAGE_KINDS = ("detector", "pose", "segmenter", "lifter")
MAX_FRAME = 64 * 1024 * 1024


class FrameError(RuntimeError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def payload_digest(obj) -> str:
    return hashlib.blake2b(canonical_json(obj), digest_size=16).hexdigest()


def send_frame(sock, message: dict) -> None:
    body = canonical_json(message)
    sock.sendall(struct.pack(">I", len(body)) + body)


def recv_frame(sock) -> dict:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds limit")
    body = _recv_exact(sock, length)
    try:
        msg = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameError(f"malformed frame: {e}") from e
    if not isinstance(msg, dict):
        raise FrameError("frame body must be a JSON object")
    return msg


def _recv_exact(sock, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise FrameError("connection closed mid-frame")
        buf += chunk
    return buf
