"""The stage server: handshake, request dispatch, and the two modes.

``oracle-passthrough`` replays canned responses from a trace file keyed by
request-payload digest, so differential tests need no model at all.
``heuristic`` serves the trivial stages from :mod:`stage_server.stages`.

Errors: a malformed request gets a RESPONSE with an error status and the
connection stays alive; a HELLO with the wrong protocol version gets a NACK
and the connection is closed.
"""

from __future__ import annotations

import json
import socket
import threading
from dataclasses import dataclass
from pathlib import Path

from .rle import MaskCodecError, decode_mask
from .stages import HEURISTICS
from .wire import (FrameError, PROTOCOL_VERSION, STAGE_KINDS, payload_digest,
                   recv_frame, send_frame)

MODES = ("oracle-passthrough", "heuristic")

# request payload fields that carry wire masks, per stage kind; validated
# before dispatch so codec errors get their specific status codes
_MASK_FIELDS = {"detector": ("raster", "occupancy"),
                "pose": ("mask",),
                "segmenter": ("prior_mask",),
                "lifter": ("mask",)}


@dataclass(frozen=True)
class ServerConfig:
    endpoint: str                      # "host:port"; port 0 picks a free one
    stage_kind: str
    mode: str = "heuristic"
    seed: int = 0
    trace_path: str | None = None      # required in oracle-passthrough mode

    def __post_init__(self):
        if self.stage_kind not in STAGE_KINDS:
            raise ValueError(f"unknown stage kind {self.stage_kind!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "oracle-passthrough" and not self.trace_path:
            raise ValueError("oracle-passthrough mode needs a trace file")


def load_trace(path) -> dict:
    """Trace file: JSON lines of {"digest": ..., "response": ...}."""
    table = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                table[rec["digest"]] = rec["response"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{n}: bad trace record: {e}") from e
    return table


class StageServer:
    """One stage kind per process; one worker thread per connection."""

    def __init__(self, cfg: ServerConfig):
        self.cfg = cfg
        self.trace = (load_trace(cfg.trace_path)
                      if cfg.mode == "oracle-passthrough" else {})
        host, _, port = cfg.endpoint.rpartition(":")
        self._sock = socket.create_server((host or "127.0.0.1", int(port)))
        self._closing = False

    @property
    def endpoint(self) -> str:
        host, port = self._sock.getsockname()[:2]
        return f"{host}:{port}"

    def serve_forever(self):
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_connection, args=(conn,),
                             daemon=True).start()

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t

    def close(self):
        self._closing = True
        self._sock.close()

    # ------------------------------------------------------------------

    def _serve_connection(self, conn):
        with conn:
            try:
                hello = recv_frame(conn)
            except FrameError:
                return
            if hello.get("type") != "HELLO":
                send_frame(conn, {"type": "NACK", "reason": "expected HELLO"})
                return
            if hello.get("version") != PROTOCOL_VERSION:
                send_frame(conn, {"type": "NACK",
                                  "reason": f"unsupported protocol version "
                                            f"{hello.get('version')}"})
                return  # version mismatch closes the connection
            if hello.get("stage_kind") != self.cfg.stage_kind:
                send_frame(conn, {"type": "NACK",
                                  "reason": f"this server speaks "
                                            f"{self.cfg.stage_kind!r}"})
                return
            send_frame(conn, {"type": "ACK", "version": PROTOCOL_VERSION})
            while True:
                try:
                    request = recv_frame(conn)
                except FrameError:
                    return  # client went away or framing broke
                send_frame(conn, self._respond(request))

    def _respond(self, request: dict) -> dict:
        cid = request.get("correlation_id")

        def error(code, detail):
            return {"type": "RESPONSE", "correlation_id": cid,
                    "status": code, "payload": detail}

        if request.get("type") != "REQUEST":
            return error("malformed-request",
                         f"expected REQUEST, got {request.get('type')!r}")
        if request.get("stage_kind") != self.cfg.stage_kind:
            return error("wrong-stage-kind",
                         f"this server speaks {self.cfg.stage_kind!r}")
        payload = request.get("payload")
        if not isinstance(payload, dict) or "scene" not in payload:
            return error("malformed-request", "payload must carry a scene")

        # validate embedded masks up front; run-sum violations get their
        # specific code
        for field in _MASK_FIELDS[self.cfg.stage_kind]:
            obj = payload.get(field)
            if obj is not None:
                try:
                    decode_mask(obj)
                except MaskCodecError as e:
                    return error(e.code, f"{field}: {e}")

        if self.cfg.mode == "oracle-passthrough":
            digest = payload_digest(payload)
            if digest not in self.trace:
                return error("trace-miss",
                             f"no recorded response for request {digest}")
            return {"type": "RESPONSE", "correlation_id": cid,
                    "status": "ok", "payload": self.trace[digest]}

        handler = HEURISTICS.get(self.cfg.stage_kind)
        if handler is None:
            return error("unsupported-stage",
                         f"no heuristic for {self.cfg.stage_kind!r}; use "
                         "oracle-passthrough mode")
        try:
            return {"type": "RESPONSE", "correlation_id": cid,
                    "status": "ok", "payload": handler(payload)}
        except (KeyError, TypeError, ValueError) as e:
            return error("malformed-request", str(e))


def record_trace(path, records) -> None:
    """Write (request_payload, response_payload) pairs as a trace file."""
    with open(path, "w") as f:
        for payload, response in records:
            f.write(json.dumps({"digest": payload_digest(payload),
                                "response": response},
                               sort_keys=True) + "\n")


__all__ = ["ServerConfig", "StageServer", "load_trace", "record_trace",
           "MODES"]
