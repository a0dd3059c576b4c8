"""The authentication service.

ServerCore runs the pipeline (collect -> collate -> decide -> record ->
enforce) against the registry, session table and simulated network, and
fans StatusEvents out to subscribers in mutation order. Two transports
wrap it: a TCP device port speaking the length-prefixed frame protocol,
and an admin HTTP/JSON API (plus an SSE event stream and the static web
console) for operators.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import os
import queue
import socketserver
import threading
import urllib.parse
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable

from . import protocol
from .core import DeviceStatus, collate, decide, normalize_serial
from .errors import (
    CannotEnableDenied,
    EmptySerial,
    InvalidIp,
    NoSuchSession,
    NotRegistered,
    SerialTooLong,
    SnapError,
    UnknownAp,
)
from .protocol import (
    AuthVerdict,
    ControlCommand,
    ErrorMessage,
    JoinRequest,
    StatusEvent,
)
from .registry import REGISTRY_FILENAME, RegistrationRecord, Registry
from .sessions import SessionManager, SessionRecord
from .simnet import SimulatedNetwork

logger = logging.getLogger(__name__)

DEFAULT_DEVICE_PORT = 7401
DEFAULT_ADMIN_PORT = 7402
DEFAULT_DATA_DIR = "snap-data"
DEFAULT_AP_IDS = ("ap1", "ap2", "ap3")


@dataclass
class ServerConfig:
    device_port: int = DEFAULT_DEVICE_PORT
    admin_port: int = DEFAULT_ADMIN_PORT
    data_dir: Path = field(default_factory=lambda: Path(DEFAULT_DATA_DIR))
    purge_on_start: bool = True
    admin_bind: str = "127.0.0.1"
    device_bind: str = "0.0.0.0"
    ap_ids: tuple[str, ...] = DEFAULT_AP_IDS
    console_dir: Path | None = None

    def __post_init__(self) -> None:
        self.data_dir = Path(self.data_dir)
        if self.console_dir is not None:
            self.console_dir = Path(self.console_dir)
        # Port 0 means "pick one", which cannot collide.
        if self.device_port == self.admin_port and self.device_port != 0:
            raise ValueError("device_port and admin_port must differ")


def error_reason(exc: SnapError) -> str:
    """Stable machine-readable reason for a rejected request."""
    if isinstance(exc, (EmptySerial, SerialTooLong)):
        return "bad-serial"
    if isinstance(exc, InvalidIp):
        return "bad-ip"
    if isinstance(exc, UnknownAp):
        return "unknown-ap"
    if isinstance(exc, NotRegistered):
        return "not-registered"
    if isinstance(exc, NoSuchSession):
        return "no-session"
    if isinstance(exc, CannotEnableDenied):
        return "cannot-enable-denied"
    return "error"


def record_to_dict(record: RegistrationRecord) -> dict:
    return {
        "serial": record.serial,
        "label": record.label,
        "registered_at": record.registered_at.isoformat(),
        "revoked": record.revoked,
    }


def session_to_dict(record: SessionRecord) -> dict:
    return {
        "serial": record.serial,
        "hostname": record.identity.hostname,
        "ip": record.identity.ip,
        "ap_id": record.ap_id,
        "status": record.status.value,
        "verdict": record.decision.verdict.value,
        "reason": record.decision.reason,
        "session_id": record.session_id,
        "connected_at": record.connected_at.isoformat(),
        "registry_version": record.registry_version,
    }


def event_to_dict(event: StatusEvent) -> dict:
    return {"serial": event.serial, "status": event.status.value, "cause": event.cause}


class ServerCore:
    """The authentication pipeline and event fan-out, transport-free.

    All mutations funnel through one lock; subscribers see events in
    mutation order. The simulated network is always the first subscriber,
    so enforcement changes before any caller observes the new state.
    """

    def __init__(self, registry: Registry, sessions: SessionManager, simnet: SimulatedNetwork):
        self.registry = registry
        self.sessions = sessions
        self.simnet = simnet
        self._lock = threading.RLock()
        self._listeners: list[Callable[[StatusEvent], None]] = [simnet.apply_status]
        # Operator status changes are emitted by the session manager; route
        # them through the same fan-out.
        sessions.subscribe(self._publish)

    def subscribe(self, listener: Callable[[StatusEvent], None]) -> None:
        with self._lock:
            self._listeners.append(listener)

    def unsubscribe(self, listener: Callable[[StatusEvent], None]) -> None:
        with self._lock:
            try:
                self._listeners.remove(listener)
            except ValueError:
                pass

    def _publish(self, event: StatusEvent) -> None:
        for listener in list(self._listeners):
            try:
                listener(event)
            except Exception:
                logger.exception("status event listener failed")

    # -- pipeline ------------------------------------------------------------

    def handle_join(self, req: JoinRequest) -> AuthVerdict:
        """Run one join attempt through the pipeline.

        Collate the reported triple, decide against a registry snapshot,
        record the session (with the snapshot version), gate the AP, and
        push the verdict event. Raises EmptySerial/SerialTooLong/InvalidIp/
        UnknownAp for malformed requests; transports map those to Error
        frames.
        """
        with self._lock:
            serial = normalize_serial(req.serial_raw)
            identity = collate(req.hostname, req.ip, serial)
            view = self.registry.snapshot()
            decision = decide(identity, view.serials)
            self.simnet.associate(req.ap_id, serial)
            record = self.sessions.record_attempt(
                identity, decision, req.ap_id, registry_version=view.version
            )
            self._publish(StatusEvent(serial=serial, status=record.status, cause="verdict"))
            return AuthVerdict(
                verdict=decision.verdict,
                reason=decision.reason,
                session_id=record.session_id,
            )

    def handle_control(self, cmd: ControlCommand) -> SessionRecord:
        """Apply an operator enable/disable to a live session."""
        with self._lock:
            serial = normalize_serial(cmd.serial)
            # set_status emits the operator-cause event through our fan-out.
            return self.sessions.set_status(serial, cmd.action.target_status)

    def rescan(self) -> int:
        """Purge the session table and solicit re-joins.

        Every serial that was live or associated gets a Disabled event with
        cause "rescan": gates fail closed for the new cycle and agents treat
        the event as the signal to re-join.
        """
        with self._lock:
            serials = sorted(set(self.sessions.serials()) | set(self.simnet.associated_serials()))
            count = self.sessions.purge_all()
            for serial in serials:
                self._publish(
                    StatusEvent(serial=serial, status=DeviceStatus.DISABLED, cause="rescan")
                )
            return count

    # -- registry admin --------------------------------------------------------

    def register_device(self, serial_raw: str, label: str) -> RegistrationRecord:
        with self._lock:
            return self.registry.register(serial_raw, label)

    def revoke_device(self, serial_raw: str) -> RegistrationRecord:
        with self._lock:
            return self.registry.revoke(normalize_serial(serial_raw))

    # -- reads -------------------------------------------------------------------

    def registered_records(self) -> list[RegistrationRecord]:
        return self.registry.records()

    def connected_records(self) -> list[SessionRecord]:
        return self.sessions.list_connected()


# -- device TCP transport ---------------------------------------------------------


class _DeviceTcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], core: ServerCore):
        super().__init__(address, _DeviceConnection)
        self.core = core


class _DeviceConnection(socketserver.StreamRequestHandler):
    """One connected agent.

    The connection stays open after the verdict so the server can push
    StatusEvents; a writer thread drains a queue so a slow agent never
    blocks the mutation path.
    """

    server: _DeviceTcpServer

    def handle(self) -> None:
        core = self.server.core
        out_q: queue.Queue = queue.Queue()
        write_lock = threading.Lock()
        my_serial: list[str | None] = [None]

        def on_event(event: StatusEvent) -> None:
            if my_serial[0] is not None and event.serial == my_serial[0]:
                out_q.put(event)

        def writer() -> None:
            while True:
                event = out_q.get()
                if event is None:
                    return
                try:
                    with write_lock:
                        protocol.write_frame(self.wfile, event)
                except OSError:
                    return

        core.subscribe(on_event)
        writer_thread = threading.Thread(target=writer, daemon=True)
        writer_thread.start()
        try:
            while True:
                try:
                    msg = protocol.read_frame(self.rfile)
                except protocol.DecodeError as exc:
                    with write_lock:
                        protocol.write_frame(
                            self.wfile, ErrorMessage(reason="bad-frame", message=str(exc))
                        )
                    continue
                except protocol.MessageTooLarge as exc:
                    with write_lock:
                        protocol.write_frame(
                            self.wfile, ErrorMessage(reason="too-large", message=str(exc))
                        )
                    return
                if msg is None:
                    return
                if isinstance(msg, JoinRequest):
                    try:
                        verdict = core.handle_join(msg)
                    except SnapError as exc:
                        reply: protocol.ProtocolMessage = ErrorMessage(
                            reason=error_reason(exc), message=str(exc)
                        )
                    else:
                        my_serial[0] = normalize_serial(msg.serial_raw)
                        reply = verdict
                    with write_lock:
                        protocol.write_frame(self.wfile, reply)
                else:
                    with write_lock:
                        protocol.write_frame(
                            self.wfile,
                            ErrorMessage(
                                reason="unexpected-kind",
                                message=f"device port only accepts JoinRequest, got {type(msg).__name__}",
                            ),
                        )
        except OSError:
            pass
        finally:
            core.unsubscribe(on_event)
            out_q.put(None)


# -- admin HTTP transport ----------------------------------------------------------

_FALLBACK_INDEX = """<!doctype html>
<html><head><title>snap admin</title></head>
<body><h1>snap authentication server</h1>
<p>No web console is installed (start with --console-dir to serve one).</p>
<p>API: GET /api/devices/registered, GET /api/devices/connected,
POST /api/devices, DELETE /api/devices/&lt;serial&gt;,
POST /api/devices/&lt;serial&gt;/disable, POST /api/devices/&lt;serial&gt;/enable,
POST /api/rescan, GET /api/events (SSE)</p>
</body></html>
"""


class _AdminHttpServer(ThreadingHTTPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], core: ServerCore, console_dir: Path | None):
        super().__init__(address, _AdminRequestHandler)
        self.core = core
        self.console_dir = console_dir.resolve() if console_dir else None
        self.stop_event = threading.Event()


class _AdminRequestHandler(BaseHTTPRequestHandler):
    server: _AdminHttpServer
    protocol_version = "HTTP/1.1"

    # -- plumbing ------------------------------------------------------------

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("admin http: " + fmt, *args)

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, status: int, code: str, message: str) -> None:
        self._send_json(status, {"error": {"code": code, "message": message}})

    def _send_domain_error(self, exc: SnapError) -> None:
        code = error_reason(exc)
        if isinstance(exc, (NotRegistered, NoSuchSession)):
            status = 404
        elif isinstance(exc, CannotEnableDenied):
            status = 409
        else:
            status = 400
        self._send_error_json(status, code, str(exc))

    def _read_json_body(self) -> dict | None:
        length = self.headers.get("Content-Length")
        try:
            raw = self.rfile.read(int(length)) if length else b""
            obj = json.loads(raw.decode("utf-8")) if raw else {}
        except (ValueError, UnicodeDecodeError):
            self._send_error_json(400, "bad-request", "body must be a JSON object")
            return None
        if not isinstance(obj, dict):
            self._send_error_json(400, "bad-request", "body must be a JSON object")
            return None
        return obj

    def _path_parts(self) -> list[str]:
        path = urllib.parse.urlparse(self.path).path
        return [urllib.parse.unquote(p) for p in path.split("/") if p]

    # -- verbs ------------------------------------------------------------------

    def do_GET(self) -> None:
        parts = self._path_parts()
        if parts == ["api", "devices", "registered"]:
            records = self.server.core.registered_records()
            self._send_json(200, {"devices": [record_to_dict(r) for r in records]})
        elif parts == ["api", "devices", "connected"]:
            records = self.server.core.connected_records()
            self._send_json(200, {"devices": [session_to_dict(r) for r in records]})
        elif parts == ["api", "events"]:
            self._stream_events()
        elif parts and parts[0] == "api":
            self._send_error_json(404, "not-found", "unknown API path")
        else:
            self._serve_static(parts)

    def do_POST(self) -> None:
        parts = self._path_parts()
        core = self.server.core
        if parts == ["api", "devices"]:
            body = self._read_json_body()
            if body is None:
                return
            serial = body.get("serial")
            label = body.get("label", "")
            if not isinstance(serial, str) or not isinstance(label, str):
                self._send_error_json(400, "bad-request", "serial (string) is required")
                return
            try:
                record = core.register_device(serial, label)
            except SnapError as exc:
                self._send_domain_error(exc)
                return
            self._send_json(201, record_to_dict(record))
        elif len(parts) == 4 and parts[:2] == ["api", "devices"] and parts[3] in ("disable", "enable"):
            serial = parts[2]
            action = (
                protocol.ControlAction.DISABLE
                if parts[3] == "disable"
                else protocol.ControlAction.ENABLE
            )
            try:
                record = core.handle_control(
                    ControlCommand(serial=serial, action=action, operator="admin-api")
                )
            except SnapError as exc:
                self._send_domain_error(exc)
                return
            self._send_json(200, session_to_dict(record))
        elif parts == ["api", "rescan"]:
            purged = core.rescan()
            self._send_json(200, {"purged": purged})
        else:
            self._send_error_json(404, "not-found", "unknown API path")

    def do_DELETE(self) -> None:
        parts = self._path_parts()
        if len(parts) == 3 and parts[:2] == ["api", "devices"]:
            try:
                record = self.server.core.revoke_device(parts[2])
            except SnapError as exc:
                self._send_domain_error(exc)
                return
            self._send_json(200, record_to_dict(record))
        else:
            self._send_error_json(404, "not-found", "unknown API path")

    # -- event stream -------------------------------------------------------------

    def _write_chunk(self, data: bytes) -> None:
        # Chunked transfer framing: without it, buffered HTTP clients block
        # waiting to fill a fixed-size read instead of surfacing each event.
        self.wfile.write(f"{len(data):X}\r\n".encode("ascii") + data + b"\r\n")
        self.wfile.flush()

    def _stream_events(self) -> None:
        events: queue.Queue = queue.Queue()
        self.server.core.subscribe(events.put)
        try:
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Transfer-Encoding", "chunked")
            self.end_headers()
            idle = 0.0
            while not self.server.stop_event.is_set():
                try:
                    event = events.get(timeout=0.5)
                    idle = 0.0
                except queue.Empty:
                    idle += 0.5
                    if idle >= 15.0:
                        self._write_chunk(b": keepalive\n\n")
                        idle = 0.0
                    continue
                data = json.dumps(event_to_dict(event))
                self._write_chunk(f"event: status\ndata: {data}\n\n".encode("utf-8"))
            self.wfile.write(b"0\r\n\r\n")
        except OSError:
            pass
        finally:
            self.server.core.unsubscribe(events.put)
            self.close_connection = True

    # -- static console --------------------------------------------------------------

    def _serve_static(self, parts: list[str]) -> None:
        root = self.server.console_dir
        if root is None:
            if not parts:
                body = _FALLBACK_INDEX.encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "text/html; charset=utf-8")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
            else:
                self._send_error_json(404, "not-found", "no console installed")
            return
        target = (root / "/".join(parts)).resolve() if parts else root / "index.html"
        if root not in target.parents and target != root:
            self._send_error_json(404, "not-found", "no such file")
            return
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            self._send_error_json(404, "not-found", "no such file")
            return
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        body = target.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


# -- facade ---------------------------------------------------------------------------


class SnapServer:
    """Owns the stores, the core, and both transports."""

    def __init__(self, config: ServerConfig):
        self.config = config
        config.data_dir.mkdir(parents=True, exist_ok=True)
        self.registry = Registry(config.data_dir / REGISTRY_FILENAME)
        self.sessions = SessionManager()
        self.simnet = SimulatedNetwork(config.ap_ids)
        self.core = ServerCore(self.registry, self.sessions, self.simnet)
        self._device_server: _DeviceTcpServer | None = None
        self._admin_server: _AdminHttpServer | None = None
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        if self.config.purge_on_start:
            purged = self.sessions.purge_all()
            if purged:
                logger.info("purged %d stale session records on start", purged)
        self._device_server = _DeviceTcpServer(
            (self.config.device_bind, self.config.device_port), self.core
        )
        self._admin_server = _AdminHttpServer(
            (self.config.admin_bind, self.config.admin_port), self.core, self.config.console_dir
        )
        for srv, name in ((self._device_server, "device"), (self._admin_server, "admin")):
            thread = threading.Thread(target=srv.serve_forever, name=f"snap-{name}", daemon=True)
            thread.start()
            self._threads.append(thread)
        logger.info(
            "serving devices on %s:%d, admin on %s:%d",
            self.config.device_bind,
            self.device_port,
            self.config.admin_bind,
            self.admin_port,
        )

    def stop(self) -> None:
        if self._admin_server is not None:
            self._admin_server.stop_event.set()
            self._admin_server.shutdown()
            self._admin_server.server_close()
        if self._device_server is not None:
            self._device_server.shutdown()
            self._device_server.server_close()
        for thread in self._threads:
            thread.join(timeout=5)
        self._threads.clear()
        self.registry.close()

    @property
    def device_port(self) -> int:
        assert self._device_server is not None, "server not started"
        return self._device_server.server_address[1]

    @property
    def admin_port(self) -> int:
        assert self._admin_server is not None, "server not started"
        return self._admin_server.server_address[1]

    def __enter__(self) -> "SnapServer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def run_server(config: ServerConfig) -> None:
    """Blocking entrypoint used by `snap serve`."""
    server = SnapServer(config)
    server.start()
    print(f"device port: {config.device_bind}:{server.device_port}")
    print(f"admin API:   http://{config.admin_bind}:{server.admin_port}")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        print("shutting down")
    finally:
        server.stop()
