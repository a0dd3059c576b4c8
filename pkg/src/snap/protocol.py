"""Wire codec for agent<->server traffic.

Framing: a 4-byte big-endian unsigned length prefix followed by exactly
that many bytes of UTF-8 JSON. The envelope is {"v": 1, "kind": ..., "body":
{...}} with keys emitted in that order and body keys in the fixed per-kind
order below, so encoding is byte-deterministic. See docs/protocol.md for
golden frames.

decode() must survive arbitrary bytes: it raises DecodeError subclasses,
never anything else.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO, Union

from .core import DeviceStatus, Verdict
from .errors import SnapError

PROTOCOL_VERSION = 1
MAX_BODY_BYTES = 64 * 1024
# Upper bound for a whole frame payload on the socket read path: body cap
# plus envelope overhead. Oversized length prefixes are rejected before any
# allocation happens.
MAX_FRAME_BYTES = MAX_BODY_BYTES + 4096

_HEADER = struct.Struct(">I")

EVENT_CAUSES = ("verdict", "operator", "rescan")


class MessageTooLarge(SnapError):
    """Body exceeds the 64 KiB limit (encode) or the frame cap (socket read)."""


class DecodeError(SnapError):
    """Base for everything decode() can raise."""


class Truncated(DecodeError):
    """Frame shorter (or longer) than its length prefix claims."""


class BadJson(DecodeError):
    """Payload is not UTF-8 JSON of the documented shape."""


class UnknownKind(DecodeError):
    """Envelope kind is not one this codec knows."""


class UnknownVersion(DecodeError):
    """Envelope version is not 1."""


class ControlAction(Enum):
    ENABLE = "Enable"
    DISABLE = "Disable"

    @property
    def target_status(self) -> DeviceStatus:
        return DeviceStatus.ENABLED if self is ControlAction.ENABLE else DeviceStatus.DISABLED


@dataclass(frozen=True)
class JoinRequest:
    """Identity triple as reported by the device, plus the AP it came through."""

    serial_raw: str
    hostname: str
    ip: str
    ap_id: str

    def __post_init__(self) -> None:
        if not self.serial_raw:
            raise ValueError("serial_raw must be non-empty")


@dataclass(frozen=True)
class AuthVerdict:
    verdict: Verdict
    reason: str | None = None
    session_id: str | None = None

    def __post_init__(self) -> None:
        if self.verdict is Verdict.ALLOW and self.reason is not None:
            raise ValueError("Allow carries no reason")
        if self.verdict is Verdict.DENY and self.reason is None:
            raise ValueError("Deny requires a reason")

    @property
    def allowed(self) -> bool:
        return self.verdict is Verdict.ALLOW


@dataclass(frozen=True)
class ControlCommand:
    serial: str
    action: ControlAction
    operator: str

    def __post_init__(self) -> None:
        if not self.serial:
            raise ValueError("serial must be non-empty")


@dataclass(frozen=True)
class StatusEvent:
    """Server-originated status change for one serial.

    cause is "verdict" (join outcome), "operator" (control command) or
    "rescan" (session purge; devices should re-join on receipt).
    """

    serial: str
    status: DeviceStatus
    cause: str

    def __post_init__(self) -> None:
        if self.cause not in EVENT_CAUSES:
            raise ValueError(f"cause must be one of {EVENT_CAUSES}")


@dataclass(frozen=True)
class ErrorMessage:
    """Server-side rejection of a request (e.g. reason "bad-serial")."""

    reason: str
    message: str


ProtocolMessage = Union[JoinRequest, AuthVerdict, ControlCommand, StatusEvent, ErrorMessage]

_KINDS = {
    JoinRequest: "JoinRequest",
    AuthVerdict: "AuthVerdict",
    ControlCommand: "ControlCommand",
    StatusEvent: "StatusEvent",
    ErrorMessage: "Error",
}


def _body_dict(msg: ProtocolMessage) -> dict:
    # Key order here is the documented wire order; dicts preserve it.
    if isinstance(msg, JoinRequest):
        return {
            "serial_raw": msg.serial_raw,
            "hostname": msg.hostname,
            "ip": msg.ip,
            "ap_id": msg.ap_id,
        }
    if isinstance(msg, AuthVerdict):
        return {
            "verdict": msg.verdict.value,
            "reason": msg.reason,
            "session_id": msg.session_id,
        }
    if isinstance(msg, ControlCommand):
        return {"serial": msg.serial, "action": msg.action.value, "operator": msg.operator}
    if isinstance(msg, StatusEvent):
        return {"serial": msg.serial, "status": msg.status.value, "cause": msg.cause}
    if isinstance(msg, ErrorMessage):
        return {"reason": msg.reason, "message": msg.message}
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def encode(msg: ProtocolMessage) -> bytes:
    """Serialize one message to a length-prefixed frame."""
    body = _body_dict(msg)
    body_bytes = json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(body_bytes) > MAX_BODY_BYTES:
        raise MessageTooLarge(f"body is {len(body_bytes)} bytes, limit {MAX_BODY_BYTES}")
    envelope = {"v": PROTOCOL_VERSION, "kind": _KINDS[type(msg)], "body": body}
    payload = json.dumps(envelope, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return _HEADER.pack(len(payload)) + payload


def decode(data: bytes) -> ProtocolMessage:
    """Parse exactly one frame from `data`.

    Raises Truncated on size mismatch, BadJson on malformed payloads,
    UnknownKind / UnknownVersion on envelope mismatches. Never anything else.
    """
    if len(data) < _HEADER.size:
        raise Truncated(f"frame is {len(data)} bytes, need at least {_HEADER.size}")
    (length,) = _HEADER.unpack_from(data)
    if len(data) - _HEADER.size != length:
        raise Truncated(f"length prefix says {length} payload bytes, got {len(data) - _HEADER.size}")
    return _decode_payload(data[_HEADER.size:])


def _decode_payload(payload: bytes) -> ProtocolMessage:
    try:
        envelope = json.loads(payload.decode("utf-8"))
    except UnicodeDecodeError:
        raise BadJson("payload is not valid UTF-8")
    except json.JSONDecodeError as exc:
        raise BadJson(f"payload is not valid JSON: {exc.msg}")
    if not isinstance(envelope, dict):
        raise BadJson("envelope must be a JSON object")
    if set(envelope) != {"v", "kind", "body"}:
        raise BadJson("envelope must have exactly the keys v, kind, body")
    version = envelope["v"]
    if not isinstance(version, int) or isinstance(version, bool):
        raise BadJson("v must be an integer")
    if version != PROTOCOL_VERSION:
        raise UnknownVersion(f"unsupported protocol version {version}")
    kind = envelope["kind"]
    if not isinstance(kind, str):
        raise BadJson("kind must be a string")
    body = envelope["body"]
    if not isinstance(body, dict):
        raise BadJson("body must be a JSON object")
    try:
        return _decode_body(kind, body)
    except (ValueError, TypeError) as exc:
        raise BadJson(f"{kind}: {exc}")


def _require(body: dict, kind: str, fields: tuple[str, ...]) -> list:
    if set(body) != set(fields):
        raise BadJson(f"{kind}: body must have exactly the fields {list(fields)}")
    return [body[f] for f in fields]


def _string(value, name: str) -> str:
    if not isinstance(value, str):
        raise BadJson(f"{name} must be a string")
    return value


def _opt_string(value, name: str) -> str | None:
    if value is not None and not isinstance(value, str):
        raise BadJson(f"{name} must be a string or null")
    return value


def _decode_body(kind: str, body: dict) -> ProtocolMessage:
    if kind == "JoinRequest":
        serial_raw, hostname, ip, ap_id = _require(
            body, kind, ("serial_raw", "hostname", "ip", "ap_id")
        )
        return JoinRequest(
            serial_raw=_string(serial_raw, "serial_raw"),
            hostname=_string(hostname, "hostname"),
            ip=_string(ip, "ip"),
            ap_id=_string(ap_id, "ap_id"),
        )
    if kind == "AuthVerdict":
        verdict, reason, session_id = _require(body, kind, ("verdict", "reason", "session_id"))
        return AuthVerdict(
            verdict=Verdict(_string(verdict, "verdict")),
            reason=_opt_string(reason, "reason"),
            session_id=_opt_string(session_id, "session_id"),
        )
    if kind == "ControlCommand":
        serial, action, operator = _require(body, kind, ("serial", "action", "operator"))
        return ControlCommand(
            serial=_string(serial, "serial"),
            action=ControlAction(_string(action, "action")),
            operator=_string(operator, "operator"),
        )
    if kind == "StatusEvent":
        serial, status, cause = _require(body, kind, ("serial", "status", "cause"))
        return StatusEvent(
            serial=_string(serial, "serial"),
            status=DeviceStatus(_string(status, "status")),
            cause=_string(cause, "cause"),
        )
    if kind == "Error":
        reason, message = _require(body, kind, ("reason", "message"))
        return ErrorMessage(reason=_string(reason, "reason"), message=_string(message, "message"))
    raise UnknownKind(f"unknown message kind {kind!r}")


# -- stream helpers ------------------------------------------------------------

def write_frame(stream: BinaryIO, msg: ProtocolMessage) -> None:
    stream.write(encode(msg))
    stream.flush()


def read_frame(stream: BinaryIO) -> ProtocolMessage | None:
    """Read one frame from a blocking stream; None on clean EOF.

    A length prefix beyond MAX_FRAME_BYTES is rejected before allocation;
    EOF mid-frame raises Truncated.
    """
    header = stream.read(_HEADER.size)
    if header == b"":
        return None
    if len(header) < _HEADER.size:
        raise Truncated("stream ended inside the frame header")
    (length,) = _HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise MessageTooLarge(f"frame claims {length} bytes, cap is {MAX_FRAME_BYTES}")
    payload = b""
    while len(payload) < length:
        chunk = stream.read(length - len(payload))
        if not chunk:
            raise Truncated("stream ended inside the frame payload")
        payload += chunk
    return _decode_payload(payload)
