"""Pure domain types and the authentication decision.

Nothing in this module does I/O, reads a clock, or touches storage. The
server hands these functions snapshots and persists the results elsewhere,
which keeps the decision trivially testable against a membership oracle.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass
from enum import Enum
from typing import AbstractSet

from .errors import EmptySerial, InvalidIp, SerialTooLong

MAX_SERIAL_LEN = 128

# A canonical serial is a plain str: uppercase, trimmed, internal whitespace
# runs collapsed to single spaces. Only normalize_serial() produces one.
CanonicalSerial = str

DENY_UNREGISTERED = "unregistered"
DENY_REVOKED = "registration-revoked"
DENY_REASONS = frozenset({DENY_UNREGISTERED, DENY_REVOKED})


class Verdict(Enum):
    ALLOW = "Allow"
    DENY = "Deny"


class DeviceStatus(Enum):
    ENABLED = "Enabled"
    DISABLED = "Disabled"


def normalize_serial(raw: str) -> CanonicalSerial:
    """Canonicalize a raw serial string.

    Uppercases, strips surrounding whitespace and collapses internal
    whitespace runs to a single space, so spellings that differ only in
    case or padding map to the same registry key. Idempotent.
    """
    value = " ".join(raw.upper().split())
    if not value:
        raise EmptySerial("serial is empty after normalization")
    if len(value) > MAX_SERIAL_LEN:
        raise SerialTooLong(f"serial exceeds {MAX_SERIAL_LEN} characters")
    return value


@dataclass(frozen=True)
class DeviceIdentity:
    """The collated (serial, hostname, IP) triple for one device.

    Hostname and IP are informational; the verdict keys on the serial only.
    """

    serial: CanonicalSerial
    hostname: str
    ip: str


def collate(hostname: str, ip: str, serial: CanonicalSerial) -> DeviceIdentity:
    """Assemble the identity triple. Fields pass through unchanged."""
    if normalize_serial(serial) != serial:
        raise ValueError(f"serial is not canonical: {serial!r}")
    try:
        ipaddress.ip_address(ip)
    except ValueError as exc:
        raise InvalidIp(f"not a valid IP address: {ip!r}") from exc
    return DeviceIdentity(serial=serial, hostname=hostname, ip=ip)


@dataclass(frozen=True)
class AuthDecision:
    """Allow, or Deny with a reason. Shape is enforced at construction."""

    verdict: Verdict
    reason: str | None = None

    def __post_init__(self) -> None:
        if self.verdict is Verdict.ALLOW and self.reason is not None:
            raise ValueError("Allow carries no reason")
        if self.verdict is Verdict.DENY and self.reason not in DENY_REASONS:
            raise ValueError(f"Deny requires a reason from {sorted(DENY_REASONS)}")

    @property
    def allowed(self) -> bool:
        return self.verdict is Verdict.ALLOW

    @classmethod
    def allow(cls) -> "AuthDecision":
        return cls(Verdict.ALLOW)

    @classmethod
    def deny(cls, reason: str) -> "AuthDecision":
        return cls(Verdict.DENY, reason)


def decide(identity: DeviceIdentity, allowlist: AbstractSet[CanonicalSerial]) -> AuthDecision:
    """Allow iff the serial is registered. Hostname and IP never matter.

    `allowlist` is a snapshot of the registered, non-revoked serials; the
    result is a pure function of (identity.serial, allowlist).
    """
    if identity.serial in allowlist:
        return AuthDecision.allow()
    return AuthDecision.deny(DENY_UNREGISTERED)
