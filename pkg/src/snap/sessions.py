"""Live connected-devices table.

One record per serial, created or replaced on every join attempt, purged
wholesale at the start of each run cycle. A denied device is kept in the
table with status Disabled so the operator can see the denial.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Callable

from .core import AuthDecision, CanonicalSerial, DeviceIdentity, DeviceStatus, Verdict
from .errors import CannotEnableDenied, NoSuchSession
from .protocol import StatusEvent


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


def _new_session_id() -> str:
    return uuid.uuid4().hex[:16]


@dataclass(frozen=True)
class SessionRecord:
    """One row of the connected-devices table.

    registry_version records the allowlist snapshot the verdict was computed
    against, so any decision can be replayed and audited offline.
    """

    session_id: str
    identity: DeviceIdentity
    decision: AuthDecision
    status: DeviceStatus
    ap_id: str
    connected_at: datetime
    registry_version: int = -1

    @property
    def serial(self) -> CanonicalSerial:
        return self.identity.serial


class SessionManager:
    """Session table with serialized mutations and snapshot reads.

    Status changes made through set_status are pushed, in mutation order,
    to the callbacks registered via subscribe() (the enforcement layer).
    """

    def __init__(
        self,
        clock: Callable[[], datetime] = _utc_now,
        session_ids: Callable[[], str] = _new_session_id,
    ):
        self._clock = clock
        self._session_ids = session_ids
        self._lock = threading.RLock()
        self._by_serial: dict[CanonicalSerial, SessionRecord] = {}
        self._listeners: list[Callable[[StatusEvent], None]] = []

    def subscribe(self, listener: Callable[[StatusEvent], None]) -> None:
        with self._lock:
            self._listeners.append(listener)

    def _emit(self, event: StatusEvent) -> None:
        for listener in list(self._listeners):
            listener(event)

    # -- mutations ---------------------------------------------------------

    def purge_all(self) -> int:
        """Empty the table (start-of-cycle step). Registry is untouched."""
        with self._lock:
            count = len(self._by_serial)
            self._by_serial.clear()
            return count

    def record_attempt(
        self,
        identity: DeviceIdentity,
        decision: AuthDecision,
        ap_id: str,
        registry_version: int = -1,
    ) -> SessionRecord:
        """Store the join attempt; a re-join by the same serial replaces the
        prior record. Denied attempts are recorded with status Disabled."""
        status = DeviceStatus.ENABLED if decision.allowed else DeviceStatus.DISABLED
        with self._lock:
            record = SessionRecord(
                session_id=self._session_ids(),
                identity=identity,
                decision=decision,
                status=status,
                ap_id=ap_id,
                connected_at=self._clock(),
                registry_version=registry_version,
            )
            self._by_serial[identity.serial] = record
            return record

    def set_status(self, serial: CanonicalSerial, status: DeviceStatus) -> SessionRecord:
        """Operator control of a live session.

        Enabling a session whose verdict was Deny is rejected: the verdict is
        owned by the registry, so the operator must register the device and
        have it re-join (or run a rescan) instead.
        """
        with self._lock:
            record = self._by_serial.get(serial)
            if record is None:
                raise NoSuchSession(f"no live session for {serial}")
            if status is DeviceStatus.ENABLED and record.decision.verdict is Verdict.DENY:
                raise CannotEnableDenied(
                    f"{serial} was denied; register the device and re-join (or rescan) first"
                )
            record = replace(record, status=status)
            self._by_serial[serial] = record
            self._emit(StatusEvent(serial=serial, status=status, cause="operator"))
            return record

    # -- reads ---------------------------------------------------------------

    def list_connected(self) -> list[SessionRecord]:
        """All live records, oldest join first, ties broken by serial."""
        with self._lock:
            return sorted(
                self._by_serial.values(), key=lambda r: (r.connected_at, r.serial)
            )

    def get(self, serial: CanonicalSerial) -> SessionRecord | None:
        with self._lock:
            return self._by_serial.get(serial)

    def serials(self) -> list[CanonicalSerial]:
        with self._lock:
            return sorted(self._by_serial)

    def __len__(self) -> int:
        with self._lock:
            return len(self._by_serial)
