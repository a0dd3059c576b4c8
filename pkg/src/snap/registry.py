"""Durable allowlist of registered devices.

Storage is an append-only log: one JSON object per line, UTF-8, LF
terminated, fields {"serial", "label", "registered_at", "revoked"}.
Loading replays the log and keeps the latest state per serial; every
mutation appends one line and is flushed + fsynced before the call
returns, so an acknowledged registration survives a hard kill.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterator

from .core import CanonicalSerial, normalize_serial
from .errors import CorruptStore, NotRegistered, StorageFailure

REGISTRY_FILENAME = "registry.jsonl"

_LOG_FIELDS = ("serial", "label", "registered_at", "revoked")


def _utc_now_seconds() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


@dataclass(frozen=True)
class RegistrationRecord:
    """One allowlist entry, keyed by canonical serial.

    registered_at is fixed at first registration and survives re-registration
    and revoke/un-revoke cycles.
    """

    serial: CanonicalSerial
    label: str
    registered_at: datetime
    revoked: bool = False

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "serial": self.serial,
                "label": self.label,
                "registered_at": self.registered_at.isoformat(),
                "revoked": self.revoked,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json_line(cls, line: str, lineno: int) -> "RegistrationRecord":
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptStore(f"registry log line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise CorruptStore(f"registry log line {lineno}: expected an object")
        missing = [f for f in _LOG_FIELDS if f not in obj]
        if missing:
            raise CorruptStore(f"registry log line {lineno}: missing fields {missing}")
        extra = [k for k in obj if k not in _LOG_FIELDS]
        if extra:
            raise CorruptStore(f"registry log line {lineno}: unknown fields {extra}")
        serial, label, registered_at, revoked = (
            obj["serial"], obj["label"], obj["registered_at"], obj["revoked"],
        )
        if not isinstance(serial, str) or not isinstance(label, str):
            raise CorruptStore(f"registry log line {lineno}: serial/label must be strings")
        if not isinstance(revoked, bool):
            raise CorruptStore(f"registry log line {lineno}: revoked must be a boolean")
        try:
            ts = datetime.fromisoformat(registered_at)
        except (TypeError, ValueError):
            raise CorruptStore(f"registry log line {lineno}: bad registered_at timestamp")
        if normalize_serial(serial) != serial:
            raise CorruptStore(f"registry log line {lineno}: serial not canonical: {serial!r}")
        return cls(serial=serial, label=label, registered_at=ts, revoked=revoked)


@dataclass(frozen=True)
class RegistryView:
    """Point-in-time snapshot used by the decision function.

    serials holds exactly the non-revoked registrations; version increases
    by one per applied mutation, so a session can record which allowlist
    state its verdict was computed against.
    """

    serials: frozenset[CanonicalSerial]
    version: int


class Registry:
    """Registered-devices store backed by the append-only log at `path`.

    Mutations are serialized through an internal lock (single-writer);
    snapshots are immutable values safe to hand to any thread.
    """

    def __init__(self, path: str | Path, clock: Callable[[], datetime] = _utc_now_seconds):
        self._path = Path(path)
        self._clock = clock
        self._lock = threading.RLock()
        self._records: dict[CanonicalSerial, RegistrationRecord] = {}
        self._version = 0
        self._load()
        self._fh = self._open_for_append()

    # -- loading / persistence ------------------------------------------------

    def _load(self) -> None:
        if not self._path.exists():
            return
        try:
            text = self._path.read_text(encoding="utf-8")
        except OSError as exc:
            raise StorageFailure(f"cannot read {self._path}: {exc}") from exc
        for lineno, line in enumerate(_log_lines(text), start=1):
            record = RegistrationRecord.from_json_line(line, lineno)
            self._records[record.serial] = record
            self._version += 1

    def _open_for_append(self):
        try:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            return open(self._path, "a", encoding="utf-8", newline="\n")
        except OSError as exc:
            raise StorageFailure(f"cannot open {self._path} for append: {exc}") from exc

    def _append(self, record: RegistrationRecord) -> None:
        """Write one record state durably; the mutation is only acknowledged
        to the caller after flush + fsync."""
        try:
            self._fh.write(record.to_json_line() + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as exc:
            raise StorageFailure(f"cannot append to {self._path}: {exc}") from exc
        self._records[record.serial] = record
        self._version += 1

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    def compact(self) -> None:
        """Rewrite the log to one line per serial (latest state)."""
        with self._lock:
            tmp = self._path.with_suffix(".jsonl.tmp")
            try:
                with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                    for record in self._records.values():
                        fh.write(record.to_json_line() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self._path)
            except OSError as exc:
                raise StorageFailure(f"compaction failed: {exc}") from exc
            self._fh.close()
            self._fh = self._open_for_append()

    # -- mutations -------------------------------------------------------------

    def register(self, serial_raw: str, label: str) -> RegistrationRecord:
        """Add a device to the allowlist (idempotent per canonical serial).

        Re-registering an existing serial keeps its label and registered_at
        and clears the revoked flag, matching the operator flow of
        registering a previously denied device.
        """
        serial = normalize_serial(serial_raw)
        with self._lock:
            existing = self._records.get(serial)
            if existing is not None:
                record = replace(existing, revoked=False)
            else:
                record = RegistrationRecord(
                    serial=serial, label=label, registered_at=self._clock(), revoked=False
                )
            self._append(record)
            return record

    def revoke(self, serial: CanonicalSerial) -> RegistrationRecord:
        """Mark a registration revoked; the serial drops out of snapshots."""
        with self._lock:
            existing = self._records.get(serial)
            if existing is None:
                raise NotRegistered(f"serial not registered: {serial}")
            record = replace(existing, revoked=True)
            self._append(record)
            return record

    # -- reads -----------------------------------------------------------------

    def snapshot(self) -> RegistryView:
        with self._lock:
            active = frozenset(s for s, r in self._records.items() if not r.revoked)
            return RegistryView(serials=active, version=self._version)

    def records(self) -> list[RegistrationRecord]:
        """All records (revoked included), in first-registration order."""
        with self._lock:
            return list(self._records.values())

    def get(self, serial: CanonicalSerial) -> RegistrationRecord | None:
        with self._lock:
            return self._records.get(serial)

    @property
    def version(self) -> int:
        with self._lock:
            return self._version

    @property
    def path(self) -> Path:
        return self._path

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def __enter__(self) -> "Registry":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _log_lines(text: str) -> Iterator[str]:
    """Yield log lines, tolerating only the trailing newline of the last
    record. Any other empty line is corruption and surfaces via the JSON
    parse error with its line number."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return iter(lines)
