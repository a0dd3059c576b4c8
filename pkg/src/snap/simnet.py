"""Deterministic in-process WLAN simulation.

Access points gate traffic per associated serial: a frame is Delivered only
if the source's gate is Enabled at delivery time. Gates default to Disabled
on association (fail closed) and change only through status events, so the
delivered set can be replayed exactly from the event order.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .core import CanonicalSerial, DeviceStatus
from .errors import NotAssociated, UnknownAp
from .protocol import StatusEvent

logger = logging.getLogger(__name__)


class DeliveryOutcome(Enum):
    DELIVERED = "Delivered"
    BLOCKED = "Blocked"


@dataclass(frozen=True)
class Frame:
    """One unit of simulated client traffic. seq must strictly increase
    per source; use SimulatedNetwork.send() to get that for free."""

    src_serial: CanonicalSerial
    dst: str  # "server" or a peer serial
    payload: bytes
    seq: int


@dataclass
class AccessPoint:
    ap_id: str
    associated: set[CanonicalSerial] = field(default_factory=set)
    gate: dict[CanonicalSerial, DeviceStatus] = field(default_factory=dict)


class SimulatedNetwork:
    """The set of access points and their per-serial traffic gates."""

    def __init__(self, ap_ids: Iterable[str]):
        self._aps = {ap_id: AccessPoint(ap_id) for ap_id in ap_ids}
        if not self._aps:
            raise ValueError("at least one access point is required")
        self._lock = threading.RLock()
        self._last_seq: dict[CanonicalSerial, int] = {}
        self._log: list[tuple[Frame, DeliveryOutcome]] = []

    @property
    def ap_ids(self) -> list[str]:
        return list(self._aps)

    def associate(self, ap_id: str, serial: CanonicalSerial) -> None:
        """Associate a serial with an AP; only the latest association is live.

        The gate starts Disabled until a verdict event arrives (default-deny).
        """
        with self._lock:
            ap = self._aps.get(ap_id)
            if ap is None:
                raise UnknownAp(f"no such access point: {ap_id}")
            for other in self._aps.values():
                other.associated.discard(serial)
                other.gate.pop(serial, None)
            ap.associated.add(serial)
            ap.gate[serial] = DeviceStatus.DISABLED

    def ap_of(self, serial: CanonicalSerial) -> str | None:
        with self._lock:
            for ap in self._aps.values():
                if serial in ap.associated:
                    return ap.ap_id
            return None

    def gate_of(self, serial: CanonicalSerial) -> DeviceStatus | None:
        with self._lock:
            for ap in self._aps.values():
                if serial in ap.gate:
                    return ap.gate[serial]
            return None

    def associated_serials(self) -> list[CanonicalSerial]:
        with self._lock:
            serials: set[CanonicalSerial] = set()
            for ap in self._aps.values():
                serials |= ap.associated
            return sorted(serials)

    def apply_status(self, event: StatusEvent) -> None:
        """Update the gate for the event's serial. Unknown serials are not an
        error (the device may have dropped off): log and move on."""
        with self._lock:
            for ap in self._aps.values():
                if event.serial in ap.associated:
                    ap.gate[event.serial] = event.status
                    return
            logger.warning("status event for unassociated serial %s ignored", event.serial)

    def deliver(self, frame: Frame) -> DeliveryOutcome:
        """Deliver or block one frame based on the source's gate right now."""
        with self._lock:
            ap_id = self.ap_of(frame.src_serial)
            if ap_id is None:
                raise NotAssociated(f"{frame.src_serial} is not associated with any AP")
            last = self._last_seq.get(frame.src_serial)
            if last is not None and frame.seq <= last:
                raise ValueError(
                    f"frame seq must strictly increase per source "
                    f"({frame.src_serial}: {frame.seq} after {last})"
                )
            self._last_seq[frame.src_serial] = frame.seq
            gate = self._aps[ap_id].gate[frame.src_serial]
            outcome = (
                DeliveryOutcome.DELIVERED
                if gate is DeviceStatus.ENABLED
                else DeliveryOutcome.BLOCKED
            )
            self._log.append((frame, outcome))
            return outcome

    def send(self, src_serial: CanonicalSerial, dst: str = "server", payload: bytes = b"") -> DeliveryOutcome:
        """Build a frame with the next sequence number for src and deliver it."""
        with self._lock:
            seq = self._last_seq.get(src_serial, 0) + 1
            return self.deliver(Frame(src_serial=src_serial, dst=dst, payload=payload, seq=seq))

    def delivery_log(self) -> list[tuple[Frame, DeliveryOutcome]]:
        with self._lock:
            return list(self._log)
