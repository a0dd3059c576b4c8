"""Device-side agent.

Acquires the identity triple (configured overrides or a best-effort host
probe), joins the server over the device port, and mirrors the verdict and
later operator decisions as a local interface status. Enforcement happens
at the access point; the agent-side status is the device's own view of it.
"""

from __future__ import annotations

import argparse
import json
import socket
import sys
import threading
import time
from dataclasses import dataclass
from typing import Callable

from . import protocol
from .core import DeviceIdentity, DeviceStatus, collate, normalize_serial
from .errors import ProbeUnavailable, ProtocolError, ServerUnreachable, SnapError
from .protocol import AuthVerdict, ErrorMessage, JoinRequest, StatusEvent

# Firmware inventory locations tried in probed mode, in order.
FIRMWARE_SERIAL_PATHS = (
    "/sys/class/dmi/id/product_serial",
    "/sys/firmware/devicetree/base/serial-number",
)

RETRY_BASE_SECONDS = 0.25
RETRY_MAX_ATTEMPTS = 5


@dataclass(frozen=True)
class AgentIdentitySource:
    """Where the agent's identity triple comes from.

    Configured mode requires a serial override and is what every test and
    demo uses; probed mode reads the host's firmware inventory and never
    fabricates a serial on failure.
    """

    mode: str  # "configured" | "probed"
    serial: str | None = None
    hostname: str | None = None
    ip: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("configured", "probed"):
            raise ValueError(f"unknown identity mode {self.mode!r}")
        if self.mode == "configured" and not self.serial:
            raise ValueError("configured mode requires a serial override")

    @classmethod
    def configured(cls, serial: str, hostname: str | None = None, ip: str | None = None):
        return cls(mode="configured", serial=serial, hostname=hostname, ip=ip)

    @classmethod
    def probed(cls):
        return cls(mode="probed")


def _local_hostname() -> str:
    return socket.gethostname()


def _local_ip() -> str:
    # Routing-table trick; no packet is sent.
    try:
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
            s.connect(("203.0.113.1", 9))
            return s.getsockname()[0]
    except OSError:
        return "127.0.0.1"


def _read_firmware_serial(paths=FIRMWARE_SERIAL_PATHS) -> str:
    for path in paths:
        try:
            with open(path, "rb") as fh:
                raw = fh.read().decode("utf-8", "replace").strip("\x00").strip()
        except OSError:
            continue
        if raw:
            return raw
    raise ProbeUnavailable(
        "no readable firmware serial (tried: " + ", ".join(paths) + ")"
    )


def probe_identity(
    source: AgentIdentitySource, firmware_paths=FIRMWARE_SERIAL_PATHS
) -> DeviceIdentity:
    """Resolve the identity triple for this device.

    Configured overrides pass through untouched apart from serial
    normalization; anything not overridden (and everything in probed mode)
    comes from the host.
    """
    if source.mode == "configured":
        serial_raw = source.serial
        hostname = source.hostname if source.hostname is not None else _local_hostname()
        ip = source.ip if source.ip is not None else _local_ip()
    else:
        serial_raw = _read_firmware_serial(firmware_paths)
        hostname = _local_hostname()
        ip = _local_ip()
    return collate(hostname, ip, normalize_serial(serial_raw))


class Agent:
    """One device's connection to the authentication server.

    join() sends the identity and returns the verdict; the connection then
    stays open so listen() can track StatusEvents. A rescan event makes the
    agent re-join automatically, mirroring a device re-running the client.
    """

    def __init__(
        self,
        server_addr: tuple[str, int],
        identity: DeviceIdentity,
        ap_id: str,
        connect: Callable = socket.create_connection,
        sleep: Callable[[float], None] = time.sleep,
        timeout: float = 10.0,
    ):
        self.server_addr = server_addr
        self.identity = identity
        self.ap_id = ap_id
        self._connect = connect
        self._sleep = sleep
        self._timeout = timeout
        self._sock: socket.socket | None = None
        self._rfile = None
        self._lock = threading.Lock()
        self._status: DeviceStatus | None = None  # None until the first verdict
        self._last_verdict: AuthVerdict | None = None

    # -- connection ------------------------------------------------------------

    def _ensure_connected(self) -> None:
        if self._sock is not None:
            return
        last_error: Exception | None = None
        for attempt in range(RETRY_MAX_ATTEMPTS):
            try:
                self._sock = self._connect(self.server_addr, timeout=self._timeout)
                # Blocking reads from here on: events may be minutes apart.
                self._sock.settimeout(None)
                self._rfile = self._sock.makefile("rb")
                return
            except OSError as exc:
                last_error = exc
                if attempt < RETRY_MAX_ATTEMPTS - 1:
                    self._sleep(RETRY_BASE_SECONDS * (2 ** attempt))
        raise ServerUnreachable(
            f"server {self.server_addr[0]}:{self.server_addr[1]} unreachable "
            f"after {RETRY_MAX_ATTEMPTS} attempts: {last_error}"
        )

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None
            self._rfile = None

    # -- operations ---------------------------------------------------------------

    def join(self) -> AuthVerdict:
        """Send the join request and wait for the verdict.

        Transport failures are retried with exponential backoff; a reply
        that is not an AuthVerdict raises ProtocolError.
        """
        self._ensure_connected()
        request = JoinRequest(
            serial_raw=self.identity.serial,
            hostname=self.identity.hostname,
            ip=self.identity.ip,
            ap_id=self.ap_id,
        )
        try:
            self._sock.sendall(protocol.encode(request))
        except OSError:
            # Stale connection (e.g. server restarted): reconnect once with
            # the full retry schedule, then resend.
            self.close()
            self._ensure_connected()
            self._sock.sendall(protocol.encode(request))
        while True:
            reply = self._read_reply()
            if isinstance(reply, AuthVerdict):
                with self._lock:
                    self._last_verdict = reply
                    self._status = (
                        DeviceStatus.ENABLED if reply.allowed else DeviceStatus.DISABLED
                    )
                return reply
            if isinstance(reply, StatusEvent):
                self._apply_event(reply)
                continue
            if isinstance(reply, ErrorMessage):
                raise ProtocolError(f"server rejected join ({reply.reason}): {reply.message}")
            raise ProtocolError(f"unexpected reply kind {type(reply).__name__}")

    def _read_reply(self) -> protocol.ProtocolMessage:
        try:
            msg = protocol.read_frame(self._rfile)
        except (protocol.DecodeError, protocol.MessageTooLarge) as exc:
            raise ProtocolError(f"bad frame from server: {exc}")
        except OSError as exc:
            raise ProtocolError(f"connection lost: {exc}")
        if msg is None:
            raise ProtocolError("server closed the connection")
        return msg

    def interface_status(self) -> DeviceStatus | None:
        """The device's simulated Wi-Fi interface state.

        None means unknown: no verdict has been received yet.
        """
        with self._lock:
            return self._status

    @property
    def last_verdict(self) -> AuthVerdict | None:
        with self._lock:
            return self._last_verdict

    def _apply_event(self, event: StatusEvent) -> None:
        if event.serial != self.identity.serial:
            return
        with self._lock:
            self._status = event.status

    def listen(
        self,
        stop: threading.Event | None = None,
        on_event: Callable[[StatusEvent], None] | None = None,
    ) -> None:
        """Track server pushes until EOF or `stop` is set.

        StatusEvents update the interface status; cause "rescan" triggers an
        automatic re-join (the server purged its table and wants devices
        back).
        """
        while stop is None or not stop.is_set():
            rfile = self._rfile
            if rfile is None:
                return
            try:
                msg = protocol.read_frame(rfile)
            except (protocol.DecodeError, protocol.MessageTooLarge, OSError, ValueError):
                # ValueError: close() raced us and the file object is gone.
                return
            if msg is None:
                return
            if isinstance(msg, StatusEvent):
                self._apply_event(msg)
                if on_event is not None:
                    on_event(msg)
                if msg.cause == "rescan":
                    try:
                        self.join()
                    except SnapError:
                        return


def join(
    server_addr: tuple[str, int],
    identity: DeviceIdentity,
    ap_id: str,
    **agent_kwargs,
) -> AuthVerdict:
    """One-shot join: connect (with retries), get the verdict, disconnect."""
    agent = Agent(server_addr, identity, ap_id, **agent_kwargs)
    try:
        return agent.join()
    finally:
        agent.close()


# -- CLI ---------------------------------------------------------------------------


def add_agent_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--server", default="127.0.0.1:7401", metavar="HOST:PORT",
                        help="device port of the authentication server")
    parser.add_argument("--ap", required=True, metavar="AP_ID",
                        help="access point to associate through")
    parser.add_argument("--serial", help="configured serial number")
    parser.add_argument("--hostname", help="configured hostname")
    parser.add_argument("--ip", help="configured IP address")
    parser.add_argument("--probe", action="store_true",
                        help="read the identity from the host firmware instead")
    parser.add_argument("--once", action="store_true",
                        help="exit after the verdict instead of listening for events")
    parser.add_argument("--json", action="store_true", help="machine-readable output")


def _parse_host_port(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {value!r}")
    return host, int(port)


def run_agent(args: argparse.Namespace) -> int:
    try:
        server_addr = _parse_host_port(args.server)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.probe:
        source = AgentIdentitySource.probed()
    elif args.serial:
        source = AgentIdentitySource.configured(args.serial, args.hostname, args.ip)
    else:
        print("error: either --serial or --probe is required", file=sys.stderr)
        return 2
    try:
        identity = probe_identity(source)
    except SnapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    agent = Agent(server_addr, identity, args.ap)
    try:
        verdict = agent.join()
    except SnapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        agent.close()
        return 1

    def show_state() -> None:
        status = agent.interface_status()
        status_text = status.value if status else "Unknown"
        if args.json:
            print(json.dumps({
                "serial": identity.serial,
                "hostname": identity.hostname,
                "ip": identity.ip,
                "ap": args.ap,
                "verdict": verdict.verdict.value,
                "reason": verdict.reason,
                "interface_status": status_text,
            }))
        else:
            reason = f" ({verdict.reason})" if verdict.reason else ""
            print(f"{identity.serial} via {args.ap}: {verdict.verdict.value}{reason}")
            print(f"wifi interface: {status_text}")

    show_state()
    if args.once:
        agent.close()
        return 0 if verdict.allowed else 1

    def on_event(event: StatusEvent) -> None:
        if args.json:
            print(json.dumps({"event": "status", "serial": event.serial,
                              "status": event.status.value, "cause": event.cause}))
        else:
            print(f"status -> {event.status.value} (cause: {event.cause})")

    try:
        agent.listen(on_event=on_event)
    except KeyboardInterrupt:
        pass
    finally:
        agent.close()
    return 0


def main() -> None:
    parser = argparse.ArgumentParser(
        prog="snap-agent", description="join a snap authentication server as a device"
    )
    add_agent_arguments(parser)
    sys.exit(run_agent(parser.parse_args()))


if __name__ == "__main__":
    main()
