"""Agent: identity resolution, join/backoff, status mirroring."""

import socket
import struct
import threading
import time

import pytest

from snap.agent import (
    Agent,
    AgentIdentitySource,
    RETRY_MAX_ATTEMPTS,
    join,
    probe_identity,
)
from snap.core import DeviceStatus, Verdict
from snap.errors import ProbeUnavailable, ProtocolError, ServerUnreachable
from snap.protocol import JoinRequest


# -- identity ---------------------------------------------------------------------

def test_configured_identity_passes_through_normalized():
    source = AgentIdentitySource.configured("sn-rafiki", "RAFIKI", "192.168.0.12")
    identity = probe_identity(source)
    assert identity.serial == "SN-RAFIKI"
    assert identity.hostname == "RAFIKI"
    assert identity.ip == "192.168.0.12"


def test_configured_mode_requires_serial():
    with pytest.raises(ValueError):
        AgentIdentitySource(mode="configured")


def test_configured_fills_missing_fields_from_host():
    identity = probe_identity(AgentIdentitySource.configured("SN-X"))
    assert identity.serial == "SN-X"
    assert identity.hostname  # the host always has some name
    assert identity.ip


def test_probed_mode_reads_firmware_file(tmp_path):
    serial_file = tmp_path / "product_serial"
    serial_file.write_text(" snx-42 \n")
    identity = probe_identity(AgentIdentitySource.probed(), firmware_paths=(str(serial_file),))
    assert identity.serial == "SNX-42"
    # Stable across consecutive probes.
    again = probe_identity(AgentIdentitySource.probed(), firmware_paths=(str(serial_file),))
    assert again.serial == identity.serial


def test_probed_mode_never_fabricates_a_serial(tmp_path):
    with pytest.raises(ProbeUnavailable):
        probe_identity(
            AgentIdentitySource.probed(),
            firmware_paths=(str(tmp_path / "missing"),),
        )


def test_probed_mode_rejects_empty_firmware_value(tmp_path):
    serial_file = tmp_path / "product_serial"
    serial_file.write_text("\n")
    with pytest.raises(ProbeUnavailable):
        probe_identity(AgentIdentitySource.probed(), firmware_paths=(str(serial_file),))


# -- join and backoff -----------------------------------------------------------------

def _identity(serial="SN-A", hostname="H", ip="10.0.0.2"):
    return probe_identity(AgentIdentitySource.configured(serial, hostname, ip))


def test_backoff_schedule_on_unreachable_server():
    attempts = []
    sleeps = []

    def failing_connect(addr, timeout=None):
        attempts.append(addr)
        raise ConnectionRefusedError("nope")

    agent = Agent(
        ("127.0.0.1", 1), _identity(), "ap1", connect=failing_connect, sleep=sleeps.append
    )
    with pytest.raises(ServerUnreachable):
        agent.join()
    assert len(attempts) == RETRY_MAX_ATTEMPTS
    assert sleeps == [0.25, 0.5, 1.0, 2.0]
    assert sum(sleeps) == pytest.approx(3.75)


def test_join_against_live_server(live_server, device_addr):
    live_server.core.register_device("SN-A", "a")
    verdict = join(device_addr, _identity("SN-A"), "ap1")
    assert verdict.verdict is Verdict.ALLOW


def test_join_denied_identity(live_server, device_addr):
    verdict = join(device_addr, _identity("SN-NOBODY"), "ap1")
    assert verdict.verdict is Verdict.DENY
    assert verdict.reason == "unregistered"


def test_join_raises_protocol_error_on_garbage_reply():
    listener = socket.socket()
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    addr = listener.getsockname()

    def bogus_server():
        conn, _ = listener.accept()
        conn.recv(65536)
        payload = b"this is not json"
        conn.sendall(struct.pack(">I", len(payload)) + payload)
        conn.close()

    thread = threading.Thread(target=bogus_server, daemon=True)
    thread.start()
    with pytest.raises(ProtocolError):
        join(addr, _identity(), "ap1")
    listener.close()


def test_join_raises_protocol_error_on_server_rejection(live_server, device_addr):
    # The server replies with an Error frame for an unknown AP.
    with pytest.raises(ProtocolError, match="unknown-ap"):
        join(device_addr, _identity(), "ap-nope")


# -- interface status ----------------------------------------------------------------------

def test_status_unknown_before_any_contact():
    agent = Agent(("127.0.0.1", 1), _identity(), "ap1")
    assert agent.interface_status() is None


def test_status_tracks_verdicts_and_operator_commands(live_server, device_addr):
    core = live_server.core
    core.register_device("SN-A", "a")
    agent = Agent(device_addr, _identity("SN-A"), "ap1")
    assert agent.join().verdict is Verdict.ALLOW
    assert agent.interface_status() is DeviceStatus.ENABLED

    stop = threading.Event()
    listener = threading.Thread(target=agent.listen, kwargs={"stop": stop}, daemon=True)
    listener.start()

    from snap.protocol import ControlAction, ControlCommand

    core.handle_control(ControlCommand(serial="SN-A", action=ControlAction.DISABLE, operator="op"))
    _wait_for(lambda: agent.interface_status() is DeviceStatus.DISABLED)
    core.handle_control(ControlCommand(serial="SN-A", action=ControlAction.ENABLE, operator="op"))
    _wait_for(lambda: agent.interface_status() is DeviceStatus.ENABLED)
    stop.set()
    agent.close()


def test_denied_agent_shows_disabled_interface(live_server, device_addr):
    agent = Agent(device_addr, _identity("SN-K"), "ap1")
    verdict = agent.join()
    assert verdict.verdict is Verdict.DENY
    assert agent.interface_status() is DeviceStatus.DISABLED
    agent.close()


def test_agent_rejoins_on_rescan(live_server, device_addr):
    core = live_server.core
    core.register_device("SN-A", "a")
    agent = Agent(device_addr, _identity("SN-A"), "ap2")
    agent.join()
    listener = threading.Thread(target=agent.listen, daemon=True)
    listener.start()
    assert core.rescan() == 1
    _wait_for(lambda: core.sessions.get("SN-A") is not None)
    assert core.sessions.get("SN-A").status is DeviceStatus.ENABLED
    _wait_for(lambda: agent.interface_status() is DeviceStatus.ENABLED)
    agent.close()


def _wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return
        time.sleep(0.02)
    raise AssertionError("condition not reached within timeout")
