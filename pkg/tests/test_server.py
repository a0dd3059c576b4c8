"""Server pipeline and transports: joins, control, rescan, admin API, SSE."""

import json
import socket
import threading
import time
from pathlib import Path

import pytest
import requests

from snap.core import DeviceStatus, Verdict, decide, normalize_serial
from snap.errors import CannotEnableDenied, NoSuchSession, UnknownAp
from snap.protocol import (
    AuthVerdict,
    ControlAction,
    ControlCommand,
    ErrorMessage,
    JoinRequest,
    StatusEvent,
    encode,
    read_frame,
)
from snap.registry import RegistrationRecord, Registry
from snap.server import ServerConfig, ServerCore, SnapServer
from snap.sessions import SessionManager
from snap.simnet import DeliveryOutcome, SimulatedNetwork


def make_core(tmp_path, aps=("ap1", "ap2", "ap3")):
    registry = Registry(tmp_path / "registry.jsonl")
    return ServerCore(registry, SessionManager(), SimulatedNetwork(aps))


def join_req(serial, hostname="host", ip="10.0.0.9", ap="ap1"):
    return JoinRequest(serial_raw=serial, hostname=hostname, ip=ip, ap_id=ap)


# -- core pipeline -----------------------------------------------------------------

def test_join_registered_is_allowed_and_enabled(tmp_path):
    core = make_core(tmp_path)
    core.register_device("SN-RAFIKI", "RAFIKI")
    verdict = core.handle_join(join_req("SN-RAFIKI", "RAFIKI", "192.168.0.12", "ap2"))
    assert verdict.verdict is Verdict.ALLOW
    assert verdict.session_id
    record = core.sessions.get("SN-RAFIKI")
    assert record.status is DeviceStatus.ENABLED
    assert core.simnet.gate_of("SN-RAFIKI") is DeviceStatus.ENABLED


def test_join_unregistered_is_denied_and_disabled(tmp_path):
    core = make_core(tmp_path)
    verdict = core.handle_join(join_req("SN-KOLSOLT"))
    assert verdict.verdict is Verdict.DENY
    assert verdict.reason == "unregistered"
    assert core.sessions.get("SN-KOLSOLT").status is DeviceStatus.DISABLED
    assert core.simnet.send("SN-KOLSOLT") is DeliveryOutcome.BLOCKED


def test_join_normalizes_padded_serial(tmp_path):
    core = make_core(tmp_path)
    core.register_device("SN-RAFIKI", "RAFIKI")
    verdict = core.handle_join(join_req("  sn-rafiki "))
    assert verdict.verdict is Verdict.ALLOW


def test_join_unknown_ap_raises_and_records_nothing(tmp_path):
    core = make_core(tmp_path)
    with pytest.raises(UnknownAp):
        core.handle_join(join_req("SN-A", ap="ap99"))
    assert len(core.sessions) == 0


def test_registration_does_not_retroactively_admit(tmp_path):
    core = make_core(tmp_path)
    core.handle_join(join_req("SN-K"))
    core.register_device("SN-K", "K")
    record = core.sessions.get("SN-K")
    assert record.decision.verdict is Verdict.DENY
    assert record.status is DeviceStatus.DISABLED
    # The device re-joins (or a rescan runs) and only then is admitted.
    verdict = core.handle_join(join_req("SN-K"))
    assert verdict.verdict is Verdict.ALLOW


def test_control_disable_blocks_traffic_immediately(tmp_path):
    core = make_core(tmp_path)
    core.register_device("SN-R", "R")
    core.handle_join(join_req("SN-R"))
    assert core.simnet.send("SN-R") is DeliveryOutcome.DELIVERED
    record = core.handle_control(
        ControlCommand(serial="SN-R", action=ControlAction.DISABLE, operator="op")
    )
    assert record.status is DeviceStatus.DISABLED
    assert core.simnet.send("SN-R") is DeliveryOutcome.BLOCKED
    record = core.handle_control(
        ControlCommand(serial="SN-R", action=ControlAction.ENABLE, operator="op")
    )
    assert record.status is DeviceStatus.ENABLED
    assert core.simnet.send("SN-R") is DeliveryOutcome.DELIVERED


def test_control_without_session_raises(tmp_path):
    core = make_core(tmp_path)
    with pytest.raises(NoSuchSession):
        core.handle_control(
            ControlCommand(serial="SN-NONE", action=ControlAction.DISABLE, operator="op")
        )


def test_enable_denied_session_raises(tmp_path):
    core = make_core(tmp_path)
    core.handle_join(join_req("SN-K"))
    with pytest.raises(CannotEnableDenied):
        core.handle_control(
            ControlCommand(serial="SN-K", action=ControlAction.ENABLE, operator="op")
        )


def test_rescan_purges_and_fails_closed(tmp_path):
    core = make_core(tmp_path)
    core.register_device("SN-A", "a")
    core.register_device("SN-B", "b")
    core.handle_join(join_req("SN-A", ap="ap1"))
    core.handle_join(join_req("SN-B", ap="ap2"))
    core.handle_join(join_req("SN-C", ap="ap3"))
    events = []
    core.subscribe(events.append)
    assert core.rescan() == 3
    assert core.sessions.list_connected() == []
    # Every previously live serial got a Disabled/rescan solicitation...
    assert sorted((e.serial, e.cause) for e in events) == [
        ("SN-A", "rescan"), ("SN-B", "rescan"), ("SN-C", "rescan"),
    ]
    # ...and the gates failed closed for the new cycle.
    for serial in ("SN-A", "SN-B", "SN-C"):
        assert core.simnet.send(serial) is DeliveryOutcome.BLOCKED
    assert core.rescan() == 0


def test_verdict_events_are_published_in_order(tmp_path):
    core = make_core(tmp_path)
    core.register_device("SN-A", "a")
    events = []
    core.subscribe(events.append)
    core.handle_join(join_req("SN-A"))
    core.handle_join(join_req("SN-B"))
    assert [(e.serial, e.status, e.cause) for e in events] == [
        ("SN-A", DeviceStatus.ENABLED, "verdict"),
        ("SN-B", DeviceStatus.DISABLED, "verdict"),
    ]


def test_pipeline_fidelity_replay_oracle(tmp_path):
    """Recompute every stored verdict offline from the registry log prefix
    at the session's recorded version."""
    core = make_core(tmp_path)
    core.register_device("SN-A", "a")
    core.handle_join(join_req("SN-A"))
    core.handle_join(join_req("SN-B"))
    core.register_device("SN-B", "b")
    core.handle_join(join_req("SN-B"))
    core.register_device("SN-C", "c")
    core.revoke_device("SN-C")
    core.handle_join(join_req("SN-C"))

    log_lines = (tmp_path / "registry.jsonl").read_text().splitlines()
    for record in core.sessions.list_connected():
        # Independent replay: apply the first `registry_version` log lines.
        state = {}
        for line in log_lines[: record.registry_version]:
            obj = json.loads(line)
            state[obj["serial"]] = obj["revoked"]
        allowlist = {s for s, revoked in state.items() if not revoked}
        assert decide(record.identity, allowlist) == record.decision


# -- device TCP transport ----------------------------------------------------------------

def _tcp_join(device_addr, serial, hostname="h", ip="10.0.0.5", ap="ap1"):
    sock = socket.create_connection(device_addr, timeout=5)
    sock.sendall(encode(JoinRequest(serial_raw=serial, hostname=hostname, ip=ip, ap_id=ap)))
    rfile = sock.makefile("rb")
    while True:
        msg = read_frame(rfile)
        if not isinstance(msg, StatusEvent):
            return sock, rfile, msg


def test_tcp_join_flow(live_server, device_addr):
    live_server.core.register_device("SN-R", "R")
    sock, rfile, reply = _tcp_join(device_addr, "SN-R")
    assert isinstance(reply, AuthVerdict)
    assert reply.verdict is Verdict.ALLOW
    sock.close()
    sock, rfile, reply = _tcp_join(device_addr, "SN-X")
    assert isinstance(reply, AuthVerdict)
    assert reply.verdict is Verdict.DENY
    sock.close()


def test_tcp_bad_serial_gets_error_frame(live_server, device_addr):
    sock, rfile, reply = _tcp_join(device_addr, "   ")
    assert isinstance(reply, ErrorMessage)
    assert reply.reason == "bad-serial"
    sock.close()


def test_tcp_bad_ip_gets_error_frame(live_server, device_addr):
    sock, rfile, reply = _tcp_join(device_addr, "SN-A", ip="not-an-ip")
    assert isinstance(reply, ErrorMessage)
    assert reply.reason == "bad-ip"
    sock.close()


def test_tcp_unknown_ap_gets_error_frame(live_server, device_addr):
    sock, rfile, reply = _tcp_join(device_addr, "SN-A", ap="ap77")
    assert isinstance(reply, ErrorMessage)
    assert reply.reason == "unknown-ap"
    sock.close()


def test_tcp_non_join_frame_is_rejected(live_server, device_addr):
    sock = socket.create_connection(device_addr, timeout=5)
    sock.sendall(encode(ControlCommand(serial="SN-A", action=ControlAction.DISABLE, operator="x")))
    reply = read_frame(sock.makefile("rb"))
    assert isinstance(reply, ErrorMessage)
    assert reply.reason == "unexpected-kind"
    sock.close()


def test_tcp_pushes_status_event_after_operator_disable(live_server, device_addr, admin_url):
    live_server.core.register_device("SN-R", "R")
    sock, rfile, reply = _tcp_join(device_addr, "SN-R")
    assert reply.verdict is Verdict.ALLOW
    requests.post(f"{admin_url}/api/devices/SN-R/disable", timeout=5)
    deadline = time.monotonic() + 5
    got = None
    while time.monotonic() < deadline:
        msg = read_frame(rfile)
        if isinstance(msg, StatusEvent) and msg.cause == "operator":
            got = msg
            break
    assert got is not None
    assert got.serial == "SN-R"
    assert got.status is DeviceStatus.DISABLED
    sock.close()


# -- admin HTTP API -------------------------------------------------------------------------

def test_admin_register_then_listed(admin_url):
    r = requests.post(f"{admin_url}/api/devices", json={"serial": "sn-k", "label": "K"}, timeout=5)
    assert r.status_code == 201
    assert r.json()["serial"] == "SN-K"
    listed = requests.get(f"{admin_url}/api/devices/registered", timeout=5).json()["devices"]
    assert any(d["serial"] == "SN-K" for d in listed)


def test_admin_register_bad_serial_is_400(admin_url):
    r = requests.post(f"{admin_url}/api/devices", json={"serial": "   "}, timeout=5)
    assert r.status_code == 400
    assert r.json()["error"]["code"] == "bad-serial"


def test_admin_register_malformed_body_is_400(admin_url):
    r = requests.post(
        f"{admin_url}/api/devices",
        data="not json",
        headers={"Content-Type": "application/json"},
        timeout=5,
    )
    assert r.status_code == 400


def test_admin_connected_reflects_demo_mid_state(live_server, admin_url):
    core = live_server.core
    core.register_device("SN-DOTTHEDUCK", "DOTTHEDUCK")
    core.register_device("SN-RAFIKI", "RAFIKI")
    core.handle_join(join_req("SN-DOTTHEDUCK", "DOTTHEDUCK", "192.168.0.10", "ap1"))
    core.handle_join(join_req("SN-RAFIKI", "RAFIKI", "192.168.0.12", "ap2"))
    core.handle_join(join_req("SN-KOLSOLT", "KOLSOLT", "192.168.0.13", "ap3"))
    rows = requests.get(f"{admin_url}/api/devices/connected", timeout=5).json()["devices"]
    assert [r["serial"] for r in rows] == ["SN-DOTTHEDUCK", "SN-RAFIKI", "SN-KOLSOLT"]
    assert [r["status"] for r in rows] == ["Enabled", "Enabled", "Disabled"]


def test_admin_disable_unknown_is_404(admin_url):
    r = requests.post(f"{admin_url}/api/devices/SN-GHOST/disable", timeout=5)
    assert r.status_code == 404
    assert r.json()["error"]["code"] == "no-session"


def test_admin_enable_denied_is_409(live_server, admin_url):
    live_server.core.handle_join(join_req("SN-K"))
    r = requests.post(f"{admin_url}/api/devices/SN-K/enable", timeout=5)
    assert r.status_code == 409
    assert r.json()["error"]["code"] == "cannot-enable-denied"


def test_admin_revoke_and_404_on_unknown(live_server, admin_url):
    live_server.core.register_device("SN-A", "a")
    r = requests.delete(f"{admin_url}/api/devices/SN-A", timeout=5)
    assert r.status_code == 200
    assert r.json()["revoked"] is True
    r = requests.delete(f"{admin_url}/api/devices/SN-NOPE", timeout=5)
    assert r.status_code == 404


def test_admin_rescan_endpoint(live_server, admin_url):
    live_server.core.handle_join(join_req("SN-A"))
    r = requests.post(f"{admin_url}/api/rescan", timeout=5)
    assert r.status_code == 200
    assert r.json() == {"purged": 1}


def test_admin_serial_with_space_roundtrips_via_url(live_server, admin_url):
    live_server.core.register_device("SN 1", "spacey")
    live_server.core.handle_join(join_req("SN 1"))
    r = requests.post(f"{admin_url}/api/devices/SN%201/disable", timeout=5)
    assert r.status_code == 200
    assert r.json()["serial"] == "SN 1"


def test_linearizable_control_visibility(live_server, admin_url):
    core = live_server.core
    core.register_device("SN-R", "R")
    core.handle_join(join_req("SN-R"))
    requests.post(f"{admin_url}/api/devices/SN-R/disable", timeout=5)
    for _ in range(5):
        rows = requests.get(f"{admin_url}/api/devices/connected", timeout=5).json()["devices"]
        assert rows[0]["status"] == "Disabled"


def test_sse_stream_delivers_status_events(live_server, admin_url):
    response = requests.get(f"{admin_url}/api/events", stream=True, timeout=10)
    try:
        live_server.core.handle_join(join_req("SN-EVT"))
        payload = None
        deadline = time.monotonic() + 5
        for line in response.iter_lines():
            if line.startswith(b"data: "):
                payload = json.loads(line[len(b"data: "):])
                break
            if time.monotonic() > deadline:
                break
        assert payload == {"serial": "SN-EVT", "status": "Disabled", "cause": "verdict"}
    finally:
        response.close()


def test_fallback_index_served_without_console(admin_url):
    r = requests.get(admin_url + "/", timeout=5)
    assert r.status_code == 200
    assert "text/html" in r.headers["Content-Type"]


def test_static_console_dir_served(tmp_path):
    console = tmp_path / "console"
    console.mkdir()
    (console / "index.html").write_text("<html><body>console here</body></html>")
    (console / "app.js").write_text("export const x = 1;")
    config = ServerConfig(
        device_port=0, admin_port=0, data_dir=tmp_path / "data", console_dir=console
    )
    with SnapServer(config) as server:
        base = f"http://127.0.0.1:{server.admin_port}"
        assert "console here" in requests.get(base + "/", timeout=5).text
        assert requests.get(base + "/app.js", timeout=5).status_code == 200
        assert requests.get(base + "/../secret", timeout=5).status_code == 404
        assert requests.get(base + "/missing.js", timeout=5).status_code == 404


# -- restart behaviour --------------------------------------------------------------------

def test_crash_restart_purges_sessions_keeps_registry(tmp_path):
    data_dir = tmp_path / "data"
    config = ServerConfig(device_port=0, admin_port=0, data_dir=data_dir)
    server = SnapServer(config)
    server.start()
    server.core.register_device("SN-A", "a")
    server.core.handle_join(join_req("SN-A"))
    assert len(server.core.connected_records()) == 1
    server.stop()

    server = SnapServer(ServerConfig(device_port=0, admin_port=0, data_dir=data_dir))
    server.start()
    try:
        assert server.core.connected_records() == []
        assert "SN-A" in server.registry.snapshot().serials
    finally:
        server.stop()


def test_config_rejects_equal_ports():
    with pytest.raises(ValueError):
        ServerConfig(device_port=7500, admin_port=7500)
