"""Operator command line.

Every admin action goes through the server's HTTP API (the CLI is a pure
client); `serve` runs the server itself and `scenario` boots a throwaway
in-process stack. Exit codes: 0 success, 1 domain or network error, 2
usage or script-parse error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import urllib.parse
from pathlib import Path

import requests

from . import agent as agent_mod
from . import scenario as scenario_mod
from .errors import ScriptError
from .server import DEFAULT_ADMIN_PORT, DEFAULT_AP_IDS, DEFAULT_DATA_DIR, DEFAULT_DEVICE_PORT, ServerConfig, run_server

DEFAULT_ADMIN_URL = f"http://127.0.0.1:{DEFAULT_ADMIN_PORT}"


class ApiError(Exception):
    """Admin API rejected the request (4xx with an error payload)."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


class AdminClient:
    """Thin JSON client for the admin HTTP API."""

    def __init__(self, base_url: str):
        self.base_url = base_url.rstrip("/")

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        response = requests.request(method, self.base_url + path, json=body, timeout=10)
        try:
            payload = response.json()
        except ValueError:
            payload = {}
        if response.status_code >= 400:
            error = payload.get("error", {})
            raise ApiError(
                response.status_code,
                error.get("code", "http-error"),
                error.get("message", f"HTTP {response.status_code}"),
            )
        return payload

    def get(self, path: str) -> dict:
        return self._request("GET", path)

    def post(self, path: str, body: dict | None = None) -> dict:
        return self._request("POST", path, body)

    def delete(self, path: str) -> dict:
        return self._request("DELETE", path)


def _device_path(serial: str, suffix: str = "") -> str:
    return "/api/devices/" + urllib.parse.quote(serial, safe="") + suffix


def _print_table(headers: list[str], rows: list[list[str]]) -> None:
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in rows)) if rows else len(headers[i])
        for i in range(len(headers))
    ]
    fmt = lambda cells: "  ".join(c.ljust(widths[i]) for i, c in enumerate(cells)).rstrip()
    print(fmt(headers))
    print(fmt(["-" * w for w in widths]))
    for row in rows:
        print(fmt(row))


def _client(args: argparse.Namespace) -> AdminClient:
    url = args.admin_url or os.environ.get("SNAP_ADMIN_URL") or DEFAULT_ADMIN_URL
    return AdminClient(url)


# -- command handlers ----------------------------------------------------------


def cmd_serve(args: argparse.Namespace) -> int:
    env = os.environ.get
    config = ServerConfig(
        device_port=args.device_port if args.device_port is not None
        else int(env("SNAP_DEVICE_PORT", DEFAULT_DEVICE_PORT)),
        admin_port=args.admin_port if args.admin_port is not None
        else int(env("SNAP_ADMIN_PORT", DEFAULT_ADMIN_PORT)),
        data_dir=Path(args.data_dir or env("SNAP_DATA_DIR", DEFAULT_DATA_DIR)),
        admin_bind=args.admin_bind,
        purge_on_start=not args.no_purge_on_start,
        ap_ids=tuple(args.aps.split(",")) if args.aps else DEFAULT_AP_IDS,
        console_dir=Path(args.console_dir) if args.console_dir
        else (Path(p) if (p := env("SNAP_CONSOLE_DIR")) else None),
    )
    run_server(config)
    return 0


def cmd_register(args: argparse.Namespace) -> int:
    record = _client(args).post("/api/devices", {"serial": args.serial, "label": args.label})
    if args.json:
        print(json.dumps(record))
    else:
        print(f"registered {record['serial']} (label: {record['label'] or '-'})")
    return 0


def cmd_revoke(args: argparse.Namespace) -> int:
    record = _client(args).delete(_device_path(args.serial))
    if args.json:
        print(json.dumps(record))
    else:
        print(f"revoked {record['serial']}")
    return 0


def cmd_list_registered(args: argparse.Namespace) -> int:
    payload = _client(args).get("/api/devices/registered")
    if args.json:
        print(json.dumps(payload))
        return 0
    devices = payload["devices"]
    if not devices:
        print("no registered devices")
        return 0
    _print_table(
        ["SERIAL", "LABEL", "REGISTERED AT", "REVOKED"],
        [[d["serial"], d["label"], d["registered_at"], "yes" if d["revoked"] else "no"]
         for d in devices],
    )
    return 0


def cmd_list_connected(args: argparse.Namespace) -> int:
    payload = _client(args).get("/api/devices/connected")
    if args.json:
        print(json.dumps(payload))
        return 0
    devices = payload["devices"]
    if not devices:
        print("no connected devices")
        return 0
    _print_table(
        ["SERIAL", "NAME", "IP ADDRESS", "AP", "STATUS", "VERDICT"],
        [[d["serial"], d["hostname"], d["ip"], d["ap_id"], d["status"],
          d["verdict"] + (f" ({d['reason']})" if d["reason"] else "")]
         for d in devices],
    )
    return 0


def _confirm(prompt: str) -> bool:
    try:
        answer = input(prompt)
    except EOFError:
        return False
    return answer.strip().lower() in ("y", "yes")


def cmd_disable(args: argparse.Namespace) -> int:
    if not args.yes and not _confirm(f"Disable {args.serial}? [y/N] "):
        print("aborted")
        return 1
    record = _client(args).post(_device_path(args.serial, "/disable"))
    if args.json:
        print(json.dumps(record))
    else:
        print(f"{record['serial']} disabled; traffic is now blocked")
    return 0


def cmd_enable(args: argparse.Namespace) -> int:
    record = _client(args).post(_device_path(args.serial, "/enable"))
    if args.json:
        print(json.dumps(record))
    else:
        print(f"{record['serial']} enabled; traffic is now allowed")
    return 0


def cmd_rescan(args: argparse.Namespace) -> int:
    payload = _client(args).post("/api/rescan")
    if args.json:
        print(json.dumps(payload))
    else:
        print(f"purged {payload['purged']} session(s); devices will re-join")
    return 0


def cmd_scenario(args: argparse.Namespace) -> int:
    try:
        script = scenario_mod.resolve_script(args.script)
        report = scenario_mod.run_scenario(script)
    except ScriptError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    if args.json:
        print(report.to_json(), end="")
    else:
        print(report.render_table(), end="")
    return 0 if report.all_passed else 1


def cmd_agent(args: argparse.Namespace) -> int:
    return agent_mod.run_agent(args)


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snap",
        description="serial-number based network access control",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--admin-url", default=None,
                       help=f"admin API base URL (env SNAP_ADMIN_URL, default {DEFAULT_ADMIN_URL})")
        p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("serve", help="run the authentication server")
    p.add_argument("--device-port", type=int, default=None,
                   help=f"TCP port for device joins (env SNAP_DEVICE_PORT, default {DEFAULT_DEVICE_PORT})")
    p.add_argument("--admin-port", type=int, default=None,
                   help=f"HTTP port for the admin API (env SNAP_ADMIN_PORT, default {DEFAULT_ADMIN_PORT})")
    p.add_argument("--data-dir", default=None,
                   help=f"registry directory (env SNAP_DATA_DIR, default ./{DEFAULT_DATA_DIR})")
    p.add_argument("--admin-bind", default="127.0.0.1",
                   help="admin API bind address (default loopback)")
    p.add_argument("--aps", default=None,
                   help="comma-separated access point ids (default %s)" % ",".join(DEFAULT_AP_IDS))
    p.add_argument("--console-dir", default=None,
                   help="directory of built web console assets to serve at / (env SNAP_CONSOLE_DIR)")
    p.add_argument("--no-purge-on-start", action="store_true",
                   help="keep session records from a previous run (default purges)")
    p.set_defaults(handler=cmd_serve)

    p = sub.add_parser("register", help="add a device to the allowlist")
    p.add_argument("serial")
    p.add_argument("--label", default="", help="operator-assigned display name")
    common(p)
    p.set_defaults(handler=cmd_register)

    p = sub.add_parser("revoke", help="revoke a device's registration")
    p.add_argument("serial")
    common(p)
    p.set_defaults(handler=cmd_revoke)

    p = sub.add_parser("list-registered", help="show the allowlist")
    common(p)
    p.set_defaults(handler=cmd_list_registered)

    p = sub.add_parser("list-connected", help="show the connected-devices table")
    common(p)
    p.set_defaults(handler=cmd_list_connected)

    p = sub.add_parser("disable", help="disable a connected device")
    p.add_argument("serial")
    p.add_argument("--yes", action="store_true", help="skip the confirmation prompt")
    common(p)
    p.set_defaults(handler=cmd_disable)

    p = sub.add_parser("enable", help="re-enable a disabled device")
    p.add_argument("serial")
    common(p)
    p.set_defaults(handler=cmd_enable)

    p = sub.add_parser("rescan", help="purge sessions and solicit re-joins")
    common(p)
    p.set_defaults(handler=cmd_rescan)

    p = sub.add_parser("scenario", help="run a scripted demonstration")
    p.add_argument("script", help='built-in name ("paper-demo") or path to a script JSON file')
    p.add_argument("--json", action="store_true", help="emit the report as JSON")
    p.set_defaults(handler=cmd_scenario)

    p = sub.add_parser("agent", help="run a device agent (same as snap-agent)")
    agent_mod.add_agent_arguments(p)
    p.set_defaults(handler=cmd_agent)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.handler(args)
    except ApiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except requests.RequestException as exc:
        print(f"error: cannot reach the admin API: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
