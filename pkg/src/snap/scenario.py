"""Scripted end-to-end runs against a fresh in-process stack.

A scenario script is an ordered list of steps (register, start-agent,
join, control, rescan, send-frame, assert). Each assert step yields one
report row with a Yes/No execution status, rendered as JSON or as a
plain-text table with columns Functions / Description / Execution Status /
Remarks. Runs are single-threaded and deterministic: the same script
produces a byte-identical report.
"""

from __future__ import annotations

import json
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .core import DeviceStatus, Verdict
from .errors import ScriptError, SnapError
from .protocol import AuthVerdict, ControlAction, ControlCommand, JoinRequest
from .registry import Registry
from .server import DEFAULT_AP_IDS, ServerCore
from .sessions import SessionManager
from .simnet import DeliveryOutcome, SimulatedNetwork

STEP_KINDS = ("register", "revoke", "start-agent", "join", "control", "rescan",
              "send-frame", "assert")
CHECK_KINDS = ("registered-contains", "identities-collected", "distinct-aps",
               "allowed", "denied", "session-status", "frame-outcome",
               "connected-count")

TABLE_COLUMNS = ("Functions", "Description", "Execution Status", "Remarks")


@dataclass(frozen=True)
class ReportRow:
    function: str
    description: str
    passed: bool
    remarks: str

    @property
    def status(self) -> str:
        return "Yes" if self.passed else "No"


@dataclass
class ScenarioReport:
    name: str
    rows: list[ReportRow] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(row.passed for row in self.rows)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "all_passed": self.all_passed,
            "rows": [
                {
                    "function": row.function,
                    "description": row.description,
                    "status": row.status,
                    "remarks": row.remarks,
                }
                for row in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def render_table(self) -> str:
        rows = [
            (row.function, row.description, row.status, row.remarks) for row in self.rows
        ]
        widths = [
            max(len(TABLE_COLUMNS[i]), *(len(r[i]) for r in rows)) if rows else len(TABLE_COLUMNS[i])
            for i in range(4)
        ]
        def fmt(cells) -> str:
            return "  ".join(str(c).ljust(widths[i]) for i, c in enumerate(cells)).rstrip()
        lines = [fmt(TABLE_COLUMNS), fmt(tuple("-" * w for w in widths))]
        lines.extend(fmt(r) for r in rows)
        return "\n".join(lines) + "\n"


@dataclass
class _ScriptAgent:
    serial: str
    hostname: str
    ip: str
    ap_id: str
    last_verdict: AuthVerdict | None = None


class _Runner:
    def __init__(self, script: dict, data_dir: Path):
        self.script = script
        self.core = self._boot(script, data_dir)
        self.agents: dict[str, _ScriptAgent] = {}
        self.start_order: list[str] = []
        self.frame_outcomes: dict[str, DeliveryOutcome] = {}

    @staticmethod
    def _boot(script: dict, data_dir: Path) -> ServerCore:
        ap_ids = script.get("aps", list(DEFAULT_AP_IDS))
        if not isinstance(ap_ids, list) or not all(isinstance(a, str) for a in ap_ids):
            raise ScriptError('"aps" must be a list of AP id strings')
        registry = Registry(data_dir / "registry.jsonl")
        return ServerCore(registry, SessionManager(), SimulatedNetwork(ap_ids))

    # -- step execution ---------------------------------------------------------

    def run(self) -> ScenarioReport:
        name = self.script.get("name", "scenario")
        steps = self.script.get("steps")
        if not isinstance(name, str):
            raise ScriptError('"name" must be a string')
        if not isinstance(steps, list):
            raise ScriptError('"steps" must be a list')
        report = ScenarioReport(name=name)
        for index, step in enumerate(steps):
            try:
                self._run_step(step, report)
            except ScriptError:
                raise
            except SnapError as exc:
                raise ScriptError(str(exc), step=index)
            except (KeyError, TypeError, ValueError) as exc:
                raise ScriptError(f"malformed step: {exc}", step=index)
        return report

    def _run_step(self, step, report: ScenarioReport) -> None:
        if not isinstance(step, dict):
            raise ValueError("each step must be an object")
        kind = step.get("step")
        if kind not in STEP_KINDS:
            raise ValueError(f"unknown step kind {kind!r}")
        getattr(self, "_step_" + kind.replace("-", "_"))(step, report)

    def _step_register(self, step, report) -> None:
        self.core.register_device(step["serial"], step.get("label", ""))

    def _step_revoke(self, step, report) -> None:
        self.core.revoke_device(step["serial"])

    def _step_start_agent(self, step, report) -> None:
        agent = _ScriptAgent(
            serial=step["serial"],
            hostname=step.get("hostname", ""),
            ip=step["ip"],
            ap_id=step["ap"],
        )
        self.agents[agent.serial] = agent
        self.start_order.append(agent.serial)

    def _join(self, agent: _ScriptAgent) -> None:
        agent.last_verdict = self.core.handle_join(
            JoinRequest(
                serial_raw=agent.serial,
                hostname=agent.hostname,
                ip=agent.ip,
                ap_id=agent.ap_id,
            )
        )

    def _agent(self, serial: str) -> _ScriptAgent:
        agent = self.agents.get(serial)
        if agent is None:
            raise ValueError(f"no started agent with serial {serial!r}")
        return agent

    def _step_join(self, step, report) -> None:
        self._join(self._agent(step["serial"]))

    def _step_control(self, step, report) -> None:
        action = ControlAction(step["action"])
        self.core.handle_control(
            ControlCommand(serial=step["serial"], action=action, operator="scenario")
        )

    def _step_rescan(self, step, report) -> None:
        self.core.rescan()
        # Live agents react to the rescan solicitation by re-joining, in the
        # order they were started (deterministic).
        for serial in self.start_order:
            self._join(self.agents[serial])

    def _step_send_frame(self, step, report) -> None:
        serial = step["serial"]
        outcome = self.core.simnet.send(
            serial, step.get("dst", "server"), step.get("payload", "").encode("utf-8")
        )
        self.frame_outcomes[serial] = outcome

    def _step_assert(self, step, report) -> None:
        checks = step.get("checks")
        if not isinstance(checks, list) or not checks:
            raise ValueError('assert step needs a non-empty "checks" list')
        results = [self._run_check(c) for c in checks]
        report.rows.append(
            ReportRow(
                function=step["function"],
                description=step.get("description", ""),
                passed=all(ok for ok, _ in results),
                remarks="; ".join(remark for _, remark in results),
            )
        )

    # -- checks -------------------------------------------------------------------

    def _run_check(self, check) -> tuple[bool, str]:
        if not isinstance(check, dict):
            raise ValueError("each check must be an object")
        kind = check.get("check")
        if kind not in CHECK_KINDS:
            raise ValueError(f"unknown check kind {kind!r}")
        return getattr(self, "_check_" + kind.replace("-", "_"))(check)

    def _check_registered_contains(self, check) -> tuple[bool, str]:
        registered = {
            r.serial for r in self.core.registered_records() if not r.revoked
        }
        wanted = check["serials"]
        missing = [s for s in wanted if s not in registered]
        if missing:
            return False, f"not registered: {', '.join(missing)}"
        return True, f"registered: {', '.join(wanted)}"

    def _check_identities_collected(self, check) -> tuple[bool, str]:
        sessions = {r.serial: r for r in self.core.connected_records()}
        problems = []
        for device in check["devices"]:
            record = sessions.get(device["serial"])
            if record is None:
                problems.append(f"{device['serial']} not in connected table")
                continue
            if record.identity.hostname != device["hostname"] or record.identity.ip != device["ip"]:
                problems.append(
                    f"{device['serial']} triple mismatch "
                    f"(got {record.identity.hostname}/{record.identity.ip})"
                )
        if problems:
            return False, "; ".join(problems)
        return True, f"collected identity triples for {len(check['devices'])} device(s)"

    def _check_distinct_aps(self, check) -> tuple[bool, str]:
        aps = sorted({r.ap_id for r in self.core.connected_records()})
        expect = check["expect"]
        if len(aps) != expect:
            return False, f"expected {expect} distinct APs, saw {len(aps)} ({', '.join(aps)})"
        return True, f"details collected via {len(aps)} APs: {', '.join(aps)}"

    def _verdict_and_status(self, serial: str, verdict: Verdict, status: DeviceStatus) -> str | None:
        agent = self.agents.get(serial)
        if agent is None or agent.last_verdict is None:
            return f"{serial} never joined"
        if agent.last_verdict.verdict is not verdict:
            return f"{serial} verdict is {agent.last_verdict.verdict.value}, expected {verdict.value}"
        record = self.core.sessions.get(serial)
        if record is None:
            return f"{serial} not in connected table"
        if record.status is not status:
            return f"{serial} status is {record.status.value}, expected {status.value}"
        return None

    def _check_allowed(self, check) -> tuple[bool, str]:
        problems = [
            p for s in check["serials"]
            if (p := self._verdict_and_status(s, Verdict.ALLOW, DeviceStatus.ENABLED))
        ]
        if problems:
            return False, "; ".join(problems)
        return True, f"allowed and enabled: {', '.join(check['serials'])}"

    def _check_denied(self, check) -> tuple[bool, str]:
        problems = [
            p for s in check["serials"]
            if (p := self._verdict_and_status(s, Verdict.DENY, DeviceStatus.DISABLED))
        ]
        if problems:
            return False, "; ".join(problems)
        return True, f"denied and shown disabled: {', '.join(check['serials'])}"

    def _check_session_status(self, check) -> tuple[bool, str]:
        serial = check["serial"]
        expect = DeviceStatus(check["expect"])
        record = self.core.sessions.get(serial)
        if record is None:
            return False, f"{serial} not in connected table"
        if record.status is not expect:
            return False, f"{serial} status is {record.status.value}, expected {expect.value}"
        return True, f"{serial} is {expect.value}"

    def _check_frame_outcome(self, check) -> tuple[bool, str]:
        serial = check["serial"]
        expect = DeliveryOutcome(check["expect"])
        outcome = self.frame_outcomes.get(serial)
        if outcome is None:
            return False, f"no frame sent by {serial}"
        if outcome is not expect:
            return False, f"{serial} frame was {outcome.value}, expected {expect.value}"
        return True, f"{serial} traffic {expect.value.lower()}"

    def _check_connected_count(self, check) -> tuple[bool, str]:
        count = len(self.core.connected_records())
        expect = check["expect"]
        if count != expect:
            return False, f"connected table has {count} rows, expected {expect}"
        return True, f"{count} devices in connected table"


def run_scenario(script: dict, data_dir: Path | None = None) -> ScenarioReport:
    """Execute a script against a fresh stack and return its report.

    Raises ScriptError (with the step index where applicable) on malformed
    scripts or steps that cannot execute.
    """
    if not isinstance(script, dict):
        raise ScriptError("script must be a JSON object")
    if data_dir is not None:
        return _run_and_close(script, data_dir)
    with tempfile.TemporaryDirectory(prefix="snap-scenario-") as tmp:
        return _run_and_close(script, Path(tmp))


def _run_and_close(script: dict, data_dir: Path) -> ScenarioReport:
    runner = _Runner(script, data_dir)
    try:
        return runner.run()
    finally:
        runner.core.registry.close()


def load_script(path: str | Path) -> dict:
    """Read a script file; ScriptError on unreadable or invalid JSON."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScriptError(f"cannot read script {path}: {exc}")
    try:
        script = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScriptError(f"script {path} is not valid JSON: {exc.msg} (line {exc.lineno})")
    if not isinstance(script, dict):
        raise ScriptError(f"script {path} must contain a JSON object")
    return script


def paper_demo_script() -> dict:
    """The built-in demonstration: three devices on three APs.

    DOTTHEDUCK (the server host's own agent) and RAFIKI are registered and
    admitted; KOLSOLT is denied, then registered, re-admitted after a
    rescan; finally the operator disables RAFIKI and only the other two
    keep passing traffic.
    """
    return {
        "name": "paper-demo",
        "aps": ["ap1", "ap2", "ap3"],
        "steps": [
            {"step": "register", "serial": "SN-DOTTHEDUCK", "label": "DOTTHEDUCK"},
            {"step": "register", "serial": "SN-RAFIKI", "label": "RAFIKI"},
            {"step": "register", "serial": "SN-OFFICE-01", "label": "OFFICE-01"},
            {"step": "register", "serial": "SN-OFFICE-02", "label": "OFFICE-02"},
            {
                "step": "assert",
                "function": "New computer registration",
                "description": "Check if a new computer can be registered",
                "checks": [
                    {
                        "check": "registered-contains",
                        "serials": ["SN-DOTTHEDUCK", "SN-RAFIKI", "SN-OFFICE-01", "SN-OFFICE-02"],
                    }
                ],
            },
            {"step": "start-agent", "serial": "SN-DOTTHEDUCK", "hostname": "DOTTHEDUCK",
             "ip": "192.168.0.10", "ap": "ap1"},
            {"step": "start-agent", "serial": "SN-RAFIKI", "hostname": "RAFIKI",
             "ip": "192.168.0.12", "ap": "ap2"},
            {"step": "start-agent", "serial": "SN-KOLSOLT", "hostname": "KOLSOLT",
             "ip": "192.168.0.13", "ap": "ap3"},
            {"step": "join", "serial": "SN-DOTTHEDUCK"},
            {"step": "join", "serial": "SN-RAFIKI"},
            {"step": "join", "serial": "SN-KOLSOLT"},
            {
                "step": "assert",
                "function": "Collect serial number, IP address, name",
                "description": "Check if authentication details can be collected",
                "checks": [
                    {
                        "check": "identities-collected",
                        "devices": [
                            {"serial": "SN-DOTTHEDUCK", "hostname": "DOTTHEDUCK", "ip": "192.168.0.10"},
                            {"serial": "SN-RAFIKI", "hostname": "RAFIKI", "ip": "192.168.0.12"},
                            {"serial": "SN-KOLSOLT", "hostname": "KOLSOLT", "ip": "192.168.0.13"},
                        ],
                    }
                ],
            },
            {
                "step": "assert",
                "function": "Collect authentication details with different APs",
                "description": "Check if details can be collected using different APs",
                "checks": [{"check": "distinct-aps", "expect": 3}],
            },
            {
                "step": "assert",
                "function": "Deny an unregistered computer network access",
                "description": "Check if an unregistered computer is denied network access",
                "checks": [
                    {"check": "denied", "serials": ["SN-KOLSOLT"]},
                    {"check": "allowed", "serials": ["SN-DOTTHEDUCK", "SN-RAFIKI"]},
                    {"check": "connected-count", "expect": 3},
                ],
            },
            {"step": "register", "serial": "SN-KOLSOLT", "label": "KOLSOLT"},
            {"step": "rescan"},
            {
                "step": "assert",
                "function": "Allow a registered computer network access",
                "description": "Check if a registered computer is allowed network access",
                "checks": [
                    {"check": "allowed",
                     "serials": ["SN-DOTTHEDUCK", "SN-RAFIKI", "SN-KOLSOLT"]}
                ],
            },
            {"step": "control", "serial": "SN-RAFIKI", "action": "Disable"},
            {"step": "send-frame", "serial": "SN-RAFIKI"},
            {"step": "send-frame", "serial": "SN-DOTTHEDUCK"},
            {"step": "send-frame", "serial": "SN-KOLSOLT"},
            {
                "step": "assert",
                "function": "Disable allowed computer",
                "description": "Check if an allowed computer can be disabled",
                "checks": [
                    {"check": "session-status", "serial": "SN-RAFIKI", "expect": "Disabled"},
                    {"check": "frame-outcome", "serial": "SN-RAFIKI", "expect": "Blocked"},
                    {"check": "frame-outcome", "serial": "SN-DOTTHEDUCK", "expect": "Delivered"},
                    {"check": "frame-outcome", "serial": "SN-KOLSOLT", "expect": "Delivered"},
                ],
            },
        ],
    }


BUILTIN_SCRIPTS = {"paper-demo": paper_demo_script}


def resolve_script(name_or_path: str) -> dict:
    """Builtin script by name, else a JSON file by path."""
    builtin = BUILTIN_SCRIPTS.get(name_or_path)
    if builtin is not None:
        return builtin()
    return load_script(name_or_path)
