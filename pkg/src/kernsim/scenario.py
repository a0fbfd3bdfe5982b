"""Scenario scripts: the deterministic programs processes run.

A scenario file gives a process a `main` statement list and a table of
named upcall handlers. Statements either issue system calls, check the
last return value against a pattern, or touch process-local memory
(which goes through the MPU like any other process access). Loops are
unrolled and the `sync_command` macro is expanded at parse time, so the
interpreter only ever walks a flat statement list.

Upcall handlers run to completion and may not yield; that is checked at
parse time, not discovered at runtime.
"""

from __future__ import annotations

import binascii
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from .abi import decode_invocation, encode_return
from .errors import MalformedInvocation, ScenarioError

VALID_SEGMENTS = ("ram", "flash", "abs")
MAX_STATEMENTS = 200_000
DEFAULT_MIN_MEMORY = 1024


@dataclass(frozen=True)
class Stmt:
    op: str
    call: Optional[Dict[str, Any]] = None
    pattern: Optional[Dict[str, Any]] = None
    offset: int = 0
    data: bytes = b""
    length: int = 0


@dataclass
class ScenarioScript:
    name: str
    min_memory: int
    key_id: int
    entry: str
    main: List[Stmt]
    handlers: Dict[str, List[Stmt]] = field(default_factory=dict)
    credential_digest: Optional[int] = None  # explicit override; None = computed


def _parse_int(value, what: str, minimum: int = 0) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ScenarioError(f"{what} must be an integer >= {minimum}, got {value!r}")
    return value


def _expand_sync_command(raw: Dict[str, Any]) -> List[Dict[str, Any]]:
    """subscribe + command + yield-wait + expect, in one scripted line."""
    driver = _parse_int(raw.get("driver"), "sync_command driver")
    cmd = _parse_int(raw.get("cmd"), "sync_command cmd")
    fn = raw.get("fn")
    if not isinstance(fn, str):
        raise ScenarioError("sync_command needs a handler name in 'fn'")
    sub = _parse_int(raw.get("sub", 0), "sync_command sub")
    userdata = _parse_int(raw.get("userdata", 0), "sync_command userdata")
    args = raw.get("args", [0, 0])
    return [
        {"op": "syscall", "call": {"class": "subscribe", "driver": driver,
                                   "sub": sub, "fn": fn, "userdata": userdata}},
        {"op": "syscall", "call": {"class": "command", "driver": driver,
                                   "cmd": cmd, "args": args}},
        {"op": "syscall", "call": {"class": "yield", "mode": "wait"}},
        {"op": "expect", "pattern": {"variant": "success"}},
    ]


def _parse_statements(raw_list, where: str, in_handler: bool,
                      budget: List[int]) -> List[Stmt]:
    if not isinstance(raw_list, list):
        raise ScenarioError(f"{where} must be a list of statements")
    out: List[Stmt] = []
    for raw in raw_list:
        if not isinstance(raw, dict):
            raise ScenarioError(f"{where}: statement must be an object, got {raw!r}")
        op = raw.get("op")
        if op == "loop":
            count = _parse_int(raw.get("count"), f"{where}: loop count")
            body = _parse_statements(raw.get("body", []), f"{where}/loop",
                                     in_handler, budget)
            for _ in range(count):
                budget[0] -= len(body)
                if budget[0] < 0:
                    raise ScenarioError(
                        f"script exceeds {MAX_STATEMENTS} statements after unrolling")
                out.extend(body)
            continue
        if op == "sync_command":
            if in_handler:
                raise ScenarioError(f"{where}: sync_command yields and cannot "
                                    "appear in a handler")
            expansion = _parse_statements(_expand_sync_command(raw),
                                          f"{where}/sync_command", in_handler, budget)
            out.extend(expansion)
            continue

        budget[0] -= 1
        if budget[0] < 0:
            raise ScenarioError(
                f"script exceeds {MAX_STATEMENTS} statements after unrolling")

        if op == "syscall":
            call = raw.get("call")
            if not isinstance(call, dict):
                raise ScenarioError(f"{where}: syscall needs a 'call' object")
            seg = call.get("seg", "ram")
            if seg not in VALID_SEGMENTS:
                raise ScenarioError(f"{where}: bad seg {seg!r}")
            probe = dict(call)
            probe.pop("seg", None)
            try:
                inv = decode_invocation(probe)
            except MalformedInvocation as exc:
                raise ScenarioError(f"{where}: {exc}") from None
            if in_handler and inv.klass.value == "yield":
                raise ScenarioError(
                    f"{where}: upcall handlers run to completion and may not yield")
            out.append(Stmt("syscall", call=dict(call)))
        elif op == "expect":
            pattern = raw.get("pattern")
            if not isinstance(pattern, dict):
                raise ScenarioError(f"{where}: expect needs a 'pattern' object")
            out.append(Stmt("expect", pattern=dict(pattern)))
        elif op == "write_local":
            offset = _parse_int(raw.get("offset"), f"{where}: write_local offset")
            hexdata = raw.get("data", "")
            try:
                data = binascii.unhexlify(hexdata)
            except (binascii.Error, TypeError):
                raise ScenarioError(f"{where}: write_local data must be hex") from None
            out.append(Stmt("write_local", offset=offset, data=data))
        elif op == "read_local":
            offset = _parse_int(raw.get("offset"), f"{where}: read_local offset")
            length = _parse_int(raw.get("len"), f"{where}: read_local len")
            out.append(Stmt("read_local", offset=offset, length=length))
        elif op == "halt":
            out.append(Stmt("halt"))
        else:
            raise ScenarioError(f"{where}: unknown statement op {op!r}")
    return out


def parse_script(data: Dict[str, Any], name: str = "app") -> ScenarioScript:
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    budget = [MAX_STATEMENTS]
    main = _parse_statements(data.get("main", []), "main", False, budget)
    handlers: Dict[str, List[Stmt]] = {}
    raw_handlers = data.get("handlers", {})
    if not isinstance(raw_handlers, dict):
        raise ScenarioError("handlers must be an object of name -> statements")
    for hname, body in raw_handlers.items():
        handlers[hname] = _parse_statements(body, f"handler {hname}", True, budget)

    credential = data.get("credential", {})
    digest = None
    if isinstance(credential, dict) and isinstance(credential.get("digest"), int):
        digest = credential["digest"]
    key_id = 0
    if isinstance(credential, dict):
        key_id = _parse_int(credential.get("key_id", 0), "credential key_id")

    return ScenarioScript(
        name=data.get("name", name),
        min_memory=_parse_int(data.get("min_memory", DEFAULT_MIN_MEMORY), "min_memory"),
        key_id=key_id,
        entry=data.get("entry", "main"),
        main=main,
        handlers=handlers,
        credential_digest=digest,
    )


def parse_script_bytes(blob: bytes, name: str = "app") -> ScenarioScript:
    try:
        data = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"scenario does not parse: {exc}") from None
    return parse_script(data, name)


class ProcessProgram:
    """Runtime interpreter state for one process's script."""

    def __init__(self, script: ScenarioScript):
        self.script = script
        self.statements = script.main
        self.handlers = script.handlers
        self.pc = 0
        self.last_return_record: Optional[Dict[str, Any]] = None

    # The kernel drives execution; `kern` is the kernel and `pcb` the
    # process control block. One call to advance() is one quantum: it runs
    # local statements freely and stops after the first system call (or
    # when the process leaves the Running state).

    def advance(self, kern, pcb) -> None:
        while pcb.state.value == "running":
            if self.pc >= len(self.statements):
                kern.exit_process(pcb.id, "end of program")
                return
            stmt = self.statements[self.pc]
            self.pc += 1
            if self._exec(kern, pcb, stmt):
                return

    def _exec(self, kern, pcb, stmt: Stmt) -> bool:
        """Run one statement; returns True if it consumed the quantum."""
        if stmt.op == "syscall":
            record = dict(stmt.call)
            seg = record.pop("seg", "ram")
            if "base" in record:
                record["base"] = kern.resolve_base(pcb.id, seg, record["base"])
            inv = decode_invocation(record)
            ret = kern.handle_syscall(pcb.id, inv)
            if ret is not None:
                self.last_return_record = encode_return(ret)
            return True
        if stmt.op == "expect":
            kern.record_expect(pcb.id, stmt.pattern, self.last_return_record)
            return False
        if stmt.op == "write_local":
            kern.process_local_write(pcb.id, stmt.offset, stmt.data)
            return False
        if stmt.op == "read_local":
            kern.process_local_read(pcb.id, stmt.offset, stmt.length)
            return False
        if stmt.op == "halt":
            kern.exit_process(pcb.id, "halt")
            return True
        raise AssertionError(f"unreachable statement op {stmt.op!r}")

    def run_handler(self, kern, pcb, fn_id: str) -> None:
        """Execute an upcall handler to completion (handlers cannot yield)."""
        for stmt in self.handlers.get(fn_id, []):
            if pcb.state.value != "running":
                return
            self._exec(kern, pcb, stmt)
