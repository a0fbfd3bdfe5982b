"""The single-stack event-driven kernel.

One object owns everything that runs: syscall dispatch with swap
semantics, grant allocation inside process memory, per-process upcall
queues, the round-robin scheduler, process lifecycle, and both process
loaders. Capsules interact with it only through the
:class:`CapsuleServices` facade they are handed at registration, which
charges their step budget and never exposes storable handles.

Swap semantics in one line: allow and subscribe install the new share and
return the previous one; the first call on a slot returns the
distinguished empty region (base 0, length 0) or the null upcall. The
kernel owns the slots; capsules see shared regions only inside scoped
visitor calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from itertools import count
from typing import Any, Callable, Dict, List, Optional, Tuple

from .abi import (
    ALLOW_CLASSES,
    NULL_UPCALL,
    ErrorCode,
    SyscallClass,
    SyscallInvocation,
    SyscallReturn,
    UpcallDescriptor,
    YieldMode,
    encode_invocation,
    encode_return,
    match_return,
)
from .capabilities import BoardPhase, CapabilityKind, CapabilityRegistry
from .errors import (
    AccessDenied,
    CapsuleBudgetExceeded,
    GrantNoMem,
    InvalidTransition,
    NoSharedBuffer,
    NoSuchProcess,
    PhaseError,
    ProcessDead,
    RangeError,
    ReentrancyError,
    ScenarioError,
    SimulationDiagnostic,
    StaleHandle,
    WriteToReadOnly,
)
from .hw import Chip
from .loader import (
    BinaryHeader,
    HeaderError,
    LoaderState,
    RejectReason,
    credential_accepted,
    fnv1a64,
    parse_binary,
)
from .memory import (
    ACCESS_READ,
    ACCESS_RW,
    EMPTY_REGION,
    READ,
    WRITE,
    Accessor,
    MemoryController,
    MemoryRegion,
)
from .scenario import ProcessProgram, parse_script_bytes
from .trace import (
    ACTOR_KERNEL,
    K_CAPSULE_ERROR,
    K_CAPSULE_REGISTERED,
    K_EXPECT,
    K_GRANT_ALLOC,
    K_GRANT_NOMEM,
    K_HASH_SUBMIT,
    K_LOADER_STATE,
    K_PRIVILEGED_OP,
    K_PROCESS_CREATED,
    K_PROCESS_STATE,
    K_SYSCALL,
    K_SYSCALL_RETURN,
    K_UPCALL_DROPPED,
    K_UPCALL_QUEUED,
    K_UPCALL_RUN,
    TraceLog,
    actor_capsule,
    actor_process,
)

DEFAULT_UPCALL_QUEUE_DEPTH = 8
DEFAULT_CAPSULE_STEP_BUDGET = 100_000
DEFAULT_MAX_PROCESSES = 8
CARVE_ALIGN = 16


class ProcessState(str, Enum):
    UNSTARTED = "unstarted"
    RUNNING = "running"
    YIELDED_WAIT = "yielded_wait"
    FAULTED = "faulted"
    EXITED = "exited"


LIVE_STATES = (ProcessState.UNSTARTED, ProcessState.RUNNING,
               ProcessState.YIELDED_WAIT)


@dataclass
class PendingUpcall:
    driver_id: int
    subscribe_num: int
    args: Tuple[int, int, int]
    fn_id: str
    userdata: int


@dataclass
class GrantAllocation:
    base: int
    size: int


@dataclass
class ProcessControlBlock:
    id: int
    name: str
    ram: MemoryRegion
    flash: MemoryRegion
    program: ProcessProgram
    state: ProcessState = ProcessState.UNSTARTED
    grant_watermark: int = 0  # grants grow downward from ram.end
    upcall_queue: List[PendingUpcall] = field(default_factory=list)
    allow_slots: Dict[Tuple[int, int, str], MemoryRegion] = field(default_factory=dict)
    upcall_slots: Dict[Tuple[int, int], UpcallDescriptor] = field(default_factory=dict)
    grants: Dict[str, GrantAllocation] = field(default_factory=dict)
    pending_yield: bool = False

    @property
    def free_grant_bytes(self) -> int:
        return self.grant_watermark - self.ram.base

    @property
    def live(self) -> bool:
        return self.state in LIVE_STATES


class CarveAllocator:
    """First-fit allocator for process carve-outs in board RAM."""

    def __init__(self, total: int, align: int = CARVE_ALIGN):
        self.align = align
        self._free: List[Tuple[int, int]] = [(0, total)]
        self._sizes: Dict[int, int] = {}

    def _pad(self, size: int) -> int:
        return (size + self.align - 1) // self.align * self.align

    def allocate(self, size: int) -> Optional[int]:
        if size == 0:
            return 0
        padded = self._pad(size)
        for i, (base, length) in enumerate(self._free):
            if length >= padded:
                if length == padded:
                    del self._free[i]
                else:
                    self._free[i] = (base + padded, length - padded)
                self._sizes[base] = padded
                return base
        return None

    def release(self, base: int, size: int) -> None:
        if size == 0:
            return
        padded = self._sizes.pop(base, self._pad(size))
        self._free.append((base, padded))
        self._free.sort()
        merged: List[Tuple[int, int]] = []
        for start, length in self._free:
            if merged and merged[-1][0] + merged[-1][1] == start:
                merged[-1] = (merged[-1][0], merged[-1][1] + length)
            else:
                merged.append((start, length))
        self._free = merged


# --- scoped handles handed to capsules -----------------------------------------

class GrantRef:
    """Exclusive, scoped view of one grant allocation."""

    def __init__(self, kernel: "Kernel", pid: int, capsule: str,
                 alloc: GrantAllocation):
        self._kernel = kernel
        self._pid = pid
        self._capsule = capsule
        self._alloc = alloc
        self._live = True

    @property
    def size(self) -> int:
        return self._alloc.size

    def _span(self, offset: int, length: int) -> int:
        if not self._live:
            raise StaleHandle(f"grant handle for {self._capsule!r} used after visit")
        if offset < 0 or length < 0 or offset + length > self._alloc.size:
            raise RangeError(f"grant access [{offset}, {offset + length}) outside "
                             f"{self._alloc.size}-byte allocation")
        return self._alloc.base + offset

    def read(self, offset: int, length: int) -> bytes:
        base = self._span(offset, length)
        return self._kernel.memory.read(
            Accessor.kernel(), base, length,
            note={"via": self._capsule, "purpose": "grant", "pid": self._pid})

    def write(self, offset: int, data: bytes) -> None:
        base = self._span(offset, len(data))
        self._kernel.memory.write(
            Accessor.kernel(), base, data,
            note={"via": self._capsule, "purpose": "grant", "pid": self._pid})

    def read_u8(self, offset: int) -> int:
        return self.read(offset, 1)[0]

    def write_u8(self, offset: int, value: int) -> None:
        self.write(offset, bytes([value & 0xFF]))

    def read_u32(self, offset: int) -> int:
        return int.from_bytes(self.read(offset, 4), "little")

    def write_u32(self, offset: int, value: int) -> None:
        self.write(offset, (value & 0xFFFFFFFF).to_bytes(4, "little"))


class SharedBufferHandle:
    """Scoped access to one allowed region; valid only inside the visitor."""

    def __init__(self, kernel: "Kernel", pid: int, capsule: str, driver_id: int,
                 buf_num: int, mode: str, region: MemoryRegion):
        self._kernel = kernel
        self._pid = pid
        self._capsule = capsule
        self._driver_id = driver_id
        self._buf_num = buf_num
        self._mode = mode
        self._region = region
        self._live = True

    @property
    def length(self) -> int:
        return self._region.length

    def _note(self) -> Dict[str, Any]:
        return {"via": self._capsule, "purpose": "allow", "pid": self._pid,
                "driver": self._driver_id, "buf": self._buf_num,
                "mode": self._mode}

    def _span(self, offset: int, length: int) -> int:
        if not self._live:
            raise StaleHandle(
                f"buffer handle for {self._capsule!r} used after visit")
        if offset < 0 or length < 0 or offset + length > self._region.length:
            raise RangeError(
                f"access [{offset}, {offset + length}) outside "
                f"{self._region.length}-byte share")
        return self._region.base + offset

    def read(self, offset: int = 0, length: Optional[int] = None) -> bytes:
        if length is None:
            length = self._region.length - offset
        base = self._span(offset, length)
        return self._kernel.memory.read(Accessor.kernel(), base, length,
                                        note=self._note())

    def write(self, offset: int, data: bytes) -> None:
        if self._mode == "ro":
            raise WriteToReadOnly(
                f"capsule {self._capsule!r} wrote through a read-only share")
        base = self._span(offset, len(data))
        self._kernel.memory.write(Accessor.kernel(), base, data,
                                  note=self._note())


class CapsuleServices:
    """The only kernel surface a capsule can reach. Every call charges the
    capsule's step budget."""

    def __init__(self, kernel: "Kernel", capsule):
        self._kernel = kernel
        self._capsule = capsule

    def _charge(self) -> None:
        self._kernel.charge_capsule()

    def now(self) -> int:
        self._charge()
        return self._kernel.chip.clock.now

    def schedule_upcall(self, pid: int, subscribe_num: int, args) -> bool:
        self._charge()
        return self._kernel.schedule_upcall(
            self._capsule.name, self._capsule.driver_id, pid, subscribe_num, args)

    def grant_enter(self, pid: int, visitor: Callable):
        self._charge()
        return self._kernel.grant_enter(
            self._capsule.name, self._capsule.GRANT_SCHEMA, pid, visitor)

    def with_rw_buffer(self, pid: int, buf_num: int, visitor: Callable):
        self._charge()
        return self._kernel.with_buffer(self._capsule, pid, buf_num, "rw", visitor)

    def with_ro_buffer(self, pid: int, buf_num: int, visitor: Callable):
        self._charge()
        return self._kernel.with_buffer(self._capsule, pid, buf_num, "ro", visitor)

    def report_error(self, message: str) -> None:
        self._charge()
        self._kernel.trace.log(actor_capsule(self._capsule.name), K_CAPSULE_ERROR,
                               {"error": message})

    def process_destroy(self, token, pid: int) -> None:
        self._charge()
        self._kernel.process_destroy(token, pid)

    def inspect_grants(self, token, pid: int):
        self._charge()
        return self._kernel.inspect_grants(token, pid)


# --- process loading --------------------------------------------------------------

@dataclass
class LoaderJob:
    job_id: int
    blob: bytes
    name: str
    sync: bool
    state: LoaderState = LoaderState.FETCHED
    header: Optional[BinaryHeader] = None
    payload: bytes = b""
    reject_reason: Optional[RejectReason] = None
    detail: str = ""
    pid: Optional[int] = None


class ProcessLoader:
    """Three-stage loader state machine, driven synchronously or by the
    hash engine's completion interrupts."""

    def __init__(self, kernel: "Kernel"):
        self.kernel = kernel
        self.jobs: List[LoaderJob] = []
        self._ids = count(1)
        self._waiting: List[LoaderJob] = []

    def submit(self, token, blob: bytes, name: str, sync: bool) -> LoaderJob:
        kernel = self.kernel
        kernel.registry.validate(token, CapabilityKind.LOADER_CONTROL)
        job = LoaderJob(next(self._ids), blob, name, sync)
        self.jobs.append(job)
        kernel.trace.log(ACTOR_KERNEL, K_PRIVILEGED_OP,
                         {"op": "load_process",
                          "kind": CapabilityKind.LOADER_CONTROL.value,
                          "holder": kernel.current_holder(), "job": job.job_id})
        kernel.trace.log(ACTOR_KERNEL, K_LOADER_STATE,
                         {"job": job.job_id, "state": job.state.value})
        self.advance(job, "start")
        return job

    def active(self) -> bool:
        return any(j.state is LoaderState.INTEGRITY_PENDING for j in self.jobs)

    def _transition(self, job: LoaderJob, state: LoaderState) -> None:
        job.state = state
        payload: Dict[str, Any] = {"job": job.job_id, "state": state.value}
        if job.pid is not None:
            payload["pid"] = job.pid
        self.kernel.trace.log(ACTOR_KERNEL, K_LOADER_STATE, payload)

    def _reject(self, job: LoaderJob, reason: RejectReason, detail: str) -> None:
        job.state = LoaderState.REJECTED
        job.reject_reason = reason
        job.detail = detail
        self.kernel.trace.log(ACTOR_KERNEL, K_LOADER_STATE,
                              {"job": job.job_id, "state": "rejected",
                               "reason": reason.value, "detail": detail})

    def advance(self, job: LoaderJob, event: str,
                digest: Optional[int] = None) -> LoaderState:
        if event == "start":
            if job.state is not LoaderState.FETCHED:
                raise InvalidTransition(f"start while {job.state.value}")
            try:
                job.header, job.payload = parse_binary(job.blob)
            except HeaderError as exc:
                self._reject(job, RejectReason.BAD_HEADER, str(exc))
                return job.state
            self._transition(job, LoaderState.HEADER_CHECKED)
            self._transition(job, LoaderState.INTEGRITY_PENDING)
            if job.sync:
                # Same machine, driven inline: the digest is computed on
                # the spot instead of by the hash engine.
                return self.advance(job, "digest_done", fnv1a64(job.payload))
            self._enqueue_hash(job)
            return job.state

        if event == "digest_done":
            if job.state is not LoaderState.INTEGRITY_PENDING:
                raise InvalidTransition(f"digest_done while {job.state.value}")
            kernel = self.kernel
            if not credential_accepted(kernel.verifier_policy, job.header, digest,
                                       kernel.trusted_key_ids):
                self._reject(job, RejectReason.BAD_INTEGRITY,
                             "credential digest not accepted")
                return job.state
            self._transition(job, LoaderState.INTEGRITY_CHECKED)
            pid, reason, detail = kernel.try_create_process(
                job.header, job.payload, job.name)
            if pid is None:
                self._reject(job, reason, detail)
            else:
                job.pid = pid
                self._transition(job, LoaderState.RUNNABLE)
            return job.state

        raise InvalidTransition(f"unknown loader event {event!r}")

    def _enqueue_hash(self, job: LoaderJob) -> None:
        engine = self.kernel.chip.hashengine
        if engine is None:
            raise PhaseError("async loading requires a hash engine")
        if engine.busy:
            self._waiting.append(job)
            return
        engine.submit(job.payload, job.job_id)
        self.kernel.trace.log(ACTOR_KERNEL, K_HASH_SUBMIT,
                              {"job": job.job_id, "len": len(job.payload)})

    def on_hash_irq(self) -> None:
        engine = self.kernel.chip.hashengine
        completion = engine.take_completion()
        if completion is None:
            return
        tag, digest = completion
        job = next((j for j in self.jobs if j.job_id == tag), None)
        if job is not None:
            self.advance(job, "digest_done", digest)
        if self._waiting and not engine.busy:
            nxt = self._waiting.pop(0)
            engine.submit(nxt.payload, nxt.job_id)
            self.kernel.trace.log(ACTOR_KERNEL, K_HASH_SUBMIT,
                                  {"job": nxt.job_id, "len": len(nxt.payload)})


# --- the kernel --------------------------------------------------------------------

class Kernel:
    def __init__(self, memory: MemoryController, chip: Chip, trace: TraceLog,
                 registry: CapabilityRegistry, *,
                 upcall_queue_depth: int = DEFAULT_UPCALL_QUEUE_DEPTH,
                 capsule_step_budget: int = DEFAULT_CAPSULE_STEP_BUDGET,
                 verifier_policy: str = "digest_match",
                 trusted_key_ids=()):
        self.memory = memory
        self.chip = chip
        self.trace = trace
        self.registry = registry
        self.upcall_queue_depth = upcall_queue_depth
        self.capsule_step_budget = capsule_step_budget
        self.verifier_policy = verifier_policy
        self.trusted_key_ids = tuple(trusted_key_ids)

        self.processes: Dict[int, ProcessControlBlock] = {}
        self._next_pid = count(1)
        self.capsules: List[Any] = []
        self.drivers: Dict[int, Any] = {}
        self._frames: List[List[Any]] = []
        self._grant_entries: set = set()
        self.allocator = CarveAllocator(memory.total_size)
        self.loader = ProcessLoader(self)
        self.expect_failures = 0

    # -- capsule registration and budget ------------------------------------

    def register_capsule(self, capsule) -> None:
        if self.registry.phase is not BoardPhase.BUILDING:
            raise PhaseError("capsules can only be registered while building")
        if capsule.driver_id is not None:
            if capsule.driver_id in self.drivers:
                raise ValueError(f"driver id {capsule.driver_id} already taken")
            self.drivers[capsule.driver_id] = capsule
        self.capsules.append(capsule)
        capsule.attach(CapsuleServices(self, capsule))
        self.trace.log(ACTOR_KERNEL, K_CAPSULE_REGISTERED,
                       {"name": capsule.name, "driver_id": capsule.driver_id})

    def register_irq_capsule(self, irq_id: int, periph: str, capsule) -> None:
        self.chip.irqc.set_handler(
            irq_id,
            lambda: self.capsule_call(capsule.name, capsule.handle_interrupt))

    def capsule_call(self, name: str, fn: Callable, *args):
        """Run capsule code under a fresh step-budget frame."""
        self._frames.append([name, self.capsule_step_budget])
        try:
            return fn(*args)
        finally:
            self._frames.pop()

    def charge_capsule(self) -> None:
        if self._frames:
            frame = self._frames[-1]
            frame[1] -= 1
            if frame[1] < 0:
                raise CapsuleBudgetExceeded(
                    f"capsule {frame[0]!r} exceeded its step budget")

    def current_holder(self) -> str:
        return self._frames[-1][0] if self._frames else "kernel"

    # -- process creation -------------------------------------------------------

    def try_create_process(self, header: BinaryHeader, payload: bytes,
                           name: str):
        """Runnability stage: returns (pid, None, "") or
        (None, reject_reason, detail)."""
        try:
            script = parse_script_bytes(payload, name)
        except ScenarioError as exc:
            return None, RejectReason.NOT_RUNNABLE, str(exc)
        if header.entry_name != "main" or script.entry != "main":
            return None, RejectReason.NOT_RUNNABLE, \
                f"no entry handler {header.entry_name!r}"
        flash_base = self.allocator.allocate(len(payload))
        if flash_base is None:
            return None, RejectReason.NO_ROOM, "no room for program image"
        ram_base = self.allocator.allocate(header.min_memory)
        if ram_base is None:
            self.allocator.release(flash_base, len(payload))
            return None, RejectReason.NO_ROOM, \
                f"no room for {header.min_memory} bytes of process memory"

        pid = next(self._next_pid)
        flash = MemoryRegion(flash_base, len(payload), ACCESS_READ)
        ram = MemoryRegion(ram_base, header.min_memory, ACCESS_RW)
        kernel_acc = Accessor.kernel()
        if flash.length:
            self.memory.write(kernel_acc, flash.base, payload,
                              note={"purpose": "load_image", "pid": pid})
        if ram.length:
            self.memory.write(kernel_acc, ram.base, bytes(ram.length),
                              note={"purpose": "load_zero", "pid": pid})
        pcb = ProcessControlBlock(
            id=pid, name=script.name or name, ram=ram, flash=flash,
            program=ProcessProgram(script), grant_watermark=ram.end)
        self.processes[pid] = pcb
        self._sync_regions(pcb)
        self.trace.log(ACTOR_KERNEL, K_PROCESS_CREATED,
                       {"pid": pid, "name": pcb.name,
                        "ram_base": ram.base, "ram_len": ram.length,
                        "flash_base": flash.base, "flash_len": flash.length})
        return pid, None, ""

    def _sync_regions(self, pcb: ProcessControlBlock) -> None:
        # The accessible RAM region ends at the grant watermark: grant
        # allocations are kernel state and are walled off from the process.
        self.memory.configure_regions(pcb.id, [
            pcb.flash,
            MemoryRegion(pcb.ram.base, pcb.grant_watermark - pcb.ram.base,
                         ACCESS_RW),
        ])

    def _live_pcb(self, pid: int) -> ProcessControlBlock:
        pcb = self.processes.get(pid)
        if pcb is None or not pcb.live:
            raise ProcessDead(f"pid {pid} is not live")
        return pcb

    # -- syscall dispatch -----------------------------------------------------------

    def handle_syscall(self, pid: int,
                       inv: SyscallInvocation) -> Optional[SyscallReturn]:
        """Dispatch one system call. Returns None when no value is
        delivered to the process (a blocked yield-wait, or exit)."""
        pcb = self._live_pcb(pid)
        self.trace.log(actor_process(pid), K_SYSCALL,
                       {"call": encode_invocation(inv)})
        if inv.klass in ALLOW_CLASSES:
            ret = self._sys_allow(pcb, inv)
        elif inv.klass is SyscallClass.SUBSCRIBE:
            ret = self._sys_subscribe(pcb, inv)
        elif inv.klass is SyscallClass.COMMAND:
            ret = self._sys_command(pcb, inv)
        elif inv.klass is SyscallClass.YIELD:
            ret = self._sys_yield(pcb, inv)
        else:  # EXIT
            self._terminate(pcb, ProcessState.EXITED, "exit syscall")
            ret = None
        if ret is not None:
            self.trace.log(actor_process(pid), K_SYSCALL_RETURN,
                           {"ret": encode_return(ret)})
        return ret

    def _sys_allow(self, pcb: ProcessControlBlock,
                   inv: SyscallInvocation) -> SyscallReturn:
        mode = "rw" if inv.klass is SyscallClass.RW_ALLOW else "ro"
        driver = self.drivers.get(inv.driver_id)
        if driver is None:
            return SyscallReturn.failure_region(ErrorCode.NODEVICE,
                                                inv.base, inv.length)
        limit = driver.NUM_RW_BUFFERS if mode == "rw" else driver.NUM_RO_BUFFERS
        if not 0 <= inv.subcommand < limit:
            return SyscallReturn.failure_region(ErrorCode.INVAL,
                                                inv.base, inv.length)
        if inv.length > 0:
            # rw shares need a writeable region, ro shares a readable one.
            kind = WRITE if mode == "rw" else READ
            if not self.memory.check_access(pcb.id, inv.base, inv.length, kind):
                return SyscallReturn.failure_region(ErrorCode.INVAL,
                                                    inv.base, inv.length)
        # Zero-length regions are accepted unconditionally at any base:
        # they are the reclaim idiom and are never dereferenced.
        key = (inv.driver_id, inv.subcommand, mode)
        previous = pcb.allow_slots.get(key, EMPTY_REGION)
        access = ACCESS_RW if mode == "rw" else ACCESS_READ
        pcb.allow_slots[key] = MemoryRegion(inv.base, inv.length, access)
        return SyscallReturn.success_region(previous.base, previous.length)

    def _sys_subscribe(self, pcb: ProcessControlBlock,
                       inv: SyscallInvocation) -> SyscallReturn:
        driver = self.drivers.get(inv.driver_id)
        if driver is None:
            return SyscallReturn.failure(ErrorCode.NODEVICE)
        if not 0 <= inv.subcommand < driver.NUM_SUBSCRIBES:
            return SyscallReturn.failure(ErrorCode.INVAL)
        if inv.fn_id != "null" and inv.fn_id not in pcb.program.handlers:
            return SyscallReturn.failure(ErrorCode.INVAL)
        key = (inv.driver_id, inv.subcommand)
        previous = pcb.upcall_slots.get(key, NULL_UPCALL)
        if inv.fn_id == "null":
            pcb.upcall_slots[key] = NULL_UPCALL
        else:
            pcb.upcall_slots[key] = UpcallDescriptor(inv.fn_id, inv.userdata)
        return SyscallReturn.success_upcall(previous)

    def _sys_command(self, pcb: ProcessControlBlock,
                     inv: SyscallInvocation) -> SyscallReturn:
        driver = self.drivers.get(inv.driver_id)
        if driver is None:
            return SyscallReturn.failure(ErrorCode.NODEVICE)
        if inv.subcommand == 0:
            # Existence probe: answered by the kernel for every driver.
            return SyscallReturn.success()
        try:
            ret = self.capsule_call(driver.name, driver.command,
                                    inv.subcommand, inv.arg0, inv.arg1, pcb.id)
        except SimulationDiagnostic:
            raise
        except Exception as exc:
            raise SimulationDiagnostic(
                f"capsule {driver.name!r} crashed in command: {exc!r}") from exc
        if not isinstance(ret, SyscallReturn):
            raise SimulationDiagnostic(
                f"capsule {driver.name!r} returned {ret!r} from command")
        return ret

    def _sys_yield(self, pcb: ProcessControlBlock,
                   inv: SyscallInvocation) -> Optional[SyscallReturn]:
        if inv.yield_mode is YieldMode.NO_WAIT:
            if pcb.upcall_queue:
                self._deliver_upcall(pcb)
                return SyscallReturn.success_value(1)
            return SyscallReturn.success_value(0)
        if pcb.upcall_queue:
            self._deliver_upcall(pcb)
            return SyscallReturn.success()
        pcb.pending_yield = True
        self._set_state(pcb, ProcessState.YIELDED_WAIT)
        return None

    # -- upcalls ------------------------------------------------------------------

    def schedule_upcall(self, capsule_name: str, driver_id: int, pid: int,
                        subscribe_num: int, args) -> bool:
        args = tuple(list(args)[:3] + [0] * (3 - len(args)))
        actor = actor_capsule(capsule_name)
        detail = {"pid": pid, "driver": driver_id, "sub": subscribe_num,
                  "args": list(args)}
        pcb = self.processes.get(pid)
        if pcb is None or not pcb.live:
            detail["reason"] = "dead process"
            self.trace.log(actor, K_UPCALL_DROPPED, detail)
            return False
        descriptor = pcb.upcall_slots.get((driver_id, subscribe_num), NULL_UPCALL)
        if descriptor.is_null:
            detail["reason"] = "null subscription"
            self.trace.log(actor, K_UPCALL_DROPPED, detail)
            return False
        for queued in pcb.upcall_queue:
            # Per-slot replacement: stale completions never pile up.
            if (queued.driver_id, queued.subscribe_num) == (driver_id, subscribe_num):
                queued.args = args
                queued.fn_id = descriptor.fn_id
                queued.userdata = descriptor.userdata
                detail["replaced"] = True
                self.trace.log(actor, K_UPCALL_QUEUED, detail)
                return True
        if len(pcb.upcall_queue) >= self.upcall_queue_depth:
            detail["reason"] = "queue full"
            self.trace.log(actor, K_UPCALL_DROPPED, detail)
            return False
        pcb.upcall_queue.append(PendingUpcall(driver_id, subscribe_num, args,
                                              descriptor.fn_id,
                                              descriptor.userdata))
        detail["replaced"] = False
        self.trace.log(actor, K_UPCALL_QUEUED, detail)
        return True

    def _deliver_upcall(self, pcb: ProcessControlBlock) -> None:
        up = pcb.upcall_queue.pop(0)
        self.trace.log(actor_process(pcb.id), K_UPCALL_RUN,
                       {"driver": up.driver_id, "sub": up.subscribe_num,
                        "fn": up.fn_id, "userdata": up.userdata,
                        "args": list(up.args)})
        pcb.program.run_handler(self, pcb, up.fn_id)

    def _resume_yielded(self, pcb: ProcessControlBlock) -> None:
        """A yield-wait completes: run one queued upcall, then hand the
        yield's return value to the script."""
        self._set_state(pcb, ProcessState.RUNNING)
        self._deliver_upcall(pcb)
        if pcb.state is ProcessState.RUNNING:
            ret = SyscallReturn.success()
            self.trace.log(actor_process(pcb.id), K_SYSCALL_RETURN,
                           {"ret": encode_return(ret)})
            pcb.program.last_return_record = encode_return(ret)
            pcb.pending_yield = False

    # -- grants ---------------------------------------------------------------------

    def grant_enter(self, capsule_name: str, schema_size: int, pid: int,
                    visitor: Callable):
        pcb = self._live_pcb(pid)
        key = (capsule_name, pid)
        if key in self._grant_entries:
            raise ReentrancyError(
                f"capsule {capsule_name!r} re-entered its grant for pid {pid}")
        alloc = pcb.grants.get(capsule_name)
        if alloc is None:
            if schema_size > pcb.free_grant_bytes:
                self.trace.log(ACTOR_KERNEL, K_GRANT_NOMEM,
                               {"pid": pid, "capsule": capsule_name,
                                "size": schema_size})
                raise GrantNoMem(
                    f"pid {pid} has {pcb.free_grant_bytes} bytes free, "
                    f"grant needs {schema_size}")
            base = pcb.grant_watermark - schema_size
            if schema_size:
                self.memory.write(Accessor.kernel(), base, bytes(schema_size),
                                  note={"via": capsule_name,
                                        "purpose": "grant_zero", "pid": pid})
            alloc = GrantAllocation(base, schema_size)
            pcb.grants[capsule_name] = alloc
            pcb.grant_watermark = base
            self._sync_regions(pcb)
            self.trace.log(ACTOR_KERNEL, K_GRANT_ALLOC,
                           {"pid": pid, "capsule": capsule_name,
                            "size": schema_size, "base": base})
        self._grant_entries.add(key)
        handle = GrantRef(self, pid, capsule_name, alloc)
        try:
            return visitor(handle)
        finally:
            handle._live = False
            self._grant_entries.discard(key)

    # -- scoped buffer access ------------------------------------------------------

    def with_buffer(self, capsule, pid: int, buf_num: int, mode: str,
                    visitor: Callable):
        pcb = self._live_pcb(pid)
        key = (capsule.driver_id, buf_num, mode)
        region = pcb.allow_slots.get(key)
        if region is None:
            raise NoSharedBuffer(
                f"pid {pid} shares nothing in slot {key}")
        handle = SharedBufferHandle(self, pid, capsule.name, capsule.driver_id,
                                    buf_num, mode, region)
        try:
            return visitor(handle)
        finally:
            handle._live = False

    # -- process-local memory (the script side) ---------------------------------------

    def resolve_base(self, pid: int, seg: str, base: int) -> int:
        pcb = self._live_pcb(pid)
        if seg == "ram":
            return pcb.ram.base + base
        if seg == "flash":
            return pcb.flash.base + base
        return base

    def process_local_write(self, pid: int, offset: int, data: bytes) -> bool:
        pcb = self._live_pcb(pid)
        try:
            self.memory.write(Accessor.process(pid), pcb.ram.base + offset, data)
        except AccessDenied:
            self._fault(pcb, f"write_local at offset {offset}")
            return False
        return True

    def process_local_read(self, pid: int, offset: int,
                           length: int) -> Optional[bytes]:
        pcb = self._live_pcb(pid)
        try:
            return self.memory.read(Accessor.process(pid),
                                    pcb.ram.base + offset, length)
        except AccessDenied:
            self._fault(pcb, f"read_local at offset {offset}")
            return None

    def record_expect(self, pid: int, pattern: Dict[str, Any],
                      actual: Optional[Dict[str, Any]]) -> None:
        passed = actual is not None and match_return(pattern, actual)
        self.trace.log(actor_process(pid), K_EXPECT,
                       {"pattern": pattern, "actual": actual, "pass": passed})
        if not passed:
            self.expect_failures += 1

    # -- lifecycle ----------------------------------------------------------------------

    def exit_process(self, pid: int, reason: str) -> None:
        pcb = self.processes.get(pid)
        if pcb is not None and pcb.live:
            self._terminate(pcb, ProcessState.EXITED, reason)

    def _fault(self, pcb: ProcessControlBlock, reason: str) -> None:
        self._terminate(pcb, ProcessState.FAULTED, reason)

    def _terminate(self, pcb: ProcessControlBlock, state: ProcessState,
                   reason: str) -> None:
        if not pcb.live:
            return
        pcb.allow_slots.clear()
        pcb.upcall_slots.clear()
        pcb.upcall_queue.clear()
        pcb.grants.clear()
        pcb.pending_yield = False
        self.memory.drop_regions(pcb.id)
        if pcb.ram.length:
            self.allocator.release(pcb.ram.base, pcb.ram.length)
        if pcb.flash.length:
            self.allocator.release(pcb.flash.base, pcb.flash.length)
        self._set_state(pcb, state, reason)
        # Let every capsule drop in-flight references to this process.
        for capsule in self.capsules:
            self.capsule_call(capsule.name, capsule.on_process_exit, pcb.id)

    def _set_state(self, pcb: ProcessControlBlock, state: ProcessState,
                   reason: Optional[str] = None) -> None:
        pcb.state = state
        payload: Dict[str, Any] = {"pid": pcb.id, "state": state.value}
        if reason:
            payload["reason"] = reason
        self.trace.log(ACTOR_KERNEL, K_PROCESS_STATE, payload)

    # -- privileged, capability-gated operations ------------------------------------------

    def process_destroy(self, token, pid: int) -> None:
        self.registry.validate(token, CapabilityKind.PROCESS_MANAGEMENT)
        pcb = self.processes.get(pid)
        if pcb is None or not pcb.live:
            raise NoSuchProcess(f"pid {pid} is not live")
        self.trace.log(ACTOR_KERNEL, K_PRIVILEGED_OP,
                       {"op": "process_destroy",
                        "kind": CapabilityKind.PROCESS_MANAGEMENT.value,
                        "holder": self.current_holder(), "pid": pid})
        self._terminate(pcb, ProcessState.EXITED, "destroyed")

    def inspect_grants(self, token, pid: int):
        self.registry.validate(token, CapabilityKind.GRANT_INSPECTION)
        pcb = self.processes.get(pid)
        if pcb is None:
            raise NoSuchProcess(f"pid {pid} does not exist")
        self.trace.log(ACTOR_KERNEL, K_PRIVILEGED_OP,
                       {"op": "inspect_grants",
                        "kind": CapabilityKind.GRANT_INSPECTION.value,
                        "holder": self.current_holder(), "pid": pid})
        return [{"capsule": name, "base": alloc.base, "size": alloc.size}
                for name, alloc in pcb.grants.items()]

    def load_process_sync(self, token, blob: bytes, name: str) -> LoaderJob:
        return self.loader.submit(token, blob, name, sync=True)

    def load_process_async(self, token, blob: bytes, name: str) -> LoaderJob:
        return self.loader.submit(token, blob, name, sync=False)

    # -- the loop --------------------------------------------------------------------------

    def loop_step(self) -> bool:
        """One kernel loop iteration: service interrupts, then give every
        schedulable process one syscall-or-upcall quantum, in pid order.
        Returns False when there was nothing at all to do."""
        if self.registry.phase is not BoardPhase.FINALIZED:
            raise PhaseError("the kernel loop only runs on a finalized board")
        progressed = self.chip.irqc.service() > 0
        for pid in sorted(self.processes):
            pcb = self.processes[pid]
            if pcb.state is ProcessState.UNSTARTED:
                self._set_state(pcb, ProcessState.RUNNING, "started")
                pcb.program.advance(self, pcb)
                progressed = True
            elif pcb.state is ProcessState.RUNNING:
                pcb.program.advance(self, pcb)
                progressed = True
            elif pcb.state is ProcessState.YIELDED_WAIT and pcb.upcall_queue:
                self._resume_yielded(pcb)
                progressed = True
        return progressed

    def quiescent(self) -> bool:
        """The sleep condition: no process work, no pending interrupts, no
        peripheral activity, no in-flight loader jobs."""
        if self.chip.irqc.any_pending() or self.chip.busy() or self.loader.active():
            return False
        for pcb in self.processes.values():
            if pcb.state in (ProcessState.UNSTARTED, ProcessState.RUNNING):
                return False
            if pcb.state is ProcessState.YIELDED_WAIT and pcb.upcall_queue:
                return False
        return True
