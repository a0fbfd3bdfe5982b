import itertools
import random

import pytest

from kernsim.abi import (
    ErrorCode,
    ReturnVariant,
    SyscallInvocation,
    SyscallReturn,
    YieldMode,
)
from kernsim.capsules import Capsule, register_capsule_type
from kernsim.errors import (
    PhaseError,
    ProcessDead,
    ReentrancyError,
)
from kernsim.kernel import ProcessState

from conftest import make_board, script_source
from oracles import OneSlotSwapModel

DRIVER_ALARM = 0
DRIVER_CONSOLE = 1
DRIVER_PROBE_A = 2
DRIVER_PROBE_B = 3
DRIVER_MANAGER = 4


def load_idle_process(board, min_memory=1024, handlers=None):
    """A process that exists but never runs its script; unit tests drive
    its syscalls directly."""
    handlers = handlers if handlers is not None else {"h1": [], "h2": []}
    job = board.load_app(script_source([], handlers, min_memory))
    assert job.pid is not None, job.detail
    return job.pid


def rw_allow(kern, pid, driver, buf, base, length):
    return kern.handle_syscall(
        pid, SyscallInvocation.rw_allow(driver, buf, base, length))


def ro_allow(kern, pid, driver, buf, base, length):
    return kern.handle_syscall(
        pid, SyscallInvocation.ro_allow(driver, buf, base, length))


# --- swap semantics -----------------------------------------------------------


def test_allow_swap_returns_previous_region(board):
    pid = load_idle_process(board)
    kern = board.kernel
    ram = kern.processes[pid].ram
    first = rw_allow(kern, pid, DRIVER_PROBE_A, 0, ram.base, 16)
    assert first == SyscallReturn.success_region(0, 0)
    second = rw_allow(kern, pid, DRIVER_PROBE_A, 0, ram.base + 32, 8)
    assert second == SyscallReturn.success_region(ram.base, 16)


def test_rw_and_ro_slots_are_distinct(board):
    pid = load_idle_process(board)
    kern = board.kernel
    ram = kern.processes[pid].ram
    rw_allow(kern, pid, DRIVER_PROBE_A, 0, ram.base, 16)
    first_ro = ro_allow(kern, pid, DRIVER_PROBE_A, 0, ram.base + 16, 8)
    assert first_ro == SyscallReturn.success_region(0, 0)


def test_exhaustive_one_slot_sequences_both_modes(board):
    # All allow sequences of length 1..5 over three regions, one slot,
    # checked against the reference model; a trailing zero-length allow
    # must hand back the last region.
    kern = board.kernel
    region_offsets = [(0, 16), (32, 8), (64, 24)]
    for mode in ("rw", "ro"):
        issue = rw_allow if mode == "rw" else ro_allow
        for length in range(1, 6):
            for seq in itertools.product(region_offsets, repeat=length):
                pid = load_idle_process(board, min_memory=256)
                ram = kern.processes[pid].ram
                model = OneSlotSwapModel()
                for off, size in seq:
                    got = issue(kern, pid, DRIVER_PROBE_A, 0, ram.base + off, size)
                    want = model.install((ram.base + off, size))
                    assert got == SyscallReturn.success_region(*want)
                got = issue(kern, pid, DRIVER_PROBE_A, 0, 0, 0)
                want = model.install((0, 0))
                assert got == SyscallReturn.success_region(*want)
                kern.exit_process(pid, "test done")


def test_random_interleavings_across_slots_and_subscribes(board):
    # Two allow slots plus a subscribe slot, randomly interleaved; each
    # slot must behave as its own independent one-slot model.
    rng = random.Random(0x51075)
    kern = board.kernel
    region_offsets = [(0, 16), (32, 8), (64, 24)]
    handlers = {"h1": [], "h2": []}
    slots = [
        ("allow", DRIVER_PROBE_A, 0, "rw"),
        ("allow", DRIVER_PROBE_B, 0, "rw"),
        ("subscribe", DRIVER_ALARM, 0, None),
    ]
    for _ in range(300):
        pid = load_idle_process(board, min_memory=256, handlers=handlers)
        ram = kern.processes[pid].ram
        models = {s: OneSlotSwapModel() for s in slots}
        sub_model = {slots[2]: ("null", 0)}
        for _ in range(rng.randrange(1, 6)):
            slot = rng.choice(slots)
            if slot[0] == "allow":
                off, size = rng.choice(region_offsets)
                got = rw_allow(kern, pid, slot[1], slot[2], ram.base + off, size)
                want = models[slot].install((ram.base + off, size))
                assert got == SyscallReturn.success_region(*want)
            else:
                fn = rng.choice(["h1", "h2", "null"])
                userdata = rng.randrange(100)
                got = kern.handle_syscall(pid, SyscallInvocation.subscribe(
                    slot[1], slot[2], fn, userdata))
                prev_fn, prev_ud = sub_model[slot]
                assert got.variant is ReturnVariant.SUCCESS_UPCALL
                assert (got.upcall.fn_id, got.upcall.userdata) == (prev_fn, prev_ud)
                sub_model[slot] = (fn, 0) if fn == "null" else (fn, userdata)
        kern.exit_process(pid, "test done")


def test_subscribe_swap_and_null(board):
    pid = load_idle_process(board)
    kern = board.kernel
    first = kern.handle_syscall(
        pid, SyscallInvocation.subscribe(DRIVER_ALARM, 0, "h1", 7))
    assert first.upcall.is_null
    second = kern.handle_syscall(
        pid, SyscallInvocation.subscribe(DRIVER_ALARM, 0, "null"))
    assert (second.upcall.fn_id, second.upcall.userdata) == ("h1", 7)


def test_subscribe_unknown_handler_is_inval(board):
    pid = load_idle_process(board)
    ret = board.kernel.handle_syscall(
        pid, SyscallInvocation.subscribe(DRIVER_ALARM, 0, "nonexistent"))
    assert ret == SyscallReturn.failure(ErrorCode.INVAL)


# --- allow validation -------------------------------------------------------------


def test_allow_outside_regions_is_inval(board):
    pid = load_idle_process(board, min_memory=64)
    kern = board.kernel
    ram = kern.processes[pid].ram
    ret = rw_allow(kern, pid, DRIVER_PROBE_A, 0, ram.base + 60, 8)
    assert ret == SyscallReturn.failure_region(ErrorCode.INVAL, ram.base + 60, 8)
    # failure did not install anything
    ret = rw_allow(kern, pid, DRIVER_PROBE_A, 0, ram.base, 8)
    assert ret == SyscallReturn.success_region(0, 0)


def test_rw_allow_over_read_only_flash_is_inval(board):
    pid = load_idle_process(board)
    kern = board.kernel
    flash = kern.processes[pid].flash
    ret = rw_allow(kern, pid, DRIVER_PROBE_A, 0, flash.base, 8)
    assert ret.variant is ReturnVariant.FAILURE_REGION
    assert ret.error is ErrorCode.INVAL
    ok = ro_allow(kern, pid, DRIVER_PROBE_A, 0, flash.base, 8)
    assert ok == SyscallReturn.success_region(0, 0)


def test_zero_length_allow_accepted_at_any_base(board):
    pid = load_idle_process(board)
    kern = board.kernel
    before = len([e for e in board.trace.events if e.kind == "mem_access"])
    ret = rw_allow(kern, pid, DRIVER_PROBE_A, 0, 500, 0)
    assert ret == SyscallReturn.success_region(0, 0)
    ret = rw_allow(kern, pid, DRIVER_PROBE_A, 0, 999999999, 0)
    assert ret == SyscallReturn.success_region(500, 0)
    after = len([e for e in board.trace.events if e.kind == "mem_access"])
    assert before == after  # allow validation never touches memory


def test_allow_unknown_driver_and_bad_buffer_number(board):
    pid = load_idle_process(board)
    kern = board.kernel
    ram = kern.processes[pid].ram
    ret = rw_allow(kern, pid, 99, 0, ram.base, 8)
    assert ret == SyscallReturn.failure_region(ErrorCode.NODEVICE, ram.base, 8)
    ret = rw_allow(kern, pid, DRIVER_PROBE_A, 5, ram.base, 8)
    assert ret == SyscallReturn.failure_region(ErrorCode.INVAL, ram.base, 8)


# --- commands ------------------------------------------------------------------------


def test_command_zero_is_existence_check(board):
    pid = load_idle_process(board)
    for driver in (DRIVER_ALARM, DRIVER_CONSOLE, DRIVER_PROBE_A, DRIVER_MANAGER):
        ret = board.kernel.handle_syscall(
            pid, SyscallInvocation.command(driver, 0))
        assert ret == SyscallReturn.success()


def test_unknown_driver_is_nodevice(board):
    pid = load_idle_process(board)
    ret = board.kernel.handle_syscall(pid, SyscallInvocation.command(99, 1))
    assert ret == SyscallReturn.failure(ErrorCode.NODEVICE)


def test_unknown_command_is_nosupport(board):
    pid = load_idle_process(board)
    ret = board.kernel.handle_syscall(
        pid, SyscallInvocation.command(DRIVER_ALARM, 77))
    assert ret == SyscallReturn.failure(ErrorCode.NOSUPPORT)


def test_syscall_from_dead_process_rejected(board):
    pid = load_idle_process(board)
    board.kernel.exit_process(pid, "test")
    with pytest.raises(ProcessDead):
        board.kernel.handle_syscall(pid, SyscallInvocation.command(DRIVER_ALARM, 0))


# --- grants ----------------------------------------------------------------------------


def test_grant_lazily_allocated_zeroed_and_watermarked(board):
    pid = load_idle_process(board, min_memory=256)
    kern = board.kernel
    pcb = kern.processes[pid]
    top = pcb.grant_watermark
    ret = kern.handle_syscall(
        pid, SyscallInvocation.command(DRIVER_ALARM, 1, 5000))
    assert ret == SyscallReturn.success()
    assert pcb.grant_watermark == top - 16
    alloc = pcb.grants["alarm_driver"]
    assert (alloc.base, alloc.size) == (top - 16, 16)
    # armed flag and deadline live in the grant bytes
    data = kern.memory.data[alloc.base:alloc.base + 16]
    assert data[0] == 1
    assert int.from_bytes(data[4:8], "little") == 5000
    # second set reuses the same allocation
    kern.handle_syscall(pid, SyscallInvocation.command(DRIVER_ALARM, 1, 9000))
    assert pcb.grant_watermark == top - 16


def test_grant_area_is_walled_off_from_the_process(board):
    pid = load_idle_process(board, min_memory=64)
    kern = board.kernel
    pcb = kern.processes[pid]
    assert kern.process_local_write(pid, 40, b"x")  # still accessible
    kern.handle_syscall(pid, SyscallInvocation.command(DRIVER_ALARM, 1, 100))
    # the top 16 bytes became kernel-only grant space
    assert kern.processes[pid].state is ProcessState.UNSTARTED
    assert not kern.process_local_write(pid, 50, b"x")
    assert kern.processes[pid].state is ProcessState.FAULTED


def test_grant_nomem_charges_only_that_process(board):
    pid_small = load_idle_process(board, min_memory=8)
    pid_big = load_idle_process(board, min_memory=256)
    kern = board.kernel
    ret = kern.handle_syscall(
        pid_small, SyscallInvocation.command(DRIVER_ALARM, 1, 100))
    assert ret == SyscallReturn.failure(ErrorCode.NOMEM)
    ret = kern.handle_syscall(
        pid_big, SyscallInvocation.command(DRIVER_ALARM, 1, 100))
    assert ret == SyscallReturn.success()


def test_grant_enter_after_exit_is_process_dead(board):
    pid = load_idle_process(board)
    kern = board.kernel
    kern.exit_process(pid, "test")
    with pytest.raises(ProcessDead):
        kern.grant_enter("alarm_driver", 16, pid, lambda g: None)


def test_grant_reentry_is_fatal(board):
    pid = load_idle_process(board)
    kern = board.kernel

    def reenter(_grant):
        kern.grant_enter("alarm_driver", 16, pid, lambda g: None)

    with pytest.raises(ReentrancyError):
        kern.grant_enter("alarm_driver", 16, pid, reenter)
    # different capsule for the same process is fine
    kern.grant_enter("console", 0, pid, lambda g: None)


# --- upcall queueing ----------------------------------------------------------------------


def subscribe(board, pid, driver, sub, fn="h1", userdata=0):
    return board.kernel.handle_syscall(
        pid, SyscallInvocation.subscribe(driver, sub, fn, userdata))


def test_upcall_to_null_subscription_dropped(board):
    pid = load_idle_process(board)
    assert not board.kernel.schedule_upcall("probe_a", DRIVER_PROBE_A, pid, 0, [1])
    drops = [e for e in board.trace.events if e.kind == "upcall_dropped"]
    assert drops and drops[-1].payload["reason"] == "null subscription"


def test_upcall_to_dead_process_dropped(board):
    pid = load_idle_process(board)
    subscribe(board, pid, DRIVER_ALARM, 0)
    board.kernel.exit_process(pid, "test")
    assert not board.kernel.schedule_upcall("alarm_driver", DRIVER_ALARM, pid, 0, [1])
    drops = [e for e in board.trace.events if e.kind == "upcall_dropped"]
    assert drops[-1].payload["reason"] == "dead process"


def test_duplicate_upcall_replaces_in_place(board):
    pid = load_idle_process(board)
    kern = board.kernel
    subscribe(board, pid, DRIVER_ALARM, 0)
    kern.schedule_upcall("alarm_driver", DRIVER_ALARM, pid, 0, [1, 0, 0])
    kern.schedule_upcall("alarm_driver", DRIVER_ALARM, pid, 0, [2, 0, 0])
    queue = kern.processes[pid].upcall_queue
    assert len(queue) == 1
    assert queue[0].args == (2, 0, 0)


def test_upcall_queue_depth_limit(board):
    # Distinct (driver, sub) pairs beyond the depth are dropped.
    pid = load_idle_process(board)
    kern = board.kernel
    pcb = kern.processes[pid]
    for driver in (DRIVER_ALARM, DRIVER_CONSOLE):
        subscribe(board, pid, driver, 0)
    # fill the queue artificially small by shrinking the configured depth
    kern.upcall_queue_depth = 1
    assert kern.schedule_upcall("alarm_driver", DRIVER_ALARM, pid, 0, [1])
    assert not kern.schedule_upcall("console", DRIVER_CONSOLE, pid, 0, [2])
    assert len(pcb.upcall_queue) == 1
    drops = [e for e in board.trace.events if e.kind == "upcall_dropped"]
    assert drops[-1].payload["reason"] == "queue full"


# --- yield and delivery ----------------------------------------------------------------------


def run_board(main, handlers=None, apps=None, board=None, max_ticks=2000,
              min_memory=1024):
    board = board or make_board()
    sources = apps or [script_source(main, handlers, min_memory)]
    for source in sources:
        board.load_app(source)
    code = board.run(max_ticks)
    return board, code


def test_yield_no_wait_returns_flag(board):
    main = [
        {"op": "syscall", "call": {"class": "yield", "mode": "no_wait"}},
        {"op": "expect", "pattern": {"variant": "success_value", "value": 0}},
        {"op": "syscall", "call": {"class": "subscribe", "driver": 0, "sub": 0,
                                   "fn": "on_alarm"}},
        {"op": "syscall", "call": {"class": "command", "driver": 0, "cmd": 1,
                                   "args": [3, 0]}},
        {"op": "loop", "count": 30, "body": [
            {"op": "syscall", "call": {"class": "yield", "mode": "no_wait"}}]},
        {"op": "halt"},
    ]
    board, code = run_board(main, {"on_alarm": [
        {"op": "write_local", "offset": 0, "data": "aa"}]})
    assert code == 0
    runs = [e for e in board.trace.events if e.kind == "upcall_run"]
    assert len(runs) == 1
    # the no-wait yield that delivered it returned 1
    rets = [e.payload["ret"] for e in board.trace.events
            if e.kind == "syscall_return"
            and e.payload["ret"].get("variant") == "success_value"]
    assert {"variant": "success_value", "value": 1} in rets


def test_upcalls_delivered_only_inside_yield(board):
    main = [
        {"op": "syscall", "call": {"class": "subscribe", "driver": 0, "sub": 0,
                                   "fn": "on_alarm"}},
        {"op": "syscall", "call": {"class": "command", "driver": 0, "cmd": 1,
                                   "args": [5, 0]}},
        {"op": "loop", "count": 20, "body": [
            {"op": "syscall", "call": {"class": "command", "driver": 0,
                                       "cmd": 2, "args": [0, 0]}}]},
        {"op": "syscall", "call": {"class": "yield", "mode": "wait"}},
        {"op": "halt"},
    ]
    board, code = run_board(main, {"on_alarm": []})
    assert code == 0
    events = [e for e in board.trace.events
              if e.actor == "process:1" and e.kind in ("syscall", "upcall_run")]
    for i, event in enumerate(events):
        if event.kind == "upcall_run":
            assert events[i - 1].kind == "syscall"
            assert events[i - 1].payload["call"]["class"] == "yield"


def test_two_processes_one_quantum_each_in_pid_order(board):
    main = [{"op": "loop", "count": 5, "body": [
        {"op": "syscall", "call": {"class": "yield", "mode": "no_wait"}}]},
        {"op": "halt"}]
    board.load_app(script_source(main, {}, 256))
    board.load_app(script_source(main, {}, 256))
    board.finalize()
    board.kernel.loop_step()  # both start and run one quantum
    syscalls = [e.actor for e in board.trace.events if e.kind == "syscall"]
    assert syscalls == ["process:1", "process:2"]
    board.kernel.loop_step()
    syscalls = [e.actor for e in board.trace.events if e.kind == "syscall"]
    assert syscalls == ["process:1", "process:2", "process:1", "process:2"]


def test_loop_step_reports_no_progress_when_idle(board):
    board.finalize()
    assert board.kernel.loop_step() is False
    assert board.kernel.quiescent()


def test_loop_step_requires_finalized_board(board):
    with pytest.raises(PhaseError):
        board.kernel.loop_step()


def test_pending_alarm_interrupt_progresses(board):
    pid = load_idle_process(board, handlers={"on_alarm": []})
    subscribe(board, pid, DRIVER_ALARM, 0, fn="on_alarm")
    board.kernel.handle_syscall(
        pid, SyscallInvocation.command(DRIVER_ALARM, 1, 1))
    board.kernel.handle_syscall(pid, SyscallInvocation.yield_(YieldMode.WAIT))
    board.finalize()
    board.chip.tick(1)
    assert board.chip.irqc.any_pending()
    assert board.kernel.loop_step() is True
    runs = [e for e in board.trace.events if e.kind == "upcall_run"]
    assert len(runs) == 1


# --- exit and invalidation ----------------------------------------------------------------


def test_exit_invalidates_everything(board):
    pid = load_idle_process(board)
    kern = board.kernel
    pcb = kern.processes[pid]
    ram = pcb.ram
    rw_allow(kern, pid, DRIVER_PROBE_A, 0, ram.base, 16)
    subscribe(board, pid, DRIVER_ALARM, 0)
    kern.handle_syscall(pid, SyscallInvocation.command(DRIVER_ALARM, 1, 5000))
    kern.schedule_upcall("alarm_driver", DRIVER_ALARM, pid, 0, [1])
    kern.handle_syscall(pid, SyscallInvocation.exit())
    assert pcb.state is ProcessState.EXITED
    assert not pcb.allow_slots and not pcb.upcall_slots
    assert not pcb.upcall_queue and not pcb.grants
    # the alarm entry was disarmed, so the hardware stops expecting a fire
    assert not board.chip.alarm.armed
    assert kern.quiescent() or not board.chip.busy()


def test_exit_orphans_in_flight_console_write(board):
    # The process dies mid-transmission: the UART finishes on its own, the
    # completion upcall reaches nobody, and the driver's window is back.
    main = [
        {"op": "write_local", "offset": 0, "data": "aabbccddeeff00112233"},
        {"op": "syscall", "call": {"class": "subscribe", "driver": 1, "sub": 0,
                                   "fn": "on_tx"}},
        {"op": "syscall", "call": {"class": "ro_allow", "driver": 1, "buf": 0,
                                   "base": 0, "len": 10}},
        {"op": "syscall", "call": {"class": "command", "driver": 1, "cmd": 1,
                                   "args": [10, 0]}},
        {"op": "syscall", "call": {"class": "exit"}},
    ]
    board, code = run_board(main, {"on_tx": []}, board=board)
    assert code == 0
    assert board.uart_output == bytes.fromhex("aabbccddeeff00112233")
    assert not any(e.kind == "upcall_run" for e in board.trace.events)
    console = board.capsules_by_name["console"]
    assert not console.op.pending and not console.window.in_flight


def test_faulted_process_is_not_restarted(board):
    main = [{"op": "write_local", "offset": 999999, "data": "ff"},
            {"op": "write_local", "offset": 0, "data": "aa"},
            {"op": "halt"}]
    board, code = run_board(main, board=board)
    assert code == 0
    pcb = board.kernel.processes[1]
    assert pcb.state is ProcessState.FAULTED
    # the statements after the fault never ran
    faults = [e for e in board.trace.events if e.kind == "mem_fault"]
    writes = [e for e in board.trace.events
              if e.kind == "mem_access" and e.actor == "process:1"]
    assert len(faults) == 1 and len(writes) == 0


def test_mutual_distrust_spinner_cannot_starve_alarm(board):
    spin = [{"op": "loop", "count": 3000, "body": [
        {"op": "syscall", "call": {"class": "yield", "mode": "no_wait"}}]},
        {"op": "halt"}]
    fourcall = [
        {"op": "syscall", "call": {"class": "subscribe", "driver": 0, "sub": 0,
                                   "fn": "on_alarm"}},
        {"op": "syscall", "call": {"class": "command", "driver": 0, "cmd": 1,
                                   "args": [500, 0]}},
        {"op": "syscall", "call": {"class": "yield", "mode": "wait"}},
        {"op": "halt"}]
    board.load_app(script_source(spin, {}, 256))
    board.load_app(script_source(fourcall, {"on_alarm": []}, 256))
    code = board.run(5000)
    assert code == 0
    runs = [e for e in board.trace.events if e.kind == "upcall_run"]
    assert len(runs) == 1
    # delivered within K loop steps of the due tick, K = process count (2)
    assert 500 <= runs[0].tick <= 502


# --- aliasing through scoped handles -----------------------------------------------------------


def test_overlapping_shares_alias_within_one_step(board):
    pid = load_idle_process(board)
    kern = board.kernel
    ram = kern.processes[pid].ram
    rw_allow(kern, pid, DRIVER_PROBE_A, 0, ram.base, 16)
    rw_allow(kern, pid, DRIVER_PROBE_B, 0, ram.base + 8, 16)
    probe_a = board.capsules_by_name["probe_a"]
    probe_b = board.capsules_by_name["probe_b"]
    kern.with_buffer(probe_a, pid, 0, "rw",
                     lambda h: h.write(10, b"\xab"))
    got = kern.with_buffer(probe_b, pid, 0, "rw", lambda h: h.read(2, 1))
    assert got == b"\xab"


def test_disjoint_shares_do_not_alias(board):
    pid = load_idle_process(board)
    kern = board.kernel
    ram = kern.processes[pid].ram
    rw_allow(kern, pid, DRIVER_PROBE_A, 0, ram.base, 8)
    rw_allow(kern, pid, DRIVER_PROBE_B, 0, ram.base + 8, 8)
    probe_a = board.capsules_by_name["probe_a"]
    probe_b = board.capsules_by_name["probe_b"]
    kern.with_buffer(probe_a, pid, 0, "rw", lambda h: h.write(0, b"\x77"))
    got = kern.with_buffer(probe_b, pid, 0, "rw", lambda h: h.read(0, 1))
    assert got == b"\x00"


def test_buffer_handles_cannot_be_stashed(board):
    # Scoped visitor access only: a handle kept past the visit is dead.
    from kernsim.errors import StaleHandle
    pid = load_idle_process(board)
    kern = board.kernel
    ram = kern.processes[pid].ram
    rw_allow(kern, pid, DRIVER_PROBE_A, 0, ram.base, 16)
    probe_a = board.capsules_by_name["probe_a"]
    stash = []
    kern.with_buffer(probe_a, pid, 0, "rw", lambda h: stash.append(h))
    with pytest.raises(StaleHandle):
        stash[0].read(0, 1)
    with pytest.raises(StaleHandle):
        stash[0].write(0, b"x")


def test_grant_refs_cannot_be_stashed(board):
    from kernsim.errors import StaleHandle
    pid = load_idle_process(board)
    kern = board.kernel
    stash = []
    kern.grant_enter("alarm_driver", 16, pid, lambda g: stash.append(g))
    with pytest.raises(StaleHandle):
        stash[0].read_u8(0)


# --- capsule budget ------------------------------------------------------------------------------


class SpinnerCapsule(Capsule):
    """Test fixture: burns kernel-service calls until told to stop."""

    def command(self, cmd, arg0, arg1, pid):
        for _ in range(arg0):
            self.kern.now()
        return SyscallReturn.success()


class ReentrantCapsule(Capsule):
    GRANT_SCHEMA = 8

    def command(self, cmd, arg0, arg1, pid):
        self.kern.grant_enter(
            pid, lambda g: self.kern.grant_enter(pid, lambda g2: None))
        return SyscallReturn.success()


register_capsule_type(
    "spinner", lambda name, cfg, deps, tokens: SpinnerCapsule(name, cfg["driver_id"]))
register_capsule_type(
    "reentrant", lambda name, cfg, deps, tokens: ReentrantCapsule(name, cfg["driver_id"]))


def _board_with(extra_capsules, **overrides):
    from conftest import minimal_board_dict
    from kernsim.board import Board
    cfg = minimal_board_dict(**overrides)
    cfg["capsules"] = cfg["capsules"] + extra_capsules
    return Board.from_dict(cfg)


def test_budget_overrun_halts_with_exit_3():
    board = _board_with([{"name": "spinner", "type": "spinner", "driver_id": 9}],
                        capsule_step_budget=1000)
    main = [{"op": "syscall", "call": {"class": "command", "driver": 9, "cmd": 1,
                                       "args": [2000, 0]}},
            {"op": "halt"}]
    board.load_app(script_source(main, {}, 256))
    assert board.run(100) == 3
    diags = [e for e in board.trace.events if e.kind == "diagnostic"]
    assert diags and "budget" in diags[0].payload["reason"]


def test_budget_is_per_entry_not_cumulative():
    board = _board_with([{"name": "spinner", "type": "spinner", "driver_id": 9}],
                        capsule_step_budget=1000)
    main = [{"op": "loop", "count": 3, "body": [
        {"op": "syscall", "call": {"class": "command", "driver": 9, "cmd": 1,
                                   "args": [900, 0]}}]},
        {"op": "halt"}]
    board.load_app(script_source(main, {}, 256))
    assert board.run(100) == 0


def test_grant_reentry_halts_with_exit_3():
    board = _board_with([{"name": "reentrant", "type": "reentrant",
                          "driver_id": 9}])
    main = [{"op": "syscall", "call": {"class": "command", "driver": 9, "cmd": 1,
                                       "args": [0, 0]}}]
    board.load_app(script_source(main, {}, 256))
    assert board.run(100) == 3
