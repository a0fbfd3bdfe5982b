"""The simulated chip: clock, interrupt lines, and peripheral models.

All timing derives from one deterministic tick counter. Peripherals are
driven strictly by tick() and by software register writes; interrupt
delivery order is fixed (ascending irq id), so two runs with identical
inputs raise identical IRQ sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

from .regmap import RegisterFile, RegisterMapSpec, RegisterSpec
from .trace import (
    K_IRQ_RAISED,
    K_IRQ_SERVICED,
    K_UART_TX,
    TraceLog,
    actor_hw,
)

TICK_MASK = 0xFFFFFFFF
HALF_RING = 0x80000000


def tick_passed(now: int, deadline: int) -> bool:
    """Wraparound-aware "deadline has passed" on the 32-bit tick ring.

    A deadline counts as passed when now is within half the ring ahead of
    it; anything further away is treated as still in the future.
    """
    return ((now - deadline) & TICK_MASK) < HALF_RING


class SimClock:
    """Monotone tick counter; the only source of simulated time."""

    def __init__(self):
        self.now = 0

    def tick(self) -> None:
        self.now += 1


@dataclass
class InterruptLine:
    irq_id: int
    name: str
    handler: Optional[Callable[[], None]] = None
    pending: bool = False
    enabled: bool = True


class InterruptController:
    """Fixed-priority (ascending irq id) interrupt delivery.

    Peripherals add their line at construction; whoever owns the
    peripheral attaches the handler. A pending line without a handler
    stays pending rather than being lost.
    """

    def __init__(self, trace: Optional[TraceLog] = None):
        self.lines: Dict[int, InterruptLine] = {}
        self.trace = trace

    def add_line(self, irq_id: int, name: str) -> None:
        if irq_id in self.lines:
            raise ValueError(f"irq {irq_id} already taken by "
                             f"{self.lines[irq_id].name!r}")
        self.lines[irq_id] = InterruptLine(irq_id, name)

    def set_handler(self, irq_id: int, handler: Callable[[], None]) -> None:
        self.lines[irq_id].handler = handler

    def register(self, irq_id: int, name: str, handler: Callable[[], None]) -> None:
        self.add_line(irq_id, name)
        self.set_handler(irq_id, handler)

    def raise_irq(self, irq_id: int) -> None:
        line = self.lines[irq_id]
        line.pending = True
        if self.trace is not None:
            self.trace.log(actor_hw(line.name), K_IRQ_RAISED, {"irq": irq_id})

    def set_enabled(self, irq_id: int, enabled: bool) -> None:
        self.lines[irq_id].enabled = enabled

    def any_pending(self) -> bool:
        return any(l.pending for l in self.lines.values())

    def service(self) -> int:
        """Deliver every pending+enabled line once; returns count serviced."""
        serviced = 0
        for irq_id in sorted(self.lines):
            line = self.lines[irq_id]
            if line.pending and line.enabled and line.handler is not None:
                line.pending = False
                if self.trace is not None:
                    self.trace.log(actor_hw(line.name), K_IRQ_SERVICED, {"irq": irq_id})
                line.handler()
                serviced += 1
        return serviced


class AlarmHw:
    """Free-running 32-bit counter with a compare register.

    COUNT advances every tick and never resets on a match. The IRQ fires
    once per COMPARE value: when ENABLE and IRQEN are set and COUNT has
    passed COMPARE (wraparound-aware), a latch closes until COMPARE is
    rewritten. Writing COMPARE to an already-passed value fires
    immediately.
    """

    def __init__(self, spec: RegisterMapSpec, irqc: InterruptController,
                 irq_id: int, initial_count: int = 0):
        self.regs = RegisterFile(spec, on_write=self._on_write)
        self.irqc = irqc
        self.irq_id = irq_id
        irqc.add_line(irq_id, spec.name)
        self._fired = False
        self.regs.hw_set("COUNT", initial_count & TICK_MASK)

    @property
    def count(self) -> int:
        return self.regs.hw_get("COUNT")

    def _on_write(self, reg: RegisterSpec, value: int) -> None:
        if reg.name == "COMPARE":
            self._fired = False
        self._check()

    def _check(self) -> None:
        if self._fired:
            return
        if not (self.regs.hw_field_get("CTRL", "ENABLE")
                and self.regs.hw_field_get("CTRL", "IRQEN")):
            return
        if tick_passed(self.count, self.regs.hw_get("COMPARE")):
            self._fired = True
            self.irqc.raise_irq(self.irq_id)

    def tick(self) -> None:
        self.regs.hw_set("COUNT", (self.count + 1) & TICK_MASK)
        self._check()

    @property
    def armed(self) -> bool:
        """True while a future compare match will raise an IRQ."""
        return bool(self.regs.hw_field_get("CTRL", "ENABLE")
                    and self.regs.hw_field_get("CTRL", "IRQEN")
                    and not self._fired)


class UartHw:
    """Transmit-only UART with a one-byte-per-tick DMA engine.

    A DMA transfer reads straight from the buffer window handed to
    :meth:`start_tx`; the completion IRQ is raised on the tick the last
    byte moves, and the window is handed back through
    :meth:`take_completion`. Writing TXDATA sends a single byte
    immediately (the non-DMA path).
    """

    def __init__(self, spec: RegisterMapSpec, irqc: InterruptController,
                 irq_id: int, bytes_per_tick: int = 1,
                 trace: Optional[TraceLog] = None):
        self.regs = RegisterFile(spec, on_write=self._on_write)
        self.irqc = irqc
        self.irq_id = irq_id
        irqc.add_line(irq_id, spec.name)
        self.bytes_per_tick = bytes_per_tick
        self.trace = trace
        self.output = bytearray()
        self._window = None
        self._sent = 0
        self._total = 0
        self._completion: Optional[Tuple[object, int]] = None

    def _on_write(self, reg: RegisterSpec, value: int) -> None:
        if reg.name == "TXDATA":
            self._emit(value & 0xFF)

    def _emit(self, byte: int) -> None:
        self.output.append(byte)
        if self.trace is not None:
            self.trace.log(actor_hw(self.regs.spec.name), K_UART_TX, {"byte": byte})

    @property
    def busy(self) -> bool:
        return self._window is not None

    def start_tx(self, window) -> None:
        if self.busy:
            raise RuntimeError("uart DMA already active")
        self._window = window
        self._sent = 0
        self._total = len(window)
        self.regs.hw_set("TXLEN", self._total)
        self.regs.hw_field_set("STATUS", "TXBUSY", 1)

    def tick(self) -> None:
        if not self.busy:
            return
        for _ in range(self.bytes_per_tick):
            if self._sent >= self._total:
                break
            self._emit(self._window.peek(self._sent))
            self._sent += 1
        if self._sent >= self._total:
            window, count = self._window, self._sent
            self._window = None
            self.regs.hw_field_set("STATUS", "TXBUSY", 0)
            self._completion = (window, count)
            self.irqc.raise_irq(self.irq_id)

    def take_completion(self) -> Optional[Tuple[object, int]]:
        completion, self._completion = self._completion, None
        return completion


class HashEngineHw:
    """Digest accelerator: one job at a time, 64 payload bytes per tick.

    The digest value is published in DIGEST_LO/DIGEST_HI only when the job
    completes, together with the completion IRQ.
    """

    def __init__(self, spec: RegisterMapSpec, irqc: InterruptController,
                 irq_id: int, chunk_bytes: int = 64,
                 digest_fn: Optional[Callable[[bytes], int]] = None):
        self.regs = RegisterFile(spec, on_write=self._on_write)
        self.irqc = irqc
        self.irq_id = irq_id
        irqc.add_line(irq_id, spec.name)
        self.chunk_bytes = chunk_bytes
        self._digest_fn = digest_fn
        self._remaining = 0
        self._pending_digest = 0
        self._job_tag = None
        self._completion: Optional[Tuple[object, int]] = None

    def _on_write(self, reg: RegisterSpec, value: int) -> None:
        pass

    @property
    def busy(self) -> bool:
        return self._job_tag is not None

    def submit(self, payload: bytes, job_tag) -> None:
        if self.busy:
            raise RuntimeError("hash engine already busy")
        if self._digest_fn is None:
            raise RuntimeError("hash engine has no digest function")
        self._job_tag = job_tag
        self._pending_digest = self._digest_fn(payload)
        self._remaining = math.ceil(len(payload) / self.chunk_bytes)
        self.regs.hw_set("LEN", len(payload) & 0xFFFFFFFF)
        self.regs.hw_field_set("STATUS", "BUSY", 1)
        self.regs.hw_field_set("STATUS", "DONE", 0)

    def tick(self) -> None:
        if not self.busy:
            return
        if self._remaining > 0:
            self._remaining -= 1
        if self._remaining == 0:
            tag, digest = self._job_tag, self._pending_digest
            self._job_tag = None
            self.regs.hw_set("DIGEST_LO", digest & 0xFFFFFFFF)
            self.regs.hw_set("DIGEST_HI", (digest >> 32) & 0xFFFFFFFF)
            self.regs.hw_field_set("STATUS", "BUSY", 0)
            self.regs.hw_field_set("STATUS", "DONE", 1)
            self._completion = (tag, digest)
            self.irqc.raise_irq(self.irq_id)

    def take_completion(self) -> Optional[Tuple[object, int]]:
        completion, self._completion = self._completion, None
        return completion

    def read_digest(self) -> int:
        lo = self.regs.mmio_read(self.regs.spec.register("DIGEST_LO").offset)
        hi = self.regs.mmio_read(self.regs.spec.register("DIGEST_HI").offset)
        return (hi << 32) | lo


class Chip:
    """Bundles the clock and peripherals and drives them tick by tick."""

    def __init__(self, clock: SimClock, irqc: InterruptController,
                 alarm: Optional[AlarmHw] = None, uart: Optional[UartHw] = None,
                 hashengine: Optional[HashEngineHw] = None):
        self.clock = clock
        self.irqc = irqc
        self.alarm = alarm
        self.uart = uart
        self.hashengine = hashengine

    def tick(self, n: int = 1) -> None:
        if n < 1:
            raise ValueError("tick count must be >= 1")
        for _ in range(n):
            self.clock.tick()
            if self.alarm is not None:
                self.alarm.tick()
            if self.uart is not None:
                self.uart.tick()
            if self.hashengine is not None:
                self.hashengine.tick()

    def busy(self) -> bool:
        """True while any peripheral still has future work of its own."""
        return bool(
            (self.alarm is not None and self.alarm.armed)
            or (self.uart is not None and self.uart.busy)
            or (self.hashengine is not None and self.hashengine.busy)
        )
