"""kernsim: a deterministic, hosted simulator of a capsule-based embedded
kernel with memory-protected processes, a swapping system-call interface,
split-phase drivers, declarative MMIO peripherals, and capability-gated
privileged APIs."""

from .board import Board, BoardConfig, check_board, run_simulation
from .capabilities import CapabilityKind, CapabilityToken

__version__ = "0.1.0"

__all__ = [
    "Board",
    "BoardConfig",
    "CapabilityKind",
    "CapabilityToken",
    "check_board",
    "run_simulation",
    "__version__",
]
