import json
import sys
from pathlib import Path

import pytest

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from kernsim.board import Board  # noqa: E402

DATA_DIR = Path(__file__).resolve().parents[1] / "src" / "kernsim"
BOARDS_DIR = DATA_DIR / "boards"
SCENARIOS_DIR = DATA_DIR / "scenarios"


def minimal_board_dict(**overrides):
    """A small fully-featured board for unit tests, built without files."""
    cfg = {
        "name": "test",
        "ram_size": 65536,
        "loader": "sync",
        "verifier": "digest_match",
        "peripherals": {
            "alarm": {"irq": 0},
            "uart": {"irq": 1, "bytes_per_tick": 1},
            "hashengine": {"irq": 2, "chunk_bytes": 64},
        },
        "capsules": [
            {"name": "alarm_driver", "type": "alarm", "driver_id": 0},
            {"name": "console", "type": "console", "driver_id": 1,
             "buffer_size": 64},
            {"name": "probe_a", "type": "probe", "driver_id": 2},
            {"name": "probe_b", "type": "probe", "driver_id": 3},
            {"name": "manager", "type": "manager", "driver_id": 4},
        ],
        "capabilities": {"manager": ["ProcessManagement"]},
    }
    cfg.update(overrides)
    return cfg


def make_board(**overrides) -> Board:
    return Board.from_dict(minimal_board_dict(**overrides))


def script_source(main, handlers=None, min_memory=1024, **extra) -> bytes:
    doc = {"name": extra.pop("name", "app"), "min_memory": min_memory,
           "main": main, "handlers": handlers or {}}
    doc.update(extra)
    return json.dumps(doc).encode("utf-8")


def load_one(board: Board, main, handlers=None, min_memory=1024, **extra):
    """Finalize-free helper: load a script on a building board and return
    (job, pid)."""
    job = board.load_app(script_source(main, handlers, min_memory, **extra))
    return job, job.pid


@pytest.fixture
def board() -> Board:
    return make_board()
