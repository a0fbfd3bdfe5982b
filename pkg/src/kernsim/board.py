"""Board configuration, construction, and the batch run loop.

A board file describes the whole machine: RAM size, MPU limits,
peripherals (with their register map files and timing constants), the
capsule stack with its composition annotations, capability grants, and
the loader/verifier policy. Everything is validated before the board
finalizes; an invalid configuration never simulates.

The run loop alternates one kernel loop step with one clock tick until
the system is quiescent (nothing runnable, no pending interrupts, no
armed or busy peripherals, no in-flight loader jobs) or the tick limit is
reached.

Exit codes: 0 clean quiescence or tick limit, 1 any expect mismatch,
2 configuration error, 3 capsule diagnostic (budget, reentrancy, register
misuse).
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional

from .capabilities import CapabilityKind, CapabilityRegistry
from .capsules import CAPSULE_TYPES, CompositionLayer, validate_composition
from .errors import ConfigError, ScenarioError, SimulationDiagnostic, SpecError
from .hw import AlarmHw, Chip, HashEngineHw, InterruptController, SimClock, UartHw
from .kernel import Kernel, LoaderJob
from .loader import VERIFIER_POLICIES, fnv1a64, pack_binary
from .memory import MemoryController
from .regmap import RegisterMapSpec, load_register_map
from .scenario import parse_script_bytes
from .trace import (
    ACTOR_KERNEL,
    K_BOOT,
    K_CONFIG_ERROR,
    K_DIAGNOSTIC,
    K_FINALIZED,
    K_QUIESCENT,
    K_TICK_LIMIT,
    TraceLog,
)

DEFAULT_MAX_TICKS = 10_000

_KNOWN_PERIPHERALS = ("alarm", "uart", "hashengine")
_PERIPHERAL_NEEDED_BY = {"alarm": "alarm", "console": "uart"}
_TYPES_NEEDING_DRIVER_ID = ("alarm", "console", "probe", "manager")


def _packaged_map_text(name: str) -> Optional[str]:
    ref = resources.files("kernsim").joinpath(f"maps/{name}.json")
    if not ref.is_file():
        return None
    return ref.read_text(encoding="utf-8")


@dataclass
class BoardConfig:
    name: str = "board"
    ram_size: int = 0
    mpu_max_regions: int = 8
    upcall_queue_depth: int = 8
    capsule_step_budget: int = 100_000
    max_processes: int = 8
    loader: str = "sync"
    verifier: str = "digest_match"
    trusted_key_ids: List[int] = field(default_factory=list)
    peripherals: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    capsules: List[Dict[str, Any]] = field(default_factory=list)
    capabilities: Dict[str, List[str]] = field(default_factory=dict)
    peripheral_specs: Dict[str, RegisterMapSpec] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Dict[str, Any],
                  base_dir: Optional[Path] = None) -> "BoardConfig":
        violations = validate_board_dict(data, base_dir)
        if violations:
            raise ConfigError(violations)
        cfg = cls(
            name=data.get("name", "board"),
            ram_size=data["ram_size"],
            mpu_max_regions=data.get("mpu_max_regions", 8),
            upcall_queue_depth=data.get("upcall_queue_depth", 8),
            capsule_step_budget=data.get("capsule_step_budget", 100_000),
            max_processes=data.get("max_processes", 8),
            loader=data.get("loader", "sync"),
            verifier=data.get("verifier", "digest_match"),
            trusted_key_ids=list(data.get("trusted_key_ids", [])),
            peripherals={k: dict(v) for k, v in data.get("peripherals", {}).items()},
            capsules=[dict(layer) for layer in data.get("capsules", [])],
            capabilities={k: list(v) for k, v in data.get("capabilities", {}).items()},
        )
        for pname in cfg.peripherals:
            text = _map_text(pname, cfg.peripherals[pname], base_dir)
            cfg.peripheral_specs[pname] = load_register_map(json.loads(text))
        return cfg

    @classmethod
    def from_file(cls, path) -> "BoardConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError([f"cannot read board file: {exc}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"board file does not parse: {exc}"]) from None
        return cls.from_dict(data, path.parent)


def _map_text(pname: str, pcfg: Dict[str, Any],
              base_dir: Optional[Path]) -> Optional[str]:
    map_ref = pcfg.get("map")
    if map_ref is None:
        return _packaged_map_text(pname)
    path = Path(map_ref)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    try:
        return path.read_text(encoding="utf-8")
    except OSError:
        return None


def validate_board_dict(data: Dict[str, Any],
                        base_dir: Optional[Path] = None) -> List[str]:
    """Full static validation; returns every violation found."""
    v: List[str] = []
    if not isinstance(data, dict):
        return ["board config must be a JSON object"]

    ram = data.get("ram_size")
    if not isinstance(ram, int) or ram <= 0:
        v.append(f"ram_size must be a positive integer, got {ram!r}")
    for key in ("mpu_max_regions", "upcall_queue_depth", "capsule_step_budget",
                "max_processes"):
        value = data.get(key, 1)
        if not isinstance(value, int) or value < 1:
            v.append(f"{key} must be a positive integer, got {value!r}")

    loader = data.get("loader", "sync")
    if loader not in ("sync", "async"):
        v.append(f"loader must be 'sync' or 'async', got {loader!r}")
    verifier = data.get("verifier", "digest_match")
    if verifier not in VERIFIER_POLICIES:
        v.append(f"verifier must be one of {VERIFIER_POLICIES}, got {verifier!r}")

    peripherals = data.get("peripherals", {})
    if not isinstance(peripherals, dict):
        v.append("peripherals must be an object")
        peripherals = {}
    irqs_seen: Dict[int, str] = {}
    for pname, pcfg in peripherals.items():
        if pname not in _KNOWN_PERIPHERALS:
            v.append(f"unknown peripheral {pname!r}")
            continue
        if not isinstance(pcfg, dict):
            v.append(f"peripheral {pname!r} config must be an object")
            continue
        irq = pcfg.get("irq")
        if not isinstance(irq, int) or irq < 0:
            v.append(f"peripheral {pname!r} needs a non-negative integer irq")
        elif irq in irqs_seen:
            v.append(f"peripheral {pname!r} reuses irq {irq} of {irqs_seen[irq]!r}")
        else:
            irqs_seen[irq] = pname
        text = _map_text(pname, pcfg, base_dir)
        if text is None:
            v.append(f"peripheral {pname!r} references a missing register map "
                     f"{pcfg.get('map')!r}")
            continue
        try:
            load_register_map(json.loads(text))
        except json.JSONDecodeError as exc:
            v.append(f"register map for {pname!r} does not parse: {exc}")
        except SpecError as exc:
            v.extend(f"register map for {pname!r}: {violation}"
                     for violation in exc.violations)

    if loader == "async" and "hashengine" not in peripherals:
        v.append("async loader requires a hashengine peripheral")

    layers_cfg = data.get("capsules", [])
    if not isinstance(layers_cfg, list):
        v.append("capsules must be a list of layers")
        layers_cfg = []
    names_seen: set = set()
    driver_ids: Dict[int, str] = {}
    comp_layers: List[CompositionLayer] = []
    for layer in layers_cfg:
        if not isinstance(layer, dict):
            v.append(f"capsule layer must be an object, got {layer!r}")
            continue
        name = layer.get("name")
        if not isinstance(name, str) or not name:
            v.append(f"capsule layer missing a name: {layer!r}")
            continue
        if name in names_seen:
            v.append(f"duplicate capsule name {name!r}")
        names_seen.add(name)
        ctype = layer.get("type")
        if ctype not in CAPSULE_TYPES:
            v.append(f"capsule {name!r} has unknown type {ctype!r}")
            continue
        driver_id = layer.get("driver_id")
        if ctype in _TYPES_NEEDING_DRIVER_ID:
            if not isinstance(driver_id, int) or driver_id < 0:
                v.append(f"capsule {name!r} (type {ctype!r}) needs a driver_id")
            elif driver_id in driver_ids:
                v.append(f"capsule {name!r} reuses driver_id {driver_id} of "
                         f"{driver_ids[driver_id]!r}")
            else:
                driver_ids[driver_id] = name
        needed = _PERIPHERAL_NEEDED_BY.get(ctype)
        if needed and needed not in peripherals:
            v.append(f"capsule {name!r} (type {ctype!r}) needs the {needed!r} "
                     f"peripheral")
        comp_layers.append(CompositionLayer(
            name=name,
            provides=dict(layer.get("provides", {})),
            requires=dict(layer.get("requires", {})),
            buffer_size=layer.get("buffer_size"),
            min_buffer_size=layer.get("min_buffer_size"),
        ))

    v.extend(validate_composition(comp_layers))

    grants = data.get("capabilities", {})
    if not isinstance(grants, dict):
        v.append("capabilities must be an object of capsule -> kinds")
        grants = {}
    valid_kinds = {kind.value for kind in CapabilityKind}
    for holder, kinds in grants.items():
        if holder not in names_seen:
            v.append(f"capability grant names unknown capsule {holder!r}")
        for kind in kinds if isinstance(kinds, list) else []:
            if kind not in valid_kinds:
                v.append(f"capability grant for {holder!r} names unknown kind "
                         f"{kind!r}")
    return v


class _BoardDeps:
    """What capsule builders may see during construction."""

    def __init__(self, chip: Chip, max_processes: int):
        self.chip = chip
        self.max_processes = max_processes


class Board:
    """A fully constructed machine, ready to load apps and run."""

    def __init__(self, config: BoardConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.trace = TraceLog()
        clock = SimClock()
        self.trace.set_clock(lambda: clock.now)
        irqc = InterruptController(self.trace)

        alarm = uart = hashengine = None
        pcfgs = config.peripherals
        if "alarm" in pcfgs:
            alarm = AlarmHw(config.peripheral_specs["alarm"], irqc,
                            pcfgs["alarm"]["irq"],
                            initial_count=pcfgs["alarm"].get("initial_count", 0))
        if "uart" in pcfgs:
            uart = UartHw(config.peripheral_specs["uart"], irqc,
                          pcfgs["uart"]["irq"],
                          bytes_per_tick=pcfgs["uart"].get("bytes_per_tick", 1),
                          trace=self.trace)
        if "hashengine" in pcfgs:
            hashengine = HashEngineHw(config.peripheral_specs["hashengine"], irqc,
                                      pcfgs["hashengine"]["irq"],
                                      chunk_bytes=pcfgs["hashengine"].get(
                                          "chunk_bytes", 64),
                                      digest_fn=fnv1a64)
        self.chip = Chip(clock, irqc, alarm, uart, hashengine)
        self.memory = MemoryController(config.ram_size, config.mpu_max_regions,
                                       self.trace)
        self.registry = CapabilityRegistry(self.trace)
        self.kernel = Kernel(
            self.memory, self.chip, self.trace, self.registry,
            upcall_queue_depth=config.upcall_queue_depth,
            capsule_step_budget=config.capsule_step_budget,
            verifier_policy=config.verifier,
            trusted_key_ids=config.trusted_key_ids)

        self.trace.log(ACTOR_KERNEL, K_BOOT, {
            "board": config.name, "ram_size": config.ram_size,
            "loader": config.loader, "verifier": config.verifier,
            "seed": seed,
        })

        # The kernel's boot path holds its own loader token; capsule-side
        # loading needs one granted at construction.
        self._boot_token = self.registry.mint(CapabilityKind.LOADER_CONTROL,
                                              "kernel")

        deps = _BoardDeps(self.chip, config.max_processes)
        self.capsules_by_name: Dict[str, Any] = {}
        for layer in config.capsules:
            name = layer["name"]
            kinds = config.capabilities.get(name, [])
            tokens = [self.registry.mint(CapabilityKind(kind), name)
                      for kind in kinds]
            capsule = CAPSULE_TYPES[layer["type"]](name, layer, deps, tokens)
            if capsule is None:
                continue
            self.kernel.register_capsule(capsule)
            self.capsules_by_name[name] = capsule

        # Interrupt wiring: peripheral-owning capsules get their IRQ; the
        # hash engine interrupt belongs to the kernel's loader.
        for capsule in self.kernel.capsules:
            periph = getattr(capsule, "IRQ_PERIPHERAL", None)
            if periph and periph in pcfgs:
                self.kernel.register_irq_capsule(pcfgs[periph]["irq"], periph,
                                                 capsule)
        if hashengine is not None:
            irqc.set_handler(pcfgs["hashengine"]["irq"],
                             self.kernel.loader.on_hash_irq)

        self._finalized = False

    @classmethod
    def from_file(cls, path, seed: int = 0) -> "Board":
        return cls(BoardConfig.from_file(path), seed=seed)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], seed: int = 0,
                  base_dir: Optional[Path] = None) -> "Board":
        return cls(BoardConfig.from_dict(data, base_dir), seed=seed)

    def finalize(self) -> None:
        self.registry.finalize()
        self.trace.log(ACTOR_KERNEL, K_FINALIZED, {})
        self._finalized = True

    # -- app loading ---------------------------------------------------------

    def load_app(self, source: bytes, name: str = "app") -> LoaderJob:
        """Pack a scenario file into a process binary and hand it to the
        configured loader."""
        script = parse_script_bytes(source, name)
        blob = pack_binary(source, script.min_memory, entry_name=script.entry,
                           digest=script.credential_digest, key_id=script.key_id)
        if self.config.loader == "sync":
            return self.kernel.load_process_sync(self._boot_token, blob,
                                                 script.name)
        return self.kernel.load_process_async(self._boot_token, blob, script.name)

    def load_binary(self, blob: bytes, name: str = "app") -> LoaderJob:
        """Feed an already-packed binary to the configured loader."""
        if self.config.loader == "sync":
            return self.kernel.load_process_sync(self._boot_token, blob, name)
        return self.kernel.load_process_async(self._boot_token, blob, name)

    # -- the run loop ------------------------------------------------------------

    def run(self, max_ticks: int = DEFAULT_MAX_TICKS) -> int:
        if not self._finalized:
            self.finalize()
        try:
            while True:
                self.kernel.loop_step()
                if self.kernel.quiescent():
                    self.trace.log(ACTOR_KERNEL, K_QUIESCENT, {})
                    break
                if self.chip.clock.now >= max_ticks:
                    self.trace.log(ACTOR_KERNEL, K_TICK_LIMIT,
                                   {"max_ticks": max_ticks})
                    break
                self.chip.tick(1)
        except SimulationDiagnostic as exc:
            self.trace.log(ACTOR_KERNEL, K_DIAGNOSTIC, {"reason": str(exc)})
            return 3
        return 1 if self.kernel.expect_failures else 0

    @property
    def uart_output(self) -> bytes:
        return bytes(self.chip.uart.output) if self.chip.uart else b""


def check_board(path) -> List[str]:
    """Validate a board file without running; returns all violations."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        return [f"cannot read board file: {exc}"]
    except json.JSONDecodeError as exc:
        return [f"board file does not parse: {exc}"]
    return validate_board_dict(data, path.parent)


def run_simulation(board_path, app_paths, *, max_ticks: int = DEFAULT_MAX_TICKS,
                   seed: int = 0, trace_path=None, pretty: bool = False,
                   err=sys.stderr) -> int:
    """CLI entry: build, load, run, and write the trace. Returns the exit
    code; configuration problems short-circuit with code 2 and still emit
    their diagnostics as trace events."""
    trace = TraceLog()
    try:
        board = Board.from_file(board_path, seed=seed)
    except ConfigError as exc:
        for violation in exc.violations:
            trace.log(ACTOR_KERNEL, K_CONFIG_ERROR, {"violation": violation})
            print(f"config error: {violation}", file=err)
        _write_trace(trace, trace_path, pretty)
        return 2

    board.finalize()
    try:
        for app_path in app_paths:
            source = Path(app_path).read_bytes()
            board.load_app(source, Path(app_path).stem)
    except (OSError, ScenarioError) as exc:
        violations = getattr(exc, "violations", [str(exc)])
        for violation in violations:
            board.trace.log(ACTOR_KERNEL, K_CONFIG_ERROR, {"violation": violation})
            print(f"config error: {violation}", file=err)
        _write_trace(board.trace, trace_path, pretty)
        return 2

    code = board.run(max_ticks)
    _write_trace(board.trace, trace_path, pretty)
    return code


def _write_trace(trace: TraceLog, trace_path, pretty: bool) -> None:
    pretty = pretty or os.environ.get("KERNSIM_TRACE_PRETTY") == "1"
    data = trace.to_bytes(pretty=pretty)
    if trace_path is None:
        sys.stdout.write(data.decode("utf-8"))
        sys.stdout.flush()
    else:
        Path(trace_path).write_bytes(data)
