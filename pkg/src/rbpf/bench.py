"""Measurement harness for the bundled workloads.

Each benchmark first checks the VM's answer against a host-side reference
and refuses to report timings for a wrong result.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

from . import programs
from .bindings import SensorMeasurement, default_bindings, format_dfp
from .compress import compress
from .devicesim import Device, EventType
from .fletcher import BENCH_SEED, BENCH_SIZE, bench_input, fletcher32_reference, map_fletcher_input
from .sandbox import PolicyTable
from .verifier import verify_or_raise
from .vm import Status, execute

__all__ = [
    "MCU_REFERENCE",
    "ChecksumMismatch",
    "BenchReport",
    "bench_fletcher32",
    "bench_coap",
    "report",
    "REPORT_COLUMNS",
]

# Cortex-M4 (nRF52840) measurements of the same workloads, shown for context only
MCU_REFERENCE = {
    "fletcher32": {
        "native_c": {"code_size": 74, "time_us": 27},
        "wasm3": {"code_size": 322, "time_us": 980},
        "rbpf": {"code_size": 456, "time_us": 1923},
        "rbpf_instructions_per_second": 1.3e6,
        "input_size": 361,
    },
    "coap_sensor": {"rbpf": {"code_size": 296, "time_us": 94}},
}


class ChecksumMismatch(AssertionError):
    pass


@dataclass(frozen=True)
class BenchReport:
    workload: str
    bytecode_size: int
    compressed_size: int
    instructions_executed: int
    iterations: int
    wall_time: float
    instructions_per_second: float

    @property
    def time_per_run_us(self) -> float:
        return self.wall_time / self.iterations * 1e6 if self.iterations else 0.0

    def as_dict(self) -> dict:
        return asdict(self)


# (attribute, title, width, value format)
REPORT_COLUMNS = (
    ("workload", "workload", 12, "s"),
    ("bytecode_size", "size_B", 7, "d"),
    ("compressed_size", "lzss_B", 7, "d"),
    ("instructions_executed", "insns/run", 10, "d"),
    ("iterations", "runs", 7, "d"),
    ("time_per_run_us", "us/run", 10, ".1f"),
    ("instructions_per_second", "insns/s", 12, ".0f"),
)


def bench_fletcher32(
    size: int = BENCH_SIZE,
    iterations: int = 100,
    seed: int = BENCH_SEED,
    min_instructions: int = 0,
) -> BenchReport:
    """Time the bundled Fletcher-32 program over a fixed-seed buffer.

    Runs ``iterations`` times, or more until ``min_instructions`` have been
    executed in total.
    """
    if size < 2:
        raise ValueError("Fletcher-32 needs at least 2 bytes of input")
    bindings = default_bindings()
    bytecode = programs.bytecode("fletcher32")
    program = verify_or_raise(bytecode, 0, bindings.ids())
    data = bench_input(size, seed)
    expected = fletcher32_reference(data)
    policy = PolicyTable.with_stack()
    ctx = map_fletcher_input(policy, data)

    outcome = execute(program, ctx, policy, bindings)
    if outcome.status is not Status.OK or outcome.return_value != expected:
        raise ChecksumMismatch(
            f"VM returned {outcome.describe()} r0={outcome.return_value:#x}, reference {expected:#010x}"
        )
    per_run = outcome.instructions_executed
    runs = max(iterations, -(-min_instructions // per_run))

    total = 0
    start = time.perf_counter()
    for _ in range(runs):
        outcome = execute(program, ctx, policy, bindings)
        if outcome.return_value != expected:
            raise ChecksumMismatch(f"run returned {outcome.return_value:#x}, reference {expected:#010x}")
        total += outcome.instructions_executed
    elapsed = time.perf_counter() - start

    return BenchReport(
        "fletcher32",
        len(bytecode),
        len(compress(bytecode)),
        per_run,
        runs,
        elapsed,
        total / elapsed if elapsed > 0 else 0.0,
    )


def bench_coap(iterations: int = 100, measurement: SensorMeasurement = SensorMeasurement(1234, -2)) -> BenchReport:
    """Time the sensor-read CoAP handler through the device simulator."""
    bytecode = programs.bytecode("coap_sensor")
    device = Device()
    device.add_sensor("sensor0", measurement)
    device.install(EventType.coap("/sensor"), bytecode)
    want = format_dfp(measurement.value, measurement.scale).encode()
    total = 0
    start = time.perf_counter()
    for _ in range(iterations):
        code, payload, outcome = device.trigger_coap("/sensor")
        if payload != want:
            raise ChecksumMismatch(f"payload {payload!r}, expected {want!r}")
        total += outcome.instructions_executed
    elapsed = time.perf_counter() - start
    return BenchReport(
        "coap_sensor",
        len(bytecode),
        len(compress(bytecode)),
        outcome.instructions_executed,
        iterations,
        elapsed,
        total / elapsed if elapsed > 0 else 0.0,
    )


def report(reports: list[BenchReport], format: str = "text") -> str:
    """Render reports as an aligned text table or a JSON list."""
    if format == "json":
        return json.dumps([r.as_dict() for r in reports], indent=2)
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")
    lines = [" ".join(f"{title:<{w}}" if i == 0 else f"{title:>{w}}" for i, (_, title, w, _) in enumerate(REPORT_COLUMNS))]
    for r in reports:
        cells = []
        for i, (attr, _, w, fmt) in enumerate(REPORT_COLUMNS):
            align = "<" if i == 0 else ">"
            cells.append(f"{getattr(r, attr):{align}{w}{fmt}}")
        lines.append(" ".join(cells))
    return "\n".join(lines)
