"""``rbpf`` command-line front end.

Exit status: 0 success, 1 verification or validation failure, 2 runtime
fault, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import bench, isa
from .asm import AsmError, assemble
from .bindings import Invocation, SensorMeasurement, default_bindings
from .compress import (
    DEFAULT_LOOKAHEAD_BITS,
    DEFAULT_WINDOW_BITS,
    CompressedScript,
    FormatError,
    ParameterError,
    compress,
    decompress,
    is_compressed,
)
from .devicesim import Device, EventType, InstallError, NoApplicationInstalled
from .sandbox import AccessFlags, PolicyError, PolicyTable
from .store import KeyValueStore, Namespace
from .verifier import VerifierReport, verify
from .vm import DEFAULT_FUEL, Status, execute, run_stats

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAULT = 2
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_program(path: str) -> bytes:
    """Raw bytecode, an RBF1 container, or assembly text (``.asm``/``.s``)."""
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    if p.suffix in (".asm", ".s"):
        return assemble(data.decode())
    if is_compressed(data):
        return decompress(data)
    return data


def _load_store(path: str | None) -> KeyValueStore:
    if path and Path(path).exists():
        return KeyValueStore.from_json(Path(path).read_text())
    return KeyValueStore()


def _save_store(store: KeyValueStore, path: str | None) -> None:
    if path:
        Path(path).write_text(store.to_json())


def _parse_region(desc: str, policy: PolicyTable):
    parts = desc.split(":")
    if len(parts) not in (3, 4):
        raise UsageError(f"bad region {desc!r}, expected label:size:r|w|rw[:hexfile]")
    label, size_text, perm = parts[:3]
    try:
        size = int(size_text, 0)
        flags = AccessFlags.parse(perm)
    except (ValueError, PolicyError) as exc:
        raise UsageError(f"bad region {desc!r}: {exc}") from None
    buffer = bytearray(size)
    if len(parts) == 4:
        try:
            text = Path(parts[3]).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read {parts[3]}: {exc.strerror}") from None
        try:
            init = bytes.fromhex("".join(text.split()))
        except ValueError:
            raise UsageError(f"{parts[3]} does not contain hex data") from None
        if len(init) > size:
            raise UsageError(f"{parts[3]} holds {len(init)} bytes, region {label} has {size}")
        buffer[: len(init)] = init
    try:
        return policy.map(label, buffer, flags)
    except PolicyError as exc:
        raise UsageError(str(exc)) from None


def _print_report(report: VerifierReport) -> None:
    for line in report.violations:
        print(line)


# --- commands --------------------------------------------------------------


def cmd_asm(args) -> int:
    source = Path(args.source).read_text()
    try:
        code = assemble(source)
    except AsmError as exc:
        print(f"{args.source}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = args.output or str(Path(args.source).with_suffix(".bin"))
    Path(out).write_bytes(code)
    print(f"{out}: {len(code)} bytes, {len(code) // 8} slots")
    return EXIT_OK


def cmd_disasm(args) -> int:
    data = _read_program(args.program)
    try:
        lines = isa.disassemble(data, default_bindings().id_names())
    except isa.DecodeError as exc:
        print(f"{args.program}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print("\n".join(lines))
    return EXIT_OK


def cmd_verify(args) -> int:
    data = _read_program(args.program)
    result = verify(data, args.script_id, default_bindings().ids())
    if isinstance(result, VerifierReport):
        _print_report(result)
        return EXIT_INVALID
    print(f"{args.program}: ok, {result.slot_count} slots")
    return EXIT_OK


def cmd_run(args) -> int:
    data = _read_program(args.program)
    bindings = default_bindings()
    program = verify(data, args.script_id, bindings.ids())
    if isinstance(program, VerifierReport):
        _print_report(program)
        return EXIT_INVALID
    policy = PolicyTable.with_stack()
    for desc in args.region:
        _parse_region(desc, policy)
    arg = 0
    if args.arg:
        try:
            arg = policy.find(args.arg).base
        except KeyError:
            raise UsageError(f"--arg names unknown region {args.arg!r}") from None
    store = _load_store(args.state)
    invocation = Invocation(policy=policy, script_id=args.script_id, store=store)
    start = time.perf_counter()
    outcome = execute(program, arg, policy, bindings, args.fuel, invocation=invocation)
    elapsed = time.perf_counter() - start
    _save_store(store, args.state)

    if args.json:
        stats = run_stats(outcome, elapsed)
        print(
            json.dumps(
                {
                    "r0": outcome.return_value,
                    "status": outcome.status.value,
                    "fault": outcome.fault.value if outcome.fault else None,
                    "pc": outcome.pc,
                    "insns": outcome.instructions_executed,
                    "host_calls": outcome.host_calls,
                    "time_us": round(elapsed * 1e6, 1),
                    "instructions_per_second": stats.instructions_per_second,
                }
            )
        )
    else:
        print(
            f"r0={outcome.return_value} status={outcome.describe()} "
            f"insns={outcome.instructions_executed} time={elapsed * 1e6:.0f}"
        )
        if outcome.detail:
            print(outcome.detail, file=sys.stderr)
    return EXIT_OK if outcome.status is Status.OK else EXIT_FAULT


def _parse_sensor(desc: str) -> tuple[str, SensorMeasurement]:
    name, _, reading = desc.partition("=")
    try:
        value, scale = (int(x, 0) for x in reading.split(","))
        return name, SensorMeasurement(value, scale)
    except ValueError:
        raise UsageError(f"bad sensor {desc!r}, expected name=value,scale") from None


def cmd_device(args) -> int:
    device = Device(store=_load_store(args.state), fuel=args.fuel)
    for desc in args.sensor:
        device.add_sensor(*_parse_sensor(desc))
    for desc in args.app:
        path, sep, prog = desc.partition("=")
        if not sep:
            raise UsageError(f"bad app {desc!r}, expected <path>=<program>")
        try:
            device.install(EventType.coap(path), _read_program(prog))
        except InstallError as exc:
            print(f"{prog}: rejected", file=sys.stderr)
            _print_report(exc.report)
            return EXIT_INVALID
    method, path = args.trigger
    try:
        code, payload, outcome = device.trigger_coap(path, method)
    except NoApplicationInstalled as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _save_store(device.store, args.state)
    text = payload.decode("ascii", "replace")
    if args.json:
        print(
            json.dumps(
                {
                    "code": code,
                    "code_text": f"{code >> 5}.{code & 0x1F:02d}",
                    "payload_hex": payload.hex(),
                    "payload": text,
                    "r0": outcome.return_value,
                    "status": outcome.status.value,
                    "insns": outcome.instructions_executed,
                    "host_calls": outcome.host_calls,
                }
            )
        )
    else:
        print(f"code={code:#04x} ({code >> 5}.{code & 0x1F:02d})")
        print(f"payload={payload.hex()} {text!r}")
        print(
            f"r0={outcome.return_value} status={outcome.describe()} "
            f"insns={outcome.instructions_executed} host_calls={outcome.host_calls}"
        )
    return EXIT_OK if outcome.status is Status.OK else EXIT_FAULT


def cmd_compress(args) -> int:
    data = _read_program(args.input)
    try:
        cs = compress(data, args.window_bits, args.lookahead_bits)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    out = args.output or str(Path(args.input).with_suffix(".rbf"))
    Path(out).write_bytes(cs.to_bytes())
    saved = 1 - len(cs) / len(data)
    print(f"{out}: {len(data)} -> {len(cs)} bytes ({saved:.1%} smaller)")
    return EXIT_OK


def cmd_decompress(args) -> int:
    try:
        data = decompress(CompressedScript.from_bytes(Path(args.input).read_bytes()))
    except FormatError as exc:
        print(f"{args.input}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = args.output or str(Path(args.input).with_suffix(".bin"))
    Path(out).write_bytes(data)
    print(f"{out}: {len(data)} bytes")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        reports = [bench.bench_fletcher32(args.size, args.iterations, args.seed, args.min_instructions)]
        if not args.fletcher_only:
            reports.append(bench.bench_coap(args.iterations))
    except bench.ChecksumMismatch as exc:
        print(f"checksum mismatch, no report: {exc}", file=sys.stderr)
        return EXIT_FAULT
    print(bench.report(reports, "json" if args.json else "text"))
    if not args.json:
        ref = bench.MCU_REFERENCE["fletcher32"]
        print(
            f"# Cortex-M4 reference, fletcher32 over {ref['input_size']} B: native {ref['native_c']['code_size']} B / "
            f"{ref['native_c']['time_us']} us, interpreted {ref['rbpf']['code_size']} B / {ref['rbpf']['time_us']} us, "
            f"{ref['rbpf_instructions_per_second'] / 1e6:.1f}M instr/s"
        )
    if args.figure:
        from .plotting import render_bench_figure

        path = render_bench_figure(reports, args.figure)
        print(f"# figure written to {path}", file=sys.stderr)
    return EXIT_OK


def cmd_store(args) -> int:
    store = _load_store(args.state)
    if args.store_cmd == "dump":
        ns = Namespace.local(args.script) if args.script is not None else None
        for n, key, value in store.items(ns):
            print(f"{n} {key} {value}")
        return EXIT_OK
    try:
        ns = Namespace.parse(args.namespace)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.store_cmd == "get":
        present, value = store.get(ns, args.key)
        print(value if present else "absent")
        return EXIT_OK if present else EXIT_INVALID
    store.put(ns, args.key, args.value)
    _save_store(store, args.state)
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _int(text: str) -> int:
    return int(text, 0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rbpf", description="Sandboxed eBPF-compatible VM for small IoT scripts")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("asm", help="assemble a source file to bytecode")
    p.add_argument("source")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_asm)

    p = sub.add_parser("disasm", help="disassemble bytecode")
    p.add_argument("program")
    p.set_defaults(func=cmd_disasm)

    p = sub.add_parser("verify", help="run the preflight verifier")
    p.add_argument("program")
    p.add_argument("--script-id", type=_int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("run", help="verify and execute a program")
    p.add_argument("program")
    p.add_argument("--fuel", type=_int, default=DEFAULT_FUEL)
    p.add_argument("--region", action="append", default=[], metavar="LABEL:SIZE:PERM[:HEXFILE]")
    p.add_argument("--arg", metavar="LABEL", help="pass this region's base address in r1")
    p.add_argument("--script-id", type=_int, default=0)
    p.add_argument("--state", metavar="FILE", help="JSON file holding the key-value store")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("device", help="simulated device")
    dsub = p.add_subparsers(dest="device_cmd", required=True, parser_class=_Parser)
    d = dsub.add_parser("run", help="install apps and trigger a CoAP request")
    d.add_argument("--app", action="append", default=[], metavar="PATH=PROGRAM")
    d.add_argument("--sensor", action="append", default=[], metavar="NAME=VALUE,SCALE")
    d.add_argument("--trigger", nargs=2, metavar=("METHOD", "PATH"), required=True)
    d.add_argument("--fuel", type=_int, default=DEFAULT_FUEL)
    d.add_argument("--state", metavar="FILE")
    d.add_argument("--json", action="store_true")
    d.set_defaults(func=cmd_device)

    for name, func, help_ in (
        ("compress", cmd_compress, "LZSS-compress a script"),
        ("decompress", cmd_decompress, "unpack an RBF1 container"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("input")
        p.add_argument("-o", "--output")
        if name == "compress":
            p.add_argument("--window-bits", type=int, default=DEFAULT_WINDOW_BITS)
            p.add_argument("--lookahead-bits", type=int, default=DEFAULT_LOOKAHEAD_BITS)
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="Fletcher-32 and CoAP handler benchmarks")
    p.add_argument("--size", type=_int, default=bench.BENCH_SIZE)
    p.add_argument("--iterations", type=_int, default=100)
    p.add_argument("--seed", type=_int, default=bench.BENCH_SEED)
    p.add_argument("--min-instructions", type=_int, default=0)
    p.add_argument("--fletcher-only", action="store_true")
    p.add_argument("--json", action="store_true")
    p.add_argument("--figure", metavar="PNG", help="also render a figure to this file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("store", help="inspect or edit the key-value store")
    p.add_argument("--state", metavar="FILE", help="JSON file holding the store")
    ssub = p.add_subparsers(dest="store_cmd", required=True, parser_class=_Parser)
    s = ssub.add_parser("dump")
    s.add_argument("--script", type=_int)
    s = ssub.add_parser("get")
    s.add_argument("namespace", help="'global' or 'local:<script id>'")
    s.add_argument("key", type=_int)
    s = ssub.add_parser("set")
    s.add_argument("namespace")
    s.add_argument("key", type=_int)
    s.add_argument("value", type=_int)
    p.set_defaults(func=cmd_store)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rbpf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AsmError, FormatError) as exc:
        print(f"rbpf: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
