"""Assembly sources bundled with the package."""

from __future__ import annotations

from importlib import resources

from ..asm import assemble

NAMES = ("fletcher32", "coap_sensor", "counter")


def source(name: str) -> str:
    return resources.files(__name__).joinpath(f"{name}.asm").read_text()


def bytecode(name: str) -> bytes:
    return assemble(source(name))


def corpus() -> dict[str, bytes]:
    return {name: bytecode(name) for name in NAMES}
