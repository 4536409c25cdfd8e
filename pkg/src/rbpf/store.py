"""In-memory key-value store shared between short-lived invocations.

Values are signed 64-bit integers under unsigned 32-bit keys. There is one
global namespace and one local namespace per script id. All operations take
a single lock, so concurrent VMs and the host see a linearizable store.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from typing import Iterator

__all__ = ["DEFAULT_CAPACITY", "CapacityError", "Namespace", "KeyValueStore"]

DEFAULT_CAPACITY = 64


class CapacityError(RuntimeError):
    pass


@dataclass(frozen=True)
class Namespace:
    script_id: int | None = None

    GLOBAL = None  # replaced below

    @classmethod
    def local(cls, script_id: int) -> "Namespace":
        if not 0 <= script_id <= 0xFFFF_FFFF:
            raise ValueError(f"script id {script_id} is not an unsigned 32-bit value")
        return cls(script_id)

    @property
    def is_global(self) -> bool:
        return self.script_id is None

    def __str__(self) -> str:
        return "global" if self.script_id is None else f"local:{self.script_id}"

    @classmethod
    def parse(cls, text: str) -> "Namespace":
        if text == "global":
            return cls.GLOBAL
        kind, _, sid = text.partition(":")
        if kind != "local" or not sid:
            raise ValueError(f"bad namespace {text!r}, expected 'global' or 'local:<id>'")
        return cls.local(int(sid, 0))


Namespace.GLOBAL = Namespace(None)


def _check_key(key: int) -> None:
    if not 0 <= key <= 0xFFFF_FFFF:
        raise ValueError(f"key {key} is not an unsigned 32-bit value")


def _check_value(value: int) -> None:
    if not -(1 << 63) <= value < (1 << 63):
        raise ValueError(f"value {value} is not a signed 64-bit value")


class KeyValueStore:
    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._global: dict[int, int] = {}
        self._locals: dict[int, dict[int, int]] = {}
        self._lock = threading.Lock()

    def _table(self, ns: Namespace, create: bool) -> dict[int, int] | None:
        if ns.is_global:
            return self._global
        table = self._locals.get(ns.script_id)
        if table is None and create:
            table = self._locals[ns.script_id] = {}
        return table

    def put(self, ns: Namespace, key: int, value: int) -> None:
        _check_key(key)
        _check_value(value)
        with self._lock:
            table = self._table(ns, create=True)
            if key not in table and len(table) >= self.capacity:
                raise CapacityError(f"namespace {ns} is full ({self.capacity} entries)")
            table[key] = value

    def get(self, ns: Namespace, key: int) -> tuple[bool, int]:
        _check_key(key)
        with self._lock:
            table = self._table(ns, create=False)
            if table is None or key not in table:
                return False, 0
            return True, table[key]

    def items(self, ns: Namespace | None = None) -> Iterator[tuple[Namespace, int, int]]:
        """Snapshot of ``(namespace, key, value)``; all namespaces when ``ns`` is None."""
        with self._lock:
            rows = []
            if ns is None or ns.is_global:
                rows += [(Namespace.GLOBAL, k, v) for k, v in self._global.items()]
            for sid, table in self._locals.items():
                if ns is None or ns.script_id == sid:
                    rows += [(Namespace(sid), k, v) for k, v in table.items()]
        return iter(sorted(rows, key=lambda r: (r[0].script_id is not None, r[0].script_id or 0, r[1])))

    def __len__(self) -> int:
        with self._lock:
            return len(self._global) + sum(len(t) for t in self._locals.values())

    def to_json(self) -> str:
        data = {"capacity": self.capacity, "entries": [[str(ns), k, v] for ns, k, v in self.items()]}
        return json.dumps(data, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "KeyValueStore":
        data = json.loads(text)
        store = cls(data.get("capacity", DEFAULT_CAPACITY))
        for ns, key, value in data.get("entries", []):
            store.put(Namespace.parse(ns), key, value)
        return store
