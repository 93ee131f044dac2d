"""Named parameter sets: the unit of exchange between server and clients.

A parameter set is an ordered collection of (name, role, float32 tensor)
entries. Order is insertion order and is part of the contract: every client
holding the same architecture iterates entries in the same order. Entries are
immutable after construction, so sets can be shared across threads freely.

Roles distinguish gradient-trained tensors (``trainable``) from running
statistics accumulated by normalization layers (``statistic``); aggregation
filter rules can exclude the latter without relying on naming conventions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import SchemaMismatchError

ROLE_TRAINABLE = "trainable"
ROLE_STATISTIC = "statistic"
_ROLES = (ROLE_TRAINABLE, ROLE_STATISTIC)


def _as_param_array(data) -> np.ndarray:
    """Validate and freeze a tensor: float32, finite, read-only copy."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameter tensors must be finite (no NaN/Inf)")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ParamEntry:
    """One named tensor with its role."""

    name: str
    role: str
    array: np.ndarray

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"unknown role {self.role!r}")


class NamedParameterSet:
    """Ordered, immutable map of tensor name -> float32 array.

    Duplicate names are rejected at construction. Equality is bitwise on both
    schema (names, roles, shapes, order) and data.
    """

    def __init__(self, entries: Iterable[tuple[str, str, np.ndarray]] = ()):
        self._entries: list[ParamEntry] = []
        self._index: dict[str, int] = {}
        for name, role, array in entries:
            if name in self._index:
                raise ValueError(f"duplicate parameter name {name!r}")
            entry = ParamEntry(name, role, _as_param_array(array))
            self._index[name] = len(self._entries)
            self._entries.append(entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def names(self) -> list[str]:
        return [e.name for e in self._entries]

    def entry(self, name: str) -> ParamEntry:
        return self._entries[self._index[name]]

    def get(self, name: str) -> np.ndarray:
        return self.entry(name).array

    def role(self, name: str) -> str:
        return self.entry(name).role

    def schema(self) -> list[tuple[str, str, tuple[int, ...]]]:
        """(name, role, shape) triples, in order."""
        return [(e.name, e.role, e.array.shape) for e in self._entries]

    def replace(self, updates: dict[str, np.ndarray]) -> "NamedParameterSet":
        """New set with the given entries replaced, order and roles preserved."""
        unknown = set(updates) - set(self._index)
        if unknown:
            raise SchemaMismatchError(f"unknown parameter names: {sorted(unknown)}")
        out = []
        for e in self._entries:
            arr = updates.get(e.name, e.array)
            if np.asarray(arr).shape != e.array.shape:
                raise SchemaMismatchError(
                    f"shape mismatch for {e.name!r}: "
                    f"{np.asarray(arr).shape} vs {e.array.shape}"
                )
            out.append((e.name, e.role, arr))
        return NamedParameterSet(out)

    def subset(self, names: Iterable[str]) -> "NamedParameterSet":
        """New set restricted to the given names, preserving this set's order."""
        keep = set(names)
        unknown = keep - set(self._index)
        if unknown:
            raise SchemaMismatchError(f"unknown parameter names: {sorted(unknown)}")
        return NamedParameterSet(
            (e.name, e.role, e.array) for e in self._entries if e.name in keep
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, NamedParameterSet):
            return NotImplemented
        if self.schema() != other.schema():
            return False
        return all(
            a.array.tobytes() == b.array.tobytes()
            for a, b in zip(self._entries, other._entries)
        )

    def __repr__(self) -> str:
        return f"NamedParameterSet({len(self._entries)} entries)"


def check_same_schema(a: NamedParameterSet, b: NamedParameterSet) -> None:
    """Raise SchemaMismatchError unless a and b share names, roles, shapes, order."""
    if a.schema() != b.schema():
        raise SchemaMismatchError(
            f"parameter schemas differ: {a.schema()} vs {b.schema()}"
    )


def diff_names(a: NamedParameterSet, b: NamedParameterSet) -> list[str]:
    """Names whose tensors differ bitwise between two schema-identical sets.

    Comparison is exact (byte-level), so a 1e-7 perturbation of a single
    element counts as a difference. Used to verify that partial sharing
    leaves non-shared parameters untouched.
    """
    check_same_schema(a, b)
    return [
        ea.name
        for ea, eb in zip(a, b)
        if ea.array.tobytes() != eb.array.tobytes()
    ]
