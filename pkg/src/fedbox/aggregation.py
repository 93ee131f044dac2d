"""Weighted federated averaging over filtered parameter subsets.

The server combines client updates as an elementwise normalized weighted
mean: out = sum_i(c_i * x_i) / sum_i(c_i). Coefficients come from the
aggregation plan, never from message metadata, and the summation order is
the plan's client order, so results are bitwise reproducible regardless of
update arrival order.

Filter rules decide which parameters are shared at all. A parameter passes a
rule iff its name starts with one of the include prefixes (an empty include
list means all names), its role is not excluded, and no exclude pattern
occurs in its name. Excluding the ``statistic`` role keeps normalization
running statistics local to each client.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaMismatchError, UnknownClientError, ZeroWeightError
from .params import NamedParameterSet, check_same_schema


@dataclass(frozen=True)
class ClientWeight:
    """One client's contribution coefficient to the weighted mean."""

    client_id: str
    coefficient: float

    def __post_init__(self):
        if self.coefficient < 0 or not np.isfinite(self.coefficient):
            raise ValueError(f"coefficient must be finite and >= 0, got {self.coefficient}")


@dataclass(frozen=True)
class FilterRule:
    """Name/role filter selecting the shared parameter subset."""

    include_prefixes: tuple[str, ...] = ()
    exclude_roles: frozenset[str] = frozenset()
    exclude_patterns: tuple[str, ...] = ()

    def matches(self, name: str, role: str) -> bool:
        if self.include_prefixes and not any(
            name.startswith(p) for p in self.include_prefixes
        ):
            return False
        if role in self.exclude_roles:
            return False
        return not any(pat in name for pat in self.exclude_patterns)


# Shares everything: empty include list, no exclusions.
SHARE_ALL = FilterRule()


@dataclass(frozen=True)
class AggregationPlan:
    """Client coefficients plus the filter defining what is shared.

    ``normalize`` is fixed true: the weighted sum is always divided by the
    sum of the participating coefficients, so coefficients only express
    relative contribution (1:6 behaves like dataset-size proportions).
    """

    weights: tuple[ClientWeight, ...]
    filter: FilterRule = SHARE_ALL
    normalize: bool = field(default=True)

    def __post_init__(self):
        ids = [w.client_id for w in self.weights]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate client ids in plan: {ids}")
        if not any(w.coefficient > 0 for w in self.weights):
            raise ZeroWeightError("at least one coefficient must be positive")
        if not self.normalize:
            raise ValueError("unnormalized aggregation is not supported")

    def coefficient(self, client_id: str) -> float:
        for w in self.weights:
            if w.client_id == client_id:
                return w.coefficient
        raise UnknownClientError(client_id)

    def client_order(self) -> list[str]:
        return [w.client_id for w in self.weights]


def filter_shared(params: NamedParameterSet, rule: FilterRule) -> NamedParameterSet:
    """Subset of ``params`` passing the rule, order preserved."""
    return NamedParameterSet(
        (e.name, e.role, e.array) for e in params if rule.matches(e.name, e.role)
    )


def fedavg(
    updates: list[tuple[str, NamedParameterSet]], plan: AggregationPlan
) -> NamedParameterSet:
    """Elementwise normalized weighted mean of schema-identical client updates.

    Accumulation runs in float64 in the plan's client order and the result is
    cast back to float32, so the output is bitwise deterministic and every
    element stays inside the convex hull of the client elements up to one
    rounding step.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    by_client = {}
    for client_id, params in updates:
        coefficient = plan.coefficient(client_id)  # raises UnknownClientError
        if client_id in by_client:
            raise ValueError(f"duplicate update from client {client_id!r}")
        by_client[client_id] = (coefficient, params)

    ordered = [
        (cid, *by_client[cid]) for cid in plan.client_order() if cid in by_client
    ]
    reference = ordered[0][2]
    for _, _, params in ordered[1:]:
        check_same_schema(reference, params)

    total = sum(c for _, c, _ in ordered)
    if total <= 0:
        raise ZeroWeightError(
            f"participating clients {[cid for cid, _, _ in ordered]} have zero total weight"
        )

    entries_per_client = [list(params) for _, _, params in ordered]
    out = []
    for i, entry in enumerate(reference):
        acc = np.zeros(entry.array.shape, dtype=np.float64)
        for (_, coefficient, _), entries in zip(ordered, entries_per_client):
            acc += coefficient * entries[i].array.astype(np.float64)
        out.append((entry.name, entry.role, (acc / total).astype(np.float32)))
    return NamedParameterSet(out)


def apply_global(
    local: NamedParameterSet, global_shared: NamedParameterSet
) -> NamedParameterSet:
    """Replace the shared entries of ``local`` with the global values.

    Entries absent from ``global_shared`` are returned bitwise unchanged.
    """
    for entry in global_shared:
        if entry.name not in local:
            raise SchemaMismatchError(f"global parameter {entry.name!r} not in local set")
        if local.get(entry.name).shape != entry.array.shape:
            raise SchemaMismatchError(
                f"shape mismatch for {entry.name!r}: "
                f"{entry.array.shape} vs {local.get(entry.name).shape}"
            )
    return local.replace({e.name: e.array for e in global_shared})
