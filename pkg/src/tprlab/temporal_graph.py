"""Weekly temporal graph: one node per (weekday, 5-minute slot).

Nodes are laid out day-major: node = day * 288 + slot with Monday = day 0.
Undirected edges connect consecutive slots within a day and the same slot
across adjacent days, including the Sunday to Monday wrap, so the week closes
into a cylinder and every node is reachable from every other.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime

N_DAYS = 7
SLOTS_PER_DAY = 288  # 24h in 5-minute slots
N_TEMPORAL_NODES = N_DAYS * SLOTS_PER_DAY


@dataclass(frozen=True)
class TemporalGraph:
    """Undirected graph over the 2016 week slots."""

    n_nodes: int
    adjacency: tuple[tuple[int, ...], ...]

    @property
    def n_edges(self) -> int:
        return sum(len(nbrs) for nbrs in self.adjacency) // 2


def node_of(day: int, slot: int) -> int:
    """Node id for weekday ``day`` (Monday=0) and slot ``slot``."""
    if not 0 <= day < N_DAYS:
        raise ValueError(f"day must be in [0, {N_DAYS}), got {day}")
    if not 0 <= slot < SLOTS_PER_DAY:
        raise ValueError(f"slot must be in [0, {SLOTS_PER_DAY}), got {slot}")
    return day * SLOTS_PER_DAY + slot


def day_slot_of(node: int) -> tuple[int, int]:
    if not 0 <= node < N_TEMPORAL_NODES:
        raise ValueError(f"node must be in [0, {N_TEMPORAL_NODES}), got {node}")
    return divmod(node, SLOTS_PER_DAY)


def departure_to_node(departure: datetime) -> int:
    """Temporal node for a departure timestamp (Monday=0, floor to 5 min)."""
    slot = (departure.hour * 60 + departure.minute) // 5
    return node_of(departure.weekday(), slot)


def build_temporal_graph() -> TemporalGraph:
    """The fixed week graph: slot chains within days, same-slot links across days."""
    neighbors: list[set[int]] = [set() for _ in range(N_TEMPORAL_NODES)]

    def link(a: int, b: int) -> None:
        neighbors[a].add(b)
        neighbors[b].add(a)

    for day in range(N_DAYS):
        for slot in range(SLOTS_PER_DAY - 1):
            link(node_of(day, slot), node_of(day, slot + 1))
    for day in range(N_DAYS - 1):
        for slot in range(SLOTS_PER_DAY):
            link(node_of(day, slot), node_of(day + 1, slot))
    for slot in range(SLOTS_PER_DAY):
        link(node_of(N_DAYS - 1, slot), node_of(0, slot))

    return TemporalGraph(
        n_nodes=N_TEMPORAL_NODES,
        adjacency=tuple(tuple(sorted(nbrs)) for nbrs in neighbors),
    )
