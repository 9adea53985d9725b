"""Synthetic grid-city generator: network, temporal paths, targets, TCI.

The congestion model is deliberately simple: every edge travels at a per-road-
type base speed, divided by ``peak_slowdown`` whenever the departure falls in
a weekday peak window. Weak labels therefore carry real signal about travel
time, which is exactly the structure contrastive training is meant to exploit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from itertools import islice
from pathlib import Path as FilePath
from typing import Sequence

import networkx as nx
import numpy as np

from .errors import ConfigError, ParseError
from .fileio import numbered_rows
from .road_network import Edge, Path, RoadNetwork, TemporalPath, write_edge_file, write_path_file
from .seeding import derive_rng
from .temporal_graph import N_TEMPORAL_NODES, SLOTS_PER_DAY
from .weak_labels import (
    AFT_PEAK_WINDOW,
    MOR_PEAK_WINDOW,
    OFF_PEAK,
    pop_label,
    write_tci,
)

__all__ = [
    "SPEED_BASE",
    "SynthConfig",
    "TargetRow",
    "SynthDataset",
    "path_travel_time",
    "tci_table",
    "generate",
    "write_dataset",
    "write_targets",
    "load_targets",
    "TARGETS_FILE_HEADER",
]

# free-flow speed per road type, m/s (~60/50/40/30 km/h)
SPEED_BASE = {
    "primary": 16.7,
    "secondary": 13.9,
    "tertiary": 11.1,
    "residential": 8.3,
}

_ROAD_TYPES = tuple(SPEED_BASE)
_ROAD_TYPE_P = (0.15, 0.25, 0.30, 0.30)
_MAX_LANES = {"primary": 3, "secondary": 2, "tertiary": 2, "residential": 1}

TARGETS_FILE_HEADER = ["path_id", "travel_time_s", "rank_score", "group_id", "chosen"]

_WEEK_START = datetime(2024, 1, 1)  # a Monday


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for one synthetic city + trajectory corpus."""

    grid_w: int = 6
    grid_h: int = 6
    n_paths: int = 2000
    peak_slowdown: float = 2.0
    noise_sigma: float = 0.05
    one_way_frac: float = 0.0
    n_candidates: int = 5  # ranking-group size, chosen path included
    groups_per_od: int = 4  # departures sharing one origin-destination pair
    seed: int = 0

    def __post_init__(self) -> None:
        if self.grid_w < 2 or self.grid_h < 2:
            raise ConfigError(f"grid must be at least 2x2, got {self.grid_w}x{self.grid_h}")
        if self.peak_slowdown < 1.0:
            raise ConfigError(f"peak_slowdown must be >= 1, got {self.peak_slowdown}")
        if self.n_paths < 1:
            raise ConfigError(f"n_paths must be >= 1, got {self.n_paths}")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.one_way_frac < 1.0:
            raise ConfigError(f"one_way_frac must be in [0, 1), got {self.one_way_frac}")
        if self.n_candidates < 2 or self.groups_per_od < 1:
            raise ConfigError("need n_candidates >= 2 and groups_per_od >= 1")


@dataclass(frozen=True)
class TargetRow:
    """One labeled temporal path in the targets table."""

    path_id: str
    travel_time_s: float
    rank_score: float
    group_id: str
    chosen: int


@dataclass
class SynthDataset:
    net: RoadNetwork
    items: list[tuple[str, TemporalPath]]  # aligned with targets
    targets: list[TargetRow]
    tci: np.ndarray = field(repr=False)  # (2016,) congestion levels


def _grid_edges(cfg: SynthConfig, rng: np.random.Generator) -> list[Edge]:
    """Directed edges of a 4-connected grid; both directions of a segment
    share length and features unless the segment is sampled one-way."""

    def node(r: int, c: int) -> str:
        return f"n{r}_{c}"

    edges: list[Edge] = []
    for r in range(cfg.grid_h):
        for c in range(cfg.grid_w):
            for dr, dc in ((0, 1), (1, 0)):
                r2, c2 = r + dr, c + dc
                if r2 >= cfg.grid_h or c2 >= cfg.grid_w:
                    continue
                road_type = str(rng.choice(_ROAD_TYPES, p=_ROAD_TYPE_P))
                lanes = int(rng.integers(1, _MAX_LANES[road_type] + 1))
                signals = bool(rng.random() < 0.3)
                length = round(float(rng.uniform(60.0, 220.0)), 3)
                one_way = bool(rng.random() < cfg.one_way_frac)
                a, b = node(r, c), node(r2, c2)
                if one_way and rng.random() < 0.5:
                    a, b = b, a
                edges.append(Edge(len(edges), a, b, road_type, lanes, one_way, signals, length))
                if not one_way:
                    edges.append(Edge(len(edges), b, a, road_type, lanes, one_way, signals, length))
    return edges


def path_travel_time(net: RoadNetwork, path: Path, departure: datetime, cfg: SynthConfig) -> float:
    """Noise-free ground truth: sum of edge length / speed, where peak-window
    departures divide every speed by ``peak_slowdown``."""
    factor = cfg.peak_slowdown if pop_label(departure) != OFF_PEAK else 1.0
    return sum(
        net.edge(eid).length_m / (SPEED_BASE[net.edge(eid).road_type] / factor)
        for eid in path.edges
    )


def tci_table() -> np.ndarray:
    """Four-level congestion index per temporal node: 3 in weekday peak slots, else 0."""
    table = np.zeros(N_TEMPORAL_NODES, dtype=np.int64)
    for day in range(5):
        for slot in range(SLOTS_PER_DAY):
            minute = slot * 5
            if MOR_PEAK_WINDOW[0] <= minute < MOR_PEAK_WINDOW[1]:
                table[day * SLOTS_PER_DAY + slot] = 3
            elif AFT_PEAK_WINDOW[0] <= minute < AFT_PEAK_WINDOW[1]:
                table[day * SLOTS_PER_DAY + slot] = 3
    return table


def _sample_departure(rng: np.random.Generator) -> datetime:
    """Label-balanced departure: ~30% morning peak, ~30% afternoon peak, ~40% off."""
    kind = int(rng.choice(3, p=(0.3, 0.3, 0.4)))
    if kind == 0:
        day = int(rng.integers(0, 5))
        minute = int(rng.integers(*MOR_PEAK_WINDOW))
    elif kind == 1:
        day = int(rng.integers(0, 5))
        minute = int(rng.integers(*AFT_PEAK_WINDOW))
    else:
        while True:
            day = int(rng.integers(0, 7))
            minute = int(rng.integers(0, 24 * 60))
            dep = _WEEK_START + timedelta(days=day, minutes=minute)
            if pop_label(dep) == OFF_PEAK:
                return dep
    return _WEEK_START + timedelta(days=day, minutes=minute)


def _routing_graph(net: RoadNetwork) -> tuple[nx.DiGraph, dict[tuple[str, str], int]]:
    graph = nx.DiGraph()
    graph.add_nodes_from(net.nodes)
    uv_to_edge: dict[tuple[str, str], int] = {}
    for e in net.edges:
        graph.add_edge(e.from_node, e.to_node, length=e.length_m)
        uv_to_edge[(e.from_node, e.to_node)] = e.id
    return graph, uv_to_edge


def _edge_path(nodes: Sequence[str], uv_to_edge: dict[tuple[str, str], int]) -> Path:
    return Path(tuple(uv_to_edge[(nodes[i], nodes[i + 1])] for i in range(len(nodes) - 1)))


def _eligible_pairs(net: RoadNetwork) -> list[tuple[str, str]]:
    """Ordered node pairs at grid distance >= 2, so candidate paths have detours."""

    def coords(name: str) -> tuple[int, int]:
        r, c = name[1:].split("_")
        return int(r), int(c)

    pairs = []
    for a in net.nodes:
        ra, ca = coords(a)
        for b in net.nodes:
            rb, cb = coords(b)
            if abs(ra - rb) + abs(ca - cb) >= 2:
                pairs.append((a, b))
    return pairs


def _jaccard(a: Path, b: Path) -> float:
    sa, sb = set(a.edges), set(b.edges)
    return len(sa & sb) / len(sa | sb)


def generate(cfg: SynthConfig) -> SynthDataset:
    """The full synthetic corpus: network, grouped temporal paths, targets, TCI.

    Paths come in ranking groups: ``n_candidates`` routes between one node
    pair via Yen's k-shortest-paths, departing together. The shortest route is
    the chosen one (rank score 1); alternatives score by edge-set Jaccard
    overlap with it. Travel times get relative Gaussian noise.
    """
    net = RoadNetwork.build(_grid_edges(cfg, derive_rng(cfg.seed, "synth", "grid")))
    graph, uv_to_edge = _routing_graph(net)

    pairs = _eligible_pairs(net)
    n_groups = max(1, cfg.n_paths // cfg.n_candidates)
    n_od = min(max(1, -(-n_groups // cfg.groups_per_od)), len(pairs))
    od_rng = derive_rng(cfg.seed, "synth", "od")
    od_idx = od_rng.choice(len(pairs), size=n_od, replace=False)

    candidates_by_od: dict[int, list[Path]] = {}
    for oi in od_idx:
        src, dst = pairs[oi]
        try:
            simple = islice(nx.shortest_simple_paths(graph, src, dst, weight="length"), cfg.n_candidates)
            routes = [_edge_path(nodes, uv_to_edge) for nodes in simple]
        except nx.NetworkXNoPath:
            routes = []
        candidates_by_od[int(oi)] = routes

    usable = [oi for oi in od_idx if len(candidates_by_od[int(oi)]) >= 2]
    if not usable:
        raise ConfigError("no reachable node pair produced >= 2 candidate routes")

    dep_rng = derive_rng(cfg.seed, "synth", "departures")
    noise_rng = derive_rng(cfg.seed, "synth", "noise")
    items: list[tuple[str, TemporalPath]] = []
    targets: list[TargetRow] = []
    for g in range(n_groups):
        oi = int(usable[g % len(usable)])
        routes = candidates_by_od[oi]
        departure = _sample_departure(dep_rng)
        group_id = f"g{g:05d}"
        for rank, route in enumerate(routes):
            path_id = f"p{len(items):06d}"
            tp = TemporalPath(route, departure)
            base_tt = path_travel_time(net, route, departure, cfg)
            factor = max(1.0 + cfg.noise_sigma * float(noise_rng.standard_normal()), 0.05)
            score = 1.0 if rank == 0 else _jaccard(route, routes[0])
            items.append((path_id, tp))
            targets.append(
                TargetRow(
                    path_id=path_id,
                    travel_time_s=base_tt * factor,
                    rank_score=score,
                    group_id=group_id,
                    chosen=int(rank == 0),
                )
            )
    return SynthDataset(net=net, items=items, targets=targets, tci=tci_table())


def write_targets(path: str | FilePath, targets: Sequence[TargetRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TARGETS_FILE_HEADER)
        for t in targets:
            writer.writerow(
                [t.path_id, f"{t.travel_time_s:.3f}", f"{t.rank_score:.6f}", t.group_id, t.chosen]
            )


def load_targets(path: str | FilePath) -> list[TargetRow]:
    rows: list[TargetRow] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        data = numbered_rows(csv.reader(fh))
        first = next(data, None)
        if first is None or first[1] != TARGETS_FILE_HEADER:
            raise ParseError(f"bad targets header {first[1] if first else None!r}")
        for line_no, row in data:
            if len(row) != len(TARGETS_FILE_HEADER):
                raise ParseError(f"line {line_no}: expected {len(TARGETS_FILE_HEADER)} fields")
            try:
                rows.append(
                    TargetRow(
                        path_id=row[0],
                        travel_time_s=float(row[1]),
                        rank_score=float(row[2]),
                        group_id=row[3],
                        chosen=int(row[4]),
                    )
                )
            except ValueError as exc:
                raise ParseError(f"line {line_no}: {exc}") from exc
            if rows[-1].chosen not in (0, 1):
                raise ParseError(f"line {line_no}: chosen must be 0 or 1")
            if not 0.0 <= rows[-1].rank_score <= 1.0:
                raise ParseError(f"line {line_no}: rank_score must be in [0, 1]")
    return rows


def write_dataset(ds: SynthDataset, outdir: str | FilePath) -> None:
    """edges.csv / paths.csv / targets.csv / tci.csv under ``outdir``."""
    outdir = FilePath(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_edge_file(outdir / "edges.csv", ds.net.edges)
    write_path_file(outdir / "paths.csv", ds.items)
    write_targets(outdir / "targets.csv", ds.targets)
    write_tci(outdir / "tci.csv", ds.tci)
