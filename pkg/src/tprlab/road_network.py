"""Road network data model: edges with categorical features, paths, temporal paths.

File formats owned by this module:

* edge list (CSV, header required)::

    edge_id,from_node,to_node,road_type,num_lanes,one_way,traffic_signals,length_m

* temporal path file (CSV, header required)::

    path_id,departure_iso8601,edges      # edges joined by ';'
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path as FilePath
from typing import Iterable, Sequence

from .errors import IntegrityError, ParseError
from .fileio import numbered_rows

UNK = 0  # reserved vocabulary index for unseen categorical values

CATEGORICAL_FEATURES = ("road_type", "num_lanes", "one_way", "traffic_signals")

EDGE_FILE_HEADER = [
    "edge_id",
    "from_node",
    "to_node",
    "road_type",
    "num_lanes",
    "one_way",
    "traffic_signals",
    "length_m",
]

PATH_FILE_HEADER = ["path_id", "departure_iso8601", "edges"]


@dataclass(frozen=True)
class Edge:
    """One directed road segment with its categorical features."""

    id: int
    from_node: str
    to_node: str
    road_type: str
    num_lanes: int
    one_way: bool
    traffic_signals: bool
    length_m: float


@dataclass(frozen=True)
class Path:
    """A sequence of adjacent edge ids."""

    edges: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class TemporalPath:
    """A path together with its departure time (naive local wall clock)."""

    path: Path
    departure: datetime


class FeatureVocab:
    """Categorical value -> dense index map; index 0 is reserved for UNK.

    Indices follow first appearance in the edge file, so reloading the same
    file reproduces the same mapping.
    """

    def __init__(self) -> None:
        self._index: dict[str, int] = {}

    def add(self, value: str) -> int:
        if value not in self._index:
            self._index[value] = len(self._index) + 1
        return self._index[value]

    def lookup(self, value: str) -> int:
        return self._index.get(value, UNK)

    def __len__(self) -> int:
        # including the UNK slot
        return len(self._index) + 1

    def values(self) -> list[str]:
        return list(self._index.keys())

    @classmethod
    def from_values(cls, values: Iterable[str]) -> "FeatureVocab":
        vocab = cls()
        for v in values:
            vocab.add(v)
        return vocab


@dataclass
class RoadNetwork:
    """Directed road graph; immutable once built."""

    nodes: tuple[str, ...]
    edges: tuple[Edge, ...]
    adjacency: dict[str, tuple[int, ...]] = field(repr=False)
    vocabs: dict[str, FeatureVocab] = field(repr=False)

    @classmethod
    def build(cls, edges: Sequence[Edge], nodes: Iterable[str] | None = None) -> "RoadNetwork":
        """Assemble and validate a network from edges.

        When ``nodes`` is given, every edge endpoint must be declared in it;
        otherwise the node set is inferred from the endpoints.
        """
        if not edges:
            raise IntegrityError("empty network rejected: no edges")
        by_id = sorted(edges, key=lambda e: e.id)
        ids = [e.id for e in by_id]
        if ids != list(range(len(by_id))):
            raise IntegrityError(f"edge ids must be dense integers [0, {len(by_id)}), got {ids[:5]}...")

        if nodes is None:
            seen: dict[str, None] = {}
            for e in by_id:
                seen.setdefault(e.from_node, None)
                seen.setdefault(e.to_node, None)
            node_tuple = tuple(seen)
        else:
            node_tuple = tuple(dict.fromkeys(nodes))
            declared = set(node_tuple)
            for e in by_id:
                for endpoint in (e.from_node, e.to_node):
                    if endpoint not in declared:
                        raise IntegrityError(f"edge {e.id} references undeclared node {endpoint!r}")

        adjacency: dict[str, list[int]] = {n: [] for n in node_tuple}
        for e in by_id:
            adjacency[e.from_node].append(e.id)

        vocabs = {name: FeatureVocab() for name in CATEGORICAL_FEATURES}
        for e in by_id:
            vocabs["road_type"].add(e.road_type)
            vocabs["num_lanes"].add(str(e.num_lanes))
            vocabs["one_way"].add(str(int(e.one_way)))
            vocabs["traffic_signals"].add(str(int(e.traffic_signals)))

        return cls(
            nodes=node_tuple,
            edges=tuple(by_id),
            adjacency={n: tuple(out) for n, out in adjacency.items()},
            vocabs=vocabs,
        )

    def edge(self, edge_id: int) -> Edge:
        if not 0 <= edge_id < len(self.edges):
            raise KeyError(f"unknown edge id {edge_id}")
        return self.edges[edge_id]

    def feature_indices(self, edge_id: int) -> tuple[int, int, int, int]:
        """Vocabulary indices (RT, NoL, OW, TS) for one edge."""
        e = self.edge(edge_id)
        return (
            self.vocabs["road_type"].lookup(e.road_type),
            self.vocabs["num_lanes"].lookup(str(e.num_lanes)),
            self.vocabs["one_way"].lookup(str(int(e.one_way))),
            self.vocabs["traffic_signals"].lookup(str(int(e.traffic_signals))),
        )

    def path_nodes(self, path: Path) -> list[str]:
        nodes = [self.edge(path.edges[0]).from_node]
        nodes.extend(self.edge(eid).to_node for eid in path.edges)
        return nodes

    def path_length_m(self, path: Path) -> float:
        return sum(self.edge(eid).length_m for eid in path.edges)


def validate_path(net: RoadNetwork, path: Path) -> bool:
    """True iff every consecutive edge pair in ``path`` is adjacent."""
    if not path.edges:
        return False
    prev = net.edge(path.edges[0])
    for eid in path.edges[1:]:
        nxt = net.edge(eid)
        if prev.to_node != nxt.from_node:
            return False
        prev = nxt
    return True


def _parse_bool(raw: str, line_no: int, column: str) -> bool:
    if raw not in ("0", "1"):
        raise ParseError(f"line {line_no}: {column} must be 0 or 1, got {raw!r}")
    return raw == "1"


def load_network(edge_file: str | FilePath, nodes: Iterable[str] | None = None) -> RoadNetwork:
    """Read an edge-list file into a validated RoadNetwork."""
    edges: list[Edge] = []
    with open(edge_file, "r", encoding="utf-8", newline="") as fh:
        rows = numbered_rows(csv.reader(fh))
        first = next(rows, None)
        if first is None:
            raise IntegrityError(f"{edge_file}: empty network rejected (no header)")
        header_no, header = first
        if [h.strip() for h in header] != EDGE_FILE_HEADER:
            raise ParseError(f"line {header_no}: expected header {','.join(EDGE_FILE_HEADER)}")
        for line_no, row in rows:
            if not row:
                continue
            if len(row) != len(EDGE_FILE_HEADER):
                raise ParseError(f"line {line_no}: expected {len(EDGE_FILE_HEADER)} fields, got {len(row)}")
            try:
                edge_id = int(row[0])
                num_lanes = int(row[4])
                length_m = float(row[7])
            except ValueError as exc:
                raise ParseError(f"line {line_no}: {exc}") from exc
            if num_lanes < 1:
                raise ParseError(f"line {line_no}: num_lanes must be >= 1, got {num_lanes}")
            if length_m < 0:
                raise ParseError(f"line {line_no}: length_m must be nonnegative, got {length_m}")
            from_node, to_node = row[1].strip(), row[2].strip()
            if not from_node or not to_node:
                raise ParseError(f"line {line_no}: empty node id")
            edges.append(
                Edge(
                    id=edge_id,
                    from_node=from_node,
                    to_node=to_node,
                    road_type=row[3].strip(),
                    num_lanes=num_lanes,
                    one_way=_parse_bool(row[5].strip(), line_no, "one_way"),
                    traffic_signals=_parse_bool(row[6].strip(), line_no, "traffic_signals"),
                    length_m=length_m,
                )
            )
    if not edges:
        raise IntegrityError(f"{edge_file}: empty network rejected")
    return RoadNetwork.build(edges, nodes=nodes)


def write_edge_file(path: str | FilePath, edges: Sequence[Edge]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EDGE_FILE_HEADER)
        for e in edges:
            writer.writerow(
                [
                    e.id,
                    e.from_node,
                    e.to_node,
                    e.road_type,
                    e.num_lanes,
                    int(e.one_way),
                    int(e.traffic_signals),
                    f"{e.length_m:.3f}",
                ]
            )


def load_temporal_paths(
    path_file: str | FilePath, net: RoadNetwork | None = None
) -> list[tuple[str, TemporalPath]]:
    """Read a temporal path file; validates adjacency when ``net`` is given."""
    out: list[tuple[str, TemporalPath]] = []
    with open(path_file, "r", encoding="utf-8", newline="") as fh:
        rows = numbered_rows(csv.reader(fh))
        first = next(rows, None)
        if first is None or [h.strip() for h in first[1]] != PATH_FILE_HEADER:
            line_no = first[0] if first else 1
            raise ParseError(f"line {line_no}: expected header {','.join(PATH_FILE_HEADER)}")
        for line_no, row in rows:
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"line {line_no}: expected 3 fields, got {len(row)}")
            path_id = row[0].strip()
            try:
                departure = datetime.fromisoformat(row[1].strip())
                edge_ids = tuple(int(tok) for tok in row[2].strip().split(";") if tok != "")
            except ValueError as exc:
                raise ParseError(f"line {line_no}: {exc}") from exc
            if not edge_ids:
                raise ParseError(f"line {line_no}: path {path_id!r} has no edges")
            tp = TemporalPath(path=Path(edges=edge_ids), departure=departure)
            if net is not None and not validate_path(net, tp.path):
                raise IntegrityError(f"line {line_no}: path {path_id!r} is not edge-adjacent")
            out.append((path_id, tp))
    return out


def write_path_file(path: str | FilePath, rows: Sequence[tuple[str, TemporalPath]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PATH_FILE_HEADER)
        for path_id, tp in rows:
            writer.writerow(
                [path_id, tp.departure.isoformat(), ";".join(str(e) for e in tp.path.edges)]
            )
