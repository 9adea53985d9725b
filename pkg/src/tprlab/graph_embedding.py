"""Node embeddings for the temporal and road graphs.

Second-order biased random walks (return parameter ``p``, in-out parameter
``q``) feed a skip-gram model trained with negative sampling. Walk
transitions use alias tables for O(1) draws; the skip-gram update loop is
vectorized over pair chunks with duplicate-safe gradient accumulation.

Embedding files are plain text: a ``count dim`` header line, then one
``name v0 v1 ...`` row per node, floats printed with 17 significant digits
so values round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path as FilePath
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import IntegrityError, ParseError
from .road_network import RoadNetwork
from .seeding import derive_rng
from .temporal_graph import TemporalGraph


@dataclass(frozen=True)
class Node2VecConfig:
    """Walk and skip-gram hyperparameters."""

    dim: int = 128
    walks_per_node: int = 10
    walk_length: int = 40
    window: int = 5
    negatives: int = 5
    p: float = 1.0
    q: float = 1.0
    epochs: int = 5
    lr: float = 0.025
    batch_pairs: int = 20000


def build_alias(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Alias tables for a discrete distribution (Walker's method)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("probs must be a nonempty 1-d array")
    if np.any(probs < 0) or probs.sum() <= 0:
        raise ValueError("probs must be nonnegative with positive sum")
    n = probs.size
    scaled = probs * (n / probs.sum())
    accept = np.zeros(n, dtype=np.float64)
    alias = np.zeros(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, l = small.pop(), large.pop()
        accept[s] = scaled[s]
        alias[s] = l
        scaled[l] = scaled[l] - (1.0 - scaled[s])
        (small if scaled[l] < 1.0 else large).append(l)
    for rest in (large, small):
        while rest:
            accept[rest.pop()] = 1.0
    return accept, alias


def alias_draw(accept: np.ndarray, alias: np.ndarray, rng: np.random.Generator) -> int:
    i = int(rng.integers(accept.size))
    return i if rng.random() < accept[i] else int(alias[i])


def _as_csr(adjacency: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    degrees = np.fromiter((len(nbrs) for nbrs in adjacency), dtype=np.int64, count=len(adjacency))
    offsets = np.concatenate([[0], np.cumsum(degrees)])
    targets = np.fromiter(
        (t for nbrs in adjacency for t in nbrs), dtype=np.int64, count=int(offsets[-1])
    )
    return offsets, targets


def _uniform_walks(
    adjacency: Sequence[Sequence[int]], cfg: Node2VecConfig, rng: np.random.Generator
) -> np.ndarray:
    """All walks at once for the unbiased p=q=1 case; -1 pads dead ends."""
    offsets, targets = _as_csr(adjacency)
    degrees = np.diff(offsets)
    n = len(adjacency)
    starts = np.tile(np.arange(n, dtype=np.int64), cfg.walks_per_node)
    walks = np.full((starts.size, cfg.walk_length), -1, dtype=np.int64)
    walks[:, 0] = starts
    current = starts.copy()
    alive = degrees[current] > 0
    for step in range(1, cfg.walk_length):
        if not alive.any():
            break
        cur = current[alive]
        picks = offsets[cur] + (rng.random(cur.size) * degrees[cur]).astype(np.int64)
        nxt = targets[picks]
        current = current.copy()
        current[alive] = nxt
        walks[alive, step] = nxt
        alive = alive & (degrees[current] > 0)
    return walks


def _second_order_tables(
    adjacency: Sequence[Sequence[int]], p: float, q: float
) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
    neighbor_sets = [set(nbrs) for nbrs in adjacency]
    tables: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    for src, nbrs in enumerate(adjacency):
        for dst in nbrs:
            weights = np.empty(len(adjacency[dst]), dtype=np.float64)
            for k, nxt in enumerate(adjacency[dst]):
                if nxt == src:
                    weights[k] = 1.0 / p
                elif nxt in neighbor_sets[src]:
                    weights[k] = 1.0
                else:
                    weights[k] = 1.0 / q
            tables[(src, dst)] = build_alias(weights)
    return tables


def simulate_walks(
    adjacency: Sequence[Sequence[int]], cfg: Node2VecConfig, rng: np.random.Generator
) -> np.ndarray:
    """Walk corpus of shape (n_nodes * walks_per_node, walk_length)."""
    if cfg.p == 1.0 and cfg.q == 1.0:
        return _uniform_walks(adjacency, cfg, rng)
    tables = _second_order_tables(adjacency, cfg.p, cfg.q)
    n = len(adjacency)
    walks = np.full((n * cfg.walks_per_node, cfg.walk_length), -1, dtype=np.int64)
    row = 0
    for _ in range(cfg.walks_per_node):
        for start in range(n):
            walks[row, 0] = start
            prev, cur = -1, start
            for step in range(1, cfg.walk_length):
                nbrs = adjacency[cur]
                if not nbrs:
                    break
                if prev < 0:
                    nxt = nbrs[int(rng.integers(len(nbrs)))]
                else:
                    accept, alias = tables[(prev, cur)]
                    nxt = nbrs[alias_draw(accept, alias, rng)]
                walks[row, step] = nxt
                prev, cur = cur, nxt
            row += 1
    return walks


def _walk_pairs(walks: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """(center, context) pairs within the window, both directions, pads dropped."""
    centers, contexts = [], []
    for delta in range(1, window + 1):
        left = walks[:, :-delta].ravel()
        right = walks[:, delta:].ravel()
        keep = (left >= 0) & (right >= 0)
        centers.append(left[keep])
        contexts.append(right[keep])
        centers.append(right[keep])
        contexts.append(left[keep])
    return (
        np.concatenate(centers).astype(np.int32),
        np.concatenate(contexts).astype(np.int32),
    )


def train_sgns(
    walks: np.ndarray, n_nodes: int, cfg: Node2VecConfig, rng: np.random.Generator
) -> np.ndarray:
    """Skip-gram with negative sampling over a walk corpus.

    Center vectors start at U(-0.5/dim, 0.5/dim), context vectors at zero;
    the learning rate decays linearly over all pair visits. Negatives are
    drawn from the unigram distribution raised to 0.75; draws that collide
    with the center or the true context are masked out of the update.

    Duplicate rows inside a chunk must accumulate, so updates go through
    sparse-matrix products instead of fancy-index writes (which silently
    drop duplicates) or np.add.at (an order of magnitude slower here).
    """
    tokens = walks[walks >= 0]
    if tokens.size == 0:
        raise IntegrityError("empty walk corpus")
    counts = np.bincount(tokens, minlength=n_nodes).astype(np.float64)
    noise = counts**0.75
    noise_cdf = np.cumsum(noise / noise.sum())

    w_in = ((rng.random((n_nodes, cfg.dim)) - 0.5) / cfg.dim).astype(np.float32)
    w_out = np.zeros((n_nodes, cfg.dim), dtype=np.float32)

    centers, contexts = _walk_pairs(walks, cfg.window)
    # Chunked accumulation applies every pair's gradient at the weights from
    # the chunk start. That is only stable while each row collects a bounded
    # number of duplicate contributions, so small vocabularies must use
    # proportionally small chunks or the summed steps overshoot and diverge.
    chunk = int(min(cfg.batch_pairs, max(256, 10 * n_nodes)))
    total = cfg.epochs * centers.size
    done = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(centers.size)
        for lo in range(0, centers.size, chunk):
            sel = order[lo : lo + chunk]
            b = sel.size
            c, o = centers[sel], contexts[sel]
            negs = np.searchsorted(noise_cdf, rng.random((b, cfg.negatives)))
            tgt = np.concatenate([o[:, None].astype(np.int64), negs], axis=1)  # (b, 1+K)
            lr = cfg.lr * max(1.0 - done / total, 1e-4)

            vc = w_in[c]  # (b, d)
            vt = w_out[tgt]  # (b, 1+K, d)
            scores = np.clip(np.einsum("bd,bkd->bk", vc, vt), -60.0, 60.0)
            g = -1.0 / (1.0 + np.exp(-scores))  # label minus sigmoid, negatives part
            g[:, 0] += 1.0  # positive label
            g[:, 1:] *= (negs != c[:, None]) & (negs != o[:, None])
            g *= np.float32(lr)

            grad_c = np.einsum("bk,bkd->bd", g, vt)
            cols = np.arange(b)
            m_in = sp.csr_matrix(
                (np.ones(b, np.float32), (c, cols)), shape=(n_nodes, b)
            )
            w_in += m_in @ grad_c
            m_out = sp.csr_matrix(
                (g.ravel(), (tgt.ravel(), np.repeat(cols, tgt.shape[1]))),
                shape=(n_nodes, b),
            )
            w_out += m_out @ vc
            done += b
    if not np.isfinite(w_in).all():
        raise IntegrityError("skip-gram training diverged: non-finite embedding values")
    return w_in.astype(np.float64)


def node2vec_embed(
    adjacency: Sequence[Sequence[int]], cfg: Node2VecConfig, rng: np.random.Generator
) -> np.ndarray:
    walks = simulate_walks(adjacency, cfg, rng)
    return train_sgns(walks, len(adjacency), cfg, rng)


def temporal_embeddings(
    graph: TemporalGraph, cfg: Node2VecConfig, root_seed: int
) -> np.ndarray:
    """(2016, dim) table indexed by temporal node id."""
    rng = derive_rng(root_seed, "embed", "temporal")
    return node2vec_embed(graph.adjacency, cfg, rng)


def road_graph_adjacency(net: RoadNetwork) -> list[list[int]]:
    """Undirected adjacency over road nodes in ``net.nodes`` order."""
    index = {name: i for i, name in enumerate(net.nodes)}
    nbrs: list[set[int]] = [set() for _ in net.nodes]
    for e in net.edges:
        a, b = index[e.from_node], index[e.to_node]
        if a != b:
            nbrs[a].add(b)
            nbrs[b].add(a)
    return [sorted(s) for s in nbrs]


def road_node_embeddings(
    net: RoadNetwork, cfg: Node2VecConfig, root_seed: int
) -> np.ndarray:
    """(n_road_nodes, dim) table indexed by position in ``net.nodes``."""
    rng = derive_rng(root_seed, "embed", "road")
    return node2vec_embed(road_graph_adjacency(net), cfg, rng)


def default_road_config(cfg: Node2VecConfig | None = None) -> Node2VecConfig:
    """Road-node variant of a temporal config (half the dimension)."""
    base = cfg or Node2VecConfig()
    return replace(base, dim=base.dim // 2)


def save_embeddings(path: str | FilePath, names: Sequence[str], matrix: np.ndarray) -> None:
    if len(names) != matrix.shape[0]:
        raise ValueError(f"{len(names)} names for {matrix.shape[0]} vectors")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for name, row in zip(names, matrix):
            fh.write(name + " " + " ".join(f"{v:.17g}" for v in row) + "\n")


def load_embeddings(path: str | FilePath) -> tuple[list[str], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        line_no = 1
        line = fh.readline()
        while line.startswith("#"):
            line_no += 1
            line = fh.readline()
        header = line.split()
        if len(header) != 2:
            raise ParseError(f"line {line_no}: expected 'count dim' header")
        count, dim = int(header[0]), int(header[1])
        names: list[str] = []
        matrix = np.empty((count, dim), dtype=np.float64)
        for i in range(count):
            parts = fh.readline().split()
            if len(parts) != dim + 1:
                raise ParseError(f"line {line_no + i + 1}: expected name plus {dim} values")
            names.append(parts[0])
            matrix[i] = [float(v) for v in parts[1:]]
    return names, matrix
