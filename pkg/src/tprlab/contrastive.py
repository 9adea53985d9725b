"""Weakly-supervised contrastive training of path representations.

Two temporal paths are a positive pair iff they traverse the same path and
carry the same weak label; every other batch member is a negative. The
global loss contrasts whole-path representations; the local loss contrasts
each path representation against per-edge representations sampled from its
positive and negative paths. Both are combined by a balance factor and
maximized with an Adam-style optimizer.

The negative edge set deliberately keeps entries whose label equals the
query's: a same-label edge from a different path is still a negative, which
is what the pair rule above implies at edge level.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path as FilePath
from typing import Sequence

import numpy as np

from .errors import ConfigError, TrainingDiverged
from .path_encoder import (
    EncoderConfig,
    FrozenTables,
    backward,
    build_batch_inputs,
    clip_global_norm,
    forward,
    init_params,
)
from .road_network import RoadNetwork, TemporalPath
from .seeding import derive_rng
from .weak_labels import WeakLabeler

TRAINING_LOG_HEADER = ["epoch", "objective", "global_term", "local_term", "wallclock_s"]


@dataclass(frozen=True)
class LabeledItem:
    """A temporal path with its weak label."""

    tp: TemporalPath
    label: int


@dataclass(frozen=True)
class TrainConfig:
    """Contrastive training hyperparameters and ablation switches."""

    lam: float = 0.8  # weight of the global term
    lr: float = 3e-4
    batch: int = 32
    epochs: int = 5
    seed: int = 0
    k_edges: int = 1
    temperature: float = 1.0
    clip_norm: float = 5.0
    no_global: bool = False
    no_local: bool = False
    no_temporal: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must be in [0, 1], got {self.lam}")
        if self.batch % 2 or self.batch < 4:
            raise ConfigError(f"batch must be even and >= 4, got {self.batch}")
        if self.no_global and self.no_local:
            raise ConfigError("no_global and no_local cannot both be set")

    @property
    def effective_lam(self) -> float:
        if self.no_global:
            return 0.0
        if self.no_local:
            return 1.0
        return self.lam


@dataclass(frozen=True)
class Batch:
    """Batch items with per-query positive/negative index sets."""

    items: tuple[LabeledItem, ...]
    positives: tuple[tuple[int, ...], ...]
    negatives: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class EdgeRef:
    """One sampled edge: where its representation lives plus its provenance."""

    item_idx: int  # batch item the edge was sampled from
    position: int  # index within that item's edge sequence
    edge_id: int
    label: int


@dataclass(frozen=True)
class EdgeSampleSets:
    pn: tuple[EdgeRef, ...]  # edges from positive paths
    nn: tuple[EdgeRef, ...]  # edges from negative paths


def classify_pair(a: LabeledItem, b: LabeledItem) -> bool:
    """True iff the pair is positive: same edge sequence, same weak label."""
    return a.tp.path.edges == b.tp.path.edges and a.label == b.label


def resample_departure(
    departure: datetime,
    label: int,
    labeler: WeakLabeler,
    rng: np.random.Generator,
    max_tries: int = 500,
) -> datetime:
    """A different departure in the same week that carries the same label."""
    monday = (departure - timedelta(days=departure.weekday())).replace(
        hour=0, minute=0, second=0, microsecond=0
    )
    for _ in range(max_tries):
        day = int(rng.integers(7))
        minute = int(rng.integers(24 * 60))
        candidate = monday + timedelta(days=day, minutes=minute)
        if candidate != departure and labeler(candidate) == label:
            return candidate
    raise ConfigError(f"no alternative departure with label {label} found")


def group_dataset(items: Sequence[LabeledItem]) -> dict[tuple, list[int]]:
    """Indices grouped by (edge sequence, label), insertion-ordered."""
    groups: dict[tuple, list[int]] = {}
    for idx, item in enumerate(items):
        groups.setdefault((item.tp.path.edges, item.label), []).append(idx)
    return groups


def make_batch(
    items: Sequence[LabeledItem],
    cfg: TrainConfig,
    labeler: WeakLabeler,
    rng: np.random.Generator,
    groups: dict[tuple, list[int]] | None = None,
) -> Batch:
    """B/2 distinct (path, label) groups, two instances each.

    Groups holding a single stored instance get a synthetic twin: the same
    path re-departed at another time with the same weak label, so every
    query is guaranteed at least one positive.
    """
    if groups is None:
        groups = group_dataset(items)
    half = cfg.batch // 2
    if len(groups) < half:
        raise ConfigError(f"need >= {half} (path, label) groups, dataset has {len(groups)}")
    keys = list(groups.keys())
    chosen = rng.choice(len(keys), size=half, replace=False)

    batch_items: list[LabeledItem] = []
    for key_idx in chosen:
        members = groups[keys[int(key_idx)]]
        if len(members) >= 2:
            pick = rng.choice(len(members), size=2, replace=False)
            pair = (items[members[int(pick[0])]], items[members[int(pick[1])]])
        else:
            first = items[members[0]]
            twin_dep = resample_departure(first.tp.departure, first.label, labeler, rng)
            pair = (first, LabeledItem(replace(first.tp, departure=twin_dep), first.label))
        batch_items.extend(pair)

    positives, negatives = [], []
    for i, a in enumerate(batch_items):
        pos = tuple(j for j, b in enumerate(batch_items) if j != i and classify_pair(a, b))
        neg = tuple(j for j in range(len(batch_items)) if j != i and j not in pos)
        positives.append(pos)
        negatives.append(neg)
    return Batch(tuple(batch_items), tuple(positives), tuple(negatives))


def sample_edge_sets(
    batch: Batch, query_idx: int, k_edges: int, rng: np.random.Generator
) -> EdgeSampleSets:
    """k edges per positive path and per negative path, with source labels."""

    def draw(item_idx: int) -> list[EdgeRef]:
        item = batch.items[item_idx]
        edges = item.tp.path.edges
        k = min(k_edges, len(edges))
        picks = rng.choice(len(edges), size=k, replace=False)
        return [EdgeRef(item_idx, int(p), edges[int(p)], item.label) for p in picks]

    pn = [ref for j in batch.positives[query_idx] for ref in draw(j)]
    nn = [ref for j in batch.negatives[query_idx] for ref in draw(j)]
    return EdgeSampleSets(tuple(pn), tuple(nn))


def _unit_rows(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(mat, axis=1), 1e-12)
    return mat / norms[:, None], norms


def _lse(values: np.ndarray) -> float:
    m = float(values.max())
    return m + float(np.log(np.sum(np.exp(values - m))))


def global_loss_with_grad(
    batch: Batch, tprs: np.ndarray, temperature: float = 1.0
) -> tuple[float, np.ndarray]:
    """Path-level contrastive objective (to maximize) and its TPR gradient.

    Per query: (1/|S|) * sum over positives of [sim(i,j) - logsumexp over
    negatives of sim(i,k)], cosine similarities divided by the temperature.
    The denominator holds negatives only.
    """
    n = len(batch.items)
    unit, norms = _unit_rows(tprs)
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    sims = cos / temperature

    total = 0.0
    coef = np.zeros((n, n))  # d objective / d sims
    for i in range(n):
        pos, neg = batch.positives[i], batch.negatives[i]
        if not pos:
            raise ConfigError(f"query {i} has no positives")
        if not neg:
            raise ConfigError(f"query {i} has no negatives")
        neg_sims = sims[i, list(neg)]
        lse = _lse(neg_sims)
        total += float(np.mean(sims[i, list(pos)])) - lse
        coef[i, list(pos)] += 1.0 / len(pos)
        coef[i, list(neg)] -= np.exp(neg_sims - lse)

    m = (coef + coef.T) / temperature
    d_tprs = (m @ unit - np.sum(m * cos, axis=1, keepdims=True) * unit) / norms[:, None]
    return total, d_tprs


def global_loss(batch: Batch, tprs: np.ndarray, temperature: float = 1.0) -> float:
    return global_loss_with_grad(batch, tprs, temperature)[0]


def local_loss_with_grad(
    batch: Batch,
    tprs: np.ndarray,
    sters: np.ndarray,
    sets: Sequence[EdgeSampleSets],
    temperature: float = 1.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Path-vs-edge contrastive objective (to maximize) plus gradients.

    Per query: (1/|PN|) * log[sum over PN of exp s(TPR, edge) / sum over NN
    of exp s(TPR, edge)]; edge vectors are the per-edge encoder outputs of
    the paths the edges were sampled from.
    """
    n = len(batch.items)
    d_tprs = np.zeros_like(tprs)
    d_sters = np.zeros_like(sters)
    total = 0.0
    for i in range(n):
        pn, nn = sets[i].pn, sets[i].nn
        if not pn:
            raise ConfigError(f"query {i} has an empty positive edge set")
        if not nn:
            raise ConfigError(f"query {i} has an empty negative edge set")
        refs = list(pn) + list(nn)
        vecs = np.stack([sters[r.position, r.item_idx] for r in refs])
        q = tprs[i]
        qn = max(float(np.linalg.norm(q)), 1e-12)
        vn = np.maximum(np.linalg.norm(vecs, axis=1), 1e-12)
        cos = np.clip((vecs @ q) / (vn * qn), -1.0, 1.0)
        s = cos / temperature

        k = len(pn)
        lse_pn, lse_nn = _lse(s[:k]), _lse(s[k:])
        total += (lse_pn - lse_nn) / k

        coef = np.empty(len(refs))
        coef[:k] = np.exp(s[:k] - lse_pn) / k
        coef[k:] = -np.exp(s[k:] - lse_nn) / k
        coef /= temperature

        unit_q = q / qn
        unit_v = vecs / vn[:, None]
        d_tprs[i] += (coef[:, None] * (unit_v - cos[:, None] * unit_q)).sum(axis=0) / qn
        dv = coef[:, None] * (unit_q - cos[:, None] * unit_v) / vn[:, None]
        for r, g in zip(refs, dv):
            d_sters[r.position, r.item_idx] += g
    return total, d_tprs, d_sters


def local_loss(
    batch: Batch,
    tprs: np.ndarray,
    sters: np.ndarray,
    sets: Sequence[EdgeSampleSets],
    temperature: float = 1.0,
) -> float:
    return local_loss_with_grad(batch, tprs, sters, sets, temperature)[0]


def joint_objective(global_term: float, local_term: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lam must be in [0, 1], got {lam}")
    return lam * global_term + (1.0 - lam) * local_term


@dataclass
class TrainLogRow:
    epoch: int
    objective: float
    global_term: float
    local_term: float
    wallclock_s: float


def write_training_log(path: str | FilePath, rows: Sequence[TrainLogRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAINING_LOG_HEADER)
        for r in rows:
            writer.writerow(
                [r.epoch, f"{r.objective:.10g}", f"{r.global_term:.10g}", f"{r.local_term:.10g}", f"{r.wallclock_s:.3f}"]
            )


class Trainer:
    """Mini-batch ascent on the joint objective with persistent Adam state.

    Curriculum schedules drive this directly: each ``run_epoch`` call may
    restrict sampling to a subset of the dataset while optimizer state and
    parameters carry over.
    """

    ADAM_BETAS = (0.9, 0.999)
    ADAM_EPS = 1e-8

    def __init__(
        self,
        net: RoadNetwork,
        frozen: FrozenTables,
        enc_cfg: EncoderConfig,
        items: Sequence[LabeledItem],
        cfg: TrainConfig,
        labeler: WeakLabeler,
        stream: tuple = ("train", "main"),
        init: dict[str, np.ndarray] | None = None,
    ) -> None:
        if not items:
            raise ConfigError("empty training dataset")
        self.net = net
        self.frozen = frozen
        self.enc_cfg = replace(enc_cfg, use_temporal=not cfg.no_temporal)
        self.items = list(items)
        self.cfg = cfg
        self.labeler = labeler
        if init is not None:
            self.params = {k: v.copy() for k, v in init.items()}
        else:
            self.params = init_params(self.enc_cfg, net, derive_rng(cfg.seed, *stream, "init"))
        self.batch_rng = derive_rng(cfg.seed, *stream, "batches")
        self.edge_rng = derive_rng(cfg.seed, *stream, "edges")
        self._m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._t = 0
        self.epoch = 0
        self.log: list[TrainLogRow] = []

    def _adam_step(self, grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.ADAM_BETAS
        self._t += 1
        bias1 = 1.0 - b1**self._t
        bias2 = 1.0 - b2**self._t
        for key, g in grads.items():
            m = self._m[key]
            v = self._v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.params[key] += self.cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + self.ADAM_EPS)

    def _train_batch(self, batch: Batch) -> tuple[float, float, float]:
        inputs = build_batch_inputs(self.net, [item.tp for item in batch.items])
        fwd = forward(self.params, self.frozen, self.enc_cfg, inputs)

        g_val, d_tpr_g = global_loss_with_grad(batch, fwd.tpr, self.cfg.temperature)
        sets = [
            sample_edge_sets(batch, i, self.cfg.k_edges, self.edge_rng)
            for i in range(len(batch.items))
        ]
        l_val, d_tpr_l, d_sters = local_loss_with_grad(
            batch, fwd.tpr, fwd.sters, sets, self.cfg.temperature
        )

        lam = self.cfg.effective_lam
        objective = joint_objective(g_val, l_val, lam)
        if not np.isfinite(objective):
            raise TrainingDiverged(
                f"objective became non-finite at epoch {self.epoch}, step {self._t}"
            )
        d_tpr = lam * d_tpr_g + (1.0 - lam) * d_tpr_l
        grads = backward(self.params, self.enc_cfg, fwd, d_tpr, (1.0 - lam) * d_sters)
        clip_global_norm(grads, self.cfg.clip_norm)
        self._adam_step(grads)  # ascent: Adam applied with +gradient of the objective
        return objective, g_val, l_val

    def run_epoch(self, subset: Sequence[int] | None = None) -> TrainLogRow:
        """One pass of mini-batches over the dataset (or the given indices)."""
        started = time.monotonic()
        indices = list(range(len(self.items))) if subset is None else list(subset)
        if not indices:
            raise ConfigError("empty epoch subset")
        pool = [self.items[i] for i in indices]
        groups = group_dataset(pool)
        n_batches = max(1, len(pool) // self.cfg.batch)
        stats = np.zeros(3)
        for _ in range(n_batches):
            batch = make_batch(pool, self.cfg, self.labeler, self.batch_rng, groups=groups)
            stats += self._train_batch(batch)
        self.epoch += 1
        row = TrainLogRow(
            epoch=self.epoch,
            objective=stats[0] / n_batches,
            global_term=stats[1] / n_batches,
            local_term=stats[2] / n_batches,
            wallclock_s=time.monotonic() - started,
        )
        self.log.append(row)
        return row

    def encode_items(self, items: Sequence[LabeledItem], batch_size: int = 256) -> np.ndarray:
        """TPRs for arbitrary items under the current parameters."""
        outs = []
        for lo in range(0, len(items), batch_size):
            chunk = [item.tp for item in items[lo : lo + batch_size]]
            fwd = forward(self.params, self.frozen, self.enc_cfg, build_batch_inputs(self.net, chunk))
            outs.append(fwd.tpr)
        return np.concatenate(outs, axis=0)


def train(
    net: RoadNetwork,
    frozen: FrozenTables,
    enc_cfg: EncoderConfig,
    items: Sequence[LabeledItem],
    cfg: TrainConfig,
    labeler: WeakLabeler,
    stream: tuple = ("train", "main"),
    init: dict[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], list[TrainLogRow]]:
    """cfg.epochs epochs of contrastive training; zero epochs is a no-op."""
    trainer = Trainer(net, frozen, enc_cfg, items, cfg, labeler, stream=stream, init=init)
    for _ in range(cfg.epochs):
        trainer.run_epoch()
    return trainer.params, trainer.log
