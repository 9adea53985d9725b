"""Curriculum scheduling: meta-set experts, difficulty scores, staged training.

The training set is sorted by path length and cut into N meta-sets; an
independent contrastive model (expert) trains on each. A path's difficulty
is the summed cosine agreement between its own expert's representation and
the other experts' representations: high agreement means the path is easy.
Training then proceeds easiest-first through M stages (one epoch each) and
finishes on the full dataset until the objective stops improving.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path as FilePath
from typing import Sequence

import numpy as np

from .contrastive import LabeledItem, TrainConfig, Trainer, TrainLogRow
from .errors import ConfigError, TprlabError
from .path_encoder import EncoderConfig, FrozenTables, build_batch_inputs, forward
from .road_network import RoadNetwork
from .seeding import derive_rng
from .weak_labels import WeakLabeler

PLAN_FILE_HEADER = ["tp_id", "score", "stage"]

VARIANTS = ("wsccl", "wsc", "no_global", "no_local", "no_temporal", "heuristic_cl")


@dataclass(frozen=True)
class CurriculumConfig:
    """Meta-set / stage counts and the final-stage stopping rule."""

    n_meta: int = 10
    m_stages: int = 10
    patience: int = 5
    min_delta: float = 1e-4
    max_epochs: int = 100
    mode: str = "wsccl"  # wsccl | heuristic | no_cl

    def __post_init__(self) -> None:
        if self.n_meta < 1 or self.m_stages < 1:
            raise ConfigError("n_meta and m_stages must be >= 1")
        if self.n_meta != self.m_stages:
            raise ConfigError(f"n_meta must equal m_stages, got {self.n_meta} != {self.m_stages}")
        if self.mode not in ("wsccl", "heuristic", "no_cl"):
            raise ConfigError(f"unknown curriculum mode {self.mode!r}")


@dataclass(frozen=True)
class CurriculumPlan:
    """Difficulty scores plus stage membership (indices into the dataset)."""

    scores: np.ndarray  # (n,) difficulty, higher = easier
    stages: tuple[tuple[int, ...], ...]  # M staged chunks + final full stage


def apply_variant(train_cfg: TrainConfig, cur_cfg: CurriculumConfig, variant: str):
    """(TrainConfig, CurriculumConfig) pair implementing a named ablation."""
    from dataclasses import replace

    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    flags = {
        "wsccl": {},
        "no_global": {"no_global": True},
        "no_local": {"no_local": True},
        "no_temporal": {"no_temporal": True},
        "wsc": {},
        "heuristic_cl": {},
    }[variant]
    mode = {"wsc": "no_cl", "heuristic_cl": "heuristic"}.get(variant, "wsccl")
    return replace(train_cfg, **flags), replace(cur_cfg, mode=mode)


def split_meta_sets(
    net: RoadNetwork, items: Sequence[LabeledItem], ids: Sequence[str], n_meta: int
) -> list[list[int]]:
    """N contiguous chunks of the dataset sorted by path length in meters.

    Ties break on edge count then id, so the split ignores dataset order.
    Chunk sizes differ by at most one, longer chunks first.
    """
    if n_meta < 1:
        raise ConfigError(f"n_meta must be >= 1, got {n_meta}")
    if len(items) < n_meta:
        raise ConfigError(f"{len(items)} items cannot fill {n_meta} meta-sets")
    if len(ids) != len(items):
        raise ValueError("ids and items must align")
    order = sorted(
        range(len(items)),
        key=lambda i: (
            net.path_length_m(items[i].tp.path),
            len(items[i].tp.path),
            ids[i],
            i,
        ),
    )
    return [chunk.tolist() for chunk in np.array_split(np.array(order), n_meta)]


def train_experts(
    net: RoadNetwork,
    frozen: FrozenTables,
    enc_cfg: EncoderConfig,
    items: Sequence[LabeledItem],
    split: Sequence[Sequence[int]],
    cfg: TrainConfig,
    labeler: WeakLabeler,
) -> list[dict[str, np.ndarray]]:
    """One independently trained parameter set per meta-set."""
    pool = []
    for k, subset in enumerate(split):
        trainer = Trainer(
            net,
            frozen,
            enc_cfg,
            [items[i] for i in subset],
            cfg,
            labeler,
            stream=("train", "expert", k),
        )
        try:
            for _ in range(cfg.epochs):
                trainer.run_epoch()
        except TprlabError as exc:
            raise type(exc)(f"expert {k}: {exc}") from exc
        pool.append(trainer.params)
    return pool


def _encode_all(
    net: RoadNetwork,
    frozen: FrozenTables,
    enc_cfg: EncoderConfig,
    params: dict[str, np.ndarray],
    items: Sequence[LabeledItem],
    batch_size: int = 256,
) -> np.ndarray:
    outs = []
    for lo in range(0, len(items), batch_size):
        chunk = [it.tp for it in items[lo : lo + batch_size]]
        outs.append(forward(params, frozen, enc_cfg, build_batch_inputs(net, chunk)).tpr)
    return np.concatenate(outs, axis=0)


def scores_from_units(units: np.ndarray, home: np.ndarray) -> np.ndarray:
    """S_i = sum over k != home_i of cos between unit rows units[home_i, i]
    and units[k, i]; ``units`` is (n_experts, n_items, dim) row-normalized."""
    n = units.shape[1]
    own = units[home, np.arange(n)]  # (n, h)
    dots = np.einsum("nh,knh->kn", own, units)  # includes the self expert
    return dots.sum(axis=0) - dots[home, np.arange(n)]


def score_dataset(
    net: RoadNetwork,
    frozen: FrozenTables,
    enc_cfg: EncoderConfig,
    items: Sequence[LabeledItem],
    split: Sequence[Sequence[int]],
    pool: Sequence[dict[str, np.ndarray]],
) -> np.ndarray:
    """Difficulty score for every item: sum of cross-expert cosine agreement.

    For an item in meta-set j: S = sum over k != j of cos(expert_j's TPR,
    expert_k's TPR). Higher scores mean the experts agree, i.e. easier.
    """
    n = len(items)
    home = np.full(n, -1, dtype=np.int64)
    for j, subset in enumerate(split):
        home[list(subset)] = j
    if np.any(home < 0):
        raise KeyError("some items belong to no meta-set")

    units = []
    for params in pool:
        tprs = _encode_all(net, frozen, enc_cfg, params, items)
        units.append(tprs / np.maximum(np.linalg.norm(tprs, axis=1, keepdims=True), 1e-12))
    return scores_from_units(np.stack(units), home)


def difficulty_score(
    net: RoadNetwork,
    frozen: FrozenTables,
    enc_cfg: EncoderConfig,
    items: Sequence[LabeledItem],
    split: Sequence[Sequence[int]],
    pool: Sequence[dict[str, np.ndarray]],
    idx: int,
) -> float:
    """Score of a single item (see score_dataset)."""
    if not any(idx in set(subset) for subset in split):
        raise KeyError(f"item {idx} belongs to no meta-set")
    return float(score_dataset(net, frozen, enc_cfg, items, split, pool)[idx])


def heuristic_scores(items: Sequence[LabeledItem]) -> np.ndarray:
    """Shorter paths count as easier: score = -edge_count."""
    return -np.array([len(it.tp.path) for it in items], dtype=np.float64)


def build_plan(
    ids: Sequence[str], scores: np.ndarray, m_stages: int, seed: int
) -> CurriculumPlan:
    """Easiest-first stages of near-equal size plus a final full-data stage."""
    if m_stages < 1:
        raise ConfigError(f"m_stages must be >= 1, got {m_stages}")
    n = len(ids)
    if len(scores) != n:
        raise ValueError("every item needs a score")
    order = sorted(range(n), key=lambda i: (-scores[i], ids[i], i))
    stages = []
    for s, chunk in enumerate(np.array_split(np.array(order), m_stages)):
        rng = derive_rng(seed, "curriculum", "plan", s)
        stages.append(tuple(chunk[rng.permutation(len(chunk))].tolist()))
    final_rng = derive_rng(seed, "curriculum", "plan", "final")
    stages.append(tuple(final_rng.permutation(n).tolist()))
    return CurriculumPlan(scores=np.asarray(scores, dtype=np.float64), stages=tuple(stages))


def write_plan(path: str | FilePath, plan: CurriculumPlan, ids: Sequence[str]) -> None:
    stage_of = {}
    for s, stage in enumerate(plan.stages[:-1], start=1):
        for idx in stage:
            stage_of[idx] = s
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLAN_FILE_HEADER)
        for idx in range(len(ids)):
            writer.writerow([ids[idx], f"{plan.scores[idx]:.10g}", stage_of[idx]])


@dataclass
class CurriculumResult:
    params: dict[str, np.ndarray]
    log: list[TrainLogRow]
    plan: CurriculumPlan | None  # None in no_cl mode


def _run_to_convergence(trainer: Trainer, cur_cfg: CurriculumConfig, budget: int) -> None:
    """Full-data epochs until the objective stalls for `patience` epochs."""
    best = -np.inf
    stale = 0
    for _ in range(budget):
        row = trainer.run_epoch()
        if row.objective > best + cur_cfg.min_delta:
            best = row.objective
            stale = 0
        else:
            stale += 1
            if stale >= cur_cfg.patience:
                break


def run_curriculum(
    net: RoadNetwork,
    frozen: FrozenTables,
    enc_cfg: EncoderConfig,
    items: Sequence[LabeledItem],
    ids: Sequence[str],
    train_cfg: TrainConfig,
    cur_cfg: CurriculumConfig,
    labeler: WeakLabeler,
) -> CurriculumResult:
    """Full training pipeline for one variant.

    wsccl/heuristic: scores -> staged epochs -> full-data convergence run.
    no_cl: plain shuffled training to the same convergence criterion.
    """
    trainer = Trainer(net, frozen, enc_cfg, items, train_cfg, labeler, stream=("train", "main"))
    if cur_cfg.mode == "no_cl":
        _run_to_convergence(trainer, cur_cfg, cur_cfg.max_epochs)
        return CurriculumResult(trainer.params, trainer.log, plan=None)

    if cur_cfg.mode == "heuristic":
        scores = heuristic_scores(items)
    else:
        split = split_meta_sets(net, items, ids, cur_cfg.n_meta)
        pool = train_experts(net, frozen, trainer.enc_cfg, items, split, train_cfg, labeler)
        scores = score_dataset(net, frozen, trainer.enc_cfg, items, split, pool)

    plan = build_plan(ids, scores, cur_cfg.m_stages, train_cfg.seed)
    for stage in plan.stages[:-1]:
        trainer.run_epoch(subset=stage)
    remaining = max(0, cur_cfg.max_epochs - len(plan.stages) + 1)
    _run_to_convergence(trainer, cur_cfg, remaining)
    return CurriculumResult(trainer.params, trainer.log, plan=plan)
