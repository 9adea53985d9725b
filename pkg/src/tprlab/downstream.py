"""Task heads and evaluation metrics for the three path tasks.

Travel time and ranking score are regressions on TPRs; recommendation is a
binary classification. All heads are gradient-boosted trees fit with exact
greedy splits, so results are bit-deterministic: no subsampling, no feature
sampling, first-best tie breaking in argmax order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .road_network import RoadNetwork, TemporalPath

__all__ = [
    "BoostConfig",
    "TreeEnsemble",
    "fit_ensemble",
    "RegressionMetrics",
    "regression_metrics",
    "rank_metrics",
    "RankMetrics",
    "grouped_rank_metrics",
    "RecommendationMetrics",
    "recommendation_metrics",
    "split_indices",
    "featurize_raw",
    "metrics_report",
]

_MODES = ("regression", "classification")


@dataclass(frozen=True)
class BoostConfig:
    """Hyper-parameters for one boosted-tree head."""

    n_rounds: int = 100
    max_depth: int = 3
    shrinkage: float = 0.1

    def __post_init__(self) -> None:
        if self.n_rounds < 0:
            raise ConfigError(f"n_rounds must be >= 0, got {self.n_rounds}")
        if self.max_depth < 1:
            raise ConfigError(f"max_depth must be >= 1, got {self.max_depth}")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ConfigError(f"shrinkage must be in (0, 1], got {self.shrinkage}")


@dataclass
class _Tree:
    """Flat-array regression tree; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(len(x), dtype=np.float64)
        stack = [(0, np.arange(len(x)))]
        while stack:
            node, idx = stack.pop()
            if len(idx) == 0:
                continue
            f = self.feature[node]
            if f < 0:
                out[idx] = self.value[node]
                continue
            go_left = x[idx, f] <= self.threshold[node]
            stack.append((int(self.left[node]), idx[go_left]))
            stack.append((int(self.right[node]), idx[~go_left]))
        return out


def _best_split(x: np.ndarray, g: np.ndarray, h: np.ndarray):
    """(feature, threshold, left_mask) maximizing the Newton gain, or None.

    Gain = G_L^2/H_L + G_R^2/H_R - G^2/H over every (feature, cut) pair;
    with unit hessians this is plain variance reduction on the residuals.
    """
    n, d = x.shape
    if n < 2:
        return None
    order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    gs = np.cumsum(g[order], axis=0)
    hs = np.cumsum(h[order], axis=0)
    g_tot, h_tot = gs[-1], hs[-1]
    gl, hl = gs[:-1], hs[:-1]
    gr, hr = g_tot - gl, h_tot - hl
    gain = (
        gl**2 / np.maximum(hl, 1e-12)
        + gr**2 / np.maximum(hr, 1e-12)
        - g_tot**2 / np.maximum(h_tot, 1e-12)
    )
    gain[xs[1:] == xs[:-1]] = -np.inf
    flat = int(np.argmax(gain))
    row, col = divmod(flat, d)
    if not np.isfinite(gain[row, col]) or gain[row, col] <= 1e-12:
        return None
    threshold = 0.5 * (xs[row, col] + xs[row + 1, col])
    left_mask = x[:, col] <= threshold
    # ties at the threshold can empty one side; reject such splits
    if not left_mask.any() or left_mask.all():
        return None
    return int(col), float(threshold), left_mask


_MAX_LOGIT_STEP = 10.0  # cap per-leaf Newton steps when hessians vanish


def _grow_tree(x: np.ndarray, g: np.ndarray, h: np.ndarray, max_depth: int, newton: bool) -> _Tree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def leaf_value(idx: np.ndarray) -> float:
        v = g[idx].sum() / max(h[idx].sum(), 1e-6)
        if newton:
            v = float(np.clip(v, -_MAX_LOGIT_STEP, _MAX_LOGIT_STEP))
        return float(v)

    def grow(idx: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        split = None if depth >= max_depth else _best_split(x[idx], g[idx], h[idx])
        if split is None:
            value[node] = leaf_value(idx)
            return node
        col, thr, mask = split
        feature[node] = col
        threshold[node] = thr
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(len(x)), 0)
    return _Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64),
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class TreeEnsemble:
    """Additive stump/tree ensemble with a constant base score.

    Regression predicts the raw additive score; classification passes it
    through a logistic link. ``train_losses[r]`` is the training loss after
    round r+1 (MSE for regression, mean log-loss for classification).
    """

    mode: str
    base: float
    trees: list[_Tree]
    cfg: BoostConfig
    train_losses: list[float] = field(default_factory=list)

    def raw_score(self, x: np.ndarray) -> np.ndarray:
        x = _check_features(x)
        score = np.full(len(x), self.base, dtype=np.float64)
        for tree in self.trees:
            score += self.cfg.shrinkage * tree.predict(x)
        return score

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Regression value, or positive-class probability for classifiers."""
        score = self.raw_score(x)
        return _sigmoid(score) if self.mode == "classification" else score

    def predict_label(self, x: np.ndarray) -> np.ndarray:
        if self.mode != "classification":
            raise ConfigError("predict_label only applies to classification heads")
        return (self.predict(x) >= 0.5).astype(np.int64)


def _check_features(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"features must be 2-D (n, d), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ConfigError("features contain non-finite values")
    return x


def fit_ensemble(
    x: np.ndarray, y: np.ndarray, mode: str = "regression", cfg: BoostConfig = BoostConfig()
) -> TreeEnsemble:
    """Least-squares (regression) or logistic-loss (classification) boosting.

    Each round fits an exact-greedy tree to the loss gradients and applies
    shrinkage-scaled Newton leaf values, so the training loss never increases.
    Zero rounds leaves just the base score (mean, or log-odds prior).
    """
    x = _check_features(x)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ConfigError(f"{len(x)} feature rows vs {len(y)} targets")
    if len(x) < 2:
        raise ConfigError(f"need >= 2 examples, got {len(x)}")
    if not np.all(np.isfinite(y)):
        raise ConfigError("targets contain non-finite values")
    if mode not in _MODES:
        raise ConfigError(f"unknown mode {mode!r}, expected one of {_MODES}")

    if mode == "classification":
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ConfigError("classification targets must be 0 or 1")
        p = float(np.clip(y.mean(), 1e-12, 1.0 - 1e-12))
        base = float(np.log(p / (1.0 - p)))
    else:
        base = float(y.mean())

    model = TreeEnsemble(mode=mode, base=base, trees=[], cfg=cfg)
    score = np.full(len(x), base, dtype=np.float64)
    for _ in range(cfg.n_rounds):
        if mode == "classification":
            prob = _sigmoid(score)
            g = y - prob
            h = prob * (1.0 - prob)
        else:
            g = y - score
            h = np.ones_like(y)
        tree = _grow_tree(x, g, h, cfg.max_depth, newton=mode == "classification")
        score += cfg.shrinkage * tree.predict(x)
        model.trees.append(tree)
        if mode == "classification":
            prob = np.clip(_sigmoid(score), 1e-12, 1.0 - 1e-12)
            loss = float(-np.mean(y * np.log(prob) + (1.0 - y) * np.log(1.0 - prob)))
        else:
            loss = float(np.mean((y - score) ** 2))
        model.train_losses.append(loss)
    return model


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class RegressionMetrics:
    """MAE/MARE in natural units; MAPE as a percentage.

    ``n_mape_excluded`` counts zero-truth rows dropped from the MAPE mean.
    """

    mae: float
    mare: float
    mape: float
    n_mape_excluded: int = 0


def regression_metrics(truth: np.ndarray, pred: np.ndarray) -> RegressionMetrics:
    """MAE = mean |x - x̂|; MARE = Σ|x - x̂| / Σ|x|; MAPE = 100 · mean |(x - x̂)/x|."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise ConfigError(f"truth and pred must be equal-length 1-D, got {truth.shape} vs {pred.shape}")
    if len(truth) == 0:
        raise ConfigError("metrics need at least one example")
    abs_err = np.abs(truth - pred)
    mae = float(abs_err.mean())
    denom = float(np.abs(truth).sum())
    if denom == 0.0:
        raise ConfigError("MARE undefined: all truth values are zero")
    mare = float(abs_err.sum() / denom)
    nonzero = truth != 0.0
    excluded = int(len(truth) - nonzero.sum())
    if not nonzero.any():
        raise ConfigError("MAPE undefined: all truth values are zero")
    mape = float(100.0 * np.mean(abs_err[nonzero] / np.abs(truth[nonzero])))
    return RegressionMetrics(mae=mae, mare=mare, mape=mape, n_mape_excluded=excluded)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ascending 1-based ranks; tied values share the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_metrics(truth: np.ndarray, pred: np.ndarray) -> tuple[float, float]:
    """Kendall τ and Spearman ρ for one candidate group.

    τ = (N_con − N_dis) / (n(n−1)/2) with tied pairs counting toward neither;
    ρ = 1 − 6 Σ d_i² / (n(n²−1)) over average-rank differences d.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise ConfigError(f"truth and pred must be equal-length 1-D, got {truth.shape} vs {pred.shape}")
    n = len(truth)
    if n < 2:
        raise ConfigError(f"rank metrics need >= 2 candidates, got {n}")
    st = np.sign(truth[:, None] - truth[None, :])
    sp = np.sign(pred[:, None] - pred[None, :])
    upper = np.triu_indices(n, k=1)
    prod = st[upper] * sp[upper]
    tau = float((np.sum(prod > 0) - np.sum(prod < 0)) / (n * (n - 1) / 2))
    d = _average_ranks(truth) - _average_ranks(pred)
    rho = float(1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1)))
    return tau, rho


@dataclass(frozen=True)
class RankMetrics:
    """Macro-averaged τ/ρ over candidate groups; undersized groups are skipped."""

    tau: float
    rho: float
    n_groups: int
    n_skipped: int


def grouped_rank_metrics(
    truth: np.ndarray, pred: np.ndarray, groups: Sequence
) -> RankMetrics:
    """τ/ρ per origin-destination group, macro-averaged over groups with n >= 2."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    groups = np.asarray(groups)
    if not (len(truth) == len(pred) == len(groups)):
        raise ConfigError("truth, pred and groups must align")
    taus, rhos, skipped = [], [], 0
    for gid in np.unique(groups):
        mask = groups == gid
        if mask.sum() < 2:
            skipped += 1
            continue
        tau, rho = rank_metrics(truth[mask], pred[mask])
        taus.append(tau)
        rhos.append(rho)
    if not taus:
        raise ConfigError("no group has >= 2 candidates")
    return RankMetrics(
        tau=float(np.mean(taus)),
        rho=float(np.mean(rhos)),
        n_groups=len(taus),
        n_skipped=skipped,
    )


@dataclass(frozen=True)
class RecommendationMetrics:
    acc: float
    hr: float


def recommendation_metrics(truth: np.ndarray, pred: np.ndarray) -> RecommendationMetrics:
    """Acc = (TP+TN)/all; HR = TP/(TP+FN). Inputs are 0/1 labels."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape or truth.ndim != 1 or len(truth) == 0:
        raise ConfigError("truth and pred must be equal-length non-empty 1-D")
    for name, arr in (("truth", truth), ("pred", pred)):
        if not np.all((arr == 0) | (arr == 1)):
            raise ConfigError(f"{name} labels must be 0 or 1")
    tp = int(np.sum((truth == 1) & (pred == 1)))
    tn = int(np.sum((truth == 0) & (pred == 0)))
    positives = int(np.sum(truth == 1))
    if positives == 0:
        raise ConfigError("hit rate undefined: no positive examples")
    return RecommendationMetrics(acc=(tp + tn) / len(truth), hr=tp / positives)


# ---------------------------------------------------------------------------
# evaluation plumbing


def split_indices(
    n: int, rng: np.random.Generator, test_fraction: float = 0.2
) -> tuple[np.ndarray, np.ndarray]:
    """(train, test) index arrays: a seeded permutation cut at the test fraction."""
    if n < 2:
        raise ConfigError(f"need >= 2 examples to split, got {n}")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    perm = rng.permutation(n)
    n_test = min(max(int(round(n * test_fraction)), 1), n - 1)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def featurize_raw(net: RoadNetwork, tps: Sequence[TemporalPath]) -> np.ndarray:
    """Mean per-edge descriptor of each path; no learned components.

    Per edge: one-hot road type (UNK slot included), lane count, one-way and
    signal flags, length in meters. Used as the untrained baseline that task
    heads on trained TPRs must beat.
    """
    if not tps:
        raise ConfigError("featurize_raw needs at least one path")
    rt_size = len(net.vocabs["road_type"])
    out = np.zeros((len(tps), rt_size + 4), dtype=np.float64)
    for i, tp in enumerate(tps):
        rows = np.zeros((len(tp.path), rt_size + 4), dtype=np.float64)
        for j, eid in enumerate(tp.path.edges):
            e = net.edge(eid)
            rows[j, net.vocabs["road_type"].lookup(e.road_type)] = 1.0
            rows[j, rt_size:] = (e.num_lanes, float(e.one_way), float(e.traffic_signals), e.length_m)
        out[i] = rows.mean(axis=0)
    return out


def metrics_report(
    tasks: dict[str, dict[str, float]], config_hash: str, seed: int, variant: str | None = None
) -> str:
    """Canonical JSON report: sorted keys, no timestamps, trailing newline."""
    doc = {"config_hash": config_hash, "seed": seed, "tasks": tasks}
    if variant is not None:
        doc["variant"] = variant
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
