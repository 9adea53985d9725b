"""Boosted task heads and the regression / ranking / recommendation metrics."""

import json
from datetime import datetime

import numpy as np
import pytest
import scipy.stats

from tprlab.downstream import (
    BoostConfig,
    featurize_raw,
    fit_ensemble,
    grouped_rank_metrics,
    metrics_report,
    rank_metrics,
    recommendation_metrics,
    regression_metrics,
    split_indices,
    _average_ranks,
)
from tprlab.errors import ConfigError
from tprlab.road_network import Edge, Path, RoadNetwork, TemporalPath
from tprlab.seeding import derive_rng


# --- regression metrics -----------------------------------------------------


def test_regression_identity_is_zero():
    m = regression_metrics([10.0, 20.0, 30.0], [10.0, 20.0, 30.0])
    assert (m.mae, m.mare, m.mape) == (0.0, 0.0, 0.0)


def test_regression_single_example():
    m = regression_metrics([100.0], [150.0])
    assert m.mae == pytest.approx(50.0, rel=1e-9)
    assert m.mare == pytest.approx(0.5, rel=1e-9)
    assert m.mape == pytest.approx(50.0, rel=1e-9)


def test_regression_two_examples():
    m = regression_metrics([10.0, 20.0], [12.0, 16.0])
    assert m.mae == pytest.approx(3.0, rel=1e-9)
    assert m.mare == pytest.approx(0.2, rel=1e-9)
    assert m.mape == pytest.approx(20.0, rel=1e-9)


def test_regression_zero_truth_excluded_from_mape():
    m = regression_metrics([0.0, 10.0], [5.0, 15.0])
    assert m.mae == pytest.approx(5.0)
    assert m.mare == pytest.approx(1.0)
    assert m.mape == pytest.approx(50.0)
    assert m.n_mape_excluded == 1


def test_regression_all_zero_truth_rejected():
    with pytest.raises(ConfigError):
        regression_metrics([0.0, 0.0], [1.0, 2.0])


def test_regression_shape_errors():
    with pytest.raises(ConfigError):
        regression_metrics([1.0], [1.0, 2.0])
    with pytest.raises(ConfigError):
        regression_metrics([], [])


def test_regression_scaling_properties():
    rng = derive_rng(0, "regscale")
    for _ in range(20):
        n = int(rng.integers(1, 30))
        truth = rng.uniform(1.0, 50.0, n)
        pred = truth + rng.normal(0, 5.0, n)
        base = regression_metrics(truth, pred)
        k = 3.7
        scaled = regression_metrics(k * truth, k * pred)
        assert scaled.mae == pytest.approx(k * base.mae, rel=1e-12)
        assert scaled.mare == pytest.approx(base.mare, rel=1e-12)
        assert scaled.mape == pytest.approx(base.mape, rel=1e-12)
        assert base.mae >= 0 and base.mare >= 0 and base.mape >= 0


# --- rank metrics -----------------------------------------------------------


def tau_bruteforce(truth, pred):
    n = len(truth)
    con = dis = 0
    for i in range(n):
        for j in range(i + 1, n):
            s = (truth[i] - truth[j]) * (pred[i] - pred[j])
            if s > 0:
                con += 1
            elif s < 0:
                dis += 1
    return (con - dis) / (n * (n - 1) / 2)


def ranks_bruteforce(v):
    v = np.asarray(v, dtype=np.float64)
    return np.array([1.0 + np.sum(v < x) + (np.sum(v == x) - 1) / 2.0 for x in v])


def rho_bruteforce(truth, pred):
    n = len(truth)
    d = ranks_bruteforce(truth) - ranks_bruteforce(pred)
    return 1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1))


def test_rank_identical_is_perfect():
    tau, rho = rank_metrics([0.9, 0.5, 0.1, 0.3], [0.9, 0.5, 0.1, 0.3])
    assert tau == 1.0 and rho == 1.0


def test_rank_one_swap():
    tau, rho = rank_metrics([1.0, 2.0, 3.0], [1.0, 3.0, 2.0])
    assert tau == pytest.approx(1.0 / 3.0, rel=1e-9)
    assert rho == pytest.approx(0.5, rel=1e-9)


def test_rank_full_reversal():
    tau, rho = rank_metrics([1.0, 2.0, 3.0], [3.0, 2.0, 1.0])
    assert tau == -1.0 and rho == -1.0


def test_rank_constant_prediction():
    tau, rho = rank_metrics([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
    assert tau == 0.0
    assert rho == pytest.approx(0.5)  # pred ranks all 2, d = (-1, 0, 1)


def test_rank_too_small_group():
    with pytest.raises(ConfigError):
        rank_metrics([1.0], [1.0])


def test_rank_matches_bruteforce_with_ties():
    rng = derive_rng(1, "rankbf")
    for case in range(300):
        n = int(rng.integers(2, 21))
        if case % 2:
            truth = rng.integers(0, 6, n).astype(np.float64)
            pred = rng.integers(0, 6, n).astype(np.float64)
        else:
            truth = rng.normal(size=n)
            pred = rng.normal(size=n)
        tau, rho = rank_metrics(truth, pred)
        assert tau == tau_bruteforce(truth, pred)
        assert rho == rho_bruteforce(truth, pred)


def test_average_ranks_match_scipy():
    rng = derive_rng(2, "ranksp")
    for _ in range(50):
        v = rng.integers(0, 5, int(rng.integers(2, 25))).astype(np.float64)
        np.testing.assert_array_equal(_average_ranks(v), scipy.stats.rankdata(v))


def test_grouped_rank_macro_average_and_skip():
    truth = np.array([1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 9.0])
    pred = np.array([1.0, 2.0, 3.0, 3.0, 2.0, 1.0, 4.0])
    groups = np.array([0, 0, 0, 1, 1, 1, 2])
    m = grouped_rank_metrics(truth, pred, groups)
    assert m.tau == pytest.approx(0.0)  # (1 + -1) / 2
    assert m.rho == pytest.approx(0.0)
    assert m.n_groups == 2 and m.n_skipped == 1


def test_grouped_rank_no_valid_groups():
    with pytest.raises(ConfigError):
        grouped_rank_metrics([1.0], [1.0], [0])


# --- recommendation metrics -------------------------------------------------


def test_recommendation_perfect():
    m = recommendation_metrics([1, 0, 1, 0], [1, 0, 1, 0])
    assert m.acc == 1.0 and m.hr == 1.0


def test_recommendation_confusion_counts():
    truth = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
    pred = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0]  # TP=3 FN=1 FP=2 TN=4
    m = recommendation_metrics(truth, pred)
    assert m.acc == pytest.approx(0.7, rel=1e-9)
    assert m.hr == pytest.approx(0.75, rel=1e-9)


def test_recommendation_all_negative_predictions():
    m = recommendation_metrics([1, 0, 1], [0, 0, 0])
    assert m.hr == 0.0
    assert m.acc == pytest.approx(1.0 / 3.0)


def test_recommendation_errors():
    with pytest.raises(ConfigError):
        recommendation_metrics([0, 0], [0, 0])  # no positives
    with pytest.raises(ConfigError):
        recommendation_metrics([1, 2], [1, 0])  # non-binary
    with pytest.raises(ConfigError):
        recommendation_metrics([], [])


def test_recommendation_ranges():
    rng = derive_rng(3, "recrange")
    for _ in range(25):
        n = int(rng.integers(2, 40))
        truth = rng.integers(0, 2, n)
        if truth.sum() == 0:
            truth[0] = 1
        pred = rng.integers(0, 2, n)
        m = recommendation_metrics(truth, pred)
        assert 0.0 <= m.acc <= 1.0 and 0.0 <= m.hr <= 1.0


# --- boosted trees ----------------------------------------------------------


def test_boost_constant_targets_predict_the_mean():
    rng = derive_rng(4, "bconst")
    x = rng.normal(size=(30, 5))
    y = np.full(30, 7.5)
    model = fit_ensemble(x, y, "regression")
    np.testing.assert_array_equal(model.predict(x), y)


def test_boost_zero_rounds_is_base_score():
    rng = derive_rng(5, "bzero")
    x = rng.normal(size=(10, 3))
    y = np.arange(10.0)
    model = fit_ensemble(x, y, "regression", BoostConfig(n_rounds=0))
    np.testing.assert_array_equal(model.predict(x), np.full(10, y.mean()))

    y_bin = np.array([0.0, 1.0, 1.0, 1.0] + [0.0] * 6)
    clf = fit_ensemble(x, y_bin, "classification", BoostConfig(n_rounds=0))
    np.testing.assert_allclose(clf.predict(x), np.full(10, y_bin.mean()), rtol=1e-12)


def test_boost_sign_problem_depth_one():
    rng = derive_rng(6, "bsign")
    x = rng.normal(size=(80, 1))
    x = x[np.abs(x[:, 0]) > 0.05]
    y = (x[:, 0] > 0).astype(np.float64)
    model = fit_ensemble(x, y, "classification", BoostConfig(max_depth=1))
    assert np.array_equal(model.predict_label(x), y)


def test_boost_training_loss_non_increasing():
    rng = derive_rng(7, "bmono")
    x = rng.normal(size=(120, 8))
    y = x @ rng.normal(size=8) + 0.3 * rng.normal(size=120)
    reg = fit_ensemble(x, y, "regression")
    diffs = np.diff(reg.train_losses)
    assert np.all(diffs <= 1e-12)
    assert reg.train_losses[-1] < 0.5 * reg.train_losses[0]

    y_bin = (x[:, 0] + 0.5 * rng.normal(size=120) > 0).astype(np.float64)
    clf = fit_ensemble(x, y_bin, "classification")
    assert np.all(np.diff(clf.train_losses) <= 1e-9)


def test_boost_improves_over_mean_baseline():
    rng = derive_rng(8, "bfit")
    x = rng.normal(size=(150, 4))
    y = 3.0 * x[:, 1] - 2.0 * np.abs(x[:, 2]) + 10.0
    model = fit_ensemble(x, y, "regression")
    mae_model = np.abs(model.predict(x) - y).mean()
    mae_mean = np.abs(y.mean() - y).mean()
    assert mae_model < 0.3 * mae_mean


def test_boost_deterministic():
    rng = derive_rng(9, "bdet")
    x = rng.normal(size=(60, 6))
    y = rng.normal(size=60)
    a = fit_ensemble(x, y, "regression")
    b = fit_ensemble(x, y, "regression")
    np.testing.assert_array_equal(a.predict(x), b.predict(x))
    assert a.train_losses == b.train_losses


def test_boost_input_validation():
    x = np.zeros((2, 3))
    with pytest.raises(ConfigError):
        fit_ensemble(np.zeros((1, 3)), [1.0])
    with pytest.raises(ConfigError):
        fit_ensemble(x, [1.0])
    with pytest.raises(ConfigError):
        fit_ensemble(x, [1.0, 2.0], mode="ranking")
    with pytest.raises(ConfigError):
        fit_ensemble(x, [0.5, 1.0], mode="classification")
    with pytest.raises(ConfigError):
        fit_ensemble(np.array([[np.nan, 0, 0], [0, 0, 0]]), [1.0, 2.0])
    with pytest.raises(ConfigError):
        BoostConfig(shrinkage=0.0)
    with pytest.raises(ConfigError):
        BoostConfig(max_depth=0)
    model = fit_ensemble(x, [1.0, 2.0], "regression")
    with pytest.raises(ConfigError):
        model.predict_label(x)


# --- evaluation plumbing ----------------------------------------------------


def test_split_indices_partition_and_ratio():
    train, test = split_indices(10, derive_rng(0, "split"))
    assert len(test) == 2 and len(train) == 8
    assert sorted(np.concatenate([train, test]).tolist()) == list(range(10))

    train2, test2 = split_indices(10, derive_rng(0, "split"))
    np.testing.assert_array_equal(test, test2)
    np.testing.assert_array_equal(train, train2)
    _, test3 = split_indices(10, derive_rng(1, "split"))
    assert not np.array_equal(test, test3)


def test_split_indices_errors():
    with pytest.raises(ConfigError):
        split_indices(1, derive_rng(0, "s"))
    with pytest.raises(ConfigError):
        split_indices(10, derive_rng(0, "s"), test_fraction=0.0)


def two_edge_net():
    edges = [
        Edge(0, "a", "b", "primary", 2, False, True, 100.0),
        Edge(1, "b", "c", "residential", 1, True, False, 50.0),
    ]
    return RoadNetwork.build(edges)


def test_featurize_raw_single_edge():
    net = two_edge_net()
    tp = TemporalPath(Path((0,)), datetime(2024, 1, 1, 8, 0))
    feats = featurize_raw(net, [tp])
    rt_size = len(net.vocabs["road_type"])
    assert feats.shape == (1, rt_size + 4)
    expected = np.zeros(rt_size + 4)
    expected[net.vocabs["road_type"].lookup("primary")] = 1.0
    expected[rt_size:] = [2.0, 0.0, 1.0, 100.0]
    np.testing.assert_array_equal(feats[0], expected)


def test_featurize_raw_is_edge_mean():
    net = two_edge_net()
    t0 = TemporalPath(Path((0,)), datetime(2024, 1, 1, 8, 0))
    t1 = TemporalPath(Path((1,)), datetime(2024, 1, 1, 8, 0))
    both = TemporalPath(Path((0, 1)), datetime(2024, 1, 1, 8, 0))
    feats = featurize_raw(net, [t0, t1, both])
    np.testing.assert_allclose(feats[2], 0.5 * (feats[0] + feats[1]), rtol=1e-15)


def test_featurize_raw_empty():
    with pytest.raises(ConfigError):
        featurize_raw(two_edge_net(), [])


def test_metrics_report_canonical():
    tasks = {"travel_time": {"mae": 12.5, "mape": 8.0}, "ranking": {"tau": 0.5}}
    a = metrics_report(tasks, "deadbeef", 7)
    reordered = {"ranking": {"tau": 0.5}, "travel_time": {"mape": 8.0, "mae": 12.5}}
    b = metrics_report(reordered, "deadbeef", 7)
    assert a == b
    assert a.endswith("\n")
    doc = json.loads(a)
    assert doc["config_hash"] == "deadbeef" and doc["seed"] == 7
    assert doc["tasks"]["travel_time"]["mae"] == 12.5
