"""Meta-set splitting, expert scoring, plan construction, staged training."""

import csv
from datetime import datetime, timedelta

import numpy as np
import pytest

from tprlab.contrastive import LabeledItem, TrainConfig
from tprlab.curriculum import (
    CurriculumConfig,
    apply_variant,
    build_plan,
    difficulty_score,
    heuristic_scores,
    run_curriculum,
    score_dataset,
    scores_from_units,
    split_meta_sets,
    train_experts,
    write_plan,
)
from tprlab.errors import ConfigError
from tprlab.path_encoder import EncoderConfig, FrozenTables
from tprlab.road_network import Edge, Path, RoadNetwork, TemporalPath
from tprlab.seeding import derive_rng
from tprlab.weak_labels import make_labeler

MONDAY = datetime(2024, 1, 1)
POP = make_labeler("pop")
SMALL_ENC = EncoderConfig(
    d_temporal=8, d_road=4, d_road_type=4, d_lanes=3, d_one_way=2, d_signals=2, d_hidden=6
)


def chain_net(n_edges=10):
    nodes = [f"v{i}" for i in range(n_edges + 1)]
    edges = [
        Edge(i, nodes[i], nodes[i + 1], "primary" if i % 2 else "tertiary", 1 + i % 3, False, bool(i % 2), 40.0 + 7 * i)
        for i in range(n_edges)
    ]
    return RoadNetwork.build(edges)


def item(edges, hours, minutes=0):
    dep = MONDAY + timedelta(hours=hours, minutes=minutes)
    return LabeledItem(TemporalPath(Path(tuple(edges)), dep), POP(dep))


def dataset_of_lengths(net, edge_lists, hours=None):
    hours = hours or [8] * len(edge_lists)
    items = [item(e, h) for e, h in zip(edge_lists, hours)]
    ids = [f"p{i:03d}" for i in range(len(items))]
    return items, ids


def test_split_two_chunks_by_meters():
    net = chain_net()
    # lengths strictly increase with starting index count
    lists = [[0], [0, 1], [0, 1, 2], [3], [3, 4], [3, 4, 5], [6], [6, 7], [6, 7, 8], [9]]
    items, ids = dataset_of_lengths(net, lists)
    split = split_meta_sets(net, items, ids, 2)
    assert len(split) == 2
    assert len(split[0]) == len(split[1]) == 5
    meters = [net.path_length_m(items[i].tp.path) for i in range(len(items))]
    assert max(meters[i] for i in split[0]) <= min(meters[i] for i in split[1])


def test_split_remainder_goes_to_first_chunk():
    net = chain_net()
    lists = [[i % 10] for i in range(11)]
    items, ids = dataset_of_lengths(net, lists)
    split = split_meta_sets(net, items, ids, 2)
    assert [len(c) for c in split] == [6, 5]


def test_split_tie_break_by_id_is_order_insensitive():
    net = chain_net()
    lists = [[3]] * 6  # all identical paths
    items, ids = dataset_of_lengths(net, lists)
    split_a = split_meta_sets(net, items, ids, 3)

    order = [4, 2, 0, 5, 1, 3]
    shuffled_items = [items[i] for i in order]
    shuffled_ids = [ids[i] for i in order]
    split_b = split_meta_sets(net, shuffled_items, shuffled_ids, 3)
    ids_a = [[ids[i] for i in chunk] for chunk in split_a]
    ids_b = [[shuffled_ids[i] for i in chunk] for chunk in split_b]
    assert ids_a == ids_b


def test_split_is_partition():
    net = chain_net()
    lists = [[i % 10, (i + 1) % 9] if i % 2 else [i % 10] for i in range(23)]
    valid = [e for e in lists if len(e) == 1 or e[1] == e[0] + 1]
    items, ids = dataset_of_lengths(net, valid)
    split = split_meta_sets(net, items, ids, 4)
    flat = [i for chunk in split for i in chunk]
    assert sorted(flat) == list(range(len(items)))
    assert max(len(c) for c in split) - min(len(c) for c in split) <= 1


def test_split_errors():
    net = chain_net()
    items, ids = dataset_of_lengths(net, [[0], [1]])
    with pytest.raises(ConfigError):
        split_meta_sets(net, items, ids, 0)
    with pytest.raises(ConfigError):
        split_meta_sets(net, items, ids, 3)


def rich_dataset(net):
    """12 items, several (path, label) groups, varied lengths."""
    lists = [
        [0], [0], [0, 1], [0, 1],
        [2, 3], [2, 3], [2, 3, 4], [2, 3, 4],
        [5, 6, 7], [5, 6, 7], [5, 6, 7, 8], [5, 6, 7, 8],
    ]
    hours = [8, 8.5, 12, 13, 8, 8.5, 17, 18, 12, 14, 8, 8.5]
    items = [item(e, int(h), int(h % 1 * 60)) for e, h in zip(lists, hours)]
    ids = [f"p{i:03d}" for i in range(len(items))]
    return items, ids


def make_frozen(net, seed=0):
    rng = derive_rng(seed, "cfz")
    return FrozenTables(
        temporal=rng.standard_normal((2016, SMALL_ENC.d_temporal)),
        road=rng.standard_normal((len(net.nodes), SMALL_ENC.d_road)),
    )


def test_train_experts_determinism_and_independence():
    net = chain_net()
    items, ids = rich_dataset(net)
    frozen = make_frozen(net)
    cfg = TrainConfig(batch=4, epochs=2, seed=3)
    split = split_meta_sets(net, items, ids, 2)
    pool_a = train_experts(net, frozen, SMALL_ENC, items, split, cfg, POP)
    pool_b = train_experts(net, frozen, SMALL_ENC, items, split, cfg, POP)
    assert len(pool_a) == 2
    for pa, pb in zip(pool_a, pool_b):
        for k in pa:
            np.testing.assert_array_equal(pa[k], pb[k])
    assert any(not np.array_equal(pool_a[0][k], pool_a[1][k]) for k in pool_a[0])


def test_train_experts_single_meta_set():
    net = chain_net()
    items, ids = rich_dataset(net)
    frozen = make_frozen(net)
    cfg = TrainConfig(batch=4, epochs=1, seed=1)
    pool = train_experts(net, frozen, SMALL_ENC, items, [list(range(len(items)))], cfg, POP)
    assert len(pool) == 1


def test_train_experts_propagates_with_index():
    net = chain_net()
    items, ids = rich_dataset(net)
    frozen = make_frozen(net)
    cfg = TrainConfig(batch=32, epochs=1, seed=1)  # 16 groups needed, subsets too small
    split = split_meta_sets(net, items, ids, 2)
    with pytest.raises(ConfigError, match="expert 0"):
        train_experts(net, frozen, SMALL_ENC, items, split, cfg, POP)


def test_scores_identical_experts_give_n_minus_one():
    rng = derive_rng(5, "ui")
    base = rng.standard_normal((7, 4))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    units = np.stack([base, base, base])
    home = np.array([0, 1, 2, 0, 1, 2, 0])
    scores = scores_from_units(units, home)
    np.testing.assert_allclose(scores, np.full(7, 2.0), rtol=1e-9)


def test_scores_orthogonal_experts_give_zero():
    units = np.stack([[[1.0, 0.0]], [[0.0, 1.0]]])  # (2 experts, 1 item, 2 dims)
    scores = scores_from_units(units, np.array([0]))
    assert scores[0] == pytest.approx(0.0, abs=1e-12)


def test_scores_hand_computed_three_experts():
    own = np.array([1.0, 0.0])
    e2 = np.array([0.5, np.sqrt(1 - 0.25)])
    e3 = np.array([-0.25, np.sqrt(1 - 0.0625)])
    units = np.stack([[own], [e2], [e3]])
    scores = scores_from_units(units, np.array([0]))
    assert scores[0] == pytest.approx(0.25, rel=1e-9)


def test_score_dataset_matches_per_item_loop():
    net = chain_net()
    items, ids = rich_dataset(net)
    frozen = make_frozen(net)
    cfg = TrainConfig(batch=4, epochs=1, seed=2)
    split = split_meta_sets(net, items, ids, 2)
    pool = train_experts(net, frozen, SMALL_ENC, items, split, cfg, POP)
    scores = score_dataset(net, frozen, SMALL_ENC, items, split, pool)

    from tprlab.path_encoder import encode

    for idx in range(len(items)):
        j = 0 if idx in split[0] else 1
        own, _ = encode(net, items[idx].tp, pool[j], frozen, SMALL_ENC)
        total = 0.0
        for k in range(2):
            if k == j:
                continue
            other, _ = encode(net, items[idx].tp, pool[k], frozen, SMALL_ENC)
            total += float(own @ other / (np.linalg.norm(own) * np.linalg.norm(other)))
        assert scores[idx] == pytest.approx(total, rel=1e-9, abs=1e-12)
    assert np.all(scores >= -1.0) and np.all(scores <= 1.0)  # N=2 bound


def test_difficulty_score_unknown_item_raises():
    net = chain_net()
    items, ids = rich_dataset(net)
    frozen = make_frozen(net)
    with pytest.raises(KeyError):
        difficulty_score(net, frozen, SMALL_ENC, items, [[0, 1]], [{}], 5)


def test_build_plan_sorts_and_partitions():
    ids = ["a", "b", "c", "d"]
    scores = np.array([3.0, 2.0, 1.0, 0.0])
    plan = build_plan(ids, scores, m_stages=2, seed=0)
    assert len(plan.stages) == 3
    assert set(plan.stages[0]) == {0, 1}
    assert set(plan.stages[1]) == {2, 3}
    assert set(plan.stages[2]) == {0, 1, 2, 3}
    flat = sorted(i for s in plan.stages[:-1] for i in s)
    assert flat == [0, 1, 2, 3]


def test_build_plan_stage_means_non_increasing():
    rng = derive_rng(8, "pm")
    scores = rng.standard_normal(37)
    ids = [f"p{i:03d}" for i in range(37)]
    plan = build_plan(ids, scores, m_stages=5, seed=1)
    means = [np.mean([scores[i] for i in stage]) for stage in plan.stages[:-1]]
    assert all(means[i] >= means[i + 1] - 1e-12 for i in range(len(means) - 1))


def test_build_plan_degenerate_single_stage():
    plan = build_plan(["x", "y"], np.array([1.0, 2.0]), m_stages=1, seed=0)
    assert len(plan.stages) == 2
    assert set(plan.stages[0]) == set(plan.stages[1]) == {0, 1}


def test_build_plan_shuffle_is_seeded():
    ids = [f"p{i:03d}" for i in range(20)]
    scores = np.zeros(20)
    a = build_plan(ids, scores, 4, seed=7)
    b = build_plan(ids, scores, 4, seed=7)
    c = build_plan(ids, scores, 4, seed=8)
    assert a.stages == b.stages
    assert a.stages != c.stages


def test_write_plan_csv(tmp_path):
    ids = ["a", "b", "c", "d"]
    scores = np.array([3.0, 2.0, 1.0, 0.0])
    plan = build_plan(ids, scores, 2, seed=0)
    f = tmp_path / "plan.csv"
    write_plan(f, plan, ids)
    with open(f) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["tp_id", "score", "stage"]
    by_id = {r[0]: (float(r[1]), int(r[2])) for r in rows[1:]}
    assert by_id["a"] == (3.0, 1)
    assert by_id["d"] == (0.0, 2)


def test_heuristic_scores_negated_edge_count():
    net = chain_net()
    items, _ = dataset_of_lengths(net, [[0], [0, 1], [0, 1, 2]])
    np.testing.assert_array_equal(heuristic_scores(items), [-1.0, -2.0, -3.0])


def test_apply_variant():
    t = TrainConfig()
    c = CurriculumConfig()
    t2, c2 = apply_variant(t, c, "no_global")
    assert t2.no_global and c2.mode == "wsccl"
    t3, c3 = apply_variant(t, c, "wsc")
    assert c3.mode == "no_cl" and not t3.no_global
    t4, c4 = apply_variant(t, c, "heuristic_cl")
    assert c4.mode == "heuristic"
    t5, c5 = apply_variant(t, c, "no_temporal")
    assert t5.no_temporal
    with pytest.raises(ConfigError):
        apply_variant(t, c, "mystery")


def test_curriculum_config_validation():
    with pytest.raises(ConfigError):
        CurriculumConfig(n_meta=2, m_stages=3)
    with pytest.raises(ConfigError):
        CurriculumConfig(mode="sideways")
    with pytest.raises(ConfigError):
        CurriculumConfig(n_meta=0, m_stages=0)


def run_small(mode, seed=0):
    net = chain_net()
    items, ids = rich_dataset(net)
    frozen = make_frozen(net)
    t_cfg = TrainConfig(batch=4, epochs=1, seed=seed, lr=1e-3)
    c_cfg = CurriculumConfig(n_meta=2, m_stages=2, patience=2, max_epochs=6, mode=mode)
    return run_curriculum(net, frozen, SMALL_ENC, items, ids, t_cfg, c_cfg, POP)


def test_run_curriculum_wsccl_shape():
    result = run_small("wsccl")
    assert result.plan is not None
    assert len(result.plan.stages) == 3
    assert len(result.log) >= 3  # 2 staged epochs + at least one full epoch
    assert all(np.all(np.isfinite(v)) for v in result.params.values())


def test_run_curriculum_heuristic_uses_edge_counts():
    result = run_small("heuristic")
    assert result.plan is not None
    np.testing.assert_array_equal(
        result.plan.scores, heuristic_scores(rich_dataset(chain_net())[0])
    )


def test_run_curriculum_no_cl_has_no_plan():
    result = run_small("no_cl")
    assert result.plan is None
    assert 1 <= len(result.log) <= 6


def test_run_curriculum_deterministic():
    a = run_small("wsccl", seed=4)
    b = run_small("wsccl", seed=4)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
