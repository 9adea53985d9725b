"""Synthetic grid corpus: structure, congestion model, determinism, files."""

from collections import defaultdict
from datetime import datetime, timedelta

import numpy as np
import pytest

from tprlab.errors import ConfigError, ParseError
from tprlab.road_network import load_network, load_temporal_paths, validate_path
from tprlab.synth import (
    SPEED_BASE,
    SynthConfig,
    TargetRow,
    generate,
    load_targets,
    path_travel_time,
    tci_table,
    write_dataset,
    write_targets,
)
from tprlab.weak_labels import OFF_PEAK, load_tci, pop_label

SMALL = SynthConfig(grid_w=3, grid_h=3, n_paths=40, noise_sigma=0.0, seed=5)


def test_grid_3x3_has_24_directed_edges():
    ds = generate(SMALL)
    assert len(ds.net.nodes) == 9
    assert len(ds.net.edges) == 24


def test_bidirectional_edges_share_features():
    ds = generate(SMALL)
    by_pair = {(e.from_node, e.to_node): e for e in ds.net.edges}
    for e in ds.net.edges:
        back = by_pair[(e.to_node, e.from_node)]
        assert back.length_m == e.length_m
        assert back.road_type == e.road_type
        assert back.num_lanes == e.num_lanes


def test_peak_travel_time_is_exact_multiple():
    ds = generate(SMALL)
    path = ds.items[0][1].path
    peak = path_travel_time(ds.net, path, datetime(2024, 1, 2, 8, 30), SMALL)
    off = path_travel_time(ds.net, path, datetime(2024, 1, 2, 12, 0), SMALL)
    assert peak == pytest.approx(SMALL.peak_slowdown * off, rel=1e-12)
    manual = sum(
        ds.net.edge(eid).length_m / SPEED_BASE[ds.net.edge(eid).road_type] for eid in path.edges
    )
    assert off == pytest.approx(manual, rel=1e-12)


def test_peak_rows_dominate_offpeak_rows_at_zero_noise():
    ds = generate(SMALL)
    by_edges = defaultdict(list)
    for (pid, tp), row in zip(ds.items, ds.targets):
        by_edges[tp.path.edges].append((pop_label(tp.departure), row.travel_time_s))
    compared = 0
    for rows in by_edges.values():
        peaks = [t for lab, t in rows if lab != OFF_PEAK]
        offs = [t for lab, t in rows if lab == OFF_PEAK]
        if peaks and offs:
            compared += 1
            assert min(peaks) >= max(offs)
    assert compared > 0


def test_paths_validate_and_align_with_targets():
    ds = generate(SMALL)
    assert len(ds.items) == len(ds.targets)
    for (pid, tp), row in zip(ds.items, ds.targets):
        assert pid == row.path_id
        assert validate_path(ds.net, tp.path)
        assert row.travel_time_s > 0


def test_group_structure():
    ds = generate(SMALL)
    groups = defaultdict(list)
    for (pid, tp), row in zip(ds.items, ds.targets):
        groups[row.group_id].append((tp, row))
    for rows in groups.values():
        assert 2 <= len(rows) <= SMALL.n_candidates
        chosen = [r for _, r in rows if r.chosen == 1]
        assert len(chosen) == 1
        assert chosen[0].rank_score == 1.0
        endpoints = {
            (ds.net.path_nodes(tp.path)[0], ds.net.path_nodes(tp.path)[-1]) for tp, _ in rows
        }
        assert len(endpoints) == 1  # all candidates share origin and destination
        departures = {tp.departure for tp, _ in rows}
        assert len(departures) == 1
        for _, r in rows:
            assert 0.0 <= r.rank_score <= 1.0
        scores = sorted((r.rank_score for _, r in rows), reverse=True)
        assert scores[0] == 1.0 and scores[1] < 1.0  # alternatives are distinct paths


def test_departures_inside_week_and_balanced():
    cfg = SynthConfig(grid_w=6, grid_h=6, n_paths=400, seed=1)
    ds = generate(cfg)
    start = datetime(2024, 1, 1)
    counts = np.zeros(3)
    for _, tp in ds.items:
        assert start <= tp.departure < start + timedelta(days=7)
        counts[pop_label(tp.departure)] += 1
    fractions = counts / counts.sum()
    assert np.all(fractions > 0.15)


def test_tci_table_values():
    table = tci_table()
    assert table.shape == (2016,)
    assert set(np.unique(table)) == {0, 3}
    assert table[1 * 288 + 96] == 3  # Tuesday 08:00
    assert table[1 * 288 + 144] == 0  # Tuesday 12:00
    assert np.all(table[5 * 288 :] == 0)  # weekend


def test_dataset_files_round_trip(tmp_path):
    ds = generate(SMALL)
    write_dataset(ds, tmp_path)
    net = load_network(tmp_path / "edges.csv")
    assert len(net.edges) == len(ds.net.edges)
    rows = load_temporal_paths(tmp_path / "paths.csv", net)
    assert [pid for pid, _ in rows] == [pid for pid, _ in ds.items]
    targets = load_targets(tmp_path / "targets.csv")
    assert [t.path_id for t in targets] == [t.path_id for t in ds.targets]
    for got, want in zip(targets, ds.targets):
        assert got.travel_time_s == pytest.approx(want.travel_time_s, abs=5e-4)
        assert got.rank_score == pytest.approx(want.rank_score, abs=5e-7)
        assert (got.group_id, got.chosen) == (want.group_id, want.chosen)
    table = load_tci(tmp_path / "tci.csv")
    np.testing.assert_array_equal(table, ds.tci)


def test_generation_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    write_dataset(generate(SMALL), a)
    write_dataset(generate(SMALL), b)
    for name in ("edges.csv", "paths.csv", "targets.csv", "tci.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_different_seed_changes_corpus(tmp_path):
    ds_a = generate(SMALL)
    ds_b = generate(SynthConfig(grid_w=3, grid_h=3, n_paths=40, noise_sigma=0.0, seed=6))
    assert any(
        ta.travel_time_s != tb.travel_time_s for ta, tb in zip(ds_a.targets, ds_b.targets)
    )


def test_one_way_grid_still_generates():
    cfg = SynthConfig(grid_w=4, grid_h=4, n_paths=30, one_way_frac=0.3, seed=2)
    ds = generate(cfg)
    assert len(ds.net.edges) < 48  # strictly fewer than the bidirectional count
    for _, tp in ds.items:
        assert validate_path(ds.net, tp.path)


def test_noise_perturbs_travel_time():
    noisy = generate(SynthConfig(grid_w=3, grid_h=3, n_paths=40, noise_sigma=0.1, seed=5))
    clean = generate(SMALL)
    diffs = [
        abs(a.travel_time_s - b.travel_time_s) for a, b in zip(noisy.targets, clean.targets)
    ]
    assert max(diffs) > 0


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(grid_w=1)
    with pytest.raises(ConfigError):
        SynthConfig(peak_slowdown=0.5)
    with pytest.raises(ConfigError):
        SynthConfig(noise_sigma=-0.1)
    with pytest.raises(ConfigError):
        SynthConfig(one_way_frac=1.0)
    with pytest.raises(ConfigError):
        SynthConfig(n_candidates=1)


def test_load_targets_rejects_malformed(tmp_path):
    f = tmp_path / "targets.csv"
    f.write_text("path_id,travel_time_s\n")
    with pytest.raises(ParseError):
        load_targets(f)

    good = TargetRow("p0", 10.0, 1.0, "g0", 1)
    write_targets(f, [good])
    assert load_targets(f)[0].path_id == "p0"

    f.write_text(
        "path_id,travel_time_s,rank_score,group_id,chosen\np0,10.0,1.0,g0,7\n"
    )
    with pytest.raises(ParseError):
        load_targets(f)
    f.write_text(
        "path_id,travel_time_s,rank_score,group_id,chosen\np0,abc,1.0,g0,1\n"
    )
    with pytest.raises(ParseError):
        load_targets(f)
