"""Command-line pipeline: generate -> embed -> train -> evaluate -> report.

Every stage writes into one output directory and stamps its artifacts with a
hash of the effective run configuration, so later stages can refuse inputs
produced under a different config. All randomness derives from the single
``--seed`` via named streams; identical invocations produce identical bytes.
"""

from __future__ import annotations

import os

# Cap BLAS parallelism before numpy loads; stages are otherwise serial.
_threads = os.environ.get("TPRLAB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path as FilePath

import numpy as np

from .contrastive import LabeledItem, TrainConfig, write_training_log
from .curriculum import CurriculumConfig, VARIANTS, apply_variant, run_curriculum, write_plan
from .downstream import (
    BoostConfig,
    featurize_raw,
    fit_ensemble,
    grouped_rank_metrics,
    metrics_report,
    recommendation_metrics,
    regression_metrics,
    split_indices,
)
from .errors import ArtifactError, ConfigError, TprlabError
from .fileio import read_stamp, stamp_file
from .graph_embedding import (
    Node2VecConfig,
    default_road_config,
    load_embeddings,
    road_node_embeddings,
    save_embeddings,
    temporal_embeddings,
)
from .path_encoder import (
    EncoderConfig,
    FrozenTables,
    build_batch_inputs,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .road_network import RoadNetwork, load_network, load_temporal_paths
from .seeding import derive_rng
from .synth import SynthConfig, generate, load_targets, write_dataset
from .temporal_graph import N_TEMPORAL_NODES, build_temporal_graph
from .weak_labels import make_labeler

__all__ = ["RunConfig", "build_run_config", "config_hash", "main"]

REPORT_HEADER = [
    "variant",
    "travel_time_mae",
    "travel_time_mare",
    "travel_time_mape",
    "raw_features_mae",
    "rank_mae",
    "rank_tau",
    "rank_rho",
    "rec_acc",
    "rec_hr",
]

_SECTIONS = {
    "synth": SynthConfig,
    "embedding": Node2VecConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "curriculum": CurriculumConfig,
    "boost": BoostConfig,
}

# keys owned by the CLI (--seed / --variant), not the config file
_RESERVED_KEYS = {
    "synth": {"seed"},
    "train": {"seed", "no_global", "no_local", "no_temporal"},
    "curriculum": {"mode"},
    "encoder": {"use_temporal"},
}


@dataclass(frozen=True)
class RunConfig:
    """Effective configuration of one pipeline run; hashed into every artifact."""

    seed: int = 0
    weak_labels: str = "pop"
    synth: SynthConfig = field(default_factory=SynthConfig)
    embedding: Node2VecConfig = field(default_factory=Node2VecConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    boost: BoostConfig = field(default_factory=BoostConfig)


def build_run_config(
    doc: dict, seed: int | None = None, weak_labels: str | None = None
) -> RunConfig:
    """RunConfig from a config-file dict plus command-line overrides.

    Unknown keys anywhere are rejected, as are reserved keys the CLI owns.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config file must contain a JSON object")
    unknown = set(doc) - ({"seed", "weak_labels"} | set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    eff_seed = seed if seed is not None else int(doc.get("seed", 0))
    eff_labels = weak_labels if weak_labels is not None else str(doc.get("weak_labels", "pop"))
    if eff_labels not in ("pop", "tci"):
        raise ConfigError(f"weak_labels must be pop or tci, got {eff_labels!r}")

    built = {}
    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        allowed = {f.name for f in fields(cls)} - _RESERVED_KEYS.get(name, set())
        bad = set(section) - allowed
        if bad:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
        extra = {"seed": eff_seed} if "seed" in _RESERVED_KEYS.get(name, set()) else {}
        built[name] = cls(**section, **extra)
    return RunConfig(seed=eff_seed, weak_labels=eff_labels, **built)


def config_hash(cfg: RunConfig) -> str:
    """sha256 over the canonical JSON form of the effective configuration."""
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# artifact plumbing


def _require(path: FilePath, producer: str) -> FilePath:
    if not path.exists():
        raise ArtifactError(f"{path.name} not found in {path.parent}; run `tprlab {producer}` first")
    return path


def _check_stamp(path: FilePath, expected: str, producer: str) -> None:
    got = read_stamp(path)
    if got != expected:
        raise ArtifactError(
            f"{path.name} carries config hash {got or '<none>'} but the current config hashes to "
            f"{expected}; rerun `tprlab {producer}` with this config"
        )


def _write_stamped(path: FilePath, writer, config_h: str) -> None:
    writer(path)
    stamp_file(path, config_h)


def _load_frozen(out: FilePath, net: RoadNetwork, h: str) -> FrozenTables:
    t_path = _require(out / "temporal_embeddings.txt", "embed")
    r_path = _require(out / "road_embeddings.txt", "embed")
    _check_stamp(t_path, h, "embed")
    _check_stamp(r_path, h, "embed")
    t_names, temporal = load_embeddings(t_path)
    r_names, road = load_embeddings(r_path)
    if t_names != [str(i) for i in range(N_TEMPORAL_NODES)]:
        raise ArtifactError("temporal embeddings are not indexed by temporal node id")
    if r_names != list(net.nodes):
        raise ArtifactError("road embeddings do not cover the network's nodes; rerun `tprlab embed`")
    return FrozenTables(temporal=temporal, road=road)


def _load_corpus(cfg: RunConfig, out: FilePath, h: str):
    net = load_network(_require(out / "edges.csv", "generate"))
    _check_stamp(out / "edges.csv", h, "generate")
    _check_stamp(_require(out / "paths.csv", "generate"), h, "generate")
    rows = load_temporal_paths(out / "paths.csv", net)
    tci_path = None
    if cfg.weak_labels == "tci":
        tci_path = _require(out / "tci.csv", "generate")
        _check_stamp(tci_path, h, "generate")
    labeler = make_labeler(cfg.weak_labels, tci_path)
    return net, rows, labeler


def _encoder_config(cfg: RunConfig, frozen: FrozenTables) -> EncoderConfig:
    enc = cfg.encoder
    if enc.d_temporal != frozen.temporal.shape[1] or enc.d_road != frozen.road.shape[1]:
        raise ConfigError(
            f"encoder dims (d_temporal={enc.d_temporal}, d_road={enc.d_road}) do not match the "
            f"embedding tables ({frozen.temporal.shape[1]}, {frozen.road.shape[1]}); "
            "adjust the encoder or embedding sections"
        )
    return enc


def _encode_corpus(net, tps, params, frozen, enc_cfg, batch_size: int = 256) -> np.ndarray:
    outs = []
    for lo in range(0, len(tps), batch_size):
        inputs = build_batch_inputs(net, tps[lo : lo + batch_size])
        outs.append(forward(params, frozen, enc_cfg, inputs).tpr)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: RunConfig, out: FilePath, args) -> int:
    h = config_hash(cfg)
    ds = generate(cfg.synth)
    write_dataset(ds, out)
    for name in ("edges.csv", "paths.csv", "targets.csv", "tci.csv"):
        stamp_file(out / name, h)
    print(
        f"generate: {len(ds.net.nodes)} nodes, {len(ds.net.edges)} edges, "
        f"{len(ds.items)} temporal paths -> {out}"
    )
    return 0


def cmd_embed(cfg: RunConfig, out: FilePath, args) -> int:
    h = config_hash(cfg)
    net = load_network(_require(out / "edges.csv", "generate"))
    _check_stamp(out / "edges.csv", h, "generate")

    temporal = temporal_embeddings(build_temporal_graph(), cfg.embedding, cfg.seed)
    _write_stamped(
        out / "temporal_embeddings.txt",
        lambda p: save_embeddings(p, [str(i) for i in range(N_TEMPORAL_NODES)], temporal),
        h,
    )
    road = road_node_embeddings(net, default_road_config(cfg.embedding), cfg.seed)
    _write_stamped(
        out / "road_embeddings.txt", lambda p: save_embeddings(p, list(net.nodes), road), h
    )
    print(f"embed: temporal {temporal.shape}, road {road.shape} -> {out}")
    return 0


def cmd_train(cfg: RunConfig, out: FilePath, args) -> int:
    h = config_hash(cfg)
    net, rows, labeler = _load_corpus(cfg, out, h)
    frozen = _load_frozen(out, net, h)
    enc_cfg = _encoder_config(cfg, frozen)

    ids = [pid for pid, _ in rows]
    items = [LabeledItem(tp, labeler(tp.departure)) for _, tp in rows]
    train_cfg, cur_cfg = apply_variant(cfg.train, cfg.curriculum, args.variant)
    result = run_curriculum(net, frozen, enc_cfg, items, ids, train_cfg, cur_cfg, labeler)

    eff_enc = replace(enc_cfg, use_temporal=not train_cfg.no_temporal)
    save_checkpoint(out / f"checkpoint_{args.variant}.npz", result.params, frozen, eff_enc, h)
    _write_stamped(
        out / f"training_log_{args.variant}.csv", lambda p: write_training_log(p, result.log), h
    )
    if result.plan is not None:
        _write_stamped(
            out / f"plan_{args.variant}.csv", lambda p: write_plan(p, result.plan, ids), h
        )
    final = result.log[-1]
    print(
        f"train[{args.variant}]: {len(result.log)} epochs, final objective "
        f"{final.objective:.6f} -> checkpoint_{args.variant}.npz"
    )
    return 0


def cmd_evaluate(cfg: RunConfig, out: FilePath, args) -> int:
    h = config_hash(cfg)
    net, rows, _ = _load_corpus(cfg, out, h)
    ckpt_path = _require(out / f"checkpoint_{args.variant}.npz", f"train --variant {args.variant}")
    params, frozen, enc_cfg, ckpt_hash = load_checkpoint(ckpt_path)
    if ckpt_hash != h:
        raise ArtifactError(
            f"checkpoint_{args.variant}.npz carries config hash {ckpt_hash} but the current "
            f"config hashes to {h}; rerun `tprlab train --variant {args.variant}`"
        )
    targets = load_targets(_require(out / "targets.csv", "generate"))
    _check_stamp(out / "targets.csv", h, "generate")
    by_id = {pid: tp for pid, tp in rows}
    missing = [t.path_id for t in targets if t.path_id not in by_id]
    if missing:
        raise ArtifactError(f"targets reference unknown path ids, e.g. {missing[0]!r}")

    tps = [by_id[t.path_id] for t in targets]
    tprs = _encode_corpus(net, tps, params, frozen, enc_cfg)
    travel = np.array([t.travel_time_s for t in targets])
    scores = np.array([t.rank_score for t in targets])
    chosen = np.array([t.chosen for t in targets])
    group_ids = np.array([t.group_id for t in targets])

    unique_groups = sorted(set(group_ids.tolist()))
    g_train, g_test = split_indices(len(unique_groups), derive_rng(cfg.seed, "eval", "split"))
    train_groups = {unique_groups[i] for i in g_train}
    tr = np.array([g in train_groups for g in group_ids])
    te = ~tr

    tt_head = fit_ensemble(tprs[tr], travel[tr], "regression", cfg.boost)
    tt = regression_metrics(travel[te], tt_head.predict(tprs[te]))

    raw = featurize_raw(net, tps)
    raw_head = fit_ensemble(raw[tr], travel[tr], "regression", cfg.boost)
    tt_raw = regression_metrics(travel[te], raw_head.predict(raw[te]))

    rank_head = fit_ensemble(tprs[tr], scores[tr], "regression", cfg.boost)
    rank_pred = rank_head.predict(tprs[te])
    rank_reg = regression_metrics(scores[te], rank_pred)
    rank = grouped_rank_metrics(scores[te], rank_pred, group_ids[te])

    rec_head = fit_ensemble(tprs[tr], chosen[tr].astype(float), "classification", cfg.boost)
    rec = recommendation_metrics(chosen[te], rec_head.predict_label(tprs[te]))

    tasks = {
        "travel_time": {"mae": tt.mae, "mare": tt.mare, "mape": tt.mape},
        "travel_time_raw_features": {"mae": tt_raw.mae, "mare": tt_raw.mare, "mape": tt_raw.mape},
        "ranking": {"mae": rank_reg.mae, "tau": rank.tau, "rho": rank.rho},
        "recommendation": {"acc": rec.acc, "hr": rec.hr},
    }
    report = metrics_report(tasks, h, cfg.seed, variant=args.variant)
    (out / f"metrics_{args.variant}.json").write_text(report, encoding="utf-8")
    print(
        f"evaluate[{args.variant}]: travel-time MAE {tt.mae:.2f}s (raw features {tt_raw.mae:.2f}s), "
        f"tau {rank.tau:.3f}, acc {rec.acc:.3f} -> metrics_{args.variant}.json"
    )
    return 0


def _load_metric_docs(out: FilePath, h: str) -> dict[str, dict]:
    docs = {}
    for variant in VARIANTS:
        path = out / f"metrics_{variant}.json"
        if not path.exists():
            continue
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("config_hash") != h:
            raise ArtifactError(
                f"{path.name} carries config hash {doc.get('config_hash')} but the current config "
                f"hashes to {h}; rerun `tprlab evaluate --variant {variant}`"
            )
        docs[variant] = doc
    if not docs:
        raise ArtifactError(f"no metrics_<variant>.json in {out}; run `tprlab evaluate` first")
    return docs


def _render_figures(out: FilePath, docs: dict[str, dict]) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    variants = list(docs)
    maes = [docs[v]["tasks"]["travel_time"]["mae"] for v in variants]
    raw_mae = next(iter(docs.values()))["tasks"]["travel_time_raw_features"]["mae"]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(variants, maes, color="#4878cf")
    ax.axhline(raw_mae, color="#d65f5f", linestyle="--", label="raw features")
    ax.set_ylabel("travel-time MAE (s)")
    ax.set_title("Travel-time estimation by training variant")
    ax.legend()
    fig.autofmt_xdate(rotation=30)
    fig.tight_layout()
    fig.savefig(out / "fig_travel_time_mae.png", dpi=150)
    plt.close(fig)
    written.append("fig_travel_time_mae.png")

    curves = {}
    for variant in variants:
        log_path = out / f"training_log_{variant}.csv"
        if not log_path.exists():
            continue
        with open(log_path, "r", encoding="utf-8", newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        curves[variant] = [float(r[1]) for r in rows[1:]]
    if curves:
        fig, ax = plt.subplots(figsize=(7, 4))
        for variant, ys in curves.items():
            ax.plot(range(1, len(ys) + 1), ys, label=variant)
        ax.set_xlabel("epoch")
        ax.set_ylabel("objective")
        ax.set_title("Training objective")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "fig_training_objective.png", dpi=150)
        plt.close(fig)
        written.append("fig_training_objective.png")
    return written


def cmd_report(cfg: RunConfig, out: FilePath, args) -> int:
    h = config_hash(cfg)
    docs = _load_metric_docs(out, h)

    def row_of(variant: str, doc: dict) -> list[str]:
        t = doc["tasks"]
        cells = [
            t["travel_time"]["mae"],
            t["travel_time"]["mare"],
            t["travel_time"]["mape"],
            t["travel_time_raw_features"]["mae"],
            t["ranking"]["mae"],
            t["ranking"]["tau"],
            t["ranking"]["rho"],
            t["recommendation"]["acc"],
            t["recommendation"]["hr"],
        ]
        return [variant] + [f"{v:.6g}" for v in cells]

    rows = [row_of(v, docs[v]) for v in docs]

    def write_table(path: FilePath) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_HEADER)
            writer.writerows(rows)

    _write_stamped(out / "report.csv", write_table, h)
    figures = _render_figures(out, docs)

    widths = [max(len(r[i]) for r in [REPORT_HEADER] + rows) for i in range(len(REPORT_HEADER))]
    for r in [REPORT_HEADER] + rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))
    print(f"report: report.csv + {', '.join(figures)} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tprlab",
        description="Temporal path representation pipeline on synthetic road traffic",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "synthesize the road network, temporal paths, targets and TCI table"),
        ("embed", "train node embeddings for the temporal and road graphs"),
        ("train", "contrastive curriculum training of the path encoder"),
        ("evaluate", "fit task heads on TPRs and write the metrics report"),
        ("report", "aggregate metrics across variants into a table and figures"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=FilePath, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
        p.add_argument("--out", type=FilePath, required=True, help="artifact directory")
        p.add_argument(
            "--weak-labels",
            choices=("pop", "tci"),
            default=None,
            help="weak label scheme (overrides config)",
        )
        if name in ("train", "evaluate"):
            p.add_argument("--variant", choices=VARIANTS, default="wsccl")
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "embed": cmd_embed,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = {}
        if args.config is not None:
            try:
                doc = json.loads(FilePath(args.config).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config file {args.config} does not exist")
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {args.config} is not valid JSON: {exc}")
        cfg = build_run_config(doc, seed=args.seed, weak_labels=args.weak_labels)
        out = FilePath(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, out, args)
    except TprlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
