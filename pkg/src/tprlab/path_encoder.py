"""Temporal path encoder: spatial embeddings + frozen node tables + 2-layer LSTM.

Each edge of a path becomes a 384-dim input: the path's temporal node vector
(128, shared across edges) concatenated with the edge's spatial embedding
(endpoint road-node vectors, 64 each, plus trainable road-type 64, lanes 32,
one-way 16, signals 16). A 2-layer LSTM with hidden size 128 maps the edge
sequence to per-edge outputs (STERs); their mean is the path representation
(TPR).

Forward and backward passes are hand-written in float64 numpy, batched
time-major with right padding. Padded steps receive zero input and zero
upstream gradient, which makes the padded backward pass exact: zero
gradients cannot leak into real steps through the recurrent chain.

Only the spatial tables and LSTM weights train; temporal and road-node
tables are produced offline and stay frozen.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path as FilePath
from typing import Sequence

import numpy as np

from .errors import ArtifactError, ConfigError
from .road_network import RoadNetwork, TemporalPath
from .seeding import derive_rng
from .temporal_graph import departure_to_node

CHECKPOINT_VERSION = 1

SPATIAL_KEYS = (
    "spatial/road_type",
    "spatial/num_lanes",
    "spatial/one_way",
    "spatial/traffic_signals",
)


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions of the encoder; defaults match the reference setup."""

    d_temporal: int = 128
    d_road: int = 64
    d_road_type: int = 64
    d_lanes: int = 32
    d_one_way: int = 16
    d_signals: int = 16
    d_hidden: int = 128
    n_layers: int = 2
    use_temporal: bool = True

    @property
    def d_spatial(self) -> int:
        return 2 * self.d_road + self.d_road_type + self.d_lanes + self.d_one_way + self.d_signals

    @property
    def d_input(self) -> int:
        return self.d_temporal + self.d_spatial


@dataclass(frozen=True)
class FrozenTables:
    """Pretrained lookup tables the encoder reads but never updates."""

    temporal: np.ndarray  # (2016, d_temporal)
    road: np.ndarray  # (n_road_nodes, d_road)


def init_params(cfg: EncoderConfig, net: RoadNetwork, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh trainable parameters: spatial tables + LSTM stack.

    Spatial rows start at U(-0.5/dim, 0.5/dim); LSTM weights at
    U(-1/sqrt(d_hidden), 1/sqrt(d_hidden)) with forget-gate bias 1.
    """
    sizes = {
        "spatial/road_type": (len(net.vocabs["road_type"]), cfg.d_road_type),
        "spatial/num_lanes": (len(net.vocabs["num_lanes"]), cfg.d_lanes),
        "spatial/one_way": (len(net.vocabs["one_way"]), cfg.d_one_way),
        "spatial/traffic_signals": (len(net.vocabs["traffic_signals"]), cfg.d_signals),
    }
    params: dict[str, np.ndarray] = {}
    for key, (rows, dim) in sizes.items():
        params[key] = (rng.random((rows, dim)) - 0.5) / dim

    h = cfg.d_hidden
    scale = 1.0 / np.sqrt(h)
    d_in = cfg.d_input
    for layer in range(cfg.n_layers):
        params[f"lstm/{layer}/W"] = rng.uniform(-scale, scale, (4 * h, d_in))
        params[f"lstm/{layer}/U"] = rng.uniform(-scale, scale, (4 * h, h))
        b = rng.uniform(-scale, scale, 4 * h)
        b[h : 2 * h] += 1.0  # forget gate opens at init
        params[f"lstm/{layer}/b"] = b
        d_in = h
    return params


def init_params_seeded(cfg: EncoderConfig, net: RoadNetwork, root_seed: int, *names) -> dict[str, np.ndarray]:
    return init_params(cfg, net, derive_rng(root_seed, "encoder", *names))


@dataclass(frozen=True)
class BatchInputs:
    """Index arrays for a batch of temporal paths, time-major, right-padded."""

    t_idx: np.ndarray  # (B,) temporal node per path
    from_idx: np.ndarray  # (T, B) road-node row indices
    to_idx: np.ndarray  # (T, B)
    feat_idx: dict[str, np.ndarray]  # name -> (T, B) vocabulary indices
    mask: np.ndarray  # (T, B) 1.0 on real steps
    lengths: np.ndarray  # (B,)


def build_batch_inputs(net: RoadNetwork, paths: Sequence[TemporalPath]) -> BatchInputs:
    if not paths:
        raise ValueError("empty batch")
    node_row = {name: i for i, name in enumerate(net.nodes)}
    lengths = np.array([len(tp.path) for tp in paths], dtype=np.int64)
    if np.any(lengths == 0):
        raise ValueError("paths must be nonempty")
    B, T = len(paths), int(lengths.max())

    t_idx = np.array([departure_to_node(tp.departure) for tp in paths], dtype=np.int64)
    from_idx = np.zeros((T, B), dtype=np.int64)
    to_idx = np.zeros((T, B), dtype=np.int64)
    feat_idx = {name: np.zeros((T, B), dtype=np.int64) for name in SPATIAL_KEYS}
    mask = np.zeros((T, B), dtype=np.float64)
    for b, tp in enumerate(paths):
        for t, eid in enumerate(tp.path.edges):
            e = net.edge(eid)
            rt, nol, ow, ts = net.feature_indices(eid)
            from_idx[t, b] = node_row[e.from_node]
            to_idx[t, b] = node_row[e.to_node]
            feat_idx["spatial/road_type"][t, b] = rt
            feat_idx["spatial/num_lanes"][t, b] = nol
            feat_idx["spatial/one_way"][t, b] = ow
            feat_idx["spatial/traffic_signals"][t, b] = ts
            mask[t, b] = 1.0
    return BatchInputs(t_idx, from_idx, to_idx, feat_idx, mask, lengths)


@dataclass
class Forward:
    """Forward results plus the caches the backward pass needs."""

    tpr: np.ndarray  # (B, d_hidden)
    sters: np.ndarray  # (T, B, d_hidden) final-layer outputs
    x: np.ndarray  # (T, B, d_input)
    layer_caches: list[dict[str, np.ndarray]]
    inputs: BatchInputs


def _build_x(
    params: dict[str, np.ndarray], frozen: FrozenTables, cfg: EncoderConfig, inputs: BatchInputs
) -> np.ndarray:
    T, B = inputs.mask.shape
    if cfg.use_temporal:
        t_part = np.broadcast_to(frozen.temporal[inputs.t_idx], (T, B, cfg.d_temporal))
    else:
        t_part = np.zeros((T, B, cfg.d_temporal))
    x = np.concatenate(
        [
            t_part,
            frozen.road[inputs.from_idx],
            frozen.road[inputs.to_idx],
            params["spatial/road_type"][inputs.feat_idx["spatial/road_type"]],
            params["spatial/num_lanes"][inputs.feat_idx["spatial/num_lanes"]],
            params["spatial/one_way"][inputs.feat_idx["spatial/one_way"]],
            params["spatial/traffic_signals"][inputs.feat_idx["spatial/traffic_signals"]],
        ],
        axis=2,
    )
    x *= inputs.mask[:, :, None]
    return x


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(
    params: dict[str, np.ndarray], frozen: FrozenTables, cfg: EncoderConfig, inputs: BatchInputs
) -> Forward:
    _check_shapes(params, frozen, cfg)
    x = _build_x(params, frozen, cfg, inputs)
    T, B = inputs.mask.shape
    h = cfg.d_hidden

    layer_caches: list[dict[str, np.ndarray]] = []
    inp = x
    for layer in range(cfg.n_layers):
        W, U, b = (params[f"lstm/{layer}/{k}"] for k in ("W", "U", "b"))
        xw = inp.reshape(T * B, -1) @ W.T
        xw = xw.reshape(T, B, 4 * h)
        H = np.zeros((T + 1, B, h))
        C = np.zeros((T + 1, B, h))
        gates = np.zeros((T, B, 4 * h))
        TC = np.zeros((T, B, h))
        for t in range(T):
            z = xw[t] + H[t] @ U.T + b
            i = _sigmoid(z[:, :h])
            f = _sigmoid(z[:, h : 2 * h])
            g = np.tanh(z[:, 2 * h : 3 * h])
            o = _sigmoid(z[:, 3 * h :])
            C[t + 1] = f * C[t] + i * g
            TC[t] = np.tanh(C[t + 1])
            H[t + 1] = o * TC[t]
            gates[t, :, :h] = i
            gates[t, :, h : 2 * h] = f
            gates[t, :, 2 * h : 3 * h] = g
            gates[t, :, 3 * h :] = o
        layer_caches.append({"inp": inp, "H": H, "C": C, "gates": gates, "TC": TC})
        inp = H[1:]

    sters = inp  # (T, B, h)
    tpr = (sters * inputs.mask[:, :, None]).sum(axis=0) / inputs.lengths[:, None]
    return Forward(tpr=tpr, sters=sters, x=x, layer_caches=layer_caches, inputs=inputs)


def backward(
    params: dict[str, np.ndarray],
    cfg: EncoderConfig,
    fwd: Forward,
    d_tpr: np.ndarray,
    d_sters: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every trainable parameter.

    ``d_tpr`` is the loss gradient at the TPRs, ``d_sters`` (optional) at the
    per-edge outputs. Frozen tables get no gradient entries.
    """
    inputs = fwd.inputs
    T, B = inputs.mask.shape
    h = cfg.d_hidden

    dH_out = np.zeros((T, B, h)) if d_sters is None else d_sters.copy()
    dH_out += inputs.mask[:, :, None] * (d_tpr / inputs.lengths[:, None])[None, :, :]

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    d_upstream = dH_out
    for layer in reversed(range(cfg.n_layers)):
        cache = fwd.layer_caches[layer]
        W, U = params[f"lstm/{layer}/W"], params[f"lstm/{layer}/U"]
        gates, TC, H, C, inp = cache["gates"], cache["TC"], cache["H"], cache["C"], cache["inp"]

        dZ = np.zeros((T, B, 4 * h))
        dh_next = np.zeros((B, h))
        dc_next = np.zeros((B, h))
        for t in reversed(range(T)):
            i = gates[t, :, :h]
            f = gates[t, :, h : 2 * h]
            g = gates[t, :, 2 * h : 3 * h]
            o = gates[t, :, 3 * h :]
            tc = TC[t]

            dh = d_upstream[t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * C[t]
            dc_next = dc * f

            dz = dZ[t]
            dz[:, :h] = di * i * (1.0 - i)
            dz[:, h : 2 * h] = df * f * (1.0 - f)
            dz[:, 2 * h : 3 * h] = dg * (1.0 - g * g)
            dz[:, 3 * h :] = do * o * (1.0 - o)
            dh_next = dz @ U

        grads[f"lstm/{layer}/W"] = dZ.reshape(T * B, 4 * h).T @ inp.reshape(T * B, -1)
        grads[f"lstm/{layer}/U"] = np.einsum("tbi,tbj->ij", dZ, H[:-1])
        grads[f"lstm/{layer}/b"] = dZ.sum(axis=(0, 1))
        d_upstream = (dZ.reshape(T * B, 4 * h) @ W).reshape(T, B, -1)

    dx = d_upstream  # (T, B, d_input)
    offset = cfg.d_temporal + 2 * cfg.d_road
    for key, dim in (
        ("spatial/road_type", cfg.d_road_type),
        ("spatial/num_lanes", cfg.d_lanes),
        ("spatial/one_way", cfg.d_one_way),
        ("spatial/traffic_signals", cfg.d_signals),
    ):
        part = dx[:, :, offset : offset + dim].reshape(T * B, dim)
        np.add.at(grads[key], inputs.feat_idx[key].ravel(), part)
        offset += dim
    return grads


def encode(
    net: RoadNetwork,
    tp: TemporalPath,
    params: dict[str, np.ndarray],
    frozen: FrozenTables,
    cfg: EncoderConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """(TPR, per-edge STERs) for one temporal path."""
    fwd = forward(params, frozen, cfg, build_batch_inputs(net, [tp]))
    return fwd.tpr[0], fwd.sters[:, 0, :]


def spatial_embed(
    net: RoadNetwork,
    edge,
    params: dict[str, np.ndarray],
    frozen: FrozenTables,
    cfg: EncoderConfig,
) -> np.ndarray:
    """Spatial vector of one edge: [n_from, n_to, RT, NoL, OW, TS].

    Categorical values outside the network's vocabularies fall back to the
    UNK row (row 0); endpoints must be known nodes.
    """
    node_row = {name: i for i, name in enumerate(net.nodes)}
    return np.concatenate(
        [
            frozen.road[node_row[edge.from_node]],
            frozen.road[node_row[edge.to_node]],
            params["spatial/road_type"][net.vocabs["road_type"].lookup(edge.road_type)],
            params["spatial/num_lanes"][net.vocabs["num_lanes"].lookup(str(edge.num_lanes))],
            params["spatial/one_way"][net.vocabs["one_way"].lookup(str(int(edge.one_way)))],
            params["spatial/traffic_signals"][
                net.vocabs["traffic_signals"].lookup(str(int(edge.traffic_signals)))
            ],
        ]
    )


def grad_check(
    f,
    params: dict[str, np.ndarray],
    rng: np.random.Generator,
    n_samples: int = 50,
    eps: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params) -> (loss, grads)`` must be deterministic and must not mutate
    its argument. ``n_samples`` scalar parameters are sampled proportionally
    to tensor size. The relative error denominator is floored at 1e-4 so
    finite-difference noise on near-zero gradients cannot dominate.
    """
    _, grads = f(params)
    keys = sorted(params.keys())
    sizes = np.array([params[k].size for k in keys], dtype=np.float64)
    worst = 0.0
    for _ in range(n_samples):
        key = keys[int(rng.choice(len(keys), p=sizes / sizes.sum()))]
        flat = int(rng.integers(params[key].size))
        perturbed = {k: v.copy() for k, v in params.items()}
        perturbed[key].flat[flat] += eps
        plus, _ = f(perturbed)
        perturbed[key].flat[flat] -= 2 * eps
        minus, _ = f(perturbed)
        numeric = (plus - minus) / (2 * eps)
        analytic = float(grads[key].flat[flat])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
        worst = max(worst, rel)
    return worst


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def _check_shapes(params: dict[str, np.ndarray], frozen: FrozenTables, cfg: EncoderConfig) -> None:
    if frozen.temporal.shape[1] != cfg.d_temporal:
        raise ConfigError(
            f"temporal table dim {frozen.temporal.shape[1]} != configured {cfg.d_temporal}"
        )
    if frozen.road.shape[1] != cfg.d_road:
        raise ConfigError(f"road table dim {frozen.road.shape[1]} != configured {cfg.d_road}")
    if params["lstm/0/W"].shape[1] != cfg.d_input:
        raise ConfigError(
            f"LSTM input dim {params['lstm/0/W'].shape[1]} != configured {cfg.d_input}"
        )


def save_checkpoint(
    path: str | FilePath,
    params: dict[str, np.ndarray],
    frozen: FrozenTables,
    cfg: EncoderConfig,
    config_hash: str,
) -> None:
    """Versioned container for every tensor the encoder needs at inference."""
    arrays: dict[str, np.ndarray] = {
        "meta/version": np.array(CHECKPOINT_VERSION, dtype=np.int64),
        "meta/config_hash": np.array(config_hash),
        "meta/encoder_config": np.array(json.dumps(asdict(cfg), sort_keys=True)),
        "frozen/temporal": frozen.temporal,
        "frozen/road": frozen.road,
    }
    for key, value in params.items():
        arrays[f"param/{key}"] = value
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(
    path: str | FilePath,
) -> tuple[dict[str, np.ndarray], FrozenTables, EncoderConfig, str]:
    with np.load(path) as data:
        keys = set(data.files)
        if "meta/version" not in keys:
            raise ArtifactError(f"{path}: not a checkpoint (no version field)")
        version = int(data["meta/version"])
        if version != CHECKPOINT_VERSION:
            raise ArtifactError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        cfg = EncoderConfig(**json.loads(str(data["meta/encoder_config"])))
        config_hash = str(data["meta/config_hash"])
        frozen = FrozenTables(temporal=data["frozen/temporal"], road=data["frozen/road"])
        params = {
            key[len("param/") :]: data[key] for key in data.files if key.startswith("param/")
        }
        if not params:
            raise ArtifactError(f"{path}: checkpoint holds no trainable parameters")
        for name, tensor in params.items():
            if not np.all(np.isfinite(tensor)):
                raise ArtifactError(f"{path}: parameter {name} has non-finite entries")
    return params, frozen, cfg, config_hash
