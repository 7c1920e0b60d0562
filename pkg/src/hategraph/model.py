"""The differentiable video classifier.

Forward pipeline: per-modality projections to a common width D, a weight
graph over all 3N modality-segment nodes whose GNN output scores node and
instance importance, K per-instance subgraphs processed by a second,
shared GNN to produce instance features, importance-weighted aggregation,
and a 2-way MLP-softmax classifier.

All tensors flow through :mod:`hategraph.autodiff`, so a single backward
sweep trains every parameter, including both GNNs and the projections.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .featureio import SegmentFeatures
from .graphs import MODALITIES, VideoGraph, build_instance_subgraphs, build_weight_graph
from .segmentation import InstancePartition, instance_partition

GNN_KINDS = ("attention", "degree-normalized-conv")
ABLATIONS = ("full", "no_graph", "instance_only", "weight_only")
PROJECTION_KINDS = ("lstm", "mlp")

_ATTENTION_SLOPE = 0.2  # leaky-relu slope for attention scores
_MASK_VALUE = -1e9  # additive mask for non-neighbors before softmax


class ConfigError(ValueError):
    """Model configuration violates an invariant."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters; every value can be overridden by config."""

    n_segments: int = 20
    n_instances: int = 10
    d: int = 128
    epsilon: float = 0.4
    gnn_kind: str = "attention"
    gnn_layers: int = 2
    gnn_hidden: Optional[int] = None  # None means same as d
    weight_head_hidden: int = 64
    classifier_hidden: int = 128
    projection_kind_text: str = "mlp"
    projection_kind_visual_audio: str = "lstm"
    ablation: str = "full"
    d_visual_in: int = 768
    d_audio_in: int = 40
    d_text_in: int = 768
    dropout: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ModelConfig":
        if self.n_segments < 1 or self.n_instances < 1:
            raise ConfigError("n_segments and n_instances must be >= 1")
        if self.n_segments % self.n_instances != 0:
            raise ConfigError(
                f"n_instances {self.n_instances} must divide n_segments {self.n_segments}"
            )
        if self.d < 1:
            raise ConfigError("d must be positive")
        if self.gnn_layers < 1:
            raise ConfigError("gnn_layers must be >= 1")
        if self.gnn_kind not in GNN_KINDS:
            raise ConfigError(f"gnn_kind must be one of {GNN_KINDS}, got {self.gnn_kind!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.projection_kind_text != "mlp":
            raise ConfigError("text projection supports only 'mlp'")
        if self.projection_kind_visual_audio not in PROJECTION_KINDS:
            raise ConfigError(
                f"visual/audio projection must be one of {PROJECTION_KINDS}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if min(self.d_visual_in, self.d_audio_in, self.d_text_in) < 1:
            raise ConfigError("raw feature widths must be positive")
        return self

    @property
    def hidden(self) -> int:
        return self.d if self.gnn_hidden is None else self.gnn_hidden

    def partition(self) -> InstancePartition:
        return instance_partition(self.n_segments, self.n_instances)


class ModelParams:
    """Named trainable tensors, insertion-ordered for stable checkpoints."""

    def __init__(self, tensors: dict[str, ad.Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> ad.Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def n_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: t.astype(dtype) for k, t in self.items()})

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # one independent, name-keyed stream per tensor so the same seed draws
    # identical values for shared layers across ablation variants
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _glorot(seed: int, name: str, shape, dtype) -> ad.Tensor:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    data = _param_rng(seed, name).uniform(-limit, limit, size=shape).astype(dtype)
    return ad.Tensor(data, requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> ad.Tensor:
    return ad.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype)


def _add_mlp(tensors, seed, prefix, d_in, d_hidden, d_out, dtype):
    tensors[f"{prefix}.W1"] = _glorot(seed, f"{prefix}.W1", (d_in, d_hidden), dtype)
    tensors[f"{prefix}.b1"] = _zeros((d_hidden,), dtype)
    tensors[f"{prefix}.W2"] = _glorot(seed, f"{prefix}.W2", (d_hidden, d_out), dtype)
    tensors[f"{prefix}.b2"] = _zeros((d_out,), dtype)


def _add_lstm(tensors, seed, prefix, d_in, d, dtype):
    for gate in "ifgo":
        tensors[f"{prefix}.W_x{gate}"] = _glorot(seed, f"{prefix}.W_x{gate}", (d_in, d), dtype)
        tensors[f"{prefix}.W_h{gate}"] = _glorot(seed, f"{prefix}.W_h{gate}", (d, d), dtype)
        tensors[f"{prefix}.b_{gate}"] = _zeros((d,), dtype)


def _add_gnn(tensors, seed, which, config: ModelConfig, dtype):
    dims = _gnn_dims(config)
    for layer, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        prefix = f"{which}.layer{layer}"
        tensors[f"{prefix}.W"] = _glorot(seed, f"{prefix}.W", (d_in, d_out), dtype)
        if config.gnn_kind == "attention":
            tensors[f"{prefix}.a_src"] = _glorot(seed, f"{prefix}.a_src", (d_out, 1), dtype)
            tensors[f"{prefix}.a_dst"] = _glorot(seed, f"{prefix}.a_dst", (d_out, 1), dtype)


def _gnn_dims(config: ModelConfig) -> list[int]:
    # input and output are both D; intermediate layers use the hidden width
    return [config.d] + [config.hidden] * (config.gnn_layers - 1) + [config.d]


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fresh parameters for the configured architecture and ablation variant."""
    config.validate()
    tensors: dict[str, ad.Tensor] = {}
    d = config.d
    for modality, d_in in (("visual", config.d_visual_in), ("audio", config.d_audio_in)):
        if config.projection_kind_visual_audio == "lstm":
            _add_lstm(tensors, seed, f"proj.{modality}", d_in, d, dtype)
        else:
            _add_mlp(tensors, seed, f"proj.{modality}", d_in, d, d, dtype)
    _add_mlp(tensors, seed, "proj.text", config.d_text_in, d, d, dtype)
    variant = config.ablation
    if variant in ("full", "weight_only"):
        _add_gnn(tensors, seed, "wgnn", config, dtype)
        _add_mlp(tensors, seed, "whead", d, config.weight_head_hidden, 1, dtype)
    if variant in ("full", "instance_only"):
        _add_gnn(tensors, seed, "ignn", config, dtype)
    _add_mlp(tensors, seed, "clf", 3 * d, config.classifier_hidden, 2, dtype)
    return ModelParams(tensors)


@dataclass
class ForwardOutput:
    """Prediction plus the explanation signals the dual-stream design exposes."""

    h_hat: np.ndarray  # (2,) probabilities [non-hate, hate]
    alpha: np.ndarray  # (K,) instance importance weights
    alpha_hat: np.ndarray  # (3, N) per-modality node weights
    f_instances: np.ndarray  # (K, 3D) instance features
    h_hat_tensor: ad.Tensor = field(repr=False, default=None)

    @property
    def predicted_label(self) -> int:
        return int(np.argmax(self.h_hat))


# ---------------------------------------------------------------------------
# Projections

def _mlp2(x: ad.Tensor, params: ModelParams, prefix: str, hidden_act) -> ad.Tensor:
    h = hidden_act(ad.add(ad.matmul(x, params[f"{prefix}.W1"]), params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.W2"]), params[f"{prefix}.b2"])


def _lstm(x: ad.Tensor, params: ModelParams, prefix: str, d: int) -> ad.Tensor:
    """Single-layer LSTM over the rows of x; returns all N step outputs."""
    dtype = x.dtype
    n = x.shape[0]
    h = ad.constant(np.zeros((1, d)), dtype=dtype)
    c = ad.constant(np.zeros((1, d)), dtype=dtype)
    gates = {g: (params[f"{prefix}.W_x{g}"], params[f"{prefix}.W_h{g}"], params[f"{prefix}.b_{g}"])
             for g in "ifgo"}
    outputs = []
    for t in range(n):
        x_t = ad.gather_rows(x, [t])
        pre = {}
        for g, (w_x, w_h, b) in gates.items():
            pre[g] = ad.add(ad.add(ad.matmul(x_t, w_x), ad.matmul(h, w_h)), b)
        i_t = ad.sigmoid(pre["i"])
        f_t = ad.sigmoid(pre["f"])
        g_t = ad.tanh(pre["g"])
        o_t = ad.sigmoid(pre["o"])
        c = ad.add(ad.mul(f_t, c), ad.mul(i_t, g_t))
        h = ad.mul(o_t, ad.tanh(c))
        outputs.append(h)
    return ad.concat(outputs, axis=0)


def project_segments(raw: SegmentFeatures, params: ModelParams, config: ModelConfig):
    """Map raw per-segment features to three (N, D) blocks."""
    widths = {
        "visual": (raw.visual.shape[1], config.d_visual_in),
        "audio": (raw.audio.shape[1], config.d_audio_in),
        "text": (raw.text.shape[1], config.d_text_in),
    }
    for name, (got, want) in widths.items():
        if got != want:
            raise ConfigError(f"{name} width is {got}, model expects {want}")
    if raw.n_segments != config.n_segments:
        raise ConfigError(
            f"video has {raw.n_segments} segments, model expects {config.n_segments}"
        )
    dtype = params.dtype
    blocks = []
    for modality, arr in (("visual", raw.visual), ("audio", raw.audio), ("text", raw.text)):
        x = ad.constant(arr, dtype=dtype)
        kind = (
            "mlp" if modality == "text" else config.projection_kind_visual_audio
        )
        if kind == "lstm":
            blocks.append(_lstm(x, params, f"proj.{modality}", config.d))
        else:
            blocks.append(_mlp2(x, params, f"proj.{modality}", ad.tanh))
    return tuple(blocks)


# ---------------------------------------------------------------------------
# GNN message passing

def _conv_operator(graph: VideoGraph, dtype) -> ad.Tensor:
    # symmetrically normalized adjacency with self-loops; a constant per graph
    adj = graph.adjacency(self_loops=True)
    inv_sqrt = 1.0 / np.sqrt(adj.sum(axis=1))
    op = adj * inv_sqrt[:, None] * inv_sqrt[None, :]
    return ad.constant(op.astype(dtype), dtype=dtype)


def _attention_mask(graph: VideoGraph, dtype) -> ad.Tensor:
    # 0 on edges and the diagonal, a large negative everywhere else, so the
    # row softmax only distributes mass over each node's neighborhood
    adj = graph.adjacency(self_loops=True)
    mask = np.where(adj > 0, 0.0, _MASK_VALUE)
    return ad.constant(mask.astype(dtype), dtype=dtype)


def _ones(n: int, shape_row: bool, dtype) -> ad.Tensor:
    return ad.constant(np.ones((1, n) if shape_row else (n, 1)), dtype=dtype)


def gnn_forward(
    graph: VideoGraph,
    layers: list[dict[str, ad.Tensor]],
    kind: str,
    reps: ad.Tensor | None = None,
    dropout_masks: list[ad.Tensor] | None = None,
) -> ad.Tensor:
    """Run message passing over one graph and return new node representations.

    ``layers`` holds each layer's tensors (``W`` plus ``a_src``/``a_dst`` for
    attention).  ``reps`` overrides the graph's stored representations with a
    differentiable tensor; relu is applied between layers, identity after the
    last one.
    """
    if kind not in GNN_KINDS:
        raise ConfigError(f"unknown gnn kind {kind!r}")
    if reps is None:
        reps = ad.constant(graph.representations())
    if reps.shape[0] != graph.n_nodes:
        raise ConfigError(
            f"representations have {reps.shape[0]} rows, graph has {graph.n_nodes} nodes"
        )
    dtype = reps.dtype
    n = graph.n_nodes
    h = reps
    conv_op = _conv_operator(graph, dtype) if kind == "degree-normalized-conv" else None
    mask = _attention_mask(graph, dtype) if kind == "attention" else None
    for layer_idx, layer in enumerate(layers):
        w = layer["W"]
        if h.shape[1] != w.shape[0]:
            raise ConfigError(
                f"gnn layer {layer_idx}: width {h.shape[1]} does not match W {w.shape}"
            )
        z = ad.matmul(h, w)
        if kind == "degree-normalized-conv":
            h = ad.matmul(conv_op, z)
        else:
            src = ad.matmul(ad.matmul(z, layer["a_src"]), _ones(n, True, dtype))
            dst = ad.matmul(_ones(n, False, dtype), ad.transpose(ad.matmul(z, layer["a_dst"])))
            scores = ad.leaky_relu(ad.add(src, dst), _ATTENTION_SLOPE)
            att = ad.softmax(ad.add(scores, mask), axis=1)
            h = ad.matmul(att, z)
        if layer_idx < len(layers) - 1:
            h = ad.relu(h)
            if dropout_masks is not None:
                h = ad.mul(h, dropout_masks[layer_idx])
    return h


def gnn_layer_params(params: ModelParams, which: str, config: ModelConfig):
    layers = []
    for layer in range(config.gnn_layers):
        prefix = f"{which}.layer{layer}"
        entry = {"W": params[f"{prefix}.W"]}
        if config.gnn_kind == "attention":
            entry["a_src"] = params[f"{prefix}.a_src"]
            entry["a_dst"] = params[f"{prefix}.a_dst"]
        layers.append(entry)
    return layers


# ---------------------------------------------------------------------------
# Heads

def node_importance(new_reps: ad.Tensor, params: ModelParams, n: int):
    """Per-modality softmax over the weight-head scores of the 3N nodes.

    Returns the three (1, N) weight rows and their (3, N) concatenation.
    """
    scores = _mlp2(new_reps, params, "whead", ad.relu)  # (3N, 1)
    rows = []
    for m in range(3):
        block = ad.gather_rows(scores, list(range(m * n, (m + 1) * n)))
        rows.append(ad.softmax(ad.transpose(block), axis=1))
    return rows, ad.concat(rows, axis=0)


_indicator_cache: dict = {}


def _partition_indicator(partition: InstancePartition, dtype) -> ad.Tensor:
    key = (partition.n_segments, partition.k, np.dtype(dtype).str)
    cached = _indicator_cache.get(key)
    if cached is None:
        mat = np.zeros((partition.n_segments, partition.k))
        for i, group in enumerate(partition.groups):
            mat[list(group), i] = 1.0
        cached = ad.constant(mat, dtype=dtype)
        _indicator_cache[key] = cached
    return cached


def instance_weights(alpha_hat: ad.Tensor, partition: InstancePartition) -> ad.Tensor:
    """alpha_i = (1/3) * sum over the instance's segments of the three modality weights."""
    per_segment = ad.scalar_mul(ad.row_sum(alpha_hat), 1.0 / 3.0)  # (1, N)
    return ad.matmul(per_segment, _partition_indicator(partition, alpha_hat.dtype))


def instance_features(subgraph_reps: list[ad.Tensor], partition: InstancePartition) -> ad.Tensor:
    """Mean node representation per modality, concatenated to (K, 3D)."""
    m = partition.segments_per_instance
    rows = []
    for reps in subgraph_reps:
        if reps.shape[0] != 3 * m:
            raise ConfigError(
                f"subgraph has {reps.shape[0]} nodes, expected {3 * m}"
            )
        parts = [
            ad.row_mean(ad.gather_rows(reps, list(range(b * m, (b + 1) * m))))
            for b in range(3)
        ]
        rows.append(ad.concat(parts, axis=1))
    return ad.concat(rows, axis=0)


def aggregate(alpha: ad.Tensor, f_instances: ad.Tensor) -> ad.Tensor:
    """Importance-weighted sum of instance features: (1, K) @ (K, 3D)."""
    return ad.matmul(alpha, f_instances)


def classify(f: ad.Tensor, params: ModelParams, dropout_mask: ad.Tensor | None = None) -> ad.Tensor:
    """MLP plus softmax over {non-hate, hate}."""
    h = ad.relu(ad.add(ad.matmul(f, params["clf.W1"]), params["clf.b1"]))
    if dropout_mask is not None:
        h = ad.mul(h, dropout_mask)
    logits = ad.add(ad.matmul(h, params["clf.W2"]), params["clf.b2"])
    return ad.softmax(logits, axis=1)


# ---------------------------------------------------------------------------
# Full forward pass

def _dropout_mask(rng, shape, p, dtype) -> ad.Tensor:
    keep = (rng.random(size=shape) >= p).astype(np.float64) / (1.0 - p)
    return ad.constant(keep, dtype=dtype)


def _uniform_rows(shape, dtype=np.float64) -> np.ndarray:
    return np.full(shape, 1.0 / shape[-1], dtype=dtype)


def forward(
    raw: SegmentFeatures,
    params: ModelParams,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Run the configured pipeline variant on one video.

    ``rng`` enables dropout (training mode); leave None for evaluation.
    """
    dtype = params.dtype
    n, k = config.n_segments, config.n_instances
    proj = project_segments(raw, params, config)
    use_dropout = rng is not None and config.dropout > 0.0

    def maybe_mask(shape):
        return _dropout_mask(rng, shape, config.dropout, dtype) if use_dropout else None

    if use_dropout:
        # dropout on the projected features regularizes every downstream path
        proj = tuple(ad.mul(block, maybe_mask((n, config.d))) for block in proj)

    if config.ablation == "no_graph":
        f = ad.concat([ad.row_mean(block) for block in proj], axis=1)
        h_hat = classify(f, params, maybe_mask((1, config.classifier_hidden)))
        return ForwardOutput(
            h_hat=np.asarray(h_hat.data[0], dtype=np.float64),
            alpha=_uniform_rows((k,)),
            alpha_hat=_uniform_rows((3, n)),
            f_instances=np.tile(np.asarray(f.data, dtype=np.float64), (k, 1)),
            h_hat_tensor=h_hat,
        )

    partition = config.partition()
    blocks_np = tuple(np.asarray(p.data, dtype=np.float64) for p in proj)

    alpha_rows = None
    alpha_t = None
    wreps = None
    if config.ablation in ("full", "weight_only"):
        wgraph = build_weight_graph(blocks_np, config.epsilon)
        wreps = gnn_forward(
            wgraph,
            gnn_layer_params(params, "wgnn", config),
            config.gnn_kind,
            reps=ad.concat(list(proj), axis=0),
            dropout_masks=[maybe_mask((3 * n, config.hidden)) for _ in range(config.gnn_layers - 1)]
            if use_dropout else None,
        )
        alpha_rows, alpha_hat_t = node_importance(wreps, params, n)
        alpha_t = instance_weights(alpha_hat_t, partition)
        alpha_hat_np = np.asarray(alpha_hat_t.data, dtype=np.float64)
    else:
        alpha_hat_np = _uniform_rows((3, n))

    if config.ablation in ("full", "instance_only"):
        m = partition.segments_per_instance
        subgraphs = build_instance_subgraphs(blocks_np, partition, config.epsilon)
        sub_reps = []
        for inst, sub in enumerate(subgraphs):
            idx = list(partition.groups[inst])
            stacked = ad.concat([ad.gather_rows(block, idx) for block in proj], axis=0)
            sub_reps.append(
                gnn_forward(
                    sub,
                    gnn_layer_params(params, "ignn", config),
                    config.gnn_kind,
                    reps=stacked,
                    dropout_masks=[maybe_mask((3 * m, config.hidden)) for _ in range(config.gnn_layers - 1)]
                    if use_dropout else None,
                )
            )
        f_inst = instance_features(sub_reps, partition)

    if config.ablation == "full":
        f = aggregate(alpha_t, f_inst)
        f_inst_np = np.asarray(f_inst.data, dtype=np.float64)
        alpha_np = np.asarray(alpha_t.data[0], dtype=np.float64)
    elif config.ablation == "instance_only":
        uniform = ad.constant(_uniform_rows((1, k)), dtype=dtype)
        f = aggregate(uniform, f_inst)
        f_inst_np = np.asarray(f_inst.data, dtype=np.float64)
        alpha_np = _uniform_rows((k,))
    else:  # weight_only: weighted node average per modality, then concat
        parts = []
        for mth, row in enumerate(alpha_rows):
            block = ad.gather_rows(wreps, list(range(mth * n, (mth + 1) * n)))
            parts.append(ad.matmul(row, block))
        f = ad.concat(parts, axis=1)
        alpha_np = np.asarray(alpha_t.data[0], dtype=np.float64)
        f_inst_np = np.tile(np.asarray(f.data, dtype=np.float64), (k, 1))

    h_hat = classify(f, params, maybe_mask((1, config.classifier_hidden)))
    return ForwardOutput(
        h_hat=np.asarray(h_hat.data[0], dtype=np.float64),
        alpha=alpha_np,
        alpha_hat=alpha_hat_np,
        f_instances=f_inst_np,
        h_hat_tensor=h_hat,
    )
