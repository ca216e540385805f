"""GENConv message passing, pre-activation residual blocks and the two-head model.

Per stream (one per graph topology) node features are projected to the
hidden width and passed through ``depth`` residual blocks::

    H <- H + GraphConv(ReLU(LayerNorm(H)))

GraphConv builds per-edge messages ``ReLU(h_u + h_e) + eps``, combines them
with a per-channel softmax over neighbours at temperature ``beta``, rescales
the aggregate to the receiving node's norm (times a learnable ``s``) and
applies a two-layer MLP. Stream outputs are concatenated per node and
linearly projected to the fused embedding ``r_v``. The node head reads
``r_v``; the graph head reads its mean over each graph's nodes.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from mcgcn import autodiff as ad
from mcgcn.graphs import SpatialGraph

MSG_NORM_TOL = 1e-12


@dataclass
class ModelConfig:
    in_dim: int
    n_node_classes: int = 4
    n_graph_classes: int = 5
    hidden: int = 32
    depth: int = 8
    beta: float = 1.0
    eps: float = 1e-7
    edge_dim: int = 2
    streams: tuple = ("knn", "radius")
    shared_streams: bool = False
    use_edge_features: bool = True
    learn_s: bool = True

    def __post_init__(self):
        self.streams = tuple(self.streams)
        if not self.streams or any(s not in ("knn", "radius") for s in self.streams):
            raise ValueError(f"streams must be a non-empty subset of (knn, radius), got {self.streams}")
        if len(set(self.streams)) != len(self.streams):
            raise ValueError("duplicate stream")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.beta < 0 or not np.isfinite(self.beta):
            raise ValueError("beta must be finite and nonnegative")
        if self.depth < 0 or self.hidden < 1 or self.in_dim < 1:
            raise ValueError("depth >= 0, hidden >= 1 and in_dim >= 1 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["streams"] = list(self.streams)
        return d


# ---------------------------------------------------------------------------
# parameters


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def stream_prefix(cfg: ModelConfig, stream: str) -> str:
    return "shared" if cfg.shared_streams else stream


def init_params(cfg: ModelConfig, seed: int) -> "OrderedDict[str, ad.Tensor]":
    """Fresh parameters, deterministic in ``seed``. Insertion order is stable."""
    rng = np.random.default_rng(seed)
    h = cfg.hidden
    p: OrderedDict[str, np.ndarray] = OrderedDict()
    prefixes = []
    for s in cfg.streams:
        pre = stream_prefix(cfg, s)
        if pre not in prefixes:
            prefixes.append(pre)
    # fixed input standardisation, fitted on training data and never updated by SGD
    p["norm.node_shift"] = np.zeros(cfg.in_dim)
    p["norm.node_scale"] = np.ones(cfg.in_dim)
    p["norm.edge_scale"] = np.ones(1)
    for pre in prefixes:
        p[f"{pre}.in.weight"] = _glorot(rng, cfg.in_dim, h)
        p[f"{pre}.in.bias"] = np.zeros(h)
        p[f"{pre}.edge.weight"] = _glorot(rng, cfg.edge_dim, h)
        p[f"{pre}.edge.bias"] = np.zeros(h)
        for layer in range(cfg.depth):
            b = f"{pre}.block{layer}"
            p[f"{b}.ln.gain"] = np.ones(h)
            p[f"{b}.ln.bias"] = np.zeros(h)
            p[f"{b}.mlp1.weight"] = _glorot(rng, h, 2 * h)
            p[f"{b}.mlp1.bias"] = np.zeros(2 * h)
            p[f"{b}.mlp2.weight"] = _glorot(rng, 2 * h, h)
            p[f"{b}.mlp2.bias"] = np.zeros(h)
            p[f"{b}.s"] = np.ones((1, 1))
    p["fusion.weight"] = _glorot(rng, h * len(cfg.streams), h)
    p["fusion.bias"] = np.zeros(h)
    p["node_head.weight"] = _glorot(rng, h, cfg.n_node_classes)
    p["node_head.bias"] = np.zeros(cfg.n_node_classes)
    p["graph_head.weight"] = _glorot(rng, h, cfg.n_graph_classes)
    p["graph_head.bias"] = np.zeros(cfg.n_graph_classes)
    return OrderedDict((k, ad.variable(v, name=k)) for k, v in p.items())


def trainable(cfg: ModelConfig, name: str) -> bool:
    if name.startswith("norm."):
        return False
    return cfg.learn_s or not name.endswith(".s")


def fit_standardization(params, node_features, edge_features) -> None:
    """Set the ``norm.*`` entries from training-set statistics (in place).

    Node features get per-column z-scoring; edge offsets are divided by
    their root-mean-square so both topologies keep a common length unit.
    """
    x = np.asarray(node_features, dtype=np.float64)
    sd = x.std(axis=0)
    params["norm.node_shift"] = ad.variable(x.mean(axis=0), name="norm.node_shift")
    params["norm.node_scale"] = ad.variable(1.0 / np.where(sd > 1e-8, sd, 1.0), name="norm.node_scale")
    e = np.asarray(edge_features, dtype=np.float64)
    rms = float(np.sqrt(np.mean(e * e))) if e.size else 0.0
    params["norm.edge_scale"] = ad.variable(np.array([1.0 / rms if rms > 1e-12 else 1.0]), name="norm.edge_scale")


# ---------------------------------------------------------------------------
# batching


@dataclass
class StreamGraph:
    """Disjoint union of one topology over a batch.

    ``receivers[e]`` aggregates the message sent by ``senders[e]``.
    """

    receivers: np.ndarray
    senders: np.ndarray
    edge_features: np.ndarray
    num_nodes: int


@dataclass
class GraphBatch:
    node_features: np.ndarray
    streams: dict
    node_graph: np.ndarray
    nodes_per_graph: np.ndarray
    node_labels: np.ndarray
    graph_labels: np.ndarray
    ids: list = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.node_features)

    @property
    def num_graphs(self) -> int:
        return len(self.nodes_per_graph)


def stream_from_graph(g: SpatialGraph) -> StreamGraph:
    return StreamGraph(g.edges[:, 0].copy(), g.edges[:, 1].copy(), g.edge_features.copy(), g.n)


def make_batch(items, streams=("knn", "radius")) -> GraphBatch:
    """Batch a sequence of ``{topology_kind: SpatialGraph}`` dicts (one per cluster)."""
    feats, node_graph, counts, nl, gl, ids = [], [], [], [], [], []
    per = {s: ([], [], []) for s in streams}
    offset = 0
    for gi, item in enumerate(items):
        ref = item[streams[0]]
        for s in streams:
            g = item[s]
            if g.n != ref.n or not np.array_equal(g.node_features, ref.node_features):
                raise ValueError(f"cluster {ref.id}: stream graphs disagree on the node set")
            rec, snd, ef = per[s]
            rec.append(g.edges[:, 0] + offset)
            snd.append(g.edges[:, 1] + offset)
            ef.append(g.edge_features)
        feats.append(ref.node_features)
        node_graph.append(np.full(ref.n, gi, dtype=np.int64))
        counts.append(ref.n)
        nl.append(ref.node_labels)
        gl.append(ref.graph_label)
        ids.append(ref.id)
        offset += ref.n
    sg = {
        s: StreamGraph(
            np.concatenate(rec).astype(np.int64),
            np.concatenate(snd).astype(np.int64),
            np.concatenate(ef).reshape(-1, 2),
            offset,
        )
        for s, (rec, snd, ef) in per.items()
    }
    return GraphBatch(
        node_features=np.concatenate(feats),
        streams=sg,
        node_graph=np.concatenate(node_graph),
        nodes_per_graph=np.asarray(counts, dtype=np.int64),
        node_labels=np.concatenate(nl).astype(np.int64),
        graph_labels=np.asarray(gl, dtype=np.int64),
        ids=ids,
    )


# ---------------------------------------------------------------------------
# GENConv pieces


def construct_messages(h: ad.Tensor, senders, edge_feats: ad.Tensor | None, eps: float) -> ad.Tensor:
    """ReLU(h_sender + h_edge) + eps per edge; edge term dropped when ``edge_feats`` is None."""
    hu = ad.gather_rows(h, senders)
    if edge_feats is not None:
        hu = ad.add(hu, edge_feats)
    return ad.add_scalar(ad.relu(hu), eps)


def softmax_aggregate(messages: ad.Tensor, receivers, num_nodes: int, beta: float) -> ad.Tensor:
    return ad.segment_softmax_weighted_sum(messages, receivers, num_nodes, beta)


def mlp(x: ad.Tensor, params, prefix: str) -> ad.Tensor:
    y = ad.relu(ad.linear(x, params[f"{prefix}.mlp1.weight"], params[f"{prefix}.mlp1.bias"]))
    return ad.linear(y, params[f"{prefix}.mlp2.weight"], params[f"{prefix}.mlp2.bias"])


def msg_norm_update(h: ad.Tensor, m: ad.Tensor, s: ad.Tensor, update) -> ad.Tensor:
    """update(h + s * |h| * m / |m|), with the message term zeroed where |m| < 1e-12."""
    n, d = h.shape
    coef = ad.mul(ad.l2_norm(h), ad.guarded_reciprocal(ad.l2_norm(m), MSG_NORM_TOL))
    coef = ad.mul(coef, ad.broadcast(s, (n, 1)))
    return update(ad.add(h, ad.mul(ad.broadcast(coef, (n, d)), m)))


def graph_conv(x: ad.Tensor, sg: StreamGraph, params, prefix: str, block: str, cfg: ModelConfig) -> ad.Tensor:
    he = None
    if cfg.use_edge_features:
        feats = sg.edge_features * params["norm.edge_scale"].data[0]
        he = ad.linear(ad.constant(feats), params[f"{prefix}.edge.weight"], params[f"{prefix}.edge.bias"])
    msgs = construct_messages(x, sg.senders, he, cfg.eps)
    agg = softmax_aggregate(msgs, sg.receivers, sg.num_nodes, cfg.beta)
    return msg_norm_update(x, agg, params[f"{block}.s"], lambda z: mlp(z, params, block))


def gcn_block(h: ad.Tensor, sg: StreamGraph, params, prefix: str, layer: int, cfg: ModelConfig) -> ad.Tensor:
    """Pre-activation residual block: h + GraphConv(ReLU(LayerNorm(h)))."""
    block = f"{prefix}.block{layer}"
    x = ad.relu(ad.layer_norm(h, params[f"{block}.ln.gain"], params[f"{block}.ln.bias"]))
    return ad.add(h, graph_conv(x, sg, params, prefix, block, cfg))


def stream_forward(x: ad.Tensor, sg: StreamGraph, params, prefix: str, cfg: ModelConfig) -> ad.Tensor:
    h = ad.linear(x, params[f"{prefix}.in.weight"], params[f"{prefix}.in.bias"])
    for layer in range(cfg.depth):
        h = gcn_block(h, sg, params, prefix, layer, cfg)
    return h


def mean_readout(r_v: ad.Tensor, node_graph, nodes_per_graph) -> ad.Tensor:
    pooled = ad.segment_sum(r_v, node_graph, len(nodes_per_graph))
    inv = (1.0 / np.asarray(nodes_per_graph, dtype=np.float64))[:, None]
    return ad.mul(pooled, ad.constant(np.broadcast_to(inv, pooled.shape)))


@dataclass
class ForwardResult:
    node_logits: ad.Tensor
    graph_logits: ad.Tensor
    node_embedding: ad.Tensor
    graph_embedding: ad.Tensor
    stream_embeddings: dict


def forward(cfg: ModelConfig, params, batch: GraphBatch) -> ForwardResult:
    for s in cfg.streams:
        if s not in batch.streams:
            raise ValueError(f"batch lacks the {s} stream")
        if batch.streams[s].num_nodes != batch.num_nodes:
            raise ValueError(
                f"{s} graph has {batch.streams[s].num_nodes} nodes, features have {batch.num_nodes}"
            )
    x = ad.constant((batch.node_features - params["norm.node_shift"].data) * params["norm.node_scale"].data)
    outs = OrderedDict(
        (s, stream_forward(x, batch.streams[s], params, stream_prefix(cfg, s), cfg)) for s in cfg.streams
    )
    fused = ad.concat(list(outs.values()), axis=1) if len(outs) > 1 else next(iter(outs.values()))
    r_v = ad.linear(fused, params["fusion.weight"], params["fusion.bias"])
    node_logits = ad.linear(r_v, params["node_head.weight"], params["node_head.bias"])
    r_g = mean_readout(r_v, batch.node_graph, batch.nodes_per_graph)
    graph_logits = ad.linear(r_g, params["graph_head.weight"], params["graph_head.bias"])
    return ForwardResult(node_logits, graph_logits, r_v, r_g, outs)


SHARED_LAYER = "fusion.weight"


def forward_pair(cfg: ModelConfig, params, knn_graph: SpatialGraph, radius_graph: SpatialGraph) -> ForwardResult:
    """Forward pass for a single cluster given its two topology graphs."""
    if knn_graph.n != radius_graph.n:
        raise ValueError(f"node count mismatch: knn graph has {knn_graph.n} nodes, radius graph has {radius_graph.n}")
    return forward(cfg, params, make_batch([{"knn": knn_graph, "radius": radius_graph}], cfg.streams))
