"""Dataset I/O, the SGD training loop with GradNorm, and evaluation."""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mcgcn import autodiff as ad
from mcgcn import datasynth, graphs, metrics
from mcgcn import message_passing as mp
from mcgcn import multitask as mt
from mcgcn.config import RunConfig

log = logging.getLogger(__name__)

GRAPHS_FILE = "graphs.jsonl"
SPLIT_FILE = "split.json"


class TrainingError(RuntimeError):
    pass


class CompatibilityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    items: "OrderedDict[str, dict]"
    split: dict

    @property
    def in_dim(self) -> int:
        first = next(iter(self.items.values()))
        return next(iter(first.values())).node_features.shape[1]

    def subset(self, split: str) -> list:
        key = {"train": "train_ids", "test": "test_ids"}[split]
        return [self.items[i] for i in self.split[key]]


def build_graphs(clusters, run: RunConfig):
    """Both topologies for every cluster, in cluster order."""
    out = []
    for c in clusters:
        out.extend(graphs.assemble_pair(c, k=run.graph.k, r=run.graph.r, symmetrize=run.graph.symmetrize))
    return out


def write_dataset(directory, clusters, manifest: datasynth.SplitManifest, run: RunConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    graphs.write_graphs(directory / GRAPHS_FILE, build_graphs(clusters, run))
    split = manifest.to_dict()
    split["graph"] = {"k": run.graph.k, "r": run.graph.r, "symmetrize": run.graph.symmetrize}
    split["descriptor"] = {"name": graphs.DEFAULT_DESCRIPTOR.name, "dim": graphs.DEFAULT_DESCRIPTOR.dim}
    (directory / SPLIT_FILE).write_text(json.dumps(split, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def generate(run: RunConfig, directory) -> Path:
    clusters, manifest = datasynth.generate_dataset(run.generator_config())
    return write_dataset(directory, clusters, manifest, run)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    gpath, spath = directory / GRAPHS_FILE, directory / SPLIT_FILE
    for p in (gpath, spath):
        if not p.exists():
            raise FileNotFoundError(f"dataset file missing: {p}")
    items = OrderedDict(sorted(graphs.read_graph_pairs(gpath).items()))
    split = json.loads(spath.read_text(encoding="utf-8"))
    missing = [i for i in split["train_ids"] + split["test_ids"] if i not in items]
    if missing:
        raise ValueError(f"split references unknown cluster {missing[0]}")
    return Dataset(items, split)


def dataset_from_clusters(clusters, manifest, run: RunConfig) -> Dataset:
    items = OrderedDict()
    for c in clusters:
        knn, rad = graphs.assemble_pair(c, k=run.graph.k, r=run.graph.r, symmetrize=run.graph.symmetrize)
        items[c.id] = {"knn": knn, "radius": rad}
    return Dataset(items, manifest.to_dict())


# ---------------------------------------------------------------------------
# model construction


N_NODE_CLASSES = len(datasynth.MorphologyArchetype)
N_GRAPH_CLASSES = len(datasynth.DistributionArchetype)


def model_config(run: RunConfig, in_dim: int) -> mp.ModelConfig:
    m = run.model
    return mp.ModelConfig(
        in_dim=in_dim,
        n_node_classes=N_NODE_CLASSES,
        n_graph_classes=N_GRAPH_CLASSES,
        hidden=m.hidden,
        depth=m.depth,
        beta=m.beta,
        eps=m.eps,
        streams=run.streams,
        shared_streams=m.shared_streams,
        use_edge_features=m.use_edge_features,
    )


def load_teacher_logits(path) -> dict:
    """``{cluster_id: {"node_logits": [[...]], "graph_logits": [...]}}`` from JSON."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {
        cid: (np.asarray(v["node_logits"], dtype=np.float64), np.asarray(v["graph_logits"], dtype=np.float64))
        for cid, v in raw.items()
    }


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model_cfg: mp.ModelConfig
    params: "OrderedDict[str, ad.Tensor]"
    log: list = field(default_factory=list)
    gradnorm: mt.GradNormState | None = None


def _batches(ids, batch_size, rng):
    order = rng.permutation(len(ids))
    return [[ids[i] for i in order[s : s + batch_size]] for s in range(0, len(ids), batch_size)]


def _task_losses(out: mp.ForwardResult, batch: mp.GraphBatch, run: RunConfig, teachers):
    L_m = ad.cross_entropy(out.node_logits, batch.node_labels)
    L_d = ad.cross_entropy(out.graph_logits, batch.graph_labels)
    if teachers is not None:
        T = run.distillation.temperature
        tn = np.concatenate([teachers[i][0] for i in batch.ids])
        tg = np.stack([teachers[i][1] for i in batch.ids])
        L_m = ad.add(L_m, mt.distill_loss(out.node_logits, tn, T))
        L_d = ad.add(L_d, mt.distill_loss(out.graph_logits, tg, T))
    return mt.TaskLosses(L_m, L_d)


def train(run: RunConfig, data: Dataset, log_path=None, on_step=None) -> TrainResult:
    """Train per ``run`` on the dataset's train split.

    Writes one JSON line per optimisation step to ``log_path`` when given.
    """
    cfg = model_config(run, data.in_dim)
    params = mp.init_params(cfg, run.seed)
    train_items = data.subset("train")
    mp.fit_standardization(
        params,
        np.concatenate([item[cfg.streams[0]].node_features for item in train_items]),
        np.concatenate([item[s].edge_features for item in train_items for s in cfg.streams]),
    )
    arrays = OrderedDict((k, v.data.copy()) for k, v in params.items())
    velocity = {k: np.zeros_like(v) for k, v in arrays.items()}
    tr = run.training
    teachers = load_teacher_logits(run.distillation.teacher_logits_path) if run.distillation.enabled else None
    state = mt.GradNormState(alpha=tr.alpha, weight_lr=tr.weight_lr, shared_layer=mp.SHARED_LAYER)
    train_ids = list(data.split["train_ids"])
    rng = np.random.default_rng(np.random.SeedSequence([run.seed, 0x7EA1]))
    history = []
    fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    step = 0
    try:
        for epoch in range(tr.epochs):
            for ids in _batches(train_ids, tr.batch_size, rng):
                batch = mp.make_batch([data.items[i] for i in ids], cfg.streams)
                params = OrderedDict((k, ad.variable(v, name=k)) for k, v in arrays.items())
                try:
                    entry, grads = _step(run, cfg, params, batch, state, teachers, step)
                except ad.NonFiniteError as exc:
                    raise TrainingError(f"non-finite value at step {step} (epoch {epoch}): {exc}") from exc
                entry["epoch"] = epoch
                _sgd(arrays, velocity, grads, cfg, tr)
                history.append(entry)
                if fh is not None:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
                if on_step is not None:
                    on_step(entry)
                step += 1
    finally:
        if fh is not None:
            fh.close()
    final = OrderedDict((k, ad.variable(v, name=k)) for k, v in arrays.items())
    return TrainResult(cfg, final, history, state if run.task_mode == "multitask" else None)


def _step(run, cfg, params, batch, state, teachers, step):
    with ad.Tape() as tape:
        tape.watch(*params.values())
        out = mp.forward(cfg, params, batch)
        losses = _task_losses(out, batch, run, teachers)
        if run.task_mode == "multitask":
            total = mt.multitask_loss(losses, state.w)
        elif run.task_mode == "morphology_only":
            total = losses.L_m
        else:
            total = losses.L_d
    grads = ad.backward(tape, total)
    if not np.isfinite(float(total.data)):
        raise ad.NonFiniteError("loss")
    entry = {"step": step}
    if run.task_mode == "multitask":
        L = losses.values()
        state.record_initial(L)
        w_t = state.w.copy()
        G = mt.task_gradient_norms(tape, losses, w_t, params[state.shared_layer])
        targets = mt.gradnorm_targets(G, L, state)
        entry.update(
            L_m=float(L[0]),
            L_d=float(L[1]),
            w_m=float(w_t[0]),
            w_d=float(w_t[1]),
            G_m=float(G[0]),
            G_d=float(G[1]),
            L_grad=mt.gradnorm_loss(G, targets),
        )
        mt.gradnorm_update(state, G, targets)
    elif run.task_mode == "morphology_only":
        entry["L_m"] = float(losses.L_m.data)
    else:
        entry["L_d"] = float(losses.L_d.data)
    return entry, {p.name: g for p, g in grads.items() if p.name is not None}


def _decays(name: str) -> bool:
    return name.endswith(".weight")


def _sgd(arrays, velocity, grads, cfg, tr):
    names = [k for k in arrays if mp.trainable(cfg, k)]
    if tr.grad_clip > 0:
        total = np.sqrt(sum(float((grads[k] ** 2).sum()) for k in names))
        scale = min(1.0, tr.grad_clip / total) if total > 0 else 1.0
    else:
        scale = 1.0
    for k in names:
        v = velocity[k]
        v *= tr.momentum
        v += scale * grads[k]
        if tr.weight_decay > 0 and _decays(k):
            v += tr.weight_decay * arrays[k]
        arrays[k] = arrays[k] - tr.lr * v


# ---------------------------------------------------------------------------
# evaluation


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(cfg: mp.ModelConfig, params, items, batch_size: int = 64):
    """Node and graph class probabilities plus labels for a list of clusters."""
    node_p, graph_p, node_y, graph_y = [], [], [], []
    for s in range(0, len(items), batch_size):
        batch = mp.make_batch(items[s : s + batch_size], cfg.streams)
        out = mp.forward(cfg, params, batch)
        node_p.append(_softmax(out.node_logits.data))
        graph_p.append(_softmax(out.graph_logits.data))
        node_y.append(batch.node_labels)
        graph_y.append(batch.graph_labels)
    return np.concatenate(node_p), np.concatenate(node_y), np.concatenate(graph_p), np.concatenate(graph_y)


def _safe_auc(scores, labels):
    try:
        return metrics.multiclass_auc(scores, labels), metrics.per_class_auc(scores, labels)
    except ValueError:
        return None, {}


def evaluate(cfg: mp.ModelConfig, params, items) -> dict:
    """Metrics report for a set of clusters."""
    node_p, node_y, graph_p, graph_y = predict(cfg, params, items)
    d_auc, d_per = _safe_auc(graph_p, graph_y)
    m_auc, m_per = _safe_auc(node_p, node_y)
    return {
        "distribution_auc": d_auc,
        "morphology_auc": m_auc,
        "per_class_auc": {
            "distribution": {datasynth.DistributionArchetype(k).name: v for k, v in d_per.items()},
            "morphology": {datasynth.MorphologyArchetype(k).name: v for k, v in m_per.items()},
        },
        "accuracy": {
            "distribution": metrics.accuracy(graph_p, graph_y),
            "morphology": metrics.accuracy(node_p, node_y),
        },
        "n_nodes": int(len(node_y)),
        "n_graphs": int(len(graph_y)),
    }


def check_compatible(cfg: mp.ModelConfig, manifest: dict, data: Dataset) -> None:
    """Raise when the checkpoint and dataset disagree on dimensions."""
    first = next(iter(data.items.values()))
    g = next(iter(first.values()))
    data_dims = {
        "in_dim": int(g.node_features.shape[1]),
        "edge_dim": int(g.edge_features.shape[1]),
        "streams": sorted(first),
    }
    model_dims = {"in_dim": cfg.in_dim, "edge_dim": cfg.edge_dim, "streams": sorted(cfg.streams)}
    ok = (
        data_dims["in_dim"] == model_dims["in_dim"]
        and data_dims["edge_dim"] == model_dims["edge_dim"]
        and set(model_dims["streams"]) <= set(data_dims["streams"])
    )
    if not ok:
        raise CompatibilityError(f"checkpoint dimensions {model_dims} do not match dataset dimensions {data_dims}")
