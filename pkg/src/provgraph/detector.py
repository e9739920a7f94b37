"""Relational GraphSAGE detector over IPGs.

Per-node-type projections lift raw node features to ``d`` dims; each of the
message-passing layers computes::

    h'_v = relu(W_self h_v + sum_r W_r * mean_{u in N_r(v)} (a_uv h_u))

where ``r`` ranges over edge types, ``N_r(v)`` are in-neighbours along type
``r`` and ``a_uv`` is the scalar edge attribute. A global mean pool and a
logistic head give p(adversarial | graph). Mini-batches are processed as one
disjoint union graph with sparse aggregation matrices.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .nn import AdamState, NumericalError, adam_step, check_finite
from .provenance import EDGE_TYPES, NODE_TYPES, InferenceProvenanceGraph
from .store import deserialize_params, serialize_params

log = logging.getLogger(__name__)

RAW_FEATURES = ("mean", "l2_norm", "sparsity", "mask", "layer_position")
RAW_WIDTH = len(RAW_FEATURES)


@dataclass
class DetectorConfig:
    hidden_dim: int = 128
    layers: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if min(self.hidden_dim, self.layers, self.batch_size) < 1 or self.learning_rate <= 0:
            raise ValueError("detector config values must be positive")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")


@dataclass
class TrainingCurves:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return asdict(self)


class DetectorModel:
    """Parameter store; names are ``proj.<node_type>``, ``sage<k>.self``,
    ``sage<k>.<edge_type>``, ``head.w`` and ``head.b``."""

    def __init__(self, params: dict, config: DetectorConfig):
        self.params = params
        self.config = config

    @classmethod
    def init(cls, config: DetectorConfig) -> "DetectorModel":
        rng = np.random.default_rng(config.seed)
        d = config.hidden_dim

        def glorot(n_in, n_out):
            bound = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-bound, bound, size=(n_in, n_out))

        params = {}
        for t in NODE_TYPES:
            params[f"proj.{t}"] = glorot(RAW_WIDTH, d)
        for k in range(config.layers):
            params[f"sage{k}.self"] = glorot(d, d)
            for r in EDGE_TYPES:
                params[f"sage{k}.{r}"] = glorot(d, d)
        params["head.w"] = glorot(d, 1)[:, 0]
        params["head.b"] = np.zeros(1)
        return cls(params, config)

    def names(self) -> list:
        return list(self.params)

    def copy(self) -> "DetectorModel":
        return DetectorModel({k: v.copy() for k, v in self.params.items()}, self.config)

    def to_bytes(self) -> bytes:
        return serialize_params(self.params, {"kind": "detector", "config": asdict(self.config)})

    @classmethod
    def from_bytes(cls, data: bytes) -> "DetectorModel":
        tensors, meta = deserialize_params(data)
        if meta.get("kind") != "detector":
            raise ValueError("container does not hold a detector")
        return cls(tensors, DetectorConfig(**meta["config"]))


# ---------------------------------------------------------------------------
# Graph compilation and batching
# ---------------------------------------------------------------------------


def raw_node_features(ipg: InferenceProvenanceGraph, width: int = RAW_WIDTH) -> np.ndarray:
    """(mean, l2, sparsity, mask, layer_index / max layer_index), zero-padded to ``width``."""
    if not ipg.nodes:
        return np.zeros((0, width))
    top = max(n.layer_index for n in ipg.nodes)
    rows = [(n.mean, n.l2_norm, n.sparsity, float(n.mask), n.layer_index / top if top > 0 else 0.0)
            for n in ipg.nodes]
    raw = np.array(rows, dtype=np.float64)
    if raw.shape[1] > width:
        raise ValueError(f"raw features wider than {width}")
    return np.pad(raw, ((0, 0), (0, width - raw.shape[1])))


@dataclass
class CompiledGraph:
    raw: np.ndarray  # (n, RAW_WIDTH)
    node_type: np.ndarray  # (n,) index into NODE_TYPES
    edges: dict  # edge type -> (src, dst, attr) local index arrays
    label: int

    @property
    def n_nodes(self) -> int:
        return len(self.node_type)


def compile_graph(ipg: InferenceProvenanceGraph) -> CompiledGraph:
    type_code = {t: i for i, t in enumerate(NODE_TYPES)}
    index = {n.node_id: i for i, n in enumerate(ipg.nodes)}
    try:
        types = np.array([type_code[n.node_type] for n in ipg.nodes], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"unknown node type {exc}") from None
    edges = {}
    for r in EDGE_TYPES:
        sel = [e for e in ipg.edges if e.edge_type == r]
        edges[r] = (np.array([index[e.source] for e in sel], dtype=np.int64),
                    np.array([index[e.target] for e in sel], dtype=np.int64),
                    np.array([e.attribute for e in sel], dtype=np.float64))
    return CompiledGraph(raw_node_features(ipg), types, edges, int(ipg.label))


def relation_matrix(n: int, src, dst, attr) -> sp.csr_matrix:
    """A[v, u] = a_uv / |N(v)|, so ``A @ H`` is the attribute-weighted neighbour mean."""
    deg = np.bincount(dst, minlength=n).astype(np.float64)
    vals = attr / deg[dst] if len(dst) else attr
    return sp.csr_matrix((vals, (dst, src)), shape=(n, n))


@dataclass
class GraphBatch:
    raw: np.ndarray
    node_type: np.ndarray
    relations: dict  # edge type -> csr (n, n)
    pool: sp.csr_matrix  # (g, n) mean pooling
    labels: np.ndarray
    relations_t: dict = field(default_factory=dict)


def make_batch(graphs: Sequence[CompiledGraph]) -> GraphBatch:
    sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
    if np.any(sizes == 0):
        raise ValueError("cannot batch an empty graph")
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    n = int(sizes.sum())
    raw = np.concatenate([g.raw for g in graphs])
    node_type = np.concatenate([g.node_type for g in graphs])
    relations = {}
    for r in EDGE_TYPES:
        src = np.concatenate([g.edges[r][0] + o for g, o in zip(graphs, offsets)])
        dst = np.concatenate([g.edges[r][1] + o for g, o in zip(graphs, offsets)])
        attr = np.concatenate([g.edges[r][2] for g in graphs])
        relations[r] = relation_matrix(n, src, dst, attr)
    member = np.repeat(np.arange(len(graphs)), sizes)
    pool = sp.csr_matrix((1.0 / sizes[member], (member, np.arange(n))), shape=(len(graphs), n))
    labels = np.array([g.label for g in graphs], dtype=np.float64)
    return GraphBatch(raw, node_type, relations, pool, labels,
                      {r: a.T.tocsr() for r, a in relations.items()})


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def standardize_features(ipg_or_raw, node_types, projections: dict) -> np.ndarray:
    """Project padded raw node features with the projection of each node's type.

    ``ipg_or_raw`` is an IPG (types taken from its nodes) or a raw matrix paired
    with ``node_types`` (names or indices).
    """
    if isinstance(ipg_or_raw, InferenceProvenanceGraph):
        raw = raw_node_features(ipg_or_raw)
        node_types = [n.node_type for n in ipg_or_raw.nodes]
    else:
        raw = np.asarray(ipg_or_raw, dtype=np.float64)
    names = [t if isinstance(t, str) else NODE_TYPES[t] for t in node_types]
    d = next(iter(projections.values())).shape[1]
    out = np.zeros((len(names), d))
    for t in set(names):
        if t not in projections:
            raise ValueError(f"unknown node type {t!r}")
        rows = [i for i, name in enumerate(names) if name == t]
        proj = projections[t]
        out[rows] = np.pad(raw[rows], ((0, 0), (0, proj.shape[0] - raw.shape[1]))) @ proj
    return out


def sage_layer(h: np.ndarray, relations: dict, w_self: np.ndarray, w_rel: dict) -> np.ndarray:
    z = h @ w_self
    for r, a in relations.items():
        if r in w_rel:
            z = z + (a @ h) @ w_rel[r]
    return np.maximum(z, 0.0)


def readout(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] == 0:
        raise ValueError("cannot pool an empty graph")
    return h.mean(axis=0)


def _sigmoid(s):
    return np.where(s >= 0, 1.0 / (1.0 + np.exp(-np.abs(s))), np.exp(-np.abs(s)) / (1.0 + np.exp(-np.abs(s))))


def bce_from_logits(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-graph -[y ln p + (1-y) ln(1-p)] with p = sigmoid(s), computed stably."""
    return np.maximum(s, 0.0) - s * y + np.log1p(np.exp(-np.abs(s)))


def bce(p: np.ndarray, y: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


# ---------------------------------------------------------------------------
# Forward / backward over a batch
# ---------------------------------------------------------------------------


def _forward(model: DetectorModel, batch: GraphBatch):
    P = model.params
    cfg = model.config
    h = np.zeros((len(batch.node_type), cfg.hidden_dim))
    for ti, t in enumerate(NODE_TYPES):
        rows = batch.node_type == ti
        if rows.any():
            h[rows] = batch.raw[rows] @ P[f"proj.{t}"]
    cache = {"h0": h}
    live = [r for r in EDGE_TYPES if batch.relations[r].nnz]
    cache["live"] = live
    for k in range(cfg.layers):
        # relation types without edges aggregate to zero and are skipped
        agg = {r: batch.relations[r] @ h for r in live}
        z = h @ P[f"sage{k}.self"]
        for r in live:
            z = z + agg[r] @ P[f"sage{k}.{r}"]
        cache[f"in{k}"] = h
        cache[f"agg{k}"] = agg
        cache[f"z{k}"] = z
        h = np.maximum(z, 0.0)
    g = batch.pool @ h
    s = g @ P["head.w"] + P["head.b"][0]
    cache["g"] = g
    return check_finite(s, "detector forward"), cache


def _backward(model: DetectorModel, batch: GraphBatch, cache, ds: np.ndarray) -> dict:
    P = model.params
    cfg = model.config
    grads = {"head.w": cache["g"].T @ ds, "head.b": np.array([ds.sum()])}
    dh = batch.pool.T @ np.outer(ds, P["head.w"])
    for k in range(cfg.layers - 1, -1, -1):
        dz = np.where(cache[f"z{k}"] > 0, dh, 0.0)
        h_in = cache[f"in{k}"]
        grads[f"sage{k}.self"] = h_in.T @ dz
        dh = dz @ P[f"sage{k}.self"].T
        for r in EDGE_TYPES:
            if r not in cache["live"]:
                grads[f"sage{k}.{r}"] = np.zeros_like(P[f"sage{k}.{r}"])
                continue
            grads[f"sage{k}.{r}"] = cache[f"agg{k}"][r].T @ dz
            dh = dh + batch.relations_t[r] @ (dz @ P[f"sage{k}.{r}"].T)
    for ti, t in enumerate(NODE_TYPES):
        rows = batch.node_type == ti
        grads[f"proj.{t}"] = batch.raw[rows].T @ dh[rows]
    return grads


def batch_logits(model: DetectorModel, batch: GraphBatch) -> np.ndarray:
    return _forward(model, batch)[0]


def loss_and_grads(model: DetectorModel, batch: GraphBatch):
    """Mean BCE over the batch and gradients for every parameter."""
    s, cache = _forward(model, batch)
    y = batch.labels
    loss = float(bce_from_logits(s, y).mean())
    ds = (_sigmoid(s) - y) / len(y)
    grads = _backward(model, batch, cache, ds)
    for name, g in grads.items():
        check_finite(g, f"gradient of {name}")
    return loss, grads


def detector_forward(model: DetectorModel, ipg: InferenceProvenanceGraph) -> float:
    """p(adversarial | graph); empty graphs score 0.5 with a warning."""
    if not ipg.nodes:
        warnings.warn(f"empty graph {ipg.sample_id!r} scored 0.5", RuntimeWarning)
        return 0.5
    s = batch_logits(model, make_batch([compile_graph(ipg)]))
    return float(_sigmoid(s)[0])


def score_graphs(model: DetectorModel, graphs: Sequence[InferenceProvenanceGraph],
                 chunk: int = 64) -> np.ndarray:
    scores = np.full(len(graphs), 0.5)
    live = [i for i, g in enumerate(graphs) if g.nodes]
    for i in set(range(len(graphs))) - set(live):
        warnings.warn(f"empty graph {graphs[i].sample_id!r} scored 0.5", RuntimeWarning)
    for start in range(0, len(live), chunk):
        idx = live[start:start + chunk]
        batch = make_batch([compile_graph(graphs[i]) for i in idx])
        scores[idx] = _sigmoid(batch_logits(model, batch))
    return scores


def predict_batch(model: DetectorModel, manifest, split: str, attacks=None):
    """(scores, labels) for every graph of ``split`` in manifest order."""
    recs = [r for r in manifest.split(split) if attacks is None or r.attack_kind in set(attacks)]
    graphs = [manifest.load(r) for r in recs]
    return score_graphs(model, graphs), np.array([r.graph_label for r in recs], dtype=np.int64)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _evaluate(model, compiled, chunk=128):
    if not compiled:
        return float("nan"), float("nan")
    losses, correct = [], 0
    for start in range(0, len(compiled), chunk):
        b = make_batch(compiled[start:start + chunk])
        s = batch_logits(model, b)
        losses.append(bce_from_logits(s, b.labels))
        correct += int(np.sum((_sigmoid(s) >= model.config.threshold) == (b.labels == 1)))
    return float(np.concatenate(losses).mean()), correct / len(compiled)


def train_detector(train: Sequence[InferenceProvenanceGraph],
                   val: Optional[Sequence[InferenceProvenanceGraph]] = None,
                   config: Optional[DetectorConfig] = None):
    """Adam on mean BCE over shuffled mini-batches; early stops on val loss and
    restores the best parameters. Returns (model, curves)."""
    config = config or DetectorConfig()
    if not train:
        raise ValueError("empty training set")
    empty = [g.sample_id for g in list(train) + list(val or []) if not g.nodes]
    if empty:
        raise ValueError(f"empty graphs cannot be used for training: {empty[:5]}")
    comp_train = [compile_graph(g) for g in train]
    comp_val = [compile_graph(g) for g in (val or [])]
    model = DetectorModel.init(config)
    names = model.names()
    params = [model.params[k] for k in names]
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(config.seed)
    curves = TrainingCurves()
    best_val, best_params, since_best = np.inf, None, 0
    n = len(comp_train)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = make_batch([comp_train[i] for i in order[start:start + config.batch_size]])
            try:
                s, cache = _forward(model, batch)
                loss = bce_from_logits(s, batch.labels)
                ds = (_sigmoid(s) - batch.labels) / len(batch.labels)
                grads = _backward(model, batch, cache, ds)
                params, state = adam_step(params, [grads[k] for k in names], state, config.learning_rate)
            except NumericalError as exc:
                raise NumericalError(f"detector training diverged at epoch {epoch}: {exc}") from None
            model.params = dict(zip(names, params))
            total += float(loss.sum())
            correct += int(np.sum((_sigmoid(s) >= config.threshold) == (batch.labels == 1)))
        curves.train_loss.append(total / n)
        curves.train_acc.append(correct / n)
        if comp_val:
            vl, va = _evaluate(model, comp_val)
            curves.val_loss.append(vl)
            curves.val_acc.append(va)
            if vl < best_val:
                best_val, best_params, since_best = vl, list(params), 0
                curves.best_epoch = epoch
            else:
                since_best += 1
                if since_best >= config.patience:
                    log.info("early stop at epoch %d", epoch)
                    break
        log.debug("epoch %d train loss %.4f", epoch, curves.train_loss[-1])
    if best_params is not None:
        model.params = dict(zip(names, best_params))
    elif curves.train_loss:
        curves.best_epoch = len(curves.train_loss) - 1
    return model, curves
