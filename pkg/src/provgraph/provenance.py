"""Inference provenance graph (IPG) extraction from an instrumented forward pass.

Node groups follow module boundaries: optional input nodes, one node per
neuron of every dense layer, one node per output channel of every conv and
pooling layer. ReLU and flatten create no nodes; a ReLU output is attributed
to the nodes of the parametric layer in front of it.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .nn import LAYER_KINDS, Conv2d, Dense, Flatten, MaxPool2d, ReLU, TargetModel, forward

NODE_TYPES = ("input", "dense_neuron", "conv_channel", "pooled_channel")
EDGE_TYPES = ("dense_weight", "conv_channel_weight", "structural")
NODE_FEATURES = ("mean", "l2_norm", "sparsity_ratio")


@dataclass(frozen=True)
class ExtractionConfig:
    tau: float = 0.0
    include_input_nodes: bool = True
    seed: int = 0
    node_feature_set: tuple = NODE_FEATURES

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError("tau must be >= 0")
        if tuple(self.node_feature_set) != NODE_FEATURES:
            raise ValueError(f"node_feature_set is fixed to {NODE_FEATURES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["node_feature_set"] = list(self.node_feature_set)
        d["tau"] = "inf" if math.isinf(self.tau) else float(self.tau)
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, slots=True)
class IPGNode:
    node_id: int
    node_type: str
    layer_index: int
    mean: float
    l2_norm: float
    sparsity: float
    mask: int

    @property
    def features(self) -> tuple:
        return (self.mean, self.l2_norm, self.sparsity)


@dataclass(frozen=True, slots=True)
class IPGEdge:
    source: int
    target: int
    edge_type: str
    attribute: float


@dataclass
class InferenceProvenanceGraph:
    nodes: list
    edges: list
    sample_id: str = ""
    model_id: str = ""
    label: int = 0  # 1 = adversarial
    attack_kind: str = "benign"
    config_hash: str = ""
    predicted_label: int = -1
    input_label: int = -1

    def canonical(self) -> "InferenceProvenanceGraph":
        """Copy with nodes sorted by id and edges by (source, target, type)."""
        g = InferenceProvenanceGraph(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        g.nodes = sorted(self.nodes, key=lambda n: n.node_id)
        g.edges = sorted(self.edges, key=lambda e: (e.source, e.target, e.edge_type))
        return g

    def node_ids(self) -> set:
        return {n.node_id for n in self.nodes}

    def edge_keys(self) -> set:
        return {(e.source, e.target, e.edge_type) for e in self.edges}

    def check(self) -> None:
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        known = set(ids)
        for n in self.nodes:
            if n.node_type not in NODE_TYPES:
                raise ValueError(f"unknown node type {n.node_type!r}")
            if not all(math.isfinite(v) for v in n.features):
                raise ValueError(f"node {n.node_id} has non-finite features")
            if not (0.0 <= n.sparsity <= 1.0) or n.l2_norm < 0 or n.mask not in (0, 1):
                raise ValueError(f"node {n.node_id} violates feature invariants")
        for e in self.edges:
            if e.source not in known or e.target not in known:
                raise ValueError(f"edge {e.source}->{e.target} has a missing endpoint")
            if e.edge_type not in EDGE_TYPES:
                raise ValueError(f"unknown edge type {e.edge_type!r}")
            if not math.isfinite(e.attribute):
                raise ValueError("non-finite edge attribute")
            if e.edge_type == "structural" and e.attribute != 1.0:
                raise ValueError("structural edges must carry attribute 1.0")
        if self.label not in (0, 1):
            raise ValueError("graph label must be 0 or 1")
        if not verify_dag(self):
            raise ValueError("graph is not layer-ordered acyclic")


def node_summary(activation) -> tuple:
    """(mean, l2 norm, fraction of exact zeros) of an activation slice."""
    a = np.asarray(activation, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError("empty activation slice")
    return float(a.mean()), float(np.sqrt(np.dot(a, a))), float(np.count_nonzero(a == 0.0) / a.size)


def verify_dag(ipg: InferenceProvenanceGraph) -> bool:
    """True iff every edge points from a strictly lower layer to a higher one."""
    layer = {n.node_id: n.layer_index for n in ipg.nodes}
    for e in ipg.edges:
        if e.source not in layer or e.target not in layer:
            return False
        if layer[e.source] >= layer[e.target]:
            return False
    return True


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


@dataclass
class _Group:
    """One layer of nodes in the full (unfiltered) computation graph."""
    layer_index: int  # ordinal: 0 = input, then node-producing layers in order
    node_type: str
    model_layer: int  # index into model.layers, -1 for the input group
    first_id: int
    size: int
    capture_layer: int  # model layer whose output is this group's activation (-1: input)
    slices_are_channels: bool


class ProvenanceEngine:
    """Binds capture points to every layer of a model and builds IPGs."""

    def __init__(self, model: TargetModel):
        for i, layer in enumerate(model.layers):
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
        self.model = model
        self.capture_points = [(i, layer.kind) for i, layer in enumerate(model.layers)]
        self.captures: dict = {}
        self.groups, self.edge_plan = self._plan(model)

    def _hook(self, index, layer, output):
        self.captures[index] = output.copy()

    def run(self, x):
        """Forward once with capture; returns the trace."""
        self.captures = {}
        return forward(self.model, x, hook=self._hook)

    @staticmethod
    def _plan(model: TargetModel):
        layers = model.layers
        in_shape = model.input_shape
        image_input = len(in_shape) == 3
        groups = [_Group(0, "input", -1, 0, in_shape[0] if image_input else int(np.prod(in_shape)),
                         -1, image_input)]
        plan = []  # (prev_group, group, model_layer, how)
        shapes = model.layer_shapes()
        next_id = groups[0].size
        pending_flatten = False
        for i, layer in enumerate(layers):
            if isinstance(layer, (ReLU,)):
                continue
            if isinstance(layer, Flatten):
                pending_flatten = True
                continue
            if isinstance(layer, Dense):
                node_type, size, channels = "dense_neuron", layer.out_features, False
            elif isinstance(layer, Conv2d):
                node_type, size, channels = "conv_channel", layer.out_channels, True
            elif isinstance(layer, MaxPool2d):
                node_type, size, channels = "pooled_channel", shapes[i][0], True
            else:  # pragma: no cover - guarded by LAYER_KINDS
                raise ValueError(f"unsupported layer {layer.kind}")
            # a following ReLU supplies the attributed activation
            capture = i + 1 if i + 1 < len(layers) and isinstance(layers[i + 1], ReLU) else i
            prev = groups[-1]
            g = _Group(len(groups), node_type, i, next_id, size, capture, channels)
            how = ("dense_from_channels" if isinstance(layer, Dense) and pending_flatten
                   and groups[-1].slices_are_channels else layer.kind)
            plan.append((prev, g, i, how))
            groups.append(g)
            next_id += size
            pending_flatten = False
        return groups, plan

    def _edge_attributes(self, prev: _Group, group: _Group, layer_idx: int, how: str) -> np.ndarray:
        """Matrix [target, source] of edge attributes for a consecutive group pair."""
        layer = self.model.layers[layer_idx]
        if how == "dense":
            return layer.weight
        if how == "dense_from_channels":
            # W columns follow the flattened (C, H, W) order of the previous group
            w = np.abs(layer.weight).reshape(layer.out_features, prev.size, -1)
            return w.mean(axis=2)
        if how == "conv2d":
            return np.abs(layer.weight).mean(axis=(2, 3))
        if how == "maxpool2d":
            return np.eye(group.size)
        raise ValueError(how)

    def extract(self, x, config: ExtractionConfig, sample_id: str = "", label: int = 0,
                attack_kind: str = "benign", input_label: int = -1) -> InferenceProvenanceGraph:
        x = np.asarray(x, dtype=np.float64)
        trace = self.run(x)
        predicted = int(np.argmax(trace.logits))
        tau = config.tau
        nodes = []
        alive = {}  # node_id -> bool
        for g in self.groups:
            if g.capture_layer < 0:
                if not config.include_input_nodes:
                    continue
                act = x
                exempt = True
            else:
                act = self.captures[g.capture_layer]
                exempt = False
            if g.slices_are_channels:
                slices = act.reshape(g.size, -1)
            else:
                slices = act.reshape(g.size, 1)
            means = slices.mean(axis=1)
            l2 = np.sqrt(np.einsum("ij,ij->i", slices, slices))
            sparsity = np.count_nonzero(slices == 0.0, axis=1) / slices.shape[1]
            masks = (l2 >= tau).astype(int)
            for k in range(g.size):
                nid = g.first_id + k
                keep = exempt or masks[k] == 1
                alive[nid] = keep
                if keep:
                    nodes.append(IPGNode(nid, g.node_type, g.layer_index, float(means[k]),
                                         float(l2[k]), float(sparsity[k]), int(masks[k])))
        edges = self.build_edges(alive)
        return InferenceProvenanceGraph(
            nodes, edges, sample_id=sample_id, model_id=self.model.model_id, label=int(label),
            attack_kind=attack_kind, config_hash=config.config_hash, predicted_label=predicted,
            input_label=int(input_label))

    def build_edges(self, alive: dict) -> list:
        """Edges between surviving nodes of each consecutive group pair."""
        edges = []
        for prev, group, layer_idx, how in self.edge_plan:
            src_ids = np.arange(prev.first_id, prev.first_id + prev.size)
            dst_ids = np.arange(group.first_id, group.first_id + group.size)
            src_alive = np.array([alive.get(int(i), False) for i in src_ids])
            dst_alive = np.array([alive.get(int(i), False) for i in dst_ids])
            if not src_alive.any() or not dst_alive.any():
                continue
            attrs = self._edge_attributes(prev, group, layer_idx, how)
            if how == "maxpool2d":
                etype = "structural"
                pairs = [(k, k) for k in range(group.size) if src_alive[k] and dst_alive[k]]
            else:
                etype = "dense_weight" if how.startswith("dense") else "conv_channel_weight"
                ss = np.flatnonzero(src_alive)
                ds = np.flatnonzero(dst_alive)
                pairs = [(s, d) for s in ss for d in ds]
            edges.extend(IPGEdge(int(src_ids[s]), int(dst_ids[d]), etype, float(attrs[d, s]))
                         for s, d in pairs)
        return edges


def register_hooks(model: TargetModel) -> ProvenanceEngine:
    return ProvenanceEngine(model)


def extract_ipg(engine: ProvenanceEngine, x, config: ExtractionConfig, **meta) -> InferenceProvenanceGraph:
    return engine.extract(x, config, **meta)


def extract_dataset(model: TargetModel, inputs, sample_ids, config: ExtractionConfig,
                    label: int, attack_kind: str, input_labels=None, threads: int = 1) -> list:
    """Extract one IPG per input. Threads get their own engine; output order is input order."""
    n = len(sample_ids)
    input_labels = [-1] * n if input_labels is None else list(input_labels)

    def work(chunk):
        engine = ProvenanceEngine(model)
        return [engine.extract(inputs[i], config, sample_id=sample_ids[i], label=label,
                               attack_kind=attack_kind, input_label=int(input_labels[i]))
                for i in chunk]

    if threads <= 1 or n < 2:
        return work(range(n))
    from concurrent.futures import ThreadPoolExecutor
    chunks = [range(k, n, threads) for k in range(threads)]
    out = [None] * n
    with ThreadPoolExecutor(threads) as pool:
        for chunk, graphs in zip(chunks, pool.map(work, chunks)):
            for i, g in zip(chunk, graphs):
                out[i] = g
    return out
