"""Binary graph/parameter containers, manifests, leakage-free splits and statistics.

Graph container (version 1, all integers and reals little-endian)::

    magic        4 bytes  b"IPGC"
    version      u8       1
    sample_id    u16 length + UTF-8
    model_id     u16 length + UTF-8
    attack_kind  u16 length + UTF-8
    config_hash  u16 length + UTF-8
    label        u8
    predicted    i32
    input_label  i32
    n_nodes      u32
    nodes        n_nodes x (id i64, type u8, layer i32, mean f64, l2 f64, sparsity f64, mask u8)
    n_edges      u32
    edges        n_edges x (source i64, target i64, type u8, attribute f64)

Nodes are sorted by id, edges by (source, target, type code). Parameter
tables use magic b"PRMC" with a JSON metadata string and named float64 arrays.

The manifest is a tab-separated text file: ``#``-prefixed dataset lines
(format tag, ``seed``, ``ratios``, ``stats`` as JSON), one header row, then one
record per graph with the fields of :data:`MANIFEST_FIELDS` in that order.
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .provenance import EDGE_TYPES, NODE_TYPES, IPGEdge, IPGNode, InferenceProvenanceGraph

GRAPH_MAGIC = b"IPGC"
PARAM_MAGIC = b"PRMC"
FORMAT_VERSION = 1

NODE_DTYPE = np.dtype([("id", "<i8"), ("type", "u1"), ("layer", "<i4"), ("mean", "<f8"),
                       ("l2", "<f8"), ("sparsity", "<f8"), ("mask", "u1")])
EDGE_DTYPE = np.dtype([("src", "<i8"), ("dst", "<i8"), ("type", "u1"), ("attr", "<f8")])

MANIFEST_FIELDS = ("path", "model_id", "sample_id", "input_label", "graph_label",
                   "attack_kind", "split", "config_hash")
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class ContainerError(ValueError):
    """Malformed container; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(ContainerError):
    pass


class LeakageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Byte-level helpers
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ValueError("string too long for container")
    return struct.pack("<H", len(b)) + b


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise ContainerError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left",
                                 self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<H", what)
        start = self.pos
        try:
            return bytes(self.take(n, what)).decode("utf-8")
        except UnicodeDecodeError:
            raise ContainerError(f"invalid UTF-8 in {what}", start) from None

    def header(self, magic: bytes):
        head = bytes(self.data[:4])
        for i, expected in enumerate(magic):
            if i >= len(head) or head[i] != expected:
                raise ContainerError("bad magic header", i)
        self.pos = 4
        (version,) = self.unpack("<B", "version")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported container version {version}", 4)

    def finish(self):
        if self.pos != len(self.data):
            raise ContainerError(f"{len(self.data) - self.pos} trailing bytes", self.pos)


# ---------------------------------------------------------------------------
# Graph container
# ---------------------------------------------------------------------------


def serialize_ipg(ipg: InferenceProvenanceGraph) -> bytes:
    ipg.check()
    g = ipg.canonical()
    node_code = {t: i for i, t in enumerate(NODE_TYPES)}
    edge_code = {t: i for i, t in enumerate(EDGE_TYPES)}
    g.edges.sort(key=lambda e: (e.source, e.target, edge_code[e.edge_type]))
    nodes = np.array([(n.node_id, node_code[n.node_type], n.layer_index, n.mean, n.l2_norm,
                       n.sparsity, n.mask) for n in g.nodes], dtype=NODE_DTYPE)
    edges = np.array([(e.source, e.target, edge_code[e.edge_type], e.attribute) for e in g.edges],
                     dtype=EDGE_DTYPE)
    parts = [
        GRAPH_MAGIC, struct.pack("<B", FORMAT_VERSION),
        _pack_str(g.sample_id), _pack_str(g.model_id), _pack_str(g.attack_kind), _pack_str(g.config_hash),
        struct.pack("<Bii", g.label, g.predicted_label, g.input_label),
        struct.pack("<I", len(nodes)), nodes.tobytes(),
        struct.pack("<I", len(edges)), edges.tobytes(),
    ]
    return b"".join(parts)


def deserialize_ipg(data: bytes) -> InferenceProvenanceGraph:
    r = _Reader(data)
    r.header(GRAPH_MAGIC)
    sample_id = r.string("sample_id")
    model_id = r.string("model_id")
    attack_kind = r.string("attack_kind")
    config_hash = r.string("config_hash")
    label, predicted, input_label = r.unpack("<Bii", "labels")
    (n_nodes,) = r.unpack("<I", "node count")
    node_start = r.pos
    nodes = np.frombuffer(r.take(n_nodes * NODE_DTYPE.itemsize, "node table"), dtype=NODE_DTYPE)
    (n_edges,) = r.unpack("<I", "edge count")
    edge_start = r.pos
    edges = np.frombuffer(r.take(n_edges * EDGE_DTYPE.itemsize, "edge table"), dtype=EDGE_DTYPE)
    r.finish()
    bad = np.flatnonzero(nodes["type"] >= len(NODE_TYPES))
    if bad.size:
        raise ContainerError("unknown node type code", node_start + int(bad[0]) * NODE_DTYPE.itemsize)
    bad = np.flatnonzero(edges["type"] >= len(EDGE_TYPES))
    if bad.size:
        raise ContainerError("unknown edge type code", edge_start + int(bad[0]) * EDGE_DTYPE.itemsize)
    node_list = [IPGNode(int(n["id"]), NODE_TYPES[n["type"]], int(n["layer"]), float(n["mean"]),
                         float(n["l2"]), float(n["sparsity"]), int(n["mask"])) for n in nodes]
    edge_list = [IPGEdge(int(e["src"]), int(e["dst"]), EDGE_TYPES[e["type"]], float(e["attr"]))
                 for e in edges]
    g = InferenceProvenanceGraph(node_list, edge_list, sample_id, model_id, int(label), attack_kind,
                                 config_hash, int(predicted), int(input_label))
    try:
        g.check()
    except ValueError as exc:
        raise ContainerError(f"graph invariant violated: {exc}", node_start) from None
    return g


# ---------------------------------------------------------------------------
# Parameter tables (target models, detectors)
# ---------------------------------------------------------------------------


def serialize_params(tensors: dict, meta: Optional[dict] = None) -> bytes:
    """Named float64 arrays in insertion order plus a JSON metadata blob."""
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [PARAM_MAGIC, struct.pack("<B", FORMAT_VERSION), struct.pack("<I", len(meta_blob)), meta_blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts += [_pack_str(name), struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def deserialize_params(data: bytes):
    r = _Reader(data)
    r.header(PARAM_MAGIC)
    (n,) = r.unpack("<I", "metadata length")
    meta = json.loads(bytes(r.take(n, "metadata")).decode())
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        name = r.string("tensor name")
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(size * 8, f"tensor {name}"), dtype="<f8").reshape(shape).copy()
    r.finish()
    return tensors, meta


def save_model(model, path) -> None:
    """Persist a TargetModel (architecture in metadata, parameters as tables)."""
    layers = []
    tensors = {}
    for i, layer in enumerate(model.layers):
        entry = {"kind": layer.kind}
        if layer.kind == "conv2d":
            entry.update(stride=layer.stride, padding=layer.padding)
        elif layer.kind == "maxpool2d":
            entry.update(size=layer.size, stride=layer.stride)
        layers.append(entry)
        for j, p in enumerate(layer.params):
            tensors[f"layer{i}.{'weight' if j == 0 else 'bias'}"] = p
    meta = {"kind": "target_model", "model_id": model.model_id, "input_shape": list(model.input_shape),
            "num_classes": model.num_classes, "layers": layers, "meta": model.meta}
    Path(path).write_bytes(serialize_params(tensors, meta))


def load_model(path):
    from .nn import Conv2d, Dense, Flatten, MaxPool2d, ReLU, TargetModel

    tensors, meta = deserialize_params(Path(path).read_bytes())
    if meta.get("kind") != "target_model":
        raise ValueError(f"{path} is not a target model container")
    layers = []
    for i, entry in enumerate(meta["layers"]):
        kind = entry["kind"]
        if kind == "dense":
            layers.append(Dense(tensors[f"layer{i}.weight"], tensors[f"layer{i}.bias"]))
        elif kind == "conv2d":
            layers.append(Conv2d(tensors[f"layer{i}.weight"], tensors[f"layer{i}.bias"],
                                 entry["stride"], entry["padding"]))
        elif kind == "maxpool2d":
            layers.append(MaxPool2d(entry["size"], entry["stride"]))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return TargetModel(layers, tuple(meta["input_shape"]), meta["num_classes"], meta["model_id"],
                       meta.get("meta", {}))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    path: str
    model_id: str
    sample_id: str
    input_label: int
    graph_label: int
    attack_kind: str
    split: str
    config_hash: str

    def row(self) -> str:
        return "\t".join(str(getattr(self, f)) for f in MANIFEST_FIELDS)


@dataclass
class DatasetStats:
    n_graphs: int
    avg_nodes: float
    avg_edges: float
    avg_sparsity: float
    size_min: int
    size_median: float
    size_max: int
    node_feature_dim: int = 3
    edge_attr_dim: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Manifest:
    records: list
    seed: int = 0
    ratios: tuple = DEFAULT_RATIOS
    stats: Optional[DatasetStats] = None
    root: Optional[Path] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def graph_bytes(self, rec: ManifestRecord) -> bytes:
        if self.root is not None and (self.root / rec.path).exists():
            return (self.root / rec.path).read_bytes()
        if rec.path in self._cache:
            return serialize_ipg(self._cache[rec.path])
        raise FileNotFoundError(rec.path)

    def load(self, rec: ManifestRecord) -> InferenceProvenanceGraph:
        if rec.path not in self._cache:
            self._cache[rec.path] = deserialize_ipg(self.graph_bytes(rec))
        return self._cache[rec.path]

    def graphs(self, split: str, attacks: Optional[Iterable[str]] = None) -> list:
        wanted = None if attacks is None else set(attacks)
        return [self.load(r) for r in self.split(split) if wanted is None or r.attack_kind in wanted]

    def missing_files(self) -> list:
        return [r.path for r in self.records
                if not (self.root is not None and (self.root / r.path).exists()) and r.path not in self._cache]

    def to_text(self) -> str:
        lines = ["# provgraph-manifest v1", f"# seed\t{self.seed}",
                 f"# ratios\t{json.dumps(list(self.ratios))}"]
        if self.stats is not None:
            lines.append(f"# stats\t{json.dumps(self.stats.to_dict(), sort_keys=True)}")
        lines.append("\t".join(MANIFEST_FIELDS))
        lines += [r.row() for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        """Write graph files (from cache) and ``manifest.tsv`` under ``out_dir``."""
        out_dir = Path(out_dir)
        (out_dir / "graphs").mkdir(parents=True, exist_ok=True)
        for rec in self.records:
            target = out_dir / rec.path
            if rec.path in self._cache:
                target.write_bytes(serialize_ipg(self._cache[rec.path]))
            elif self.root is not None and (self.root / rec.path).exists() and self.root != out_dir:
                target.write_bytes((self.root / rec.path).read_bytes())
        self.root = out_dir
        path = out_dir / "manifest.tsv"
        path.write_text(self.to_text())
        return path


def read_manifest(path) -> Manifest:
    path = Path(path)
    seed, ratios, stats, records = 0, DEFAULT_RATIOS, None, []
    header_seen = False
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("\t")
            if key == "seed":
                seed = int(value)
            elif key == "ratios":
                ratios = tuple(json.loads(value))
            elif key == "stats":
                stats = DatasetStats(**json.loads(value))
            continue
        parts = line.split("\t")
        if not header_seen:
            if tuple(parts) != MANIFEST_FIELDS:
                raise ValueError(f"{path}:{lineno}: unexpected manifest header")
            header_seen = True
            continue
        if len(parts) != len(MANIFEST_FIELDS):
            raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields")
        rec = dict(zip(MANIFEST_FIELDS, parts))
        rec["input_label"] = int(rec["input_label"])
        rec["graph_label"] = int(rec["graph_label"])
        records.append(ManifestRecord(**rec))
    return Manifest(records, seed, ratios, stats, path.parent)


def _safe_name(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", s)


def normalize_ratios(ratios: Optional[Sequence[float]]) -> tuple:
    """Two values mean (train, test); three mean (train, val, test)."""
    if ratios is None:
        ratios = DEFAULT_RATIOS
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) == 2:
        ratios = (ratios[0], 0.0, ratios[1])
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be 2 or 3 non-negative values summing to 1, got {ratios}")
    return ratios


def assign_splits(sample_ids: Iterable[str], ratios, seed: int) -> dict:
    """Map each distinct sample_id to a split; pure in (id set, ratios, seed)."""
    ratios = normalize_ratios(ratios)
    ids = sorted(set(sample_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    n = len(ids)
    cut1 = int(round(ratios[0] * n))
    cut2 = int(round((ratios[0] + ratios[1]) * n))
    out = {}
    for rank, idx in enumerate(order):
        out[ids[idx]] = "train" if rank < cut1 else ("val" if rank < cut2 else "test")
    return out


def build_dataset(graphs: Sequence[InferenceProvenanceGraph], split_ratios=None, seed: int = 0,
                  out_dir=None) -> Manifest:
    """Group graphs by sample_id, assign whole groups to splits, and (optionally) write."""
    seen = set()
    for g in graphs:
        key = (g.sample_id, g.attack_kind)
        if key in seen:
            raise ValueError(f"duplicate graph for sample {g.sample_id!r} / {g.attack_kind!r}")
        seen.add(key)
    ratios = normalize_ratios(split_ratios)
    assignment = assign_splits((g.sample_id for g in graphs), ratios, seed)
    records, cache = [], {}
    for g in graphs:
        path = f"graphs/{_safe_name(g.sample_id)}__{_safe_name(g.attack_kind)}.ipg"
        records.append(ManifestRecord(path, g.model_id, g.sample_id, g.input_label, g.label,
                                      g.attack_kind, assignment[g.sample_id], g.config_hash))
        cache[path] = g
    manifest = Manifest(records, seed, ratios, _cache=cache)
    manifest.stats = compute_stats(manifest)
    if out_dir is not None:
        manifest.write(out_dir)
    return manifest


def validate_splits(manifest: Manifest) -> list:
    """Sorted sample_ids that appear in more than one split (empty means clean)."""
    where: dict = {}
    for r in manifest.records:
        where.setdefault(r.sample_id, set()).add(r.split)
    return sorted(s for s, splits in where.items() if len(splits) > 1)


def compute_stats(manifest: Manifest) -> DatasetStats:
    missing = manifest.missing_files()
    if missing:
        raise FileNotFoundError(f"missing graph files: {', '.join(missing)}")
    if not manifest.records:
        return DatasetStats(0, 0.0, 0.0, 0.0, 0, 0.0, 0)
    n_nodes, n_edges, sparsity, sizes = [], [], [], []
    for rec in manifest.records:
        blob = manifest.graph_bytes(rec)
        g = deserialize_ipg(blob)
        sizes.append(len(blob))
        n_nodes.append(len(g.nodes))
        n_edges.append(len(g.edges))
        if g.nodes:
            sparsity.append(float(np.mean([n.sparsity for n in g.nodes])))
    return DatasetStats(
        n_graphs=len(sizes),
        avg_nodes=float(np.mean(n_nodes)),
        avg_edges=float(np.mean(n_edges)),
        avg_sparsity=float(np.mean(sparsity)) if sparsity else 0.0,
        size_min=int(min(sizes)),
        size_median=float(np.median(sizes)),
        size_max=int(max(sizes)),
    )
