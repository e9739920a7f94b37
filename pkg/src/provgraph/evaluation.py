"""Evaluation protocols (intra-attack, multi-attack, cross-threat) and extraction overhead."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attacks import threat_class
from .detector import DetectorConfig, DetectorModel, score_graphs, train_detector
from .metrics import MetricReport, metric_report
from .provenance import ExtractionConfig, ProvenanceEngine
from .store import LeakageError, Manifest, serialize_ipg, validate_splits

PROTOCOLS = ("intra", "multi", "cross_threat")

TABLE_COLUMNS = (("Accuracy", "accuracy"), ("Precision", "precision"), ("Recall", "recall"),
                 ("F1", "f1"), ("ROC-AUC", "roc_auc"), ("PR-AUC", "pr_auc"),
                 ("TPR@1%FPR", "tpr_at_1pct_fpr"), ("FPR@95%TPR", "fpr_at_95pct_tpr"))


@dataclass
class ProtocolSpec:
    protocol: str
    train_attacks: tuple
    test_attacks: tuple
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        self.train_attacks = tuple(self.train_attacks)
        self.test_attacks = tuple(self.test_attacks)
        if not self.train_attacks or not self.test_attacks:
            raise ValueError("train and test attack sets must be non-empty")
        if self.protocol == "intra" and set(self.train_attacks) != set(self.test_attacks):
            raise ValueError("intra protocol trains and tests on the same attacks")
        if self.protocol == "cross_threat":
            if set(self.train_attacks) & set(self.test_attacks):
                raise ValueError("cross_threat train and test attack sets overlap")
            train_cls = {threat_class(a) for a in self.train_attacks}
            test_cls = {threat_class(a) for a in self.test_attacks}
            if len(train_cls) != 1 or train_cls & test_cls:
                raise ValueError("cross_threat needs disjoint threat classes (white-box vs black-box)")


@dataclass
class ProtocolResult:
    spec: ProtocolSpec
    reports: dict  # test attack -> MetricReport, in test_attacks order
    detectors: dict = field(default_factory=dict)  # training key -> DetectorModel
    curves: dict = field(default_factory=dict)

    def rows(self) -> list:
        return [(self.row_name(a), self.reports[a]) for a in self.spec.test_attacks]

    def row_name(self, attack: str) -> str:
        if self.spec.protocol == "intra":
            return attack
        if self.spec.protocol == "multi":
            return f"Multi({attack})"
        src = "White-Box" if threat_class(self.spec.train_attacks[0]) == "white" else "Black-Box"
        dst = "Black-Box" if src == "White-Box" else "White-Box"
        return f"{src}->{dst}({attack})"

    def to_records(self) -> list:
        return [{"protocol": self.spec.protocol, "row": name, "train_attacks": list(self.spec.train_attacks),
                 **rep.to_dict()} for name, rep in self.rows()]


def _paired_graphs(manifest: Manifest, split: str, attacks: Sequence[str]) -> list:
    """Adversarial graphs of ``attacks`` plus the benign graphs of the same inputs."""
    recs = manifest.split(split)
    adv = [r for r in recs if r.attack_kind in set(attacks) and r.graph_label == 1]
    paired = {r.sample_id for r in adv}
    benign = [r for r in recs if r.graph_label == 0 and r.sample_id in paired]
    return [manifest.load(r) for r in benign + adv]


def _train(manifest, attacks, cfg):
    train = _paired_graphs(manifest, "train", attacks)
    val = _paired_graphs(manifest, "val", attacks)
    return train_detector(train, val or None, cfg)


def _test(model, manifest, attack, threshold) -> MetricReport:
    graphs = _paired_graphs(manifest, "test", [attack])
    scores = score_graphs(model, graphs)
    labels = np.array([g.label for g in graphs])
    return metric_report(scores, labels, threshold)


def run_protocol(spec: ProtocolSpec, manifest: Manifest,
                 detector_config: Optional[DetectorConfig] = None) -> ProtocolResult:
    """Train on the protocol's attack composition, evaluate per test attack on held-out graphs."""
    violations = validate_splits(manifest)
    if violations:
        raise LeakageError(f"sample ids straddle splits: {violations[:10]}")
    cfg = detector_config or DetectorConfig()
    cfg = DetectorConfig(**{**asdict(cfg), "seed": spec.seed})
    result = ProtocolResult(spec, {})
    if spec.protocol == "intra":
        for attack in spec.test_attacks:
            model, curves = _train(manifest, [attack], cfg)
            result.detectors[attack], result.curves[attack] = model, curves
            result.reports[attack] = _test(model, manifest, attack, cfg.threshold)
    else:
        key = "+".join(spec.train_attacks)
        model, curves = _train(manifest, spec.train_attacks, cfg)
        result.detectors[key], result.curves[key] = model, curves
        for attack in spec.test_attacks:
            result.reports[attack] = _test(model, manifest, attack, cfg.threshold)
    return result


def format_table(results: Sequence[ProtocolResult], title: str = "") -> str:
    """Aligned text table, metrics in percent."""
    rows = [(name, rep) for res in results for name, rep in res.rows()]
    header = ["Attack"] + [c for c, _ in TABLE_COLUMNS]
    body = [[name] + [f"{100 * getattr(rep, key):.2f}" for _, key in TABLE_COLUMNS] for name, rep in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = [title] if title else []
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    lines.append(fmt(header))
    lines.append("  ".join("-" * w for w in widths))
    lines += [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def records_json(results: Sequence[ProtocolResult]) -> str:
    return json.dumps([rec for res in results for rec in res.to_records()], indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Overhead
# ---------------------------------------------------------------------------


@dataclass
class OverheadReport:
    t_overhead: float  # mean seconds per graph (extract + serialize)
    n_nodes: float
    n_edges: float
    d_v: int
    d_e: int
    s_ipg_mb: float
    samples: list = field(default_factory=list)  # (|V| + |E|, seconds) per input

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("samples")
        return d


def measure_overhead(model, inputs, config: Optional[ExtractionConfig] = None) -> OverheadReport:
    """Wall-clock extract + serialize per input with a monotonic clock."""
    config = config or ExtractionConfig()
    engine = ProvenanceEngine(model)
    times, sizes, nodes, edges, samples = [], [], [], [], []
    for i, x in enumerate(inputs):
        t0 = time.perf_counter()
        g = engine.extract(x, config, sample_id=f"overhead{i}")
        blob = serialize_ipg(g)
        dt = time.perf_counter() - t0
        times.append(dt)
        sizes.append(len(blob))
        nodes.append(len(g.nodes))
        edges.append(len(g.edges))
        samples.append((len(g.nodes) + len(g.edges), dt))
    return OverheadReport(
        t_overhead=float(np.mean(times)), n_nodes=float(np.mean(nodes)), n_edges=float(np.mean(edges)),
        d_v=len(config.node_feature_set), d_e=1, s_ipg_mb=float(np.mean(sizes)) / 2 ** 20, samples=samples)


def linear_fit_r2(x, y) -> tuple:
    """Least-squares y = a x + b; returns (a, b, R^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2
