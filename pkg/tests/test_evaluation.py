import numpy as np
import pytest

from provgraph.detector import DetectorConfig
from provgraph.evaluation import (ProtocolSpec, format_table, linear_fit_r2, measure_overhead, records_json,
                                  run_protocol)
from provgraph.models import build_mlp
from provgraph.provenance import ExtractionConfig, IPGEdge, IPGNode, InferenceProvenanceGraph, ProvenanceEngine
from provgraph.store import LeakageError, build_dataset, compute_stats, serialize_ipg

FAST = DetectorConfig(hidden_dim=16, layers=2, epochs=15, learning_rate=1e-2)


def shifted_graph(rng, sid, label, kind, shift):
    """Fixed 3-2 layered graph whose activations move by ``shift`` when label = 1."""
    nodes, edges = [], []
    for i in range(5):
        layer = 0 if i < 3 else 1
        mean = float(rng.normal() + shift * label)
        nodes.append(IPGNode(i, "input" if layer == 0 else "dense_neuron", layer, mean, abs(mean),
                             float(rng.random()), 1))
    for s in range(3):
        for t in (3, 4):
            edges.append(IPGEdge(s, t, "dense_weight", float(rng.normal())))
    return InferenceProvenanceGraph(nodes, edges, sid, "m", label, kind)


@pytest.fixture(scope="module")
def manifest():
    rng = np.random.default_rng(0)
    graphs = []
    for i in range(80):
        sid = f"x{i:03d}"
        graphs.append(shifted_graph(rng, sid, 0, "benign", 0.0))
        graphs.append(shifted_graph(rng, sid, 1, "pgd", 3.0))
        graphs.append(shifted_graph(rng, sid, 1, "spsa", 2.5))
    return build_dataset(graphs, (0.6, 0.2, 0.2), seed=1)


def test_spec_preconditions():
    with pytest.raises(ValueError, match="overlap"):
        ProtocolSpec("cross_threat", ["pgd"], ["pgd", "spsa"])
    with pytest.raises(ValueError):
        ProtocolSpec("cross_threat", ["pgd"], ["fgsm"])
    with pytest.raises(ValueError):
        ProtocolSpec("intra", ["pgd"], ["spsa"])
    with pytest.raises(ValueError):
        ProtocolSpec("zero_shot", ["pgd"], ["pgd"])
    ProtocolSpec("cross_threat", ["spsa", "square"], ["pgd"])


def test_intra_on_separable_graphs(manifest):
    result = run_protocol(ProtocolSpec("intra", ["pgd", "spsa"], ["pgd", "spsa"]), manifest, FAST)
    assert all(rep.roc_auc >= 0.9 for rep in result.reports.values())
    assert set(result.detectors) == {"pgd", "spsa"}
    # each test set pairs every adversarial graph with the benign graph of the same input
    assert result.reports["pgd"].n_scores == 2 * sum(
        r.split == "test" and r.attack_kind == "pgd" for r in manifest.records)


def test_multi_with_one_attack_is_intra(manifest):
    intra = run_protocol(ProtocolSpec("intra", ["spsa"], ["spsa"], seed=3), manifest, FAST)
    multi = run_protocol(ProtocolSpec("multi", ["spsa"], ["spsa"], seed=3), manifest, FAST)
    assert intra.reports["spsa"] == multi.reports["spsa"]
    assert intra.detectors["spsa"].to_bytes() == multi.detectors["spsa"].to_bytes()


def test_cross_threat_rows_and_table(manifest):
    result = run_protocol(ProtocolSpec("cross_threat", ["pgd"], ["spsa"]), manifest, FAST)
    assert result.rows()[0][0] == "White-Box->Black-Box(spsa)"
    table = format_table([result], "cross")
    assert "ROC-AUC" in table and "White-Box->Black-Box(spsa)" in table
    assert '"protocol": "cross_threat"' in records_json([result])


def test_leakage_aborts(manifest):
    rec = next(r for r in manifest.records if r.attack_kind == "pgd" and r.split == "test")
    original = rec.split
    rec.split = "train"
    try:
        with pytest.raises(LeakageError):
            run_protocol(ProtocolSpec("intra", ["pgd"], ["pgd"]), manifest, FAST)
    finally:
        rec.split = original


def test_overhead_definitions():
    model = build_mlp(16, [12, 8], 2, seed=0)
    xs = np.random.default_rng(0).random((6, 16))
    cfg = ExtractionConfig()
    rep = measure_overhead(model, xs, cfg)
    engine = ProvenanceEngine(model)
    graphs = [engine.extract(x, cfg, sample_id=f"overhead{i}") for i, x in enumerate(xs)]
    sizes = [len(serialize_ipg(g)) for g in graphs]
    assert rep.s_ipg_mb == float(np.mean(sizes)) / 2 ** 20
    stats = compute_stats(build_dataset(graphs))
    assert rep.n_nodes == stats.avg_nodes and rep.n_edges == stats.avg_edges
    assert rep.d_v == 3 and rep.d_e == 1 and rep.t_overhead > 0


def test_linear_fit():
    a, b, r2 = linear_fit_r2([1, 2, 3, 4], [3, 5, 7, 9])
    assert (a, b) == pytest.approx((2.0, 1.0)) and r2 == pytest.approx(1.0)
    assert linear_fit_r2([1, 2, 3], [1, 3, 2])[2] < 0.9
