import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from provgraph.models import build_cnn, build_mlp
from provgraph.nn import Conv2d, Dense, Flatten, MaxPool2d, ReLU, TargetModel, forward
from provgraph.provenance import (ExtractionConfig, IPGEdge, IPGNode, InferenceProvenanceGraph, ProvenanceEngine,
                                  extract_dataset, extract_ipg, node_summary, register_hooks, verify_dag)
from provgraph.store import serialize_ipg


def mlp_432(seed=0):
    return build_mlp(4, [3], 2, seed=seed)


def test_node_summary_examples():
    assert node_summary([0, 2, 0, 2]) == pytest.approx((1.0, 2.8284271, 0.5), abs=1e-7)
    assert node_summary([0.0, 0.0, 0.0]) == (0.0, 0.0, 1.0)
    assert node_summary([-3.0]) == (-3.0, 3.0, 0.0)
    with pytest.raises(ValueError):
        node_summary([])


def test_capture_points():
    engine = register_hooks(mlp_432())
    assert len(engine.capture_points) == 3
    relu_only = TargetModel([ReLU()], (2,), 2)
    engine = register_hooks(relu_only)
    assert len(engine.capture_points) == 1
    g = extract_ipg(engine, np.array([0.5, -1.0]), ExtractionConfig())
    assert {n.node_type for n in g.nodes} == {"input"} and g.edges == []


def test_mlp_432_full_graph():
    g = extract_ipg(register_hooks(mlp_432()), np.array([0.1, 0.9, 0.4, 0.6]), ExtractionConfig(tau=0.0))
    assert len(g.nodes) == 4 + 3 + 2 == 9
    assert len(g.edges) == 4 * 3 + 3 * 2 == 18
    assert [sum(n.node_type == t for n in g.nodes) for t in ("input", "dense_neuron")] == [4, 5]
    g.check()


def test_infinite_tau_drops_everything_but_inputs():
    for model, x in ((mlp_432(), np.ones(4)), (build_cnn((1, 8, 8), [4], 2), np.ones((1, 8, 8)))):
        g = extract_ipg(register_hooks(model), x, ExtractionConfig(tau=math.inf))
        assert all(n.node_type == "input" for n in g.nodes)
        assert g.edges == []
        g2 = extract_ipg(register_hooks(model), x, ExtractionConfig(tau=math.inf, include_input_nodes=False))
        assert g2.nodes == [] and g2.edges == []


def test_zero_hidden_neuron_is_removed():
    # hidden neuron 1 has zero weights and bias, so it outputs exactly 0
    w1 = np.array([[1.0, 1.0], [0.0, 0.0]])
    w2 = np.array([[1.0, -1.0], [-1.0, 2.0]])
    m = TargetModel([Dense(w1, np.zeros(2)), ReLU(), Dense(w2, np.array([0.1, 0.2]))], (2,), 2)
    g = extract_ipg(register_hooks(m), np.array([0.5, 0.25]), ExtractionConfig(tau=1e-6))
    # ids: inputs 0,1; hidden 2,3; outputs 4,5. Node 3 is dead.
    assert g.node_ids() == {0, 1, 2, 4, 5}
    assert all(3 not in (e.source, e.target) for e in g.edges)
    assert g.edge_keys() == {(0, 2, "dense_weight"), (1, 2, "dense_weight"),
                             (2, 4, "dense_weight"), (2, 5, "dense_weight")}


def test_dense_edge_copies_weight():
    w = np.array([[0.3, 0.1], [-0.7, 0.2]])
    m = TargetModel([Dense(w, np.zeros(2))], (2,), 2)
    g = extract_ipg(register_hooks(m), np.array([1.0, 1.0]), ExtractionConfig())
    attr = {(e.source, e.target): e.attribute for e in g.edges}
    assert attr[(0, 3)] == -0.7


def test_conv_and_pool_edges():
    kernel = np.zeros((4, 1, 2, 2))
    kernel[2, 0] = [[1.0, -1.0], [2.0, 0.0]]
    conv = Conv2d(kernel, np.ones(4))
    m = TargetModel([conv, ReLU(), MaxPool2d(2), Flatten(), Dense(np.ones((2, 4 * 2 * 2)), np.zeros(2))],
                    (1, 5, 5), 2)
    g = extract_ipg(register_hooks(m), np.full((1, 5, 5), 0.5), ExtractionConfig())
    conv_edges = [e for e in g.edges if e.edge_type == "conv_channel_weight"]
    assert [e.attribute for e in conv_edges if e.target == 1 + 2] == [1.0]
    structural = [e for e in g.edges if e.edge_type == "structural"]
    assert len(structural) == 4 and all(e.attribute == 1.0 for e in structural)


def test_dense_after_flatten_uses_mean_abs_per_channel():
    rng = np.random.default_rng(0)
    m = build_cnn((1, 8, 8), [2], 2, seed=4)
    dense = m.layers[-1]
    g = extract_ipg(register_hooks(m), rng.random((1, 8, 8)), ExtractionConfig())
    types = {n.node_id: n.node_type for n in g.nodes}
    dense_edges = [e for e in g.edges if types[e.target] == "dense_neuron"]
    assert len(dense_edges) == 2 * 2
    pooled = sorted(n.node_id for n in g.nodes if n.node_type == "pooled_channel")
    outs = sorted(n.node_id for n in g.nodes if n.node_type == "dense_neuron")
    for e in dense_edges:
        c, o = pooled.index(e.source), outs.index(e.target)
        # columns of channel c are positions c*9 .. c*9+8 of the flattened 2x3x3 map
        expected = float(np.mean(np.abs(dense.weight[o, c * 9:(c + 1) * 9])))
        assert e.attribute == pytest.approx(expected, rel=1e-15)


def test_cnn_graph_counts():
    g = extract_ipg(register_hooks(build_cnn((1, 8, 8), [4], 2)), np.full((1, 8, 8), 0.3), ExtractionConfig())
    counts = {t: sum(n.node_type == t for n in g.nodes)
              for t in ("input", "conv_channel", "pooled_channel", "dense_neuron")}
    assert counts == {"input": 1, "conv_channel": 4, "pooled_channel": 4, "dense_neuron": 2}
    assert len(g.edges) == 1 * 4 + 4 + 4 * 2
    assert verify_dag(g)


def test_verify_dag_cases():
    nodes = [IPGNode(0, "input", 0, 0, 0, 1, 1), IPGNode(1, "dense_neuron", 1, 0, 0, 1, 1)]
    assert verify_dag(InferenceProvenanceGraph([], []))
    assert verify_dag(InferenceProvenanceGraph(nodes, [IPGEdge(0, 1, "dense_weight", 0.5)]))
    assert not verify_dag(InferenceProvenanceGraph(nodes, [IPGEdge(0, 1, "dense_weight", 0.5),
                                                          IPGEdge(1, 0, "dense_weight", 0.5)]))


def test_hooks_do_not_change_logits():
    m = build_cnn((1, 8, 8), [3], 2, seed=2)
    engine = ProvenanceEngine(m)
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.random((1, 8, 8))
        assert engine.run(x).logits.tobytes() == forward(m, x).logits.tobytes()


def test_extraction_is_deterministic_and_threading_preserves_order():
    m = build_mlp(6, [5, 4], 2, seed=3)
    xs = np.random.default_rng(2).random((12, 6))
    ids = [f"s{i}" for i in range(12)]
    cfg = ExtractionConfig(tau=0.2)
    a = extract_dataset(m, xs, ids, cfg, 0, "benign")
    b = extract_dataset(m, xs, ids, cfg, 0, "benign", threads=3)
    assert [serialize_ipg(g) for g in a] == [serialize_ipg(g) for g in b]
    assert [g.sample_id for g in b] == ids


def test_config_hash_tracks_fields():
    assert ExtractionConfig().config_hash == ExtractionConfig().config_hash
    assert ExtractionConfig(tau=0.1).config_hash != ExtractionConfig().config_hash
    with pytest.raises(ValueError):
        ExtractionConfig(tau=-1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 2), st.floats(0, 2))
def test_tau_monotonicity_and_masks(seed, t1, t2):
    t1, t2 = min(t1, t2), max(t1, t2)
    m = build_cnn((1, 8, 8), [3], 2, seed=seed % 7) if seed % 2 else build_mlp(5, [6, 4], 2, seed=seed % 7)
    x = np.random.default_rng(seed).random(m.input_shape)
    engine = ProvenanceEngine(m)
    g1 = engine.extract(x, ExtractionConfig(tau=t1))
    g2 = engine.extract(x, ExtractionConfig(tau=t2))
    assert g2.node_ids() <= g1.node_ids()
    assert g2.edge_keys() <= g1.edge_keys()
    for g, tau in ((g1, t1), (g2, t2)):
        for n in g.nodes:
            assert n.mask == int(n.l2_norm >= tau)
            assert 0 <= n.sparsity <= 1 and n.l2_norm >= 0
        g.check()


def test_tau_zero_edge_count_is_width_product_sum():
    widths = [7, 5, 3, 2]
    m = build_mlp(7, [5, 3], 2, seed=1)
    g = ProvenanceEngine(m).extract(np.random.default_rng(0).random(7), ExtractionConfig())
    assert len(g.edges) == sum(a * b for a, b in zip(widths, widths[1:]))
