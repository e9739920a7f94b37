import numpy as np

from provgraph.nn import Conv2d, Dense, Flatten, MaxPool2d, ReLU, TargetModel


class KinkCrossed(Exception):
    """A finite-difference stencil straddles a ReLU kink or a max-pool switch."""


def central_diff(f, x, h=1e-4, pattern=None):
    """Central finite differences of scalar f at array x (independent oracle).

    ``pattern(x)`` optionally returns the piecewise-linear region of the model at
    x; if any stencil point leaves the base region the oracle is invalid there and
    KinkCrossed is raised.
    """
    x = np.array(x, dtype=np.float64)
    base = pattern(x) if pattern else None
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        if pattern and pattern(x) != base:
            raise KinkCrossed(i)
        flat[i] = old - h
        down = f(x)
        if pattern and pattern(x) != base:
            raise KinkCrossed(i)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def region(model, x) -> bytes:
    """ReLU on/off masks and max-pool argmaxes for input x, computed layer by layer."""
    h = np.asarray(x, dtype=np.float64)[None]
    parts = []
    for layer in model.layers:
        h, cache = layer.forward(h)
        if layer.kind == "relu":
            parts.append(np.packbits(cache).tobytes())
        elif layer.kind == "maxpool2d":
            parts.append(cache[1].tobytes())
    return b"|".join(parts)


def grad_close(analytic, numeric, rtol=1e-4, atol=1e-6) -> bool:
    """Relative error on components with |value| > atol, absolute error otherwise."""
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    big = np.abs(n) > atol
    rel_ok = np.all(np.abs(a[big] - n[big]) <= rtol * np.abs(n[big]))
    abs_ok = np.all(np.abs(a[~big] - n[~big]) <= atol)
    return bool(rel_ok and abs_ok)


def _dense(rng, n_in, n_out):
    return Dense(rng.normal(size=(n_out, n_in)), rng.normal(size=n_out) * 0.1)


def _conv(rng, c_in, c_out, k, stride=1, padding=0):
    return Conv2d(rng.normal(size=(c_out, c_in, k, k)) * 0.5, rng.normal(size=c_out) * 0.1, stride, padding)


def model_for_kind(kind: str, seed: int) -> TargetModel:
    """Small random model exercising one layer kind, plus a matching input."""
    rng = np.random.default_rng(seed)
    if kind == "dense":
        return TargetModel([_dense(rng, 5, 3)], (5,), 3, f"dense{seed}")
    if kind == "relu":
        return TargetModel([_dense(rng, 5, 6), ReLU(), _dense(rng, 6, 3)], (5,), 3, f"relu{seed}")
    if kind == "conv2d":
        stride, pad = [(1, 0), (1, 1), (2, 1)][seed % 3]
        conv = _conv(rng, 2, 3, 3, stride, pad)
        shape = conv.output_shape((2, 5, 5))
        return TargetModel([conv, Flatten(), _dense(rng, int(np.prod(shape)), 3)], (2, 5, 5), 3)
    if kind == "maxpool2d":
        return TargetModel([_conv(rng, 1, 2, 3), ReLU(), MaxPool2d(2), Flatten(), _dense(rng, 2 * 2 * 2, 2)],
                           (1, 6, 6), 2)
    if kind == "flatten":
        return TargetModel([Flatten(), _dense(rng, 12, 2)], (3, 2, 2), 2)
    raise ValueError(kind)


LAYER_KIND_NAMES = ("dense", "conv2d", "relu", "maxpool2d", "flatten")


def random_graph(rng, sample_id="g", label=0, attack_kind="benign", max_layers=4, max_width=5):
    """Random layer-ordered IPG with arbitrary (sparse) ids and valid invariants."""
    from provgraph.provenance import IPGEdge, IPGNode, InferenceProvenanceGraph

    types = ["input", "dense_neuron", "conv_channel", "pooled_channel"]
    n_layers = int(rng.integers(1, max_layers + 1))
    layers, next_id = [], int(rng.integers(0, 5))
    nodes = []
    for li in range(n_layers):
        width = int(rng.integers(1, max_width + 1))
        ids = list(range(next_id, next_id + width))
        next_id += width + int(rng.integers(0, 3))
        layers.append(ids)
        ntype = "input" if li == 0 else types[int(rng.integers(1, 4))]
        for nid in ids:
            l2 = float(abs(rng.normal()))
            nodes.append(IPGNode(nid, ntype, li, float(rng.normal()), l2, float(rng.random()),
                                 int(rng.integers(0, 2))))
    edges = []
    for a, b in zip(layers, layers[1:]):
        for s in a:
            for t in b:
                if rng.random() < 0.6:
                    etype = ["dense_weight", "conv_channel_weight", "structural"][int(rng.integers(0, 3))]
                    attr = 1.0 if etype == "structural" else float(rng.normal())
                    edges.append(IPGEdge(s, t, etype, attr))
    perm = rng.permutation(len(nodes))
    nodes = [nodes[i] for i in perm]
    return InferenceProvenanceGraph(nodes, edges, sample_id, "m0", label, attack_kind, "cfg",
                                    int(rng.integers(0, 2)), int(rng.integers(0, 2)))


ACCEPTANCE_LINES: list = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok
