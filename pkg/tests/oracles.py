"""Brute-force metric oracles: pairwise counting and exhaustive threshold sweeps."""


def roc_auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _operating_points(scores, labels):
    """(threshold, tp, fp) for every candidate threshold, highest first; +inf predicts nothing."""
    thresholds = [float("inf")] + sorted(set(scores), reverse=True)
    out = []
    for t in thresholds:
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        out.append((t, tp, fp))
    return out


def pr_auc_sweep(scores, labels):
    n_pos = sum(labels)
    area, prev_recall = 0.0, 0.0
    for _, tp, fp in _operating_points(scores, labels)[1:]:
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return area


def tpr_at_fpr_sweep(scores, labels, budget):
    n_pos, n_neg = sum(labels), len(labels) - sum(labels)
    return max(tp / n_pos for _, tp, fp in _operating_points(scores, labels) if fp / n_neg <= budget)


def fpr_at_tpr_sweep(scores, labels, target):
    n_pos, n_neg = sum(labels), len(labels) - sum(labels)
    return min(fp / n_neg for _, tp, fp in _operating_points(scores, labels) if tp / n_pos >= target)


def random_instance(rng, max_size=20):
    """Random scores (with deliberate ties) and labels containing both classes."""
    n = int(rng.integers(2, max_size + 1))
    labels = [0, 1] + [int(v) for v in rng.integers(0, 2, size=n - 2)]
    rng.shuffle(labels)
    scores = [float(v) for v in rng.integers(0, 8, size=n) / 8.0] if rng.random() < 0.5 \
        else [float(v) for v in rng.random(n)]
    return scores, labels
