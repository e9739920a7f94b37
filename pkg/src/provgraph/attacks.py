"""White-box (gradient) and black-box (query) adversarial example generators."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .models import LabeledDataset, predict_labels
from .nn import TargetModel, as_tensor, cross_entropy_batch, forward_batch, grad_input

log = logging.getLogger(__name__)

WHITE_BOX = frozenset({"fgsm", "pgd"})
BLACK_BOX = frozenset({"spsa", "square", "bitflip"})
ATTACK_KINDS = WHITE_BOX | BLACK_BOX
CONTINUOUS = frozenset({"fgsm", "pgd", "spsa", "square"})


def threat_class(kind: str) -> str:
    if kind in WHITE_BOX:
        return "white"
    if kind in BLACK_BOX:
        return "black"
    raise ValueError(f"unknown attack kind {kind!r}")


@dataclass
class AttackConfig:
    attack_kind: str = "pgd"
    epsilon: float = 0.3
    steps: int = 10
    step_size: Optional[float] = None  # PGD default eps/4, SPSA default eps/8
    query_budget: int = 2048
    seed: int = 0
    keep_only_successful: bool = True
    random_start: bool = True
    spsa_delta: float = 0.01
    spsa_samples: int = 32
    k_max: int = 8

    def __post_init__(self):
        if self.attack_kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.attack_kind!r}")
        if self.attack_kind in CONTINUOUS and not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.steps < 0 or self.query_budget < 0 or self.k_max < 0:
            raise ValueError("steps, query_budget and k_max must be non-negative")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    sample_id: str
    success: bool
    queries_used: int
    attack_kind: str
    x_orig: Optional[np.ndarray] = field(default=None, repr=False)
    label: int = -1
    flips: list = field(default_factory=list)  # bitflip: flipped feature indices
    accepted_losses: list = field(default_factory=list)  # square: loss after each accepted proposal


class QueryModel:
    """Loss/label oracle handed to black-box attacks; counts every query.

    A batch of m inputs costs m queries.
    """

    def __init__(self, model: TargetModel):
        self._model = model
        self.queries = 0

    @property
    def input_shape(self):
        return self._model.input_shape

    def loss(self, xs, label: int) -> np.ndarray:
        xs = as_tensor(xs)
        self.queries += len(xs)
        return cross_entropy_batch(forward_batch(self._model, xs), np.full(len(xs), label))

    def label(self, xs) -> np.ndarray:
        xs = as_tensor(xs)
        self.queries += len(xs)
        return predict_labels(self._model, xs)


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    """Per-sample random stream derived from (run seed, sample_id)."""
    digest = hashlib.sha256(str(sample_id).encode()).digest()
    return np.random.default_rng([int(seed), int.from_bytes(digest[:8], "little")])


def _label_of(model, x) -> int:
    return int(predict_labels(model, x[None])[0])


def _result(model, x0, x_adv, y, sample_id, kind, queries):
    return AttackResult(x_adv, sample_id, _label_of(model, x_adv) != y, queries, kind, x0, y)


def project_linf(x, x0, epsilon):
    """Exact projection onto the eps-ball around x0 intersected with [0, 1]."""
    lo = x0 - epsilon
    hi = x0 + epsilon
    # x0 -/+ eps can round one ulp outside the ball; pull such bounds back in
    while np.any(bad := x0 - lo > epsilon):
        lo = np.where(bad, np.nextafter(lo, np.inf), lo)
    while np.any(bad := hi - x0 > epsilon):
        hi = np.where(bad, np.nextafter(hi, -np.inf), hi)
    lo = np.maximum(lo, 0.0)
    hi = np.minimum(hi, 1.0)
    return np.minimum(np.maximum(x, lo), hi)


def fgsm(model: TargetModel, x, y: int, epsilon: float, sample_id: str = "") -> AttackResult:
    x0 = as_tensor(x)
    g = grad_input(model, x0, y)
    x_adv = project_linf(x0 + epsilon * np.sign(g), x0, epsilon)
    return _result(model, x0, x_adv, y, sample_id, "fgsm", 0)


def pgd(model: TargetModel, x, y: int, epsilon: float, steps: int = 10,
        step_size: Optional[float] = None, seed: int = 0, random_start: bool = True,
        sample_id: str = "") -> AttackResult:
    x0 = as_tensor(x)
    alpha = epsilon / 4 if step_size is None else step_size
    if random_start:
        rng = sample_rng(seed, sample_id)
        xa = project_linf(x0 + rng.uniform(-epsilon, epsilon, size=x0.shape), x0, epsilon)
    else:
        xa = x0.copy()
    for _ in range(steps):
        xa = project_linf(xa + alpha * np.sign(grad_input(model, xa, y)), x0, epsilon)
    return _result(model, x0, xa, y, sample_id, "pgd", 0)


def spsa_gradient(loss_fn, x, delta: float, n_samples: int, rng) -> np.ndarray:
    """Average of n_samples two-sided SPSA estimates with Rademacher directions.

    ``loss_fn`` takes a stacked batch and returns one loss per row.
    """
    signs = rng.integers(0, 2, size=(n_samples,) + x.shape) * 2.0 - 1.0
    batch = np.concatenate([x[None] + delta * signs, x[None] - delta * signs])
    losses = loss_fn(batch)
    diff = (losses[:n_samples] - losses[n_samples:]) / (2 * delta)
    # Rademacher entries are their own inverse
    est = diff.reshape((n_samples,) + (1,) * x.ndim) * signs
    return est.mean(axis=0)


def spsa(model, x, y: int, epsilon: float, config: Optional[AttackConfig] = None,
         sample_id: str = "") -> AttackResult:
    """Query-only SPSA ascent on the cross-entropy loss with signed steps."""
    cfg = config or AttackConfig("spsa", epsilon)
    oracle = model if isinstance(model, QueryModel) else QueryModel(model)
    x0 = as_tensor(x)
    alpha = epsilon / 8 if cfg.step_size is None else cfg.step_size
    per_iter = 2 * cfg.spsa_samples
    iterations = cfg.query_budget // per_iter
    rng = sample_rng(cfg.seed, sample_id)
    xa = x0.copy()
    for _ in range(iterations):
        g = spsa_gradient(lambda b: oracle.loss(b, y), xa, cfg.spsa_delta, cfg.spsa_samples, rng)
        xa = project_linf(xa + alpha * np.sign(g), x0, epsilon)
    queries = oracle.queries
    success = _label_of(oracle._model, xa) != y
    return AttackResult(xa, sample_id, success, queries, "spsa", x0, y)


def square_search(model, x, y: int, epsilon: float, query_budget: int = 1000, seed: int = 0,
                  p_init: float = 0.3, sample_id: str = "") -> AttackResult:
    """Random-square search: propose +/-eps on a random square, keep it iff loss rises.

    For (C, H, W) inputs the square is spatial with one sign per channel; for
    flat inputs it is a contiguous window.
    """
    oracle = model if isinstance(model, QueryModel) else QueryModel(model)
    x0 = as_tensor(x)
    rng = sample_rng(seed, sample_id)
    xa = x0.copy()
    if query_budget <= 0:
        return AttackResult(xa, sample_id, _label_of(oracle._model, xa) != y, 0, "square", x0, y)
    best = oracle.loss(xa[None], y)[0]
    image = x0.ndim == 3
    side_full = x0.shape[1] if image else x0.size
    area_full = x0.shape[1] * x0.shape[2] if image else x0.size
    accepted = [best]
    for it in range(query_budget - 1):
        p = p_init / 2 ** (it // 50)  # shrink the square every 50 proposals
        cand = xa.copy()
        if image:
            s = int(min(max(round(np.sqrt(p * area_full)), 1), side_full))
            r = rng.integers(0, x0.shape[1] - s + 1)
            c = rng.integers(0, x0.shape[2] - s + 1)
            signs = rng.choice([-1.0, 1.0], size=(x0.shape[0], 1, 1))
            cand[:, r:r + s, c:c + s] = x0[:, r:r + s, c:c + s] + epsilon * signs
        else:
            s = int(min(max(round(p * area_full), 1), side_full))
            flat = cand.reshape(-1)
            start = rng.integers(0, x0.size - s + 1)
            flat[start:start + s] = x0.reshape(-1)[start:start + s] + epsilon * rng.choice([-1.0, 1.0])
        cand = project_linf(cand, x0, epsilon)
        loss = oracle.loss(cand[None], y)[0]
        if loss > best:
            xa, best = cand, loss
            accepted.append(best)
    result = AttackResult(xa, sample_id, _label_of(oracle._model, xa) != y, oracle.queries, "square", x0, y)
    result.accepted_losses = accepted
    return result


def random_noise_search(model, x, y: int, epsilon: float, query_budget: int, seed: int = 0,
                        sample_id: str = "") -> AttackResult:
    """Baseline: independent random +/-eps sign vectors until one flips the label."""
    oracle = model if isinstance(model, QueryModel) else QueryModel(model)
    x0 = as_tensor(x)
    rng = sample_rng(seed, sample_id)
    for _ in range(query_budget):
        cand = project_linf(x0 + epsilon * rng.choice([-1.0, 1.0], size=x0.shape), x0, epsilon)
        if oracle.label(cand[None])[0] != y:
            return AttackResult(cand, sample_id, True, oracle.queries, "noise", x0, y)
    return AttackResult(x0.copy(), sample_id, False, oracle.queries, "noise", x0, y)


def bit_flip(model, x, y: int, k_max: int = 8, sample_id: str = "") -> AttackResult:
    """Greedy bit flips: each step takes the not-yet-flipped bit with the largest
    loss gain (lowest index on ties); stops on label change, ``k_max`` flips, or
    when no flip increases the loss."""
    oracle = model if isinstance(model, QueryModel) else QueryModel(model)
    x0 = as_tensor(x)
    if not np.all((x0 == 0.0) | (x0 == 1.0)):
        raise ValueError("bit_flip requires a binary input")
    xa = x0.copy()
    flat_shape = xa.reshape(-1).shape
    flipped = np.zeros(flat_shape, dtype=bool)
    if k_max == 0:
        return AttackResult(xa, sample_id, False, 0, "bitflip", x0, y)
    current = oracle.loss(xa[None], y)[0]
    for _ in range(k_max):
        cand_idx = np.flatnonzero(~flipped)
        if cand_idx.size == 0:
            break
        cands = np.repeat(xa.reshape(1, -1), cand_idx.size, axis=0)
        cands[np.arange(cand_idx.size), cand_idx] = 1.0 - cands[np.arange(cand_idx.size), cand_idx]
        losses = oracle.loss(cands.reshape((-1,) + x0.shape), y)
        best = int(np.argmax(losses))
        if losses[best] <= current:
            break
        j = cand_idx[best]
        flat = xa.reshape(-1)
        flat[j] = 1.0 - flat[j]
        flipped[j] = True
        current = losses[best]
        if oracle.label(xa[None])[0] != y:
            break
    success = _label_of(oracle._model, xa) != y
    result = AttackResult(xa, sample_id, success, oracle.queries, "bitflip", x0, y)
    result.flips = [int(j) for j in np.flatnonzero(flipped)]
    return result


def run_attack(model: TargetModel, x, y: int, cfg: AttackConfig, sample_id: str = "") -> AttackResult:
    kind = cfg.attack_kind
    if kind == "fgsm":
        return fgsm(model, x, y, cfg.epsilon, sample_id=sample_id)
    if kind == "pgd":
        return pgd(model, x, y, cfg.epsilon, cfg.steps, cfg.step_size, cfg.seed,
                   cfg.random_start, sample_id=sample_id)
    # black-box attacks only ever see the query view
    oracle = QueryModel(model)
    if kind == "spsa":
        return spsa(oracle, x, y, cfg.epsilon, cfg, sample_id=sample_id)
    if kind == "square":
        return square_search(oracle, x, y, cfg.epsilon, cfg.query_budget, cfg.seed, sample_id=sample_id)
    return bit_flip(oracle, x, y, cfg.k_max, sample_id=sample_id)


def check_contract(result: AttackResult, cfg: AttackConfig) -> bool:
    """Exact eps-ball / range / Hamming check for one result."""
    xa, x0 = result.x_adv, result.x_orig
    if result.attack_kind == "bitflip":
        binary = np.all((xa == 0.0) | (xa == 1.0))
        return bool(binary and np.count_nonzero(xa != x0) <= cfg.k_max)
    in_range = np.all((xa >= 0.0) & (xa <= 1.0))
    return bool(in_range and np.max(np.abs(xa - x0), initial=0.0) <= cfg.epsilon)


@dataclass
class AttackSet:
    adversarial: LabeledDataset  # ids carry the ``:<kind>`` suffix
    results: list  # every attempted AttackResult, in input order
    config: AttackConfig

    @property
    def kept(self) -> list:
        if self.config.keep_only_successful:
            return [r for r in self.results if r.success]
        return list(self.results)


def generate_attack_set(model: TargetModel, dataset: LabeledDataset, cfg: AttackConfig) -> AttackSet:
    """Attack every correctly classified input once."""
    preds = predict_labels(model, dataset.inputs) if len(dataset) else np.zeros(0, dtype=np.int64)
    results = []
    for i in np.flatnonzero(preds == dataset.labels):
        sid = dataset.sample_ids[i]
        results.append(run_attack(model, dataset.inputs[i], int(dataset.labels[i]), cfg, sample_id=sid))
    kept = [r for r in results if r.success or not cfg.keep_only_successful]
    shape = (0,) + tuple(model.input_shape)
    adv = LabeledDataset(
        np.stack([r.x_adv for r in kept]) if kept else np.zeros(shape),
        [r.label for r in kept],
        [f"{r.sample_id}:{cfg.attack_kind}" for r in kept],
    )
    log.info("%s: %d attempted, %d kept", cfg.attack_kind, len(results), len(kept))
    return AttackSet(adv, results, cfg)


def with_kind(cfg: AttackConfig, kind: str) -> AttackConfig:
    return replace(cfg, attack_kind=kind)
