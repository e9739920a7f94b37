"""Desk-scale end-to-end run: target -> attacks -> IPGs -> dataset -> protocols -> reports."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, generate_attack_set
from .detector import DetectorConfig
from .evaluation import ProtocolSpec, format_table, records_json, run_protocol
from .models import TrainConfig, accuracy, build_mlp, make_binary_features, train_target
from .provenance import ExtractionConfig, extract_dataset
from .store import build_dataset, save_model, validate_splits

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    seed: int = 7
    n_features: int = 20
    hidden: tuple = (16, 8)
    n_train: int = 1000
    n_val: int = 200
    n_pool: int = 1500
    n_pairs: int = 400
    epsilon: float = 0.3
    attacks: tuple = ("fgsm", "pgd", "spsa")
    split_ratios: tuple = (0.8, 0.2)
    target_epochs: int = 30
    tau: float = 0.0
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(epochs=20))
    threads: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["attacks"] = list(self.attacks)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeskConfig":
        d = dict(d)
        if "detector" in d and isinstance(d["detector"], dict):
            d["detector"] = DetectorConfig(**d["detector"])
        for key in ("hidden", "attacks", "split_ratios"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class DeskResult:
    target_val_accuracy: float
    manifest: object
    results: dict  # protocol name -> list[ProtocolResult]
    attack_success: dict
    out_dir: Path


def reproduce_desk(cfg: DeskConfig, out_dir) -> DeskResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    (out / "config.json").write_text(json.dumps({"config": resolved, "config_hash": config_hash(resolved)},
                                                indent=2, sort_keys=True) + "\n")
    t_start = time.perf_counter()

    data = make_binary_features(cfg.n_train + cfg.n_val + cfg.n_pool, cfg.n_features, seed=cfg.seed)
    train, rest = data.split(cfg.n_train)
    val, pool = rest.split(cfg.n_val)
    model = build_mlp(cfg.n_features, cfg.hidden, 2, seed=cfg.seed, model_id=f"desk-mlp-s{cfg.seed}")
    model, history = train_target(model, train, val, TrainConfig(cfg.target_epochs, 32, 1e-2, cfg.seed))
    val_acc = accuracy(model, val)
    log.info("target val accuracy %.4f", val_acc)
    (out / "target").mkdir(exist_ok=True)
    save_model(model, out / "target" / "model.params")

    attack_sets = {}
    for kind in cfg.attacks:
        acfg = AttackConfig(kind, cfg.epsilon, seed=cfg.seed)
        attack_sets[kind] = generate_attack_set(model, pool, acfg)
    success = {k: {r.sample_id for r in s.results if r.success} for k, s in attack_sets.items()}
    common = set.intersection(*success.values())
    chosen = [sid for sid in pool.sample_ids if sid in common][:cfg.n_pairs]
    if len(chosen) < cfg.n_pairs:
        log.warning("only %d inputs were flipped by every attack (wanted %d)", len(chosen), cfg.n_pairs)
    index = {sid: i for i, sid in enumerate(pool.sample_ids)}
    ecfg = ExtractionConfig(tau=cfg.tau, seed=cfg.seed)

    graphs = extract_dataset(model, pool.inputs[[index[s] for s in chosen]], chosen, ecfg, 0, "benign",
                             [int(pool.labels[index[s]]) for s in chosen], threads=cfg.threads)
    for kind, aset in attack_sets.items():
        by_id = {r.sample_id: r for r in aset.results}
        xs = np.stack([by_id[s].x_adv for s in chosen])
        graphs += extract_dataset(model, xs, chosen, ecfg, 1, kind,
                                  [by_id[s].label for s in chosen], threads=cfg.threads)

    manifest = build_dataset(graphs, cfg.split_ratios, cfg.seed, out / "dataset")
    if validate_splits(manifest):
        raise RuntimeError("split leakage in freshly built dataset")

    specs = {
        "intra": [ProtocolSpec("intra", cfg.attacks, cfg.attacks, cfg.seed)],
        "multi": [ProtocolSpec("multi", cfg.attacks, cfg.attacks, cfg.seed)],
        "cross_threat": [ProtocolSpec("cross_threat", ("pgd",), ("spsa",), cfg.seed),
                         ProtocolSpec("cross_threat", ("spsa",), ("pgd",), cfg.seed)],
    }
    results = {name: [run_protocol(s, manifest, cfg.detector) for s in group] for name, group in specs.items()}

    det_dir = out / "detectors"
    det_dir.mkdir(exist_ok=True)
    rep_dir = out / "reports"
    rep_dir.mkdir(exist_ok=True)
    titles = {"intra": "Intra-attack detection", "multi": "Multi-attack training, per-attack testing",
              "cross_threat": "Cross-threat transfer"}
    for name, group in results.items():
        for res in group:
            for key, det in res.detectors.items():
                (det_dir / f"{name}__{key.replace('+', '_')}.params").write_bytes(det.to_bytes())
        (rep_dir / f"{name}.txt").write_text(format_table(group, titles[name]))
        (rep_dir / f"{name}.json").write_text(records_json(group))
    summary = {
        "seed": cfg.seed,
        "target_val_accuracy": val_acc,
        "target_train_loss": history.train_loss,
        "attack_success_counts": {k: len(v) for k, v in success.items()},
        "attack_attempts": {k: len(s.results) for k, s in attack_sets.items()},
        "pairs": len(chosen),
        "dataset_stats": manifest.stats.to_dict(),
    }
    (rep_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("desk run finished in %.1fs", time.perf_counter() - t_start)
    return DeskResult(val_acc, manifest, results, summary["attack_success_counts"], out)
