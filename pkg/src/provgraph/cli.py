"""Command-line entry point: ``provgraph <subcommand> ...``.

Every subcommand writes its resolved arguments and their hash to
``<out>/run_config.json``. ``--config FILE`` (JSON object keyed by option
destination names, e.g. ``{"epsilon": 0.2, "seed": 3}``) overrides flags.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("provgraph")

SUBCOMMANDS = ("train-target", "attack", "extract", "build-dataset", "stats", "validate",
               "train-detector", "score", "evaluate", "overhead", "reproduce-desk")


class CliError(RuntimeError):
    pass


def _ints(text: str) -> list:
    return [int(t) for t in text.split(",") if t.strip()] if text else []


def _floats(text: str) -> list:
    return [float(t) for t in text.split(",") if t.strip()]


def _names(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _write_run_config(out: Path, args: argparse.Namespace) -> None:
    out.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    resolved = json.loads(json.dumps(resolved, default=str))
    digest = hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:16]
    (out / "run_config.json").write_text(
        json.dumps({"args": resolved, "config_hash": digest}, indent=2, sort_keys=True) + "\n")


def _save_dataset(path: Path, data, **extra) -> None:
    np.savez(path, inputs=data.inputs, labels=data.labels, sample_ids=np.array(data.sample_ids), **extra)


def _load_dataset(path):
    from .models import LabeledDataset

    with np.load(path) as z:
        return LabeledDataset(z["inputs"], z["labels"], [str(s) for s in z["sample_ids"]])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train_target(args) -> int:
    from .models import (TrainConfig, accuracy, build_cnn, build_mlp, make_binary_features,
                         make_image_blobs, train_target)
    from .store import save_model

    out = Path(args.out)
    _write_run_config(out, args)
    n = args.n_train + args.n_val + args.n_pool
    if args.arch == "mlp":
        data = make_binary_features(n, args.n_features, seed=args.seed)
        model = build_mlp(args.n_features, _ints(args.hidden), 2, seed=args.seed, model_id=args.model_id)
    else:
        data = make_image_blobs(n, 2, args.side, seed=args.seed)
        model = build_cnn((1, args.side, args.side), _ints(args.channels), 2, seed=args.seed,
                          model_id=args.model_id)
    train, rest = data.split(args.n_train)
    val, pool = rest.split(args.n_val)
    model, hist = train_target(model, train, val, TrainConfig(args.epochs, args.batch_size, args.lr, args.seed))
    save_model(model, out / "model.params")
    for name, part in (("train", train), ("val", val), ("pool", pool)):
        _save_dataset(out / f"{name}.npz", part)
    report = {"train_loss": hist.train_loss, "train_acc": hist.train_acc, "val_acc": hist.val_acc,
              "final_val_accuracy": accuracy(model, val), "seed": args.seed}
    (out / "history.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"val accuracy {report['final_val_accuracy']:.4f}")
    return 0


def cmd_attack(args) -> int:
    from .attacks import AttackConfig, check_contract, generate_attack_set
    from .store import load_model

    out = Path(args.out)
    _write_run_config(out, args)
    model = load_model(args.model)
    data = _load_dataset(args.data)
    cfg = AttackConfig(args.kind, args.epsilon, args.steps, args.step_size, args.query_budget, args.seed,
                       not args.keep_all, k_max=args.k_max)
    aset = generate_attack_set(model, data, cfg)
    kept = aset.kept
    if not all(check_contract(r, cfg) for r in kept):
        raise CliError("attack produced an example outside its budget")
    _save_dataset(out / f"{args.kind}.npz", aset.adversarial,
                  original_ids=np.array([r.sample_id for r in kept]),
                  success=np.array([r.success for r in kept], dtype=bool),
                  queries=np.array([r.queries_used for r in kept], dtype=np.int64))
    print(f"{args.kind}: {len(aset.results)} attempted, {sum(r.success for r in aset.results)} successful, "
          f"{len(kept)} kept")
    return 0


def cmd_extract(args) -> int:
    from .provenance import ExtractionConfig, extract_dataset
    from .store import load_model, serialize_ipg

    out = Path(args.out)
    _write_run_config(out, args)
    model = load_model(args.model)
    with np.load(args.data) as z:
        inputs, labels = z["inputs"], z["labels"]
        ids = [str(s) for s in (z["original_ids"] if "original_ids" in z else z["sample_ids"])]
    cfg = ExtractionConfig(tau=args.tau, include_input_nodes=not args.no_input_nodes, seed=args.seed)
    graph_label = 0 if args.attack_kind == "benign" else 1
    graphs = extract_dataset(model, inputs, ids, cfg, graph_label, args.attack_kind, labels, threads=args.threads)
    gdir = out / "graphs"
    gdir.mkdir(parents=True, exist_ok=True)
    for g in graphs:
        (gdir / f"{g.sample_id}__{g.attack_kind}.ipg").write_bytes(serialize_ipg(g))
    (out / "extraction_config.json").write_text(
        json.dumps({**cfg.to_dict(), "config_hash": cfg.config_hash}, indent=2, sort_keys=True) + "\n")
    print(f"extracted {len(graphs)} graphs into {gdir}")
    return 0


def cmd_build_dataset(args) -> int:
    from .store import build_dataset, deserialize_ipg

    out = Path(args.out)
    _write_run_config(out, args)
    files = sorted(p for d in args.graphs for p in Path(d).rglob("*.ipg"))
    if not files:
        raise CliError("no .ipg files found under " + ", ".join(args.graphs))
    graphs = [deserialize_ipg(p.read_bytes()) for p in files]
    manifest = build_dataset(graphs, _floats(args.ratios) if args.ratios else None, args.seed, out)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"manifest {out / 'manifest.tsv'}: {counts}")
    return 0


def cmd_stats(args) -> int:
    from .store import compute_stats, read_manifest

    stats = compute_stats(read_manifest(args.manifest))
    text = json.dumps(stats.to_dict(), indent=2, sort_keys=True)
    if args.out:
        _write_run_config(Path(args.out), args)
        (Path(args.out) / "stats.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_validate(args) -> int:
    from .store import read_manifest, validate_splits

    manifest = read_manifest(args.manifest)
    bad = validate_splits(manifest)
    missing = manifest.missing_files()
    for sid in bad:
        print(f"leak: sample {sid} appears in more than one split")
    for path in missing:
        print(f"missing: {path}")
    if bad or missing:
        return 1
    print(f"ok: {len(manifest.records)} records, no leakage")
    return 0


def _detector_config(args):
    from .detector import DetectorConfig

    return DetectorConfig(hidden_dim=args.hidden_dim, layers=args.layers, batch_size=args.batch_size,
                          learning_rate=args.lr, epochs=args.epochs, patience=args.patience, seed=args.seed,
                          threshold=args.threshold)


def cmd_train_detector(args) -> int:
    from .detector import train_detector
    from .store import read_manifest, validate_splits

    out = Path(args.out)
    _write_run_config(out, args)
    manifest = read_manifest(args.manifest)
    if validate_splits(manifest):
        raise CliError("manifest has split leakage; run `validate`")
    attacks = _names(args.attacks) + ["benign"] if args.attacks else None
    train = manifest.graphs("train", attacks)
    val = manifest.graphs("val", attacks)
    model, curves = train_detector(train, val or None, _detector_config(args))
    (out / "detector.params").write_bytes(model.to_bytes())
    (out / "curves.json").write_text(json.dumps(curves.to_dict(), indent=2) + "\n")
    print(f"trained on {len(train)} graphs for {len(curves.train_loss)} epochs")
    return 0


def cmd_score(args) -> int:
    from .detector import DetectorModel, predict_batch
    from .store import read_manifest

    model = DetectorModel.from_bytes(Path(args.detector).read_bytes())
    manifest = read_manifest(args.manifest)
    scores, labels = predict_batch(model, manifest, args.split)
    recs = manifest.split(args.split)
    lines = ["path\tscore\tlabel"] + [f"{r.path}\t{float(s)!r}\t{int(y)}" for r, s, y in zip(recs, scores, labels)]
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_run_config(Path(args.out), args)
        (Path(args.out) / "scores.tsv").write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import ProtocolSpec, format_table, records_json, run_protocol
    from .store import read_manifest

    out = Path(args.out)
    _write_run_config(out, args)
    manifest = read_manifest(args.manifest)
    test = _names(args.test_attacks) if args.test_attacks else _names(args.train_attacks)
    spec = ProtocolSpec(args.protocol, _names(args.train_attacks), test, args.seed)
    result = run_protocol(spec, manifest, _detector_config(args))
    table = format_table([result], f"{args.protocol} protocol")
    (out / "report.txt").write_text(table)
    (out / "report.json").write_text(records_json([result]))
    for key, det in result.detectors.items():
        (out / f"detector__{key.replace('+', '_')}.params").write_bytes(det.to_bytes())
    print(table, end="")
    return 0


def cmd_overhead(args) -> int:
    from .evaluation import linear_fit_r2, measure_overhead
    from .models import build_mlp
    from .store import load_model

    out = Path(args.out)
    _write_run_config(out, args)
    rng = np.random.default_rng(args.seed)
    if args.model:
        models = [load_model(args.model)]
    else:
        models = [build_mlp(args.n_features, [w, w], 2, seed=args.seed, model_id=f"mlp-w{w}")
                  for w in _ints(args.widths)]
    rows, points = [], []
    for m in models:
        xs = rng.random((args.n_inputs,) + m.input_shape)
        rep = measure_overhead(m, xs)
        rows.append({"model_id": m.model_id, **rep.to_dict()})
        points.append((rep.n_nodes + rep.n_edges, rep.t_overhead))
    lines = ["model_id  T_overhead(s)  N  E  d_v  d_e  S_IPG(MB)"]
    lines += [f"{r['model_id']}  {r['t_overhead']:.6f}  {r['n_nodes']:.0f}  {r['n_edges']:.0f}  "
              f"{r['d_v']}  {r['d_e']}  {r['s_ipg_mb']:.6f}" for r in rows]
    result = {"rows": rows}
    if len(points) >= 2:
        a, b, r2 = linear_fit_r2(*zip(*points))
        result["fit"] = {"slope": a, "intercept": b, "r2": r2}
        lines.append(f"linear fit of time vs |V|+|E|: R^2 = {r2:.4f}")
    (out / "overhead.txt").write_text("\n".join(lines) + "\n")
    (out / "overhead.json").write_text(json.dumps(result, indent=2) + "\n")
    print("\n".join(lines))
    return 0


def cmd_reproduce_desk(args) -> int:
    from .detector import DetectorConfig
    from .pipeline import DeskConfig, reproduce_desk

    cfg = DeskConfig(seed=args.seed, n_pool=args.n_pool, n_pairs=args.n_pairs, epsilon=args.epsilon,
                     detector=DetectorConfig(epochs=args.epochs), threads=args.threads)
    out = Path(args.out)
    _write_run_config(out, args)
    res = reproduce_desk(cfg, out)
    for name in ("intra", "multi", "cross_threat"):
        print((out / "reports" / f"{name}.txt").read_text())
    print(f"target val accuracy {res.target_val_accuracy:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _detector_flags(p):
    p.add_argument("--hidden-dim", type=int, default=128)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="provgraph", description="Inference provenance graph pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", required=True)

    def add(name, func, help_text, out_required=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file overriding flags")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", required=out_required, help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("train-target", cmd_train_target, "train a synthetic target classifier")
    p.add_argument("--arch", choices=("mlp", "cnn"), default="mlp")
    p.add_argument("--model-id", default="target")
    p.add_argument("--n-features", type=int, default=20)
    p.add_argument("--hidden", default="16,8")
    p.add_argument("--side", type=int, default=8)
    p.add_argument("--channels", default="4")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-val", type=int, default=200)
    p.add_argument("--n-pool", type=int, default=500)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-2)

    p = add("attack", cmd_attack, "generate adversarial examples")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, choices=("fgsm", "pgd", "spsa", "square", "bitflip"))
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--query-budget", type=int, default=2048)
    p.add_argument("--k-max", type=int, default=8)
    p.add_argument("--keep-all", action="store_true", help="keep unsuccessful attempts too")

    p = add("extract", cmd_extract, "extract IPGs for a set of inputs")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help=".npz from train-target or attack")
    p.add_argument("--attack-kind", default="benign")
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--no-input-nodes", action="store_true")

    p = add("build-dataset", cmd_build_dataset, "split graphs into a manifest")
    p.add_argument("--graphs", nargs="+", required=True, help="directories holding .ipg files")
    p.add_argument("--ratios", default="", help="train,test or train,val,test (default 0.7,0.1,0.2)")

    p = add("stats", cmd_stats, "dataset statistics", out_required=False)
    p.add_argument("--manifest", required=True)

    p = add("validate", cmd_validate, "check split hygiene and files", out_required=False)
    p.add_argument("--manifest", required=True)

    p = add("train-detector", cmd_train_detector, "train the graph detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--attacks", default="", help="restrict adversarial graphs to these attacks")
    _detector_flags(p)

    p = add("score", cmd_score, "score graphs of one split", out_required=False)
    p.add_argument("--detector", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")

    p = add("evaluate", cmd_evaluate, "run an evaluation protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", required=True, choices=("intra", "multi", "cross_threat"))
    p.add_argument("--train-attacks", required=True)
    p.add_argument("--test-attacks", default="")
    _detector_flags(p)

    p = add("overhead", cmd_overhead, "measure extraction time and storage")
    p.add_argument("--model", default=None)
    p.add_argument("--widths", default="16,32,64,128")
    p.add_argument("--n-features", type=int, default=32)
    p.add_argument("--n-inputs", type=int, default=20)

    p = add("reproduce-desk", cmd_reproduce_desk, "run the full desk-scale pipeline")
    p.add_argument("--n-pool", type=int, default=1500)
    p.add_argument("--n-pairs", type=int, default=400)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--epochs", type=int, default=20, help="detector epochs")
    p.set_defaults(seed=7)
    return parser


def _apply_config_file(parser, args):
    if not getattr(args, "config", None):
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config: {exc}")
    if not isinstance(overrides, dict):
        parser.error("--config must hold a JSON object")
    unknown = sorted(set(overrides) - set(vars(args)))
    if unknown:
        parser.error(f"unknown config keys: {', '.join(unknown)}")
    for key, value in overrides.items():
        setattr(args, key, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(parser, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
