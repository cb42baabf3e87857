"""Command-line surface wiring the modules into reproducible experiments.

Subcommands: ingest, synth, split, train, eval, probe, attack, account,
calibrate, rr-baseline. Options can come from a flat INI config file whose
sections mirror the modules ([data], [sampler], [encoder], [objective],
[privacy], [optimizer], [run]); a command-line flag always overrides the
config value for the same key, with a warning when the two conflict.
Setting both a noise multiplier and a target epsilon is an error no matter
where each came from.

Every command that produces files also writes a manifest.json next to them
containing the fully resolved option values, the package version and (for
training) the privacy report; `train --from-manifest manifest.json`
re-executes a recorded run verbatim.

All randomness flows from the single --seed through the named substreams
documented in relpriv.rng. Exit codes: 0 success, 2 usage or configuration
error, 3 malformed input data, 4 numeric failure (diverged training or
infeasible calibration).
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import sys
from pathlib import Path

import numpy as np

import relpriv
from relpriv.accounting import calibrate_sigma, epsilon_for
from relpriv.encoder import load_checkpoint, save_checkpoint
from relpriv.errors import (
    CalibrationError,
    ConfigError,
    DataFormatError,
    TrainingError,
)
from relpriv.evaluation import (
    audit,
    evaluate_relations,
    linear_probe,
    embed_graph_entities,
    score_histogram,
)
from relpriv.graph import (
    community_labels,
    load_graph,
    load_labels,
    load_relation_pairs,
    save_graph,
    save_labels,
    save_relations,
    split_relations,
    synth_graph,
)
from relpriv.randomized_response import randomized_response
from relpriv.training import EncoderConfig, PrivacySpec, TrainConfig, train

# flag dest -> (config section, config key, caster)
_CONFIG_KEYS = {
    "entities": ("data", "entities", str),
    "relations": ("data", "relations", str),
    "vocab": ("data", "vocab", str),
    "text": ("data", "text", lambda s: s.lower() in ("1", "true", "yes")),
    "max_tokens": ("data", "max_tokens", int),
    "train_relations": ("data", "train_relations", str),
    "eval_relations": ("data", "eval_relations", str),
    "labels": ("data", "labels", str),
    "negatives": ("sampler", "negatives", int),
    "layers": ("encoder", "layers", str),
    "mode": ("encoder", "mode", str),
    "lora_rank": ("encoder", "lora_rank", int),
    "lora_alpha": ("encoder", "lora_alpha", float),
    "loss": ("objective", "loss", str),
    "temperature": ("objective", "temperature", float),
    "margin": ("objective", "margin", float),
    "clip": ("privacy", "clip", float),
    "sigma": ("privacy", "sigma", float),
    "epsilon": ("privacy", "epsilon", float),
    "delta": ("privacy", "delta", float),
    "batch": ("privacy", "batch", int),
    "steps": ("privacy", "steps", int),
    "per_tuple_noise": ("privacy", "per_tuple_noise", lambda s: s.lower() in ("1", "true", "yes")),
    "optimizer": ("optimizer", "optimizer", str),
    "lr": ("optimizer", "lr", float),
    "schedule": ("optimizer", "schedule", str),
    "seed": ("run", "seed", int),
    "out_dir": ("run", "out_dir", str),
    "threads": ("run", "threads", int),
}

_TRAIN_DEFAULTS = {
    "text": False,
    "max_tokens": 32,
    "negatives": 8,
    "layers": "32,32",
    "mode": "full",
    "lora_rank": 4,
    "lora_alpha": 16.0,
    "loss": "infonce",
    "temperature": 1.0,
    "margin": 1.0,
    "clip": 1.0,
    "batch": 256,
    "steps": 1000,
    "per_tuple_noise": False,
    "optimizer": "adam",
    "lr": 1e-2,
    "schedule": "constant",
    "seed": 0,
}


def _resolve(args: argparse.Namespace, config_path: str | None) -> dict:
    """Merge config-file values and flags; flags win with a warning."""
    cfg = configparser.ConfigParser()
    if config_path:
        if not Path(config_path).exists():
            raise DataFormatError(f"config file {config_path} not found")
        cfg.read(config_path)
    resolved = {dest: None for dest in _CONFIG_KEYS}
    resolved.update(_TRAIN_DEFAULTS)
    for dest, (section, key, caster) in _CONFIG_KEYS.items():
        if cfg.has_option(section, key):
            resolved[dest] = caster(cfg.get(section, key))
        flag_value = getattr(args, dest, None)
        if flag_value is not None:
            if cfg.has_option(section, key) and resolved[dest] != flag_value:
                print(
                    f"warning: flag --{dest.replace('_', '-')} overrides config "
                    f"[{section}] {key}",
                    file=sys.stderr,
                )
            resolved[dest] = flag_value
    if resolved.get("sigma") is not None and resolved.get("epsilon") is not None:
        raise ConfigError("sigma and epsilon are mutually exclusive; set one")
    return resolved


def _limit_threads(n: int | None) -> None:
    from relpriv.perf import limit_blas_threads

    limit_blas_threads(n)


def _write_manifest(out_dir: Path, command: str, resolved: dict, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": relpriv.__version__,
        "options": {k: v for k, v in sorted(resolved.items()) if v is not None},
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_graph_from(resolved: dict):
    if not resolved.get("entities") or not resolved.get("relations"):
        raise ConfigError("entities and relations files are required")
    return load_graph(
        resolved["entities"],
        resolved["relations"],
        vocab_path=resolved.get("vocab"),
        text_mode=bool(resolved.get("text")),
        max_tokens=int(resolved["max_tokens"]),
    )


def _emit(records, out_path: str | None) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in records]
    if out_path:
        Path(out_path).write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)


def _cmd_synth(args) -> int:
    resolved = _resolve(args, args.config)
    out_dir = Path(resolved["out_dir"] or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = synth_graph(
        args.n_entities,
        args.communities,
        args.p_in,
        args.p_out,
        args.vocab_size,
        resolved["seed"],
        max_tokens=int(resolved["max_tokens"]),
    )
    save_graph(graph, str(out_dir / "entities.tsv"), str(out_dir / "relations.tsv"))
    save_labels(str(out_dir / "labels.tsv"), community_labels(args.n_entities, args.communities))
    _write_manifest(
        out_dir,
        "synth",
        {
            **resolved,
            "n_entities": args.n_entities,
            "communities": args.communities,
            "p_in": args.p_in,
            "p_out": args.p_out,
            "vocab_size": args.vocab_size,
        },
        {"outputs": ["entities.tsv", "relations.tsv", "labels.tsv"]},
    )
    print(f"wrote {graph.n_entities} entities, {graph.n_relations} relations to {out_dir}")
    return 0


def _cmd_ingest(args) -> int:
    resolved = _resolve(args, args.config)
    out_dir = Path(resolved["out_dir"] or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = _load_graph_from(resolved)
    save_graph(graph, str(out_dir / "entities.tsv"), str(out_dir / "relations.tsv"))
    _write_manifest(out_dir, "ingest", resolved, {"outputs": ["entities.tsv", "relations.tsv"]})
    print(f"ingested {graph.n_entities} entities, {graph.n_relations} relations")
    return 0


def _cmd_split(args) -> int:
    resolved = _resolve(args, args.config)
    out_dir = Path(resolved["out_dir"] or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = _load_graph_from(resolved)
    split = split_relations(graph, args.eval_fraction, resolved["seed"])
    save_relations(str(out_dir / "train_relations.tsv"), split.train_relations)
    save_relations(str(out_dir / "eval_relations.tsv"), split.eval_relations)
    _write_manifest(
        out_dir,
        "split",
        {**resolved, "eval_fraction": args.eval_fraction},
        {"outputs": ["train_relations.tsv", "eval_relations.tsv"]},
    )
    print(f"split: {len(split.train_relations)} train / {len(split.eval_relations)} eval")
    return 0


def _split_from_files(graph, resolved):
    from relpriv.graph import GraphSplit

    if not resolved.get("train_relations"):
        raise ConfigError("a train_relations file is required")
    train_rels = load_relation_pairs(resolved["train_relations"], graph.n_entities)
    eval_rels = []
    if resolved.get("eval_relations"):
        eval_rels = load_relation_pairs(resolved["eval_relations"], graph.n_entities)
    split = GraphSplit(
        n_entities=graph.n_entities,
        train_relations=tuple(train_rels),
        eval_relations=tuple(eval_rels),
    )
    split.validate()
    return split


def _cmd_train(args) -> int:
    if args.from_manifest:
        recorded = json.loads(Path(args.from_manifest).read_text())
        if recorded.get("command") != "train":
            raise ConfigError("manifest does not describe a train run")
        for key, value in recorded["options"].items():
            if getattr(args, key, None) is None and key in _CONFIG_KEYS:
                setattr(args, key, value)
    resolved = _resolve(args, args.config)
    _limit_threads(resolved.get("threads"))
    out_dir = Path(resolved["out_dir"] or ".")
    out_dir.mkdir(parents=True, exist_ok=True)

    graph = _load_graph_from(resolved)
    split = _split_from_files(graph, resolved)

    encoder_cfg = EncoderConfig(
        layer_sizes=tuple(int(s) for s in str(resolved["layers"]).split(",")),
        mode=resolved["mode"],
        lora_rank=int(resolved["lora_rank"]),
        lora_alpha=float(resolved["lora_alpha"]),
    )
    train_cfg = TrainConfig(
        loss=resolved["loss"],
        negatives=int(resolved["negatives"]),
        temperature=float(resolved["temperature"]),
        margin=float(resolved["margin"]),
        optimizer=resolved["optimizer"],
        learning_rate=float(resolved["lr"]),
        schedule=resolved["schedule"],
    )
    privacy = PrivacySpec(
        clip=float(resolved["clip"]),
        noise_multiplier=resolved.get("sigma"),
        expected_batch=int(resolved["batch"]),
        steps=int(resolved["steps"]),
        target_epsilon=resolved.get("epsilon"),
        delta=resolved.get("delta"),
        per_tuple_noise=bool(resolved["per_tuple_noise"]),
    )

    params, report = train(
        graph,
        split,
        encoder_cfg,
        train_cfg,
        privacy,
        resolved["seed"],
        log_path=str(out_dir / "train_log.jsonl"),
    )
    save_checkpoint(params, str(out_dir / "checkpoint.bin"))
    (out_dir / "privacy_report.json").write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True)
    )
    _write_manifest(
        out_dir,
        "train",
        resolved,
        {
            "outputs": ["checkpoint.bin", "train_log.jsonl", "privacy_report.json"],
            "privacy_report": report.to_json_dict(),
        },
    )
    eps_text = "non-private" if report.epsilon is None else f"epsilon={report.epsilon:.4f}"
    print(f"trained {privacy.steps} steps; sigma={report.noise_multiplier} {eps_text}")
    return 0


def _cmd_eval(args) -> int:
    resolved = _resolve(args, args.config)
    graph = _load_graph_from(resolved)
    params = load_checkpoint(args.checkpoint)
    pairs = load_relation_pairs(args.pairs, graph.n_entities)
    metrics = evaluate_relations(
        params, graph, pairs, batch_size=args.batch_size, seed=resolved["seed"]
    )
    _emit([metrics], args.out)
    return 0


def _cmd_probe(args) -> int:
    resolved = _resolve(args, args.config)
    graph = _load_graph_from(resolved)
    params = load_checkpoint(args.checkpoint)
    if not resolved.get("labels"):
        raise ConfigError("a labels file is required")
    labels_map = load_labels(resolved["labels"], graph.n_entities)
    ids = sorted(labels_map)
    embeddings = embed_graph_entities(params, graph, ids)
    labels = np.array([labels_map[i] for i in ids])
    macro, micro = linear_probe(embeddings, labels, args.shots, resolved["seed"])
    _emit([{"macro_f1": macro, "micro_f1": micro, "shots": args.shots}], args.out)
    return 0


def _cmd_attack(args) -> int:
    resolved = _resolve(args, args.config)
    graph = _load_graph_from(resolved)
    params = load_checkpoint(args.checkpoint)
    members = load_relation_pairs(args.members, graph.n_entities)
    nonmembers = load_relation_pairs(args.nonmembers, graph.n_entities)
    report = audit(params, graph, members, nonmembers, args.n_pairs, resolved["seed"])
    record = {
        "n_pairs": args.n_pairs,
        "wilcoxon_p": report.wilcoxon_p,
        "tpr_at_fpr": {str(k): v for k, v in report.tpr_at_fpr.items()},
    }
    _emit([record], args.out)
    if args.histogram:
        rows = score_histogram(report)
        with open(args.histogram, "w", encoding="utf-8") as fh:
            fh.write("bin_left\tmember_count\tnonmember_count\n")
            for left, mc, nc in rows:
                fh.write(f"{left:.6f}\t{mc}\t{nc}\n")
    return 0


def _cmd_account(args) -> int:
    eps, order = epsilon_for(args.q, args.sigma, args.steps, args.delta)
    record = {
        "q": args.q,
        "sigma": args.sigma,
        "steps": args.steps,
        "delta": args.delta,
        "epsilon": eps,
        "best_order": order,
        "accountant": "rdp",
    }
    if args.ldjson:
        _emit([record], args.out)
    else:
        print(f"{'q':>10} {'sigma':>8} {'steps':>8} {'delta':>12} {'epsilon':>10} {'order':>7}")
        print(
            f"{args.q:>10.6f} {args.sigma:>8.4f} {args.steps:>8d} "
            f"{args.delta:>12.3e} {eps:>10.4f} {order or 0:>7.1f}"
        )
    return 0


def _cmd_calibrate(args) -> int:
    sigma = calibrate_sigma(args.epsilon, args.delta, args.q, args.steps)
    achieved, order = epsilon_for(args.q, sigma, args.steps, args.delta)
    record = {
        "target_epsilon": args.epsilon,
        "delta": args.delta,
        "q": args.q,
        "steps": args.steps,
        "sigma": sigma,
        "achieved_epsilon": achieved,
        "best_order": order,
        "accountant": "rdp",
    }
    _emit([record], args.out)
    return 0


def _cmd_rr_baseline(args) -> int:
    resolved = _resolve(args, args.config)
    graph = load_graph(
        args.entities,
        getattr(args, "in_relations"),
        max_tokens=int(resolved["max_tokens"]),
    )
    perturbed = randomized_response(
        graph, args.epsilon, resolved["seed"], force=args.force
    )
    save_relations(args.out, perturbed)
    print(f"randomized response: {graph.n_relations} -> {len(perturbed)} relations")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--seed", type=int, help="master seed for all substreams")
    p.add_argument("--threads", type=int, help="cap BLAS worker threads")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--entities", help="entities file")
    p.add_argument("--relations", help="relations file")
    p.add_argument("--vocab", help="vocabulary file (text mode)")
    p.add_argument("--text", action="store_const", const=True, default=None,
                   help="entities file holds raw text, not token ids")
    p.add_argument("--max-tokens", dest="max_tokens", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relpriv",
        description="Differentially private relational learning on text-attributed graphs",
    )
    parser.add_argument("--version", action="version", version=relpriv.__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic planted-partition graph")
    _add_common(p)
    p.add_argument("--n-entities", type=int, required=True)
    p.add_argument("--communities", type=int, required=True)
    p.add_argument("--p-in", type=float, required=True)
    p.add_argument("--p-out", type=float, required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ingest", help="validate and canonicalize graph files")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("split", help="split relations into train/eval sets")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--eval-fraction", type=float, required=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="run the private training loop")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--train-relations", dest="train_relations")
    p.add_argument("--eval-relations", dest="eval_relations")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--from-manifest", help="re-run a recorded training manifest")
    p.add_argument("--negatives", type=int)
    p.add_argument("--layers", help="comma-separated layer sizes, embedding first")
    p.add_argument("--mode", choices=("full", "adapter"))
    p.add_argument("--lora-rank", dest="lora_rank", type=int)
    p.add_argument("--lora-alpha", dest="lora_alpha", type=float)
    p.add_argument("--loss", choices=("infonce", "hinge"))
    p.add_argument("--temperature", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--per-tuple-noise", dest="per_tuple_noise",
                   action="store_const", const=True, default=None)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=("constant", "linear", "cosine"))
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="ranking metrics on held-out relations")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help="relations file to rank")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("probe", help="few-shot linear probe on frozen embeddings")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labels")
    p.add_argument("--shots", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("attack", help="membership-inference audit")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--members", required=True, help="training relations file")
    p.add_argument("--nonmembers", required=True, help="held-out relations file")
    p.add_argument("--n-pairs", dest="n_pairs", type=int, default=2000)
    p.add_argument("--histogram", help="write a score histogram table here")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("account", help="epsilon of a (q, sigma, steps, delta) run")
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--ldjson", action="store_true", help="machine-readable output")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_account)

    p = sub.add_parser("calibrate", help="smallest sigma meeting a target epsilon")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("rr-baseline", help="randomized-response relation release")
    _add_common(p)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--in", dest="in_relations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--force", action="store_true",
                   help="run the quadratic enumeration past the entity guard")
    p.set_defaults(func=_cmd_rr_baseline)

    return parser


def main(argv=None) -> int:
    from relpriv.perf import tune_allocator

    tune_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return 3
    except (CalibrationError, TrainingError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
