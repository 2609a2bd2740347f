"""Command-line entry point.

Sub-commands:
    synth    generate the built-in synthetic benchmark (graph, embeddings, dataset)
    split    build zero-shot or standard split manifests from a dataset
    train    train the three alignment spaces for one split
    predict  write masked rankings with provenance as JSON lines
    eval     score one or more (split, checkpoints) pairs into a report
    stats    emit split statistics (class and instance overlaps)
    sweep    emit CSV over mask scores or a (k_r, k_e) grid

Option values resolve as: built-in defaults, then `--config key=value` file
entries, then `KGMASK_*` environment variables, then explicit flags.
All outputs are written atomically; failures leave no partial files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from . import data as data_mod
from . import evaluation, masking, spaces
from .embeddings import Lemmatizer, default_lemmatizer, load_embeddings, save_embeddings
from .errors import ParseError
from .kg import load_triples, save_triples
from .util import atomic_write_json, atomic_write_text

ENV_PREFIX = "KGMASK_"


def _lemmatizer(args) -> Lemmatizer:
    if getattr(args, "base_forms", None):
        return Lemmatizer.load(args.base_forms, getattr(args, "aliases", None))
    return default_lemmatizer()


def _resolved_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(cfg.items())}


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--samples", required=True, help="sample JSONL file")
    p.add_argument("--features", required=True, help="image feature file ('#dim D' header)")


def _add_model_inputs(p: argparse.ArgumentParser) -> None:
    _add_data_flags(p)
    p.add_argument("--embeddings", required=True, help="text embedding file")
    p.add_argument("--emb-dim", type=int, required=True, help="embedding dimensionality")
    p.add_argument("--kg", required=True, help="tab-separated triple file")
    p.add_argument("--base-forms", help="base-form word list (default: packaged)")
    p.add_argument("--aliases", help="irregular alias file (default: packaged)")


def _add_mask_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kr", type=int, default=3, help="top relations kept per sample")
    p.add_argument("--ke", type=int, default=1, help="top entities kept per sample")
    p.add_argument("--mask-score", type=float, default=10.0, help="additive mask score s")
    p.add_argument("--tau", type=float, default=0.01, help="score temperature")
    p.add_argument("--mode", choices=masking.MODES, default="standard")


def _load_model_inputs(args):
    lem = _lemmatizer(args)
    table = load_embeddings(args.embeddings, args.emb_dim)
    kg = load_triples(args.kg, lem.normalize_phrase)
    dataset, report = data_mod.load_dataset(args.samples, args.features, lem)
    if report:
        print(f"warning: {len(report.rejected)} samples rejected at load", file=sys.stderr)
    return lem, table, kg, dataset


def _load_bundle(checkpoint_dir) -> spaces.SpaceBundle:
    loaded = {}
    for kind in spaces.KINDS:
        path = Path(checkpoint_dir) / f"space_{kind}.json"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        loaded[kind], _ = spaces.load_checkpoint(path)
    return spaces.SpaceBundle(**loaded)


def cmd_synth(args) -> int:
    spec = data_mod.SynthSpec(
        n_entities=args.entities,
        n_relations=args.relations,
        n_answers=args.answers,
        n_samples=args.samples,
        feature_dim=args.feature_dim,
        noise=args.noise,
        seed=args.seed,
        embedding_dim=args.emb_dim,
        facts_per_answer=args.facts_per_answer,
        answer_jitter=args.answer_jitter,
    )
    dataset, kg, table = data_mod.gen_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_triples(kg, out / "kg.tsv")
    save_embeddings(table, out / "embeddings.txt")
    data_mod.save_dataset(dataset, out / "samples.jsonl", out / "features.txt")
    atomic_write_json(out / "synth.json", {
        "n_entities": spec.n_entities, "n_relations": spec.n_relations,
        "n_answers": spec.n_answers, "n_samples": spec.n_samples,
        "feature_dim": spec.feature_dim, "noise": spec.noise, "seed": spec.seed,
        "embedding_dim": spec.embedding_dim, "facts_per_answer": spec.facts_per_answer,
        "answer_jitter": spec.answer_jitter,
    })
    print(f"wrote synthetic benchmark to {out} "
          f"({len(dataset.samples)} samples, {len(kg)} triples, {len(table)} embeddings)")
    return 0


def cmd_split(args) -> int:
    lem = _lemmatizer(args)
    dataset, report = data_mod.load_dataset(args.samples, args.features, lem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if report:
        atomic_write_json(out / "load_report.json", report.to_dict())
    pool = data_mod.top_k_answers(dataset, args.top_answers)
    _, dropped = data_mod.filter_to_pool(dataset, pool)
    atomic_write_json(out / "drop_report.json", {"n_dropped": len(dropped), "dropped_ids": dropped})
    if args.kind == "zsl":
        splits = data_mod.zero_shot_split(dataset, pool, args.seed, args.repeats)
    else:
        splits = data_mod.standard_split(dataset, pool, args.seed, args.repeats, args.train_fraction)
    for train, test, split in splits:
        path = out / f"split_{split.repeat_index:03d}.json"
        data_mod.save_split_manifest(path, split, train, test, args.seed, kind=args.kind)
        print(f"{path}: {len(train.samples)} train / {len(test.samples)} test samples, "
              f"{len(split.seen)} seen / {len(split.unseen)} unseen answers")
    return 0


def cmd_train(args) -> int:
    lem, table, kg, dataset = _load_model_inputs(args)
    train_set, _, split = data_mod.load_split_manifest(args.split, dataset)
    featurizer = spaces.Featurizer(table, dataset.image_features, lem)
    config = spaces.TrainConfig(
        batch_size=args.batch_size, tau=args.tau, epochs=args.epochs,
        patience=args.patience, seed=args.seed,
        learning_rate_scale=args.lr_scale, holdout_fraction=args.holdout,
    )
    hidden = [int(d) for d in str(args.hidden_dims).split(",") if d]
    vocabs = {
        "answer": sorted(split.pool),
        "relation": sorted(kg.relation_vocab),
        "entity": sorted(kg.entity_vocab),
    }
    built = {
        kind: spaces.SpaceModel.build(
            kind, vocabs[kind], table, featurizer.input_dim,
            common_dim=args.common_dim, hidden_dims=hidden, tau=args.tau,
            projection=not args.no_projection, seed=args.seed, lemmatizer=lem)
        for kind in spaces.KINDS
    }
    bundle = spaces.SpaceBundle(**built)
    logs = spaces.train(bundle, train_set, table, config, lem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": _resolved_config(args)}
    for kind, space in bundle:
        spaces.save_checkpoint(space, out / f"space_{kind}.json", extra=meta)
    atomic_write_json(out / "train_log.json",
                      {"config": _resolved_config(args),
                       "spaces": {kind: log.to_dict() for kind, log in logs.items()}})
    for kind, log in logs.items():
        final = log.epochs[-1].monitor_loss if log.epochs else float("nan")
        print(f"{kind}: {len(log.epochs)} epochs, best epoch {log.best_epoch}, "
              f"final monitored loss {final:.4f}")
    return 0


def _mask_config(args) -> masking.MaskConfig:
    return masking.MaskConfig(k_r=args.kr, k_e=args.ke, score_s=args.mask_score,
                              tau=args.tau, mode=args.mode)


def cmd_predict(args) -> int:
    lem, table, kg, dataset = _load_model_inputs(args)
    _, test, split = data_mod.load_split_manifest(args.split, dataset)
    bundle = _load_bundle(args.checkpoints)
    featurizer = spaces.Featurizer(table, dataset.image_features, lem)
    config = _mask_config(args)
    pool = evaluation.mode_pool(split, config.mode)
    lines = []
    for sample in test.samples:
        pred = masking.predict(bundle, kg, sample, featurizer, pool, config)
        lines.append(json.dumps(pred.to_dict(top=args.top), sort_keys=True))
    atomic_write_text(args.out, "\n".join(lines) + ("\n" if lines else ""))
    print(f"wrote {len(lines)} predictions to {args.out}")
    return 0


def cmd_eval(args) -> int:
    if len(args.checkpoints) != len(args.split):
        raise ValueError("--split and --checkpoints must be given the same number of times")
    threads = 1 if args.deterministic else args.threads
    lem, table, kg, dataset = _load_model_inputs(args)
    featurizer = spaces.Featurizer(table, dataset.image_features, lem)
    config = _mask_config(args)
    reports = []
    for manifest, ckpt in zip(args.split, args.checkpoints):
        _, test, split = data_mod.load_split_manifest(manifest, dataset)
        bundle = _load_bundle(ckpt)
        reports.append(evaluation.evaluate(bundle, kg, test, split, config, featurizer, threads=threads))
    final = reports[0] if len(reports) == 1 else evaluation.mean_report(reports)
    payload = {"config": _resolved_config(args), "report": final.to_dict()}
    atomic_write_json(args.out, payload)
    print(f"{config.mode}: hit1={final.hit1:.4f} hit3={final.hit3:.4f} "
          f"hit10={final.hit10:.4f} mrr={final.mrr:.4f} mr={final.mr:.2f} -> {args.out}")
    return 0


def cmd_stats(args) -> int:
    lem = _lemmatizer(args)
    dataset, _ = data_mod.load_dataset(args.samples, args.features, lem)
    per_split = []
    for manifest in args.split:
        train, test, split = data_mod.load_split_manifest(manifest, dataset)
        stats = data_mod.split_stats(train, test)
        per_split.append({"manifest": str(manifest), "repeat_index": split.repeat_index,
                          **stats.to_dict()})
    atomic_write_json(args.out, {"config": _resolved_config(args), "splits": per_split})
    for entry in per_split:
        print(f"{entry['manifest']}: answers {entry['answers']['train_classes']}"
              f"/{entry['answers']['test_classes']}"
              f"/{entry['answers']['class_overlap']} (train/test/overlap classes)")
    return 0


def cmd_sweep(args) -> int:
    lem, table, kg, dataset = _load_model_inputs(args)
    _, test, split = data_mod.load_split_manifest(args.split, dataset)
    bundle = _load_bundle(args.checkpoints)
    featurizer = spaces.Featurizer(table, dataset.image_features, lem)
    base = _mask_config(args)
    buf = io.StringIO()
    writer = csv.writer(buf)
    if args.sweep == "scores":
        values = [float(v) for v in args.scores.split(",") if v]
        results = evaluation.sweep_scores(bundle, kg, test, split, base, values, featurizer)
        writer.writerow(["score", "hit1", "hit3", "hit10", "mrr", "mr", "n_samples"])
        for s, rep in results:
            writer.writerow([s, rep.hit1, rep.hit3, rep.hit10, rep.mrr, rep.mr, rep.n_samples])
    else:
        k_rs = [int(v) for v in args.kr_grid.split(",") if v]
        k_es = [int(v) for v in args.ke_grid.split(",") if v]
        results = evaluation.sweep_grid(bundle, kg, test, split, base, k_rs, k_es, featurizer)
        writer.writerow(["k_r", "k_e", "hit1", "hit3", "hit10", "mrr", "mr", "n_samples"])
        for k_r, k_e, rep in results:
            writer.writerow([k_r, k_e, rep.hit1, rep.hit3, rep.hit10, rep.mrr, rep.mr, rep.n_samples])
    atomic_write_text(args.out, buf.getvalue())
    print(f"wrote sweep CSV to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgmask",
        description="Knowledge-graph-masked zero-shot answer ranking",
    )
    parser.add_argument("--config", help="key=value option file (flags override)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--entities", type=int, default=400)
    p.add_argument("--relations", type=int, default=20)
    p.add_argument("--answers", type=int, default=200)
    p.add_argument("--samples", type=int, default=4000)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--emb-dim", type=int, default=32)
    p.add_argument("--facts-per-answer", type=int, default=3)
    p.add_argument("--answer-jitter", type=float, default=0.25)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="build split manifests")
    _add_data_flags(p)
    p.add_argument("--base-forms")
    p.add_argument("--aliases")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("zsl", "standard"), default="zsl")
    p.add_argument("--top-answers", type=int, default=500)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the three spaces for one split")
    _add_model_inputs(p)
    p.add_argument("--split", required=True, help="split manifest")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--common-dim", type=int, default=300)
    p.add_argument("--hidden-dims", default="128", help="comma-separated hidden layer sizes")
    p.add_argument("--no-projection", action="store_true",
                   help="use raw embeddings as targets (common dim must match)")
    p.add_argument("--lr-scale", type=float, default=1.0)
    p.add_argument("--holdout", type=float, default=0.1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write masked rankings as JSON lines")
    _add_model_inputs(p)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top", type=int, default=10)
    _add_mask_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate splits into a JSON report")
    _add_model_inputs(p)
    p.add_argument("--split", required=True, nargs="+")
    p.add_argument("--checkpoints", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded evaluation")
    _add_mask_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="split statistics")
    _add_data_flags(p)
    p.add_argument("--base-forms")
    p.add_argument("--aliases")
    p.add_argument("--split", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sweep", help="emit CSV over mask scores or a k grid")
    _add_model_inputs(p)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", choices=("scores", "grid"), default="scores")
    p.add_argument("--scores", default="0,0.5,1,2,5,10,20,50,100")
    p.add_argument("--kr-grid", default="1,3,5,15,25")
    p.add_argument("--ke-grid", default="1,3,5")
    _add_mask_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def _file_and_env_defaults(argv: list[str]) -> dict[str, str]:
    """key=value pairs from the --config file, overridden by KGMASK_* env vars."""
    values: dict[str, str] = {}
    config_path = os.environ.get(ENV_PREFIX + "CONFIG")
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            config_path = argv[i + 1]
        elif arg.startswith("--config="):
            config_path = arg.split("=", 1)[1]
    if config_path:
        for lineno, line in enumerate(Path(config_path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(config_path, lineno, "expected key=value")
            key, value = line.split("=", 1)
            values[key.strip().lower().replace("-", "_")] = value.strip()
    for key, value in os.environ.items():
        if key.startswith(ENV_PREFIX) and key != ENV_PREFIX + "CONFIG":
            values[key[len(ENV_PREFIX):].lower()] = value
    return values


def _coerce(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if action.nargs in ("+", "*"):
        parts = raw.split()
        return [action.type(p) for p in parts] if action.type else parts
    return action.type(raw) if action.type else raw


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        overrides = _file_and_env_defaults(argv)
        namespace = argparse.Namespace()
        if overrides:
            actions: dict[str, argparse.Action] = {}
            for action in parser._subparsers._group_actions[0].choices.values():  # type: ignore[union-attr]
                for act in action._actions:
                    actions.setdefault(act.dest, act)
            for key, raw in overrides.items():
                if key in actions:
                    setattr(namespace, key, _coerce(actions[key], raw))
        args = parser.parse_args(argv, namespace)
        return args.func(args)
    except (ParseError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
