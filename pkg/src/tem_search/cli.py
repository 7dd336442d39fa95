"""Command-line entry point: synth, prepare, train, eval, compare, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every subcommand that
writes a directory also writes ``config.resolved.json`` there; passing that file
back with ``--config`` repeats the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evaluation, models, trainer
from .checkpoint import load_checkpoint
from .models import MODEL_KINDS, ModelConfig
from .trainer import TrainConfig

log = logging.getLogger("tem_search")

SEEDED = {"synth", "prepare", "train"}


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--model-kind", dest="model_kind", choices=MODEL_KINDS, type=str.upper)
    g.add_argument("--d", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--layers", type=int)
    g.add_argument("--d-ff", dest="d_ff", type=int)
    g.add_argument("--hem-lambda", dest="hem_lambda", type=float)
    g.add_argument("--negatives", type=int)
    g.add_argument("--max-history", dest="max_history", type=int)
    g.add_argument("--ln-eps", dest="ln_eps", type=float)
    g = p.add_argument_group("trainer")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--lang-weight", dest="lang_weight", type=float)
    g.add_argument("--window", type=int)
    g.add_argument("--sampling-power", dest="sampling_power", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tem-search", description="Personalized product search over transformer-encoded purchase histories")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}

    def cmd(name, help):
        p = sub.add_parser(name, help=help)
        parser.subcommands[name] = p
        p.add_argument("--config", help="flat JSON file; explicit flags override its values")
        p.add_argument("--seed", type=int)
        return p

    p = cmd("synth", "generate a planted-preference corpus")
    p.add_argument("--out")
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--categories", type=int, default=8)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--review-words", dest="review_words", type=int, default=12)
    p.add_argument("--purchases", type=int, default=40)
    p.add_argument("--paths", type=int, default=3)
    p.add_argument("--preference-prob", dest="preference_prob", type=float, default=0.9)
    p.add_argument("--skew", type=float, default=1.0)

    p = cmd("prepare", "build queries, vocabulary and the chronological split")
    p.add_argument("--reviews")
    p.add_argument("--items")
    p.add_argument("--out")
    p.add_argument("--min-count", dest="min_count", type=int, default=5)
    p.add_argument("--query-train-frac", dest="query_train_frac", type=float, default=0.7)

    p = cmd("train", "train one model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--prefetch", action="store_true", help="assemble batches on a background thread")
    _add_model_flags(p)

    p = cmd("eval", "rank every test context and compute metrics")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--baseline", help="report.json of a baseline for paired t-tests")
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--filter-seen", dest="filter_seen", action="store_true")
    p.add_argument("--name", help="model label in the report")

    p = cmd("compare", "paired t-tests between two reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--alpha", type=float, default=0.05)

    p = cmd("inspect", "dump per-layer query attention for one (user, query)")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--user")
    p.add_argument("--query", type=int)
    p.add_argument("--timestamp", type=int, help="history cutoff (default: after all train purchases)")
    return parser


REQUIRED = {
    "synth": ("out",),
    "prepare": ("reviews", "items", "out"),
    "train": ("data", "out"),
    "eval": ("data", "checkpoint", "out"),
    "compare": (),
    "inspect": ("data", "checkpoint", "user", "query"),
}


def parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        sub = parser.subcommands[args.command]
        known = {a.dest for a in sub._actions}
        doc = {k: v for k, v in doc.items() if k not in ("command", "config")}
        unknown = sorted(set(doc) - known)
        if unknown:
            parser.error(f"--config {args.config}: unknown keys {', '.join(unknown)}")
        sub.set_defaults(**doc)
        args = parser.parse_args(argv)
    for name in REQUIRED[args.command]:
        if getattr(args, name) is None:
            parser.error(f"{args.command}: --{name.replace('_', '-')} is required")
    if args.command in SEEDED and args.seed is None:
        parser.error(f"{args.command}: --seed is required")
    return args


def _snapshot(args, out_dir: Path, extra: dict | None = None):
    doc = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    doc.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- subcommands


def cmd_synth(args):
    out = Path(args.out)
    syn = corpus_mod.synth_generate(
        args.users,
        args.items,
        args.categories,
        args.clusters,
        args.review_words,
        seed=args.seed,
        purchases_per_user=args.purchases,
        paths_per_category=args.paths,
        preference_prob=args.preference_prob,
        popularity_skew=args.skew,
    )
    out.mkdir(parents=True, exist_ok=True)
    corpus_mod.write_reviews(out / "reviews.jsonl", syn.reviews)
    corpus_mod.write_items(out / "items.jsonl", syn.items)
    truth = {
        "user_cluster": syn.user_cluster,
        "preferred": {f"{k}:{c}": v for (k, c), v in syn.preferred.items()},
        "from_preference_fraction": float(np.mean(syn.from_preference)),
    }
    (out / "synth_truth.json").write_text(json.dumps(truth, indent=1) + "\n")
    _snapshot(args, out)
    print(f"wrote {len(syn.reviews)} reviews for {args.users} users and {args.items} items to {out}")


def cmd_prepare(args):
    for name in ("reviews", "items"):
        if not Path(getattr(args, name)).is_file():
            raise UsageError(f"prepare: --{name} file not found: {getattr(args, name)}")
    out = Path(args.out)
    existed = out.exists()
    try:
        reviews = corpus_mod.read_reviews(args.reviews)
        metas = corpus_mod.read_items(args.items)
        pc = corpus_mod.prepare_corpus(reviews, metas, seed=args.seed, min_count=args.min_count, query_train_frac=args.query_train_frac)
        pc.save(out)
        _snapshot(args, out)
    except Exception:
        if not existed:
            shutil.rmtree(out, ignore_errors=True)
        else:
            for f in ("corpus.json", "split.tsv", "vocab.tsv", "queries.tsv", "stats.json", "config.resolved.json"):
                (out / f).unlink(missing_ok=True)
        raise
    stats = pc.stats()
    print(f"{'#Users':<10}{stats['users']:>10,}")
    print(f"{'#Items':<10}{stats['items']:>10,}")
    print(f"{'#Reviews':<10}{stats['reviews']:>10,}")
    print(f"{'#Queries':<10}{stats['queries']:>10,}")


def resolve_train_config(args) -> tuple[ModelConfig, TrainConfig]:
    doc = {}
    for f in fields(ModelConfig) + fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            doc[f.name] = v
    return trainer.split_flat_config(doc)


def cmd_train(args):
    mc, tc = resolve_train_config(args)
    pc = corpus_mod.PreparedCorpus.load(args.data)
    out = Path(args.out)
    _snapshot(args, out, trainer.flat_config(mc, tc))
    _, report = trainer.train(pc, mc, tc, out_dir=out, prefetch=args.prefetch)
    last = report.epochs[-1]["loss"] if report.epochs else float("nan")
    print(f"trained {mc.model_kind} for {tc.epochs} epochs; final loss {last:.4f}; checkpoint {out / 'model.ckpt'}")


def _load_model(path):
    params, manifest = load_checkpoint(path)
    kind = manifest.get("model_kind")
    if kind not in MODEL_KINDS:
        raise ValueError(f"checkpoint kind {kind!r} is not supported; supported kinds: {', '.join(MODEL_KINDS)}")
    return params, manifest, ModelConfig.from_dict(manifest["model_config"])


def cmd_eval(args):
    params, manifest, mc = _load_model(args.checkpoint)
    pc = corpus_mod.PreparedCorpus.load(args.data)
    baseline = None
    if args.baseline:
        baseline = evaluation.MetricsReport.from_dict(json.loads(Path(args.baseline).read_text()))
    report = evaluation.evaluate(
        params,
        mc,
        pc,
        split=args.split,
        baseline=baseline,
        workers=args.workers,
        filter_seen=args.filter_seen,
        model_name=args.name or mc.model_kind,
        manifest=manifest,
    )
    out = Path(args.out)
    report.save(out)
    _snapshot(args, out)
    sys.stdout.write(evaluation.format_table([report]))
    if report.skipped:
        print(f"skipped {report.skipped} contexts with out-of-vocabulary queries")


def cmd_compare(args):
    a = evaluation.MetricsReport.from_dict(json.loads(Path(args.report_a).read_text()))
    b = evaluation.MetricsReport.from_dict(json.loads(Path(args.report_b).read_text()))
    a.compare(b)
    print(f"{a.model} vs {b.model} over {len(a.rows)} contexts (paired t-test, alpha={args.alpha})")
    print(f"{'metric':<8} {a.model:>10} {b.model:>10} {'p':>10}  significant")
    avg_a, avg_b = a.averages, b.averages
    for m in evaluation.METRICS:
        p = a.pvalues[m]
        print(f"{m:<8} {avg_a[m]:10.4f} {avg_b[m]:10.4f} {p:10.4g}  {'yes' if p < args.alpha else 'no'}")


def cmd_inspect(args):
    params, manifest, mc = _load_model(args.checkpoint)
    pc = corpus_mod.PreparedCorpus.load(args.data)
    evaluation.check_compatible(manifest, pc)
    if args.user not in pc.user_index:
        raise ValueError(f"unknown user {args.user!r}")
    if not 0 <= args.query < len(pc.queries):
        raise ValueError(f"unknown query id {args.query}")
    ts = args.timestamp if args.timestamp is not None else np.iinfo(np.int64).max
    history = corpus_mod.user_history(pc.split, args.user, ts, mc.max_history)
    ctx = evaluation.Context(args.user, args.query, (), ts)
    intent, _ = evaluation._intent_block(models.as_free(params), mc, pc, [ctx])
    print(f"user {args.user}  query {args.query} ({' '.join(pc.queries[args.query].words)})  model {mc.model_kind}")
    if mc.model_kind == "TEM":
        labels = ["<query>"] + history
    elif mc.model_kind == "ZAM":
        labels = ["<zero>"] + history
    else:
        labels = list(history)
    if not intent.attention:
        print("(no attention in this model)")
    for n, att in enumerate(intent.attention):
        w = att[0].mean(axis=0)
        if mc.model_kind == "ZAM":
            w = np.concatenate([[intent.zero_weight[0].mean()], w])
        print(f"layer {n + 1}:")
        for lab, val in zip(labels, w):
            print(f"  {lab:<20} {val:.6f}")


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "inspect": cmd_inspect,
}


class UsageError(Exception):
    pass


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    args = parse(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        build_parser().print_usage(sys.stderr)
        print(f"tem-search: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        log.debug("failure", exc_info=True)
        print(f"tem-search: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
