"""Full-collection ranking, MRR / NDCG@20 / P@20, and paired significance tests."""
from __future__ import annotations

import json
import math
from pathlib import Path
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _accel, models
from .corpus import PreparedCorpus, user_history
from .models import ModelConfig
from .trainer import pad

CUTOFF = 20
METRICS = ("mrr", "ndcg20", "p20")


class CheckpointMismatch(ValueError):
    pass


# ---------------------------------------------------------------- metrics


def _check(relevant):
    if len(relevant) == 0:
        raise ValueError("relevant set must be non-empty")


def mrr(ranked, relevant) -> float:
    _check(relevant)
    rel = set(relevant)
    for pos, item in enumerate(ranked, 1):
        if item in rel:
            return 1.0 / pos
    return 0.0


def precision_at(ranked, relevant, k: int = CUTOFF) -> float:
    _check(relevant)
    rel = set(relevant)
    return sum(1 for item in list(ranked)[:k] if item in rel) / k


def ideal_dcg(n_relevant: int, k: int = CUTOFF) -> float:
    return sum(1.0 / math.log2(r + 1) for r in range(1, min(n_relevant, k) + 1))


def ndcg_at(ranked, relevant, k: int = CUTOFF) -> float:
    _check(relevant)
    rel = set(relevant)
    dcg = sum(1.0 / math.log2(pos + 1) for pos, item in enumerate(list(ranked)[:k], 1) if item in rel)
    return dcg / ideal_dcg(len(rel), k)


def metrics_from_ranks(ranks, k: int = CUTOFF) -> tuple[float, float, float]:
    """Metrics given the 1-based ranks of every relevant item in the full list."""
    ranks = np.sort(np.asarray(ranks))
    if ranks.size == 0:
        raise ValueError("relevant set must be non-empty")
    top = ranks[ranks <= k]
    dcg = float(np.sum(1.0 / np.log2(top + 1.0)))
    return 1.0 / float(ranks[0]), dcg / ideal_dcg(len(ranks), k), len(top) / k


def paired_t_test(a, b) -> float:
    """Two-sided paired t-test p-value.

    Identical inputs (all differences zero) give 1.0; a non-zero constant
    difference (zero variance) gives 0.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired_t_test needs two equal-length vectors of length >= 2")
    diff = a - b
    if np.all(diff == 0):
        return 1.0
    sd = diff.std(ddof=1)
    if sd == 0:
        return 0.0
    t = diff.mean() / (sd / math.sqrt(diff.size))
    return float(2.0 * stats.t.sf(abs(t), df=diff.size - 1))


# ---------------------------------------------------------------- ranking


@dataclass
class RankedList:
    items: np.ndarray
    scores: np.ndarray
    relevant: frozenset = frozenset()


@dataclass(frozen=True)
class Context:
    user: str
    query_id: int
    relevant: tuple  # item indices
    timestamp: int


def eval_contexts(corpus: PreparedCorpus, split: str = "test") -> list[Context]:
    """One context per (user, query) in ``split``; its relevant set is every item bought under it."""
    rows = getattr(corpus.split, split)
    groups = defaultdict(lambda: [set(), None])
    for p in rows:
        g = groups[(p.user_id, p.query_id)]
        g[0].add(corpus.item_index[p.item_id])
        g[1] = p.timestamp if g[1] is None else min(g[1], p.timestamp)
    return [Context(u, q, tuple(sorted(rel)), ts) for (u, q), (rel, ts) in sorted(groups.items())]


def check_compatible(manifest: dict, corpus: PreparedCorpus) -> None:
    have = {"n_words": len(corpus.vocab), "n_items": len(corpus.items), "n_users": len(corpus.users)}
    want = {k: manifest.get(k) for k in have}
    if want != have:
        raise CheckpointMismatch(f"checkpoint sizes {want} do not match corpus sizes {have}")


def _intent_block(P, config, corpus, contexts):
    users = np.array([corpus.user_index.get(c.user, -1) for c in contexts], dtype=np.int64)
    qt, qm = pad([corpus.query_terms[c.query_id] for c in contexts])
    hist = [
        np.array([corpus.item_index[i] for i in user_history(corpus.split, c.user, c.timestamp, config.max_history)], dtype=np.int64)
        for c in contexts
    ]
    h, hm = pad(hist)
    return models.compute_intent(P, config, qt, qm, users, h, hm), hist


def rank_items(params: dict, config: ModelConfig, corpus: PreparedCorpus, user: str, query_id: int, timestamp: int) -> RankedList:
    """Score every item for one (user, query) with history before ``timestamp``."""
    ctx = Context(user, query_id, (), timestamp)
    intent, _ = _intent_block(models.as_free(params), config, corpus, [ctx])
    scores = models.score_items(intent.vector.data[0], params["item_emb"])
    order = models.rank_order(scores)
    return RankedList(order, scores[order])


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    model: str
    rows: list  # (user, query_id, mrr, ndcg20, p20)
    skipped: int = 0
    pvalues: dict = field(default_factory=dict)
    baseline: str | None = None

    @property
    def averages(self) -> dict:
        if not self.rows:
            return {m: 0.0 for m in METRICS}
        arr = np.array([r[2:] for r in self.rows], dtype=np.float64)
        return dict(zip(METRICS, arr.mean(axis=0).tolist()))

    def column(self, metric: str) -> np.ndarray:
        k = 2 + METRICS.index(metric)
        return np.array([r[k] for r in self.rows], dtype=np.float64)

    def compare(self, baseline: "MetricsReport") -> dict:
        if [r[:2] for r in self.rows] != [r[:2] for r in baseline.rows]:
            raise ValueError("reports cover different contexts; cannot pair them")
        self.baseline = baseline.model
        self.pvalues = {m: paired_t_test(self.column(m), baseline.column(m)) for m in METRICS} if len(self.rows) >= 2 else {m: 1.0 for m in METRICS}
        return self.pvalues

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "contexts": len(self.rows),
            "skipped": self.skipped,
            "averages": self.averages,
            "baseline": self.baseline,
            "pvalues": self.pvalues,
            "rows": [list(r) for r in self.rows],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        rows = [(str(u), int(q), float(a), float(b), float(c)) for u, q, a, b, c in doc["rows"]]
        return cls(doc["model"], rows, doc.get("skipped", 0), doc.get("pvalues") or {}, doc.get("baseline"))

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        with open(out / "per_context.tsv", "w", encoding="utf-8") as fh:
            fh.write("user\tquery_id\tmrr\tndcg20\tp20\n")
            for u, q, a, b, c in self.rows:
                fh.write(f"{u}\t{q}\t{a!r}\t{b!r}\t{c!r}\n")
        (out / "report.txt").write_text(format_table([self]))


def format_table(reports, alpha: float = 0.05) -> str:
    """Text table with MRR / NDCG@20 / P@20 columns; '+' marks p < alpha against the report's baseline."""
    lines = [f"{'Model':<12}| {'MRR':>9} | {'NDCG@20':>9} | {'P@20':>9} | contexts", "-" * 58]
    for r in reports:
        avg = r.averages
        cells = []
        for m in METRICS:
            p = r.pvalues.get(m)
            mark = "+" if p is not None and p < alpha else " "
            cells.append(f"{avg[m]:8.4f}{mark}")
        lines.append(f"{r.model:<12}| " + " | ".join(cells) + f" | {len(r.rows)}")
    if any(r.baseline for r in reports):
        base = next(r.baseline for r in reports if r.baseline)
        lines.append(f"'+' = paired t-test p < {alpha} vs {base}")
    return "\n".join(lines) + "\n"


def evaluate(
    params: dict,
    config: ModelConfig,
    corpus: PreparedCorpus,
    split: str = "test",
    baseline: MetricsReport | None = None,
    workers: int = 1,
    block: int = 256,
    filter_seen: bool = False,
    model_name: str | None = None,
    manifest: dict | None = None,
) -> MetricsReport:
    """Evaluate every (user, query) context of ``split`` against the full item collection.

    Contexts are processed in fixed blocks so the result does not depend on ``workers``.
    """
    if manifest is not None:
        check_compatible(manifest, corpus)
    P = models.as_free(params)
    item_emb = params["item_emb"]
    contexts = []
    skipped = 0
    for c in eval_contexts(corpus, split):
        if len(corpus.query_terms[c.query_id]) == 0:
            skipped += 1
        else:
            contexts.append(c)
    seen = None
    if filter_seen:
        seen = {u: {corpus.item_index[i] for _, i in h} for u, h in corpus.split.history.items()}

    def run(chunk):
        intent, _ = _intent_block(P, config, corpus, chunk)
        M = intent.vector.data
        out = []
        for c, m in zip(chunk, M):
            scores = models.score_items(m, item_emb).astype(np.float64)
            if seen is not None:
                drop = [i for i in seen.get(c.user, ()) if i not in c.relevant]
                scores[drop] = -np.inf
            ranks = _accel.relevant_ranks(scores, np.array(c.relevant, dtype=np.int64))
            out.append((c.user, c.query_id, *metrics_from_ranks(ranks)))
        return out

    chunks = [contexts[s : s + block] for s in range(0, len(contexts), block)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    rows = sorted((r for part in parts for r in part), key=lambda r: (r[0], r[1]))
    report = MetricsReport(model_name or config.model_kind, rows, skipped)
    if baseline is not None:
        report.compare(baseline)
    return report
