"""Review ingestion, category-derived queries, vocabulary and the chronological split."""
from __future__ import annotations

import ast
import bisect
import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid sizes, thresholds or seeds."""


class InputFormatError(ValueError):
    """A malformed input record; carries the 1-based line number."""

    def __init__(self, path, lineno, msg):
        super().__init__(f"{path} line {lineno}: {msg}")
        self.path = path
        self.lineno = lineno


# Standard English IR stopword list.
STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are aren't as at be because been before being
    below between both but by can can't cannot could couldn't did didn't do does doesn't doing don't down
    during each few for from further had hadn't has hasn't have haven't having he he'd he'll he's her here
    here's hers herself him himself his how how's i i'd i'll i'm i've if in into is isn't it it's its itself
    let's me more most mustn't my myself no nor not of off on once only or other ought our ours ourselves
    out over own same shan't she she'd she'll she's should shouldn't so some such than that that's the
    their theirs them themselves then there there's these they they'd they'll they're they've this those
    through to too under until up very was wasn't we we'd we'll we're we've were weren't what what's when
    when's where where's which while who who's whom why why's with won't would wouldn't you you'd you'll
    you're you've your yours yourself yourselves s t d ll m o re ve y just now will also etc
    """.split()
)

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN.findall(text.lower())


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class ReviewRecord:
    user_id: str
    item_id: str
    timestamp: int
    text: str = ""

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("review ids must be non-empty")
        if self.timestamp <= 0:
            raise ValueError(f"timestamp must be positive, got {self.timestamp}")


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    categories: tuple  # tuple of tuples of str


@dataclass(frozen=True)
class Query:
    query_id: int
    words: tuple


class QueryIndex:
    """Assigns stable ids to distinct query word sequences, in first-seen order."""

    def __init__(self):
        self.by_words: dict[tuple, Query] = {}
        self.queries: list[Query] = []
        self.item_queries: dict[str, list[int]] = {}

    def intern(self, words: tuple) -> Query:
        q = self.by_words.get(words)
        if q is None:
            q = Query(len(self.queries), words)
            self.by_words[words] = q
            self.queries.append(q)
        return q


def query_words(path: Sequence[str], stopwords=STOPWORDS) -> tuple:
    seen = set()
    out = []
    for level in path:
        for w in tokenize(level):
            if w in stopwords or w in seen:
                continue
            seen.add(w)
            out.append(w)
    return tuple(out)


def build_queries(meta: ItemMeta, stopwords=STOPWORDS, index: QueryIndex | None = None) -> list[Query]:
    """One query per category path of ``meta``; pass a shared ``index`` to share ids across items."""
    index = QueryIndex() if index is None else index
    out: list[Query] = []
    for path in meta.categories:
        words = query_words(path, stopwords)
        if not words:
            log.warning("item %s: category path %r is empty after filtering; skipped", meta.item_id, list(path))
            continue
        q = index.intern(words)
        if q not in out:
            out.append(q)
    ids = index.item_queries.setdefault(meta.item_id, [])
    for q in out:
        if q.query_id not in ids:
            ids.append(q.query_id)
    return out


# ---------------------------------------------------------------- split


@dataclass(frozen=True)
class Purchase:
    user_id: str
    query_id: int
    item_id: str
    timestamp: int


@dataclass
class DatasetSplit:
    train: list
    valid: list
    test: list
    train_queries: frozenset
    eval_queries: frozenset
    item_queries: dict
    # user -> chronological [(timestamp, item_id)] of train purchases (one per review)
    history: dict
    train_reviews: list = field(default_factory=list)

    def labelled_rows(self):
        for label, rows in (("train", self.train), ("valid", self.valid), ("test", self.test)):
            for p in rows:
                yield p, label


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(
    reviews: Sequence[ReviewRecord],
    item_queries: dict,
    ratios=(0.8, 0.1, 0.1),
    query_train_frac: float = 0.7,
    seed: int | None = None,
) -> DatasetSplit:
    """Chronological per-user split with query disjointness between train and valid/test.

    Steps, in order: seeded 70/30 query split; items whose queries all fell in the
    held-out pool get one random query moved back to train; per-user purchases are
    cut 0.8/0.1/0.1 by time; held-out purchases whose item has no held-out query
    go back to train. A held-out purchase that now precedes a train purchase of the
    same user is moved back too, so every held-out purchase follows all train ones.
    """
    if seed is None:
        raise ConfigError("split_dataset requires an explicit seed")
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"ratios must be non-negative and sum to 1, got {ratios}")
    if not 0.0 < query_train_frac < 1.0:
        raise ConfigError("query_train_frac must be in (0, 1)")
    purchased = sorted({r.item_id for r in reviews})
    missing = [i for i in purchased if not item_queries.get(i)]
    if missing:
        raise ConfigError(f"{len(missing)} purchased items have no query, e.g. {missing[0]!r}")

    rng = np.random.default_rng(seed)
    all_q = sorted({q for i in purchased for q in item_queries[i]})
    order = [all_q[j] for j in rng.permutation(len(all_q))]
    n_train_q = _half_up(query_train_frac * len(all_q))
    train_q = set(order[:n_train_q])
    eval_q = set(order[n_train_q:])
    for item in purchased:
        qs = item_queries[item]
        if all(q in eval_q for q in qs):
            pick = qs[int(rng.integers(len(qs)))]
            eval_q.discard(pick)
            train_q.add(pick)

    by_user = defaultdict(list)
    for pos, r in enumerate(reviews):
        by_user[r.user_id].append((r.timestamp, pos, r))

    train, valid, test = [], [], []
    train_reviews = []
    history = {}
    cut1, cut2 = ratios[0], ratios[0] + ratios[1]
    for user in sorted(by_user):
        events = [r for _, _, r in sorted(by_user[user], key=lambda e: (e[0], e[1]))]
        n = len(events)
        a, b = _half_up(cut1 * n), _half_up(cut2 * n)
        labels = ["train"] * a + ["valid"] * (b - a) + ["test"] * (n - b)
        for k, r in enumerate(events):
            if labels[k] != "train" and not any(q in eval_q for q in item_queries[r.item_id]):
                labels[k] = "train"
        last_train = max((k for k, lab in enumerate(labels) if lab == "train"), default=-1)
        for k in range(last_train):
            labels[k] = "train"
        hist = []
        for r, lab in zip(events, labels):
            qs = item_queries[r.item_id]
            if lab == "train":
                hist.append((r.timestamp, r.item_id))
                train_reviews.append(r)
                train.extend(Purchase(user, q, r.item_id, r.timestamp) for q in qs if q in train_q)
            else:
                dest = valid if lab == "valid" else test
                dest.extend(Purchase(user, q, r.item_id, r.timestamp) for q in qs if q in eval_q)
        history[user] = hist
    return DatasetSplit(
        train=train,
        valid=valid,
        test=test,
        train_queries=frozenset(train_q),
        eval_queries=frozenset(eval_q),
        item_queries={i: list(item_queries[i]) for i in purchased},
        history=history,
        train_reviews=train_reviews,
    )


def check_split_invariants(split: DatasetSplit) -> list[str]:
    """Return human-readable violations (empty when the split is sound)."""
    problems = []
    last_train = defaultdict(lambda: -math.inf)
    for p in split.train:
        last_train[p.user_id] = max(last_train[p.user_id], p.timestamp)
        if p.query_id in split.eval_queries:
            problems.append(f"train row uses held-out query {p.query_id}")
    for rows in (split.valid, split.test):
        for p in rows:
            if p.timestamp < last_train[p.user_id]:
                problems.append(f"held-out purchase {p} precedes a train purchase")
            if p.query_id in split.train_queries:
                problems.append(f"held-out query {p.query_id} also in train pool")
    if split.train_queries & split.eval_queries:
        problems.append("query pools overlap")
    for item, qs in split.item_queries.items():
        if not any(q in split.train_queries for q in qs):
            problems.append(f"item {item} has no train query")
    return problems


def user_history(split: DatasetSplit, user_id: str, before_timestamp: int, max_len: int = 20) -> list[str]:
    """Train purchases of ``user_id`` strictly before ``before_timestamp``, oldest first, last ``max_len``."""
    events = split.history.get(user_id)
    if not events:
        return []
    stamps = [t for t, _ in events]
    end = bisect.bisect_left(stamps, before_timestamp)
    start = max(0, end - max_len)
    return [item for _, item in events[start:end]]


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocabulary:
    words: list
    freq: np.ndarray  # int64 review-token counts, aligned with ``words``
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {w: k for k, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def ids(self, words: Iterable[str]) -> list[int]:
        return [self.index[w] for w in words if w in self.index]


def build_vocabulary(train_reviews: Iterable, min_count: int = 5) -> Vocabulary:
    """Words with at least ``min_count`` occurrences, most frequent first (ties alphabetical)."""
    counts = Counter()
    for r in train_reviews:
        counts.update(tokenize(r.text if isinstance(r, ReviewRecord) else r))
    kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    if not kept:
        raise ConfigError(f"empty vocabulary with min_count={min_count}")
    return Vocabulary(kept, np.array([counts[w] for w in kept], dtype=np.int64))


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthCorpus:
    reviews: list
    items: list
    user_cluster: dict
    preferred: dict  # (cluster, category) -> list of item ids
    from_preference: list  # per review, whether the draw came from the cluster's preferred set
    item_category: dict


_FILLER = tuple(f"filler{k}" for k in range(30))


def synth_generate(
    n_users: int,
    n_items: int,
    n_categories: int,
    n_user_clusters: int,
    reviews_per_purchase_words: int = 12,
    seed: int | None = None,
    purchases_per_user: int = 40,
    paths_per_category: int = 3,
    preference_prob: float = 0.9,
    popularity_skew: float = 1.0,
) -> SynthCorpus:
    """Planted-preference corpus.

    Users belong to clusters; inside each category a cluster prefers a disjoint slice
    of the items. A purchase picks a category uniformly, then with ``preference_prob``
    an item from the cluster's slice, otherwise any item of the category uniformly.
    Inside a slice the r-th item (0-based) has weight ``(r + 1) ** -popularity_skew``
    so the best ranking is unique. Reviews mix category words, item words, cluster
    words and filler.
    """
    if seed is None:
        raise ConfigError("synth_generate requires an explicit seed")
    if min(n_users, n_items, n_categories, n_user_clusters, purchases_per_user, paths_per_category) < 1:
        raise ConfigError("all synthetic sizes must be positive")
    if n_items % n_categories:
        raise ConfigError(f"n_items={n_items} not divisible by n_categories={n_categories}")
    per_cat = n_items // n_categories
    if n_user_clusters > per_cat:
        raise ConfigError(f"{n_user_clusters} clusters cannot split {per_cat} items per category")
    if reviews_per_purchase_words < 1:
        raise ConfigError("reviews need at least one word")
    rng = np.random.default_rng(seed)

    item_ids = [f"item{j:05d}" for j in range(n_items)]
    item_category = {iid: j // per_cat for j, iid in enumerate(item_ids)}
    items = [
        ItemMeta(iid, tuple((f"Dept{c}", f"Aisle{p}") for p in range(paths_per_category)))
        for iid, c in ((iid, item_category[iid]) for iid in item_ids)
    ]
    preferred = {}
    slice_cdf = {}
    owner = {}
    for c in range(n_categories):
        members = item_ids[c * per_cat : (c + 1) * per_cat]
        for k in range(n_user_clusters):
            preferred[(k, c)] = members[k::n_user_clusters]
            w = np.arange(1, len(preferred[(k, c)]) + 1, dtype=np.float64) ** -popularity_skew
            slice_cdf[(k, c)] = np.cumsum(w / w.sum())
            for iid in preferred[(k, c)]:
                owner[iid] = k

    def review_text(iid):
        c = item_category[iid]
        k = owner[iid]
        pools = (
            [f"dept{c}"] + [f"aisle{p}" for p in range(paths_per_category)],
            [f"{iid}a", f"{iid}b"],
            [f"style{k}a", f"style{k}b", f"style{k}c"],
            _FILLER,
        )
        kinds = rng.integers(len(pools), size=reviews_per_purchase_words)
        return " ".join(pools[t][int(rng.integers(len(pools[t])))] for t in kinds)

    reviews, flags = [], []
    user_cluster = {}
    for u in range(n_users):
        uid = f"user{u:05d}"
        k = u % n_user_clusters
        user_cluster[uid] = k
        t = 1_400_000_000 + int(rng.integers(0, 86_400 * 30))
        for _ in range(purchases_per_user):
            c = int(rng.integers(n_categories))
            if rng.random() < preference_prob:
                pool, flag = preferred[(k, c)], True
                pick = min(int(np.searchsorted(slice_cdf[(k, c)], rng.random(), side="right")), len(pool) - 1)
            else:
                pool, flag = item_ids[c * per_cat : (c + 1) * per_cat], False
                pick = int(rng.integers(len(pool)))
            iid = pool[pick]
            t += 86_400 * int(rng.integers(1, 6))
            reviews.append(ReviewRecord(uid, iid, t, review_text(iid)))
            flags.append(flag)
    return SynthCorpus(reviews, items, user_cluster, preferred, flags, item_category)


# ---------------------------------------------------------------- file IO

AMAZON_REVIEW_FIELDS = {"reviewerID": "user_id", "asin": "item_id", "unixReviewTime": "timestamp", "reviewText": "text"}


def _parse_line(line: str):
    try:
        return json.loads(line)
    except json.JSONDecodeError:
        # the public Amazon metadata dump is Python-literal, not JSON
        return ast.literal_eval(line)


def read_reviews(path) -> list[ReviewRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = _parse_line(line)
                obj = {AMAZON_REVIEW_FIELDS.get(k, k): v for k, v in obj.items()}
                out.append(ReviewRecord(str(obj["user_id"]), str(obj["item_id"]), int(obj["timestamp"]), str(obj.get("text", ""))))
            except (ValueError, SyntaxError, KeyError, TypeError, AttributeError) as exc:
                raise InputFormatError(path, lineno, f"bad review record ({exc})") from None
    return out


def read_items(path) -> list[ItemMeta]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = _parse_line(line)
                iid = str(obj.get("item_id", obj.get("asin")))
                cats = obj.get("categories") or []
                if not isinstance(cats, list) or not all(isinstance(p, (list, tuple)) for p in cats):
                    raise TypeError("categories must be a list of string lists")
                out.append(ItemMeta(iid, tuple(tuple(str(x) for x in p) for p in cats)))
            except (ValueError, SyntaxError, KeyError, TypeError, AttributeError) as exc:
                raise InputFormatError(path, lineno, f"bad item record ({exc})") from None
    return out


def write_reviews(path, reviews: Iterable[ReviewRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reviews:
            fh.write(json.dumps({"user_id": r.user_id, "item_id": r.item_id, "timestamp": r.timestamp, "text": r.text}) + "\n")


def write_items(path, items: Iterable[ItemMeta]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in items:
            fh.write(json.dumps({"item_id": m.item_id, "categories": [list(p) for p in m.categories]}) + "\n")


# ---------------------------------------------------------------- prepared corpus


@dataclass
class PreparedCorpus:
    """Everything training and evaluation need, with dense integer ids."""

    users: list
    items: list
    vocab: Vocabulary
    queries: list  # Query, indexed by query_id
    split: DatasetSplit
    item_words: list  # per item index: np.int64 array of train review word ids
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.user_index = {u: k for k, u in enumerate(self.users)}
        self.item_index = {i: k for k, i in enumerate(self.items)}
        self.query_terms = [np.array(self.vocab.ids(q.words), dtype=np.int64) for q in self.queries]

    def stats(self) -> dict:
        return {
            "users": len(self.users),
            "items": len(self.items),
            "reviews": int(self.meta.get("n_reviews", 0)),
            "queries": len(self.queries),
            "vocabulary": len(self.vocab),
            "train_rows": len(self.split.train),
            "valid_rows": len(self.split.valid),
            "test_rows": len(self.split.test),
        }

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        s = self.split
        doc = {
            "users": self.users,
            "items": self.items,
            "vocab": {"words": self.vocab.words, "freq": self.vocab.freq.tolist()},
            "queries": [list(q.words) for q in self.queries],
            "item_queries": s.item_queries,
            "train_queries": sorted(s.train_queries),
            "eval_queries": sorted(s.eval_queries),
            "rows": {k: [[p.user_id, p.query_id, p.item_id, p.timestamp] for p in getattr(s, k)] for k in ("train", "valid", "test")},
            "history": {u: [[t, i] for t, i in h] for u, h in s.history.items()},
            "item_words": [w.tolist() for w in self.item_words],
            "meta": self.meta,
        }
        (out / "corpus.json").write_text(json.dumps(doc))
        with open(out / "split.tsv", "w", encoding="utf-8") as fh:
            fh.write("user_id\tquery_id\titem_id\ttimestamp\tsplit\n")
            for p, label in s.labelled_rows():
                fh.write(f"{p.user_id}\t{p.query_id}\t{p.item_id}\t{p.timestamp}\t{label}\n")
        with open(out / "vocab.tsv", "w", encoding="utf-8") as fh:
            for w, c in zip(self.vocab.words, self.vocab.freq):
                fh.write(f"{w}\t{int(c)}\n")
        with open(out / "queries.tsv", "w", encoding="utf-8") as fh:
            for q in self.queries:
                fh.write(f"{q.query_id}\t{' '.join(q.words)}\n")
        (out / "stats.json").write_text(json.dumps(self.stats(), indent=2) + "\n")

    @classmethod
    def load(cls, in_dir) -> "PreparedCorpus":
        doc = json.loads((Path(in_dir) / "corpus.json").read_text())
        rows = {k: [Purchase(u, int(q), i, int(t)) for u, q, i, t in v] for k, v in doc["rows"].items()}
        split = DatasetSplit(
            train=rows["train"],
            valid=rows["valid"],
            test=rows["test"],
            train_queries=frozenset(doc["train_queries"]),
            eval_queries=frozenset(doc["eval_queries"]),
            item_queries={i: list(q) for i, q in doc["item_queries"].items()},
            history={u: [(int(t), i) for t, i in h] for u, h in doc["history"].items()},
        )
        vocab = Vocabulary(doc["vocab"]["words"], np.array(doc["vocab"]["freq"], dtype=np.int64))
        queries = [Query(k, tuple(w)) for k, w in enumerate(doc["queries"])]
        item_words = [np.array(w, dtype=np.int64) for w in doc["item_words"]]
        return cls(doc["users"], doc["items"], vocab, queries, split, item_words, doc.get("meta", {}))


def prepare_corpus(
    reviews: Sequence[ReviewRecord],
    metas: Sequence[ItemMeta],
    seed: int,
    min_count: int = 5,
    stopwords=STOPWORDS,
    ratios=(0.8, 0.1, 0.1),
    query_train_frac: float = 0.7,
) -> PreparedCorpus:
    """Queries, split, vocabulary and per-item review word streams in one pass."""
    index = QueryIndex()
    for m in sorted(metas, key=lambda m: m.item_id):
        build_queries(m, stopwords, index)
    with_queries = {i for i, qs in index.item_queries.items() if qs}
    kept = [r for r in reviews if r.item_id in with_queries]
    if len(kept) < len(reviews):
        log.warning("dropped %d reviews of items without queries", len(reviews) - len(kept))
    if not kept:
        raise ConfigError("no reviews left after matching items to queries")
    users = sorted({r.user_id for r in kept})
    items = sorted({r.item_id for r in kept})
    # dense query ids over the items that survived, in first-seen order
    used_q = sorted({q for i in items for q in index.item_queries[i]})
    remap = {q: k for k, q in enumerate(used_q)}
    queries = [Query(remap[q], index.queries[q].words) for q in used_q]
    item_queries = {i: [remap[q] for q in index.item_queries[i]] for i in items}
    split = split_dataset(kept, item_queries, ratios, query_train_frac, seed)
    vocab = build_vocabulary(split.train_reviews, min_count)
    streams = defaultdict(list)
    for r in split.train_reviews:
        streams[r.item_id].extend(vocab.ids(tokenize(r.text)))
    item_words = [np.array(streams.get(i, []), dtype=np.int64) for i in items]
    return PreparedCorpus(users, items, vocab, queries, split, item_words, {"n_reviews": len(kept), "seed": seed, "min_count": min_count})
