"""Joint training of the item-generation and item-language objectives."""
from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .checkpoint import save_checkpoint
from .corpus import ConfigError, PreparedCorpus, user_history
from .models import ModelConfig

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 384
    lr: float = 0.0005
    lang_weight: float = 1.0
    window: int = 5
    sampling_power: float = 0.75
    seed: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.window < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, lr >= 0 and window >= 1 required")


def split_flat_config(doc: dict) -> tuple[ModelConfig, TrainConfig]:
    """Split one flat JSON object into model and trainer settings; ``k`` is accepted for ``negatives``."""
    if "k" in doc:
        doc = {**{k: v for k, v in doc.items() if k != "k"}, "negatives": doc["k"]}
    tnames = {f.name for f in fields(TrainConfig)}
    mnames = {f.name for f in fields(ModelConfig)}
    unknown = set(doc) - tnames - mnames
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    mc = ModelConfig.from_dict({k: v for k, v in doc.items() if k in mnames})
    tc = TrainConfig(**{k: v for k, v in doc.items() if k in tnames})
    return mc, tc


def flat_config(mc: ModelConfig, tc: TrainConfig) -> dict:
    return {**asdict(mc), **asdict(tc)}


# ---------------------------------------------------------------- sampling


class NegSampler:
    """Draws ids from ``freq ** power``; zero-frequency ids are never drawn."""

    def __init__(self, freq, power: float = 0.75, seed: int | None = None):
        w = np.asarray(freq, dtype=np.float64) ** power
        w[np.asarray(freq) <= 0] = 0.0
        if w.sum() <= 0:
            raise ConfigError("negative sampler has an empty support")
        self.prob = w / w.sum()
        self.cdf = np.cumsum(self.prob)
        self.cdf[-1] = 1.0
        self.rng = np.random.default_rng(seed)

    def _draw(self, rng, shape):
        return np.searchsorted(self.cdf, rng.random(shape), side="right").astype(np.int64)

    def sample(self, k: int, exclude=(), rng=None) -> np.ndarray:
        """``k`` ids none of which are in ``exclude``."""
        rng = self.rng if rng is None else rng
        if k < 1:
            raise ValueError("k must be >= 1")
        ex = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude.astype(np.int64)
        ex = ex[(ex >= 0) & (ex < len(self.prob))]
        if self.prob[np.unique(ex)].sum() >= 1.0 - 1e-12:
            raise ConfigError("negative sampler support exhausted by the exclude set")
        out = self._draw(rng, k)
        bad = np.isin(out, ex)
        while bad.any():
            out[bad] = self._draw(rng, int(bad.sum()))
            bad = np.isin(out, ex)
        return out

    def sample_rows(self, positives: np.ndarray, k: int, rng) -> np.ndarray:
        """``(*positives.shape, k)`` ids, each row avoiding its own positive."""
        positives = np.asarray(positives, dtype=np.int64)
        if np.any(self.prob[positives] >= 1.0 - 1e-12):
            raise ConfigError("negative sampler support exhausted by the exclude set")
        out = self._draw(rng, positives.shape + (k,))
        bad = out == positives[..., None]
        while bad.any():
            out[bad] = self._draw(rng, int(bad.sum()))
            bad = out == positives[..., None]
        return out


def sample_negatives(sampler: NegSampler, k: int, exclude=()) -> np.ndarray:
    return sampler.sample(k, exclude)


# ---------------------------------------------------------------- examples and batches


@dataclass
class TrainExamples:
    """Column-wise training rows; histories exclude the row's own item."""

    users: np.ndarray
    queries: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    history: list  # per row, int64 array of item indices, oldest first

    def __len__(self):
        return len(self.items)


def build_examples(corpus: PreparedCorpus, max_history: int, rows=None) -> TrainExamples:
    """Training rows with their histories; rows whose query has no in-vocabulary term are skipped."""
    rows = corpus.split.train if rows is None else rows
    encodable = [p for p in rows if len(corpus.query_terms[p.query_id])]
    if len(encodable) < len(rows):
        log.warning("skipped %d training rows whose query is out of vocabulary", len(rows) - len(encodable))
    rows = encodable
    ui, ii = corpus.user_index, corpus.item_index
    hist = []
    for p in rows:
        past = [ii[i] for i in user_history(corpus.split, p.user_id, p.timestamp, len(corpus.items) + max_history) if i != p.item_id]
        hist.append(np.array(past[len(past) - max_history :] if max_history else [], dtype=np.int64))
    return TrainExamples(
        users=np.array([ui[p.user_id] for p in rows], dtype=np.int64),
        queries=np.array([p.query_id for p in rows], dtype=np.int64),
        items=np.array([ii[p.item_id] for p in rows], dtype=np.int64),
        timestamps=np.array([p.timestamp for p in rows], dtype=np.int64),
        history=hist,
    )


@dataclass
class Batch:
    rows: np.ndarray
    users: np.ndarray
    query_terms: np.ndarray
    query_mask: np.ndarray
    history: np.ndarray
    history_mask: np.ndarray
    items: np.ndarray
    item_negs: np.ndarray
    words: np.ndarray
    word_mask: np.ndarray
    word_negs: np.ndarray

    def __len__(self):
        return len(self.rows)


def pad(seqs, width=None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences with 0; returns ``(ids, live_mask)``."""
    width = max((len(s) for s in seqs), default=0) if width is None else width
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    return ids, mask


def batch_order(n: int, batch_size: int, epoch: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[s : s + batch_size] for s in range(0, n, batch_size)]


def assemble_batch(corpus, ex: TrainExamples, rows, k, window, item_sampler, word_sampler, rng) -> Batch:
    for r in rows:
        if ex.items[r] in ex.history[r]:
            raise AssertionError(f"row {r}: positive item leaked into its history")
    qt, qm = pad([corpus.query_terms[q] for q in ex.queries[rows]])
    hist, hm = pad([ex.history[r] for r in rows])
    wins = []
    for r in rows:
        stream = corpus.item_words[ex.items[r]]
        if len(stream) <= window:
            wins.append(stream)
        else:
            s = int(rng.integers(len(stream) - window + 1))
            wins.append(stream[s : s + window])
    words, wm = pad(wins, window)
    items = ex.items[rows]
    return Batch(
        rows=np.asarray(rows),
        users=ex.users[rows],
        query_terms=qt,
        query_mask=qm,
        history=hist,
        history_mask=hm,
        items=items,
        item_negs=item_sampler.sample_rows(items, k, rng),
        words=words,
        word_mask=wm,
        word_negs=word_sampler.sample_rows(words, k, rng),
    )


def make_batches(corpus, ex: TrainExamples, batch_size: int, epoch: int, seed: int, k: int = 5, window: int = 5, item_sampler=None, word_sampler=None, power=0.75):
    """Yield the epoch's batches; order and contents depend only on ``(seed, epoch)``."""
    item_sampler = item_sampler or NegSampler(item_frequencies(corpus), power)
    word_sampler = word_sampler or NegSampler(corpus.vocab.freq, power)
    for b, rows in enumerate(batch_order(len(ex), batch_size, epoch, seed)):
        rng = np.random.default_rng([seed, epoch, b, 1])
        yield assemble_batch(corpus, ex, rows, k, window, item_sampler, word_sampler, rng)


def item_frequencies(corpus: PreparedCorpus) -> np.ndarray:
    freq = np.zeros(len(corpus.items), dtype=np.int64)
    for h in corpus.split.history.values():
        for _, i in h:
            freq[corpus.item_index[i]] += 1
    return freq


# ---------------------------------------------------------------- loss


def batch_loss(P: dict, config: ModelConfig, batch: Batch, lang_weight: float = 1.0):
    """Mean joint loss over the batch; also returns the two component means."""
    intent = models.compute_intent(P, config, batch.query_terms, batch.query_mask, batch.users, batch.history, batch.history_mask)
    gen = models.item_generation_logprob(P, intent.vector, batch.items, batch.item_negs)
    lang = models.item_language_logprob(P, batch.items, batch.words, batch.word_mask, batch.word_negs)
    total = ad.mean_op(ad.add(gen, ad.scale(lang, lang_weight)))
    return total, float(gen.data.mean()), float(lang.data.mean())


# ---------------------------------------------------------------- training loop


@dataclass
class TrainReport:
    seed: int
    config: dict
    epochs: list = field(default_factory=list)

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.epochs:
                fh.write(json.dumps({**row, "seed": self.seed}) + "\n")


def _prefetched(gen, depth=4):
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    failure = []

    def run():
        try:
            for item in gen:
                q.put(item)
        except BaseException as exc:  # re-raised on the consumer side
            failure.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=run, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    if failure:
        raise failure[0]


def checkpoint_manifest(corpus: PreparedCorpus, mc: ModelConfig, tc: TrainConfig) -> dict:
    return {
        "model_kind": mc.model_kind,
        "model_config": asdict(mc),
        "train_config": asdict(tc),
        "n_words": len(corpus.vocab),
        "n_items": len(corpus.items),
        "n_users": len(corpus.users),
    }


def train(corpus: PreparedCorpus, mc: ModelConfig, tc: TrainConfig, out_dir=None, prefetch: bool = False, init=None):
    """Train one model; returns ``(params, report)`` and writes artifacts to ``out_dir`` if given."""
    if tc.seed is None:
        raise ConfigError("training requires an explicit seed")
    seed = int(tc.seed)
    params = init if init is not None else models.init_params(mc, len(corpus.vocab), len(corpus.items), len(corpus.users), seed)
    ex = build_examples(corpus, mc.max_history)
    if len(ex) == 0:
        raise ConfigError("no training rows with an in-vocabulary query")
    item_sampler = NegSampler(item_frequencies(corpus), tc.sampling_power)
    word_sampler = NegSampler(corpus.vocab.freq, tc.sampling_power)
    state = ad.AdamState(lr=tc.lr)
    report = TrainReport(seed, flat_config(mc, tc))
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        gen_sum = lang_sum = tot_sum = 0.0
        n = 0
        stream = make_batches(corpus, ex, tc.batch_size, epoch, seed, mc.negatives, tc.window, item_sampler, word_sampler)
        if prefetch:
            stream = _prefetched(stream)
        for b, batch in enumerate(stream):
            tape = ad.Tape()
            P = models.watch_all(tape, params)
            try:
                loss, g, lw = batch_loss(P, mc, batch, tc.lang_weight)
                if not np.isfinite(loss.data):
                    raise ad.NonFiniteError("loss is not finite")
                grads = ad.backward(tape, loss)
                ad.adam_step(params, grads, state)
            except (ad.NonFiniteError, ad.PoisonedGradientError) as exc:
                where = {"epoch": epoch, "batch": b, "rows": batch.rows.tolist(), "seed": seed, "error": str(exc)}
                if out is not None:
                    out.mkdir(parents=True, exist_ok=True)
                    (out / "nan_batch.json").write_text(json.dumps(where))
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}") from exc
            m = len(batch)
            gen_sum += g * m
            lang_sum += lw * m
            tot_sum += float(loss.data) * m
            n += m
        row = {
            "epoch": epoch,
            "loss": tot_sum / max(n, 1),
            "gen_loss": gen_sum / max(n, 1),
            "lang_loss": lang_sum / max(n, 1),
            "seconds": time.perf_counter() - t0,
        }
        report.epochs.append(row)
        log.info("epoch %d loss %.4f (gen %.4f, lang %.4f)", epoch, row["loss"], row["gen_loss"], row["lang_loss"])
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.ckpt", params, checkpoint_manifest(corpus, mc, tc))
        report.write_jsonl(out / "train_report.jsonl")
    return params, report
