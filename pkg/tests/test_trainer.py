import json

import numpy as np
import pytest
from scipy import stats

from tem_search import corpus as C
from tem_search import models as M
from tem_search import trainer as T
from tem_search.checkpoint import load_checkpoint

from _support import separable_corpus


@pytest.fixture(scope="module")
def small():
    syn = C.synth_generate(12, 40, 4, 1, seed=4, purchases_per_user=15, paths_per_category=3)
    return C.prepare_corpus(syn.reviews, syn.items, seed=4, min_count=2)


# ---------------------------------------------------------------- negative sampling


def test_uniform_frequencies_draw_uniformly():
    sampler = T.NegSampler(np.ones(10), seed=0)
    draws = sampler.sample(100_000)
    counts = np.bincount(draws, minlength=10)
    expected = 10_000
    assert np.all(np.abs(counts - expected) <= 3 * np.sqrt(expected * 0.9))
    assert stats.chisquare(counts).pvalue > 1e-3


def test_exclude_all_but_one_returns_that_id():
    sampler = T.NegSampler(np.arange(1, 7), seed=1)
    assert T.sample_negatives(sampler, 8, exclude={0, 1, 2, 4, 5}).tolist() == [3] * 8


def test_power_law_ratio():
    sampler = T.NegSampler([8, 1], power=0.75, seed=2)
    draws = sampler.sample(200_000)
    p = 8**0.75 / (8**0.75 + 1)
    n1 = int((draws == 0).sum())
    sigma = np.sqrt(len(draws) * p * (1 - p))
    assert abs(n1 - len(draws) * p) <= 3 * sigma


def test_exhausted_support_is_a_config_error():
    sampler = T.NegSampler([1, 2, 0], seed=3)
    with pytest.raises(C.ConfigError):
        sampler.sample(2, exclude={0, 1})
    with pytest.raises(C.ConfigError):
        T.NegSampler([0, 0])


def test_row_negatives_never_hit_their_positive():
    sampler = T.NegSampler(np.ones(4))
    rng = np.random.default_rng(0)
    pos = rng.integers(0, 4, size=(50, 3))
    neg = sampler.sample_rows(pos, 5, rng)
    assert neg.shape == (50, 3, 5)
    assert not np.any(neg == pos[..., None])


def test_sampling_is_reproducible_per_seed():
    a = T.NegSampler(np.arange(1, 30), seed=7).sample(40)
    b = T.NegSampler(np.arange(1, 30), seed=7).sample(40)
    assert a.tolist() == b.tolist()


# ---------------------------------------------------------------- batching


def test_batch_sizes_keep_last_short_batch():
    assert [len(b) for b in T.batch_order(770, 384, epoch=0, seed=1)] == [384, 384, 2]


def test_batch_order_depends_only_on_seed_and_epoch():
    a = T.batch_order(100, 32, 3, 9)
    b = T.batch_order(100, 32, 3, 9)
    c = T.batch_order(100, 32, 4, 9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_batches_partition_the_examples(small):
    ex = T.build_examples(small, 20)
    rows = np.concatenate([b.rows for b in T.make_batches(small, ex, 16, epoch=0, seed=5)])
    assert sorted(rows.tolist()) == list(range(len(ex)))


def test_batch_contents_are_deterministic(small):
    ex = T.build_examples(small, 20)
    first = list(T.make_batches(small, ex, 16, epoch=2, seed=5))
    second = list(T.make_batches(small, ex, 16, epoch=2, seed=5))
    for x, y in zip(first, second):
        for name in ("rows", "history", "item_negs", "words", "word_negs"):
            assert np.array_equal(getattr(x, name), getattr(y, name))


def test_histories_are_padded_to_the_batch_maximum(small):
    ex = T.build_examples(small, 20)
    batch = next(T.make_batches(small, ex, 16, epoch=0, seed=5))
    lengths = [len(ex.history[r]) for r in batch.rows]
    assert batch.history.shape == (16, max(lengths))
    assert batch.history_mask.sum(axis=1).tolist() == lengths


def test_examples_exclude_positive_item_from_history(small):
    ex = T.build_examples(small, 20)
    assert all(ex.items[r] not in ex.history[r] for r in range(len(ex)))
    assert all(len(h) <= 20 for h in ex.history)


def test_examples_history_uses_strictly_earlier_train_purchases(small):
    ex = T.build_examples(small, 20)
    stamp = {}
    for u, events in small.split.history.items():
        for t, i in events:
            stamp.setdefault((small.user_index[u], small.item_index[i]), []).append(t)
    for r in range(len(ex)):
        for i in ex.history[r]:
            assert min(stamp[(ex.users[r], i)]) < ex.timestamps[r]


def test_leakage_guard_fires_on_a_poisoned_example(small):
    ex = T.build_examples(small, 20)
    ex.history[0] = np.append(ex.history[0], ex.items[0])
    sampler_i = T.NegSampler(T.item_frequencies(small))
    sampler_w = T.NegSampler(small.vocab.freq)
    with pytest.raises(AssertionError, match="leaked"):
        T.assemble_batch(small, ex, np.array([0]), 5, 5, sampler_i, sampler_w, np.random.default_rng(0))


# ---------------------------------------------------------------- config


def test_flat_config_round_trip_and_unknown_keys():
    mc, tc = T.split_flat_config({"model_kind": "ZAM", "d": 16, "epochs": 3, "k": 7, "seed": 1})
    assert mc.model_kind == "ZAM" and mc.negatives == 7 and tc.epochs == 3 and tc.seed == 1
    assert T.split_flat_config(T.flat_config(mc, tc)) == (mc, tc)
    with pytest.raises(ValueError, match="bogus"):
        T.split_flat_config({"bogus": 1})


# ---------------------------------------------------------------- training


def test_training_requires_seed(small):
    with pytest.raises(C.ConfigError):
        T.train(small, M.ModelConfig("QEM", d=8), T.TrainConfig(epochs=1))


def test_zero_learning_rate_leaves_parameters_bitwise_unchanged(small):
    mc = M.ModelConfig("TEM", d=8, heads=2, d_ff=8)
    init = M.init_params(mc, len(small.vocab), len(small.items), len(small.users), 3)
    params, report = T.train(small, mc, T.TrainConfig(epochs=1, lr=0.0, seed=3), init={k: v.copy() for k, v in init.items()})
    assert all(params[k].tobytes() == init[k].tobytes() for k in init)
    assert len(report.epochs) == 1


def test_loss_decreases_over_first_five_epochs(small):
    mc = M.ModelConfig("QEM", d=16)
    _, report = T.train(small, mc, T.TrainConfig(epochs=5, batch_size=32, lr=0.005, seed=0))
    losses = [e["loss"] for e in report.epochs]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert all(np.isfinite([e["gen_loss"] for e in report.epochs] + [e["lang_loss"] for e in report.epochs]))


@pytest.mark.parametrize("kind", ["QEM", "TEM"])
def test_overfits_twenty_examples(kind):
    pc = separable_corpus()
    assert len(pc.split.train) == 20
    mc = M.ModelConfig(kind, d=32, heads=2, d_ff=32)
    _, report = T.train(pc, mc, T.TrainConfig(epochs=200, lr=0.05, seed=0))
    assert min(e["loss"] for e in report.epochs) < 0.05


def test_training_writes_checkpoint_and_report(small, tmp_path):
    mc = M.ModelConfig("HEM", d=8)
    tc = T.TrainConfig(epochs=2, batch_size=64, seed=1)
    params, _ = T.train(small, mc, tc, out_dir=tmp_path)
    arrays, manifest = load_checkpoint(tmp_path / "model.ckpt")
    assert manifest["model_kind"] == "HEM" and manifest["model_config"] == mc.to_dict()
    assert manifest["n_words"] == len(small.vocab)
    assert all(arrays[k].tobytes() == params[k].tobytes() for k in params)
    rows = [json.loads(line) for line in (tmp_path / "train_report.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1]
    assert {"loss", "gen_loss", "lang_loss", "seconds", "seed"} <= set(rows[0])


def test_same_seed_gives_bitwise_identical_parameters(small):
    mc = M.ModelConfig("AEM", d=8, heads=2)
    tc = T.TrainConfig(epochs=2, batch_size=48, seed=11)
    a, _ = T.train(small, mc, tc)
    b, _ = T.train(small, mc, tc, prefetch=True)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_divergence_persists_offending_batch(small, tmp_path):
    mc = M.ModelConfig("QEM", d=8)
    init = M.init_params(mc, len(small.vocab), len(small.items), len(small.users), 0)
    init["query_W"][0, 0] = np.nan
    with pytest.raises(T.TrainingDiverged):
        T.train(small, mc, T.TrainConfig(epochs=1, seed=0), out_dir=tmp_path, init=init)
    where = json.loads((tmp_path / "nan_batch.json").read_text())
    assert where["epoch"] == 0 and where["batch"] == 0 and where["rows"]


def test_moment_overflow_aborts_training(small):
    mc = M.ModelConfig("QEM", d=8)
    init = M.init_params(mc, len(small.vocab), len(small.items), len(small.users), 0)
    init["item_emb"][:] = np.float32(1e30)
    with pytest.raises(T.TrainingDiverged):
        T.train(small, mc, T.TrainConfig(epochs=1, seed=0), init=init)


def test_out_of_vocabulary_queries_are_skipped():
    pc = separable_corpus()
    pc.query_terms[0] = np.zeros(0, dtype=np.int64)
    ex = T.build_examples(pc, 20)
    assert len(ex) == 19 and 0 not in ex.queries.tolist()
