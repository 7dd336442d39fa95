"""Shared oracles and fixtures for the test modules."""
import numpy as np

from tem_search import autodiff as ad
from tem_search import corpus as C
from tem_search import models as m

REL_FLOOR = 1e-6


def rel_error(a, b, floor=REL_FLOOR):
    return abs(a - b) / max(abs(a), abs(b), floor)


def central_difference(f, arr, idx, h=1e-3):
    old = arr[idx]
    arr[idx] = old + h
    up = float(f())
    arr[idx] = old - h
    down = float(f())
    arr[idx] = old
    return (up - down) / (2 * h)


def model_loss_problem(kind, d=8, heads=2, layers=2, n_words=20, n_items=15, n_users=4, history=3, seed=0):
    """Float64 parameters and a closure computing the joint loss of a two-row batch."""
    cfg = m.ModelConfig(kind, d=d, heads=heads, layers=layers, d_ff=12, max_history=max(history, 1))
    rng = np.random.default_rng(seed)
    params = {k: v.astype(np.float64) for k, v in m.init_params(cfg, n_words, n_items, n_users, seed).items()}
    for k in params:
        # tiny default embeddings make every gradient nearly zero; widen them
        if k.endswith("emb"):
            params[k] = rng.normal(0.0, 0.5, params[k].shape)
    qt = np.array([[1, 2, 3], [4, 0, 0]])
    qm = np.array([[1, 1, 1], [1, 0, 0]], dtype=bool)
    hist = rng.integers(0, n_items, size=(2, history))
    hmask = np.ones((2, history), dtype=bool)
    if history:
        hmask[1, 1:] = False
    pos = np.array([n_items - 1, n_items - 2])
    neg = rng.integers(0, n_items - 2, size=(2, 5))
    words = rng.integers(0, n_words, size=(2, 5))
    wmask = np.ones((2, 5), dtype=bool)
    wmask[1, 3:] = False
    wneg = rng.integers(0, n_words, size=(2, 5, 5))

    def loss(P):
        intent = m.compute_intent(P, cfg, qt, qm, np.array([0, 1]), hist, hmask)
        gen = m.item_generation_logprob(P, intent.vector, pos, neg)
        lang = m.item_language_logprob(P, pos, words, wmask, wneg)
        return ad.mean_op(ad.add(gen, lang))

    return cfg, params, loss


def analytic_gradients(params, loss):
    tape = ad.Tape()
    out = loss(m.watch_all(tape, params))
    return float(out.data), ad.backward(tape, out)


def sampled_gradcheck(params, loss, n_coords=200, seed=0, h=1e-3):
    """Relative errors at ``n_coords`` coordinates drawn from those with a non-zero analytic gradient."""
    _, grads = analytic_gradients(params, loss)
    pool = [(k, idx) for k, g in grads.items() for idx in zip(*np.nonzero(g))]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=min(n_coords, len(pool)), replace=False)
    errs = []
    for p in picks:
        k, idx = pool[p]
        fd = central_difference(lambda: loss(m.as_free(params)).data, params[k], idx, h)
        errs.append(rel_error(float(grads[k][idx]), fd))
    return np.array(errs)


def planted_corpus(clusters=4, seed=0, n_users=50, n_items=200, n_categories=8, purchases=40, paths=6, min_count=1):
    syn = C.synth_generate(
        n_users, n_items, n_categories, clusters, 12, seed=seed, purchases_per_user=purchases, paths_per_category=paths
    )
    return syn, C.prepare_corpus(syn.reviews, syn.items, seed=seed, min_count=min_count)


def separable_corpus(n_users=10, per_user=2):
    """Every item has its own query word and its own review word, so nothing conflicts."""
    items = [C.ItemMeta(f"it{j:02d}", ((f"cat{j}",),)) for j in range(n_users * per_user)]
    reviews = []
    for u in range(n_users):
        for k in range(per_user):
            j = per_user * u + k
            reviews.append(C.ReviewRecord(f"u{u}", f"it{j:02d}", 10 + k, " ".join([f"cat{j}"] * 5)))
    return C.prepare_corpus(reviews, items, seed=0, min_count=1)
