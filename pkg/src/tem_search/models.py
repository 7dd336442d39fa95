"""Query encoder, purchase-intent composers (QEM/HEM/AEM/ZAM/TEM) and objectives.

All functions are batched. Parameters arrive as a ``dict[str, Tensor]`` so the
same code serves training (tensors on a tape) and inference (free tensors).
Vectors use the row convention ``x @ W``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODEL_KINDS = ("QEM", "HEM", "AEM", "ZAM", "TEM")


@dataclass
class ModelConfig:
    model_kind: str = "TEM"
    d: int = 128
    heads: int = 1
    layers: int = 1
    d_ff: int = 128
    hem_lambda: float = 0.5
    negatives: int = 5
    max_history: int = 20
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.model_kind = self.model_kind.upper()
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}; supported: {', '.join(MODEL_KINDS)}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ValueError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.layers < 1 or self.d_ff < 1:
            raise ValueError("layers and d_ff must be positive")
        if not 0.0 <= self.hem_lambda <= 1.0:
            raise ValueError(f"hem_lambda must lie in [0, 1], got {self.hem_lambda}")
        if self.negatives < 1 or self.max_history < 0:
            raise ValueError("negatives must be >= 1 and max_history >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


# ---------------------------------------------------------------- parameters


def _xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(config: ModelConfig, n_words: int, n_items: int, n_users: int, seed: int) -> dict[str, np.ndarray]:
    """Fresh float32 parameters for ``config.model_kind``."""
    rng = np.random.default_rng(seed)
    d = config.d
    emb = lambda n: rng.uniform(-0.5 / d, 0.5 / d, size=(n, d))
    p = {
        "word_emb": emb(n_words),
        "item_emb": emb(n_items),
        "query_W": _xavier(rng, d, d),
        "query_b": np.zeros(d),
    }
    kind = config.model_kind
    if kind == "HEM":
        p["user_emb"] = emb(n_users)
    elif kind in ("AEM", "ZAM"):
        p["attn_Wq"] = _xavier(rng, d, d)
        p["attn_Wk"] = _xavier(rng, d, d)
    elif kind == "TEM":
        p["pos_emb"] = emb(config.max_history + 1)
        for n in range(config.layers):
            pre = f"layer{n}."
            for w in ("Wq", "Wk", "Wv", "Wo"):
                p[pre + w] = _xavier(rng, d, d)
            p[pre + "bo"] = np.zeros(d)
            p[pre + "W1"] = _xavier(rng, d, config.d_ff)
            p[pre + "b1"] = np.zeros(config.d_ff)
            p[pre + "W2"] = _xavier(rng, config.d_ff, d)
            p[pre + "b2"] = np.zeros(d)
            for ln in ("ln1", "ln2"):
                p[pre + ln + "_g"] = np.ones(d)
                p[pre + ln + "_b"] = np.zeros(d)
    return {k: v.astype(np.float32) for k, v in p.items()}


def as_free(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def watch_all(tape: ad.Tape, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: tape.watch(k, v) for k, v in params.items()}


# ---------------------------------------------------------------- intent


@dataclass
class PurchaseIntent:
    """Batched ``M_qu`` plus attention for inspection.

    ``attention`` holds one array per layer: for TEM ``(B, heads, 1+L)`` over
    (query, history); for AEM/ZAM ``(B, heads, L)`` over history (ZAM additionally
    stores ``zero_weight`` of shape ``(B, heads)``).
    """

    vector: Tensor
    attention: list = field(default_factory=list)
    zero_weight: np.ndarray | None = None


def encode_query(P: dict, term_ids, term_mask=None) -> Tensor:
    """``tanh(mean(word_emb[terms]) @ query_W + query_b)``; ``term_ids`` is ``(B, T)``."""
    term_ids = np.atleast_2d(np.asarray(term_ids, dtype=np.int64))
    mask = np.ones(term_ids.shape, dtype=bool) if term_mask is None else np.atleast_2d(np.asarray(term_mask, dtype=bool))
    counts = mask.sum(axis=1)
    if term_ids.shape[1] == 0 or (counts == 0).any():
        raise ValueError("encode_query needs at least one term per query")
    dtype = P["word_emb"].data.dtype
    words = ad.embedding_lookup(P["word_emb"], term_ids)  # (B, T, d)
    weights = (mask / counts[:, None]).astype(dtype)[:, :, None]
    mean = ad.sum_op(ad.mul(words, Tensor(weights)), axis=1)
    return ad.tanh_op(ad.linear(mean, P["query_W"], P["query_b"]))


def qem_intent(q: Tensor) -> PurchaseIntent:
    return PurchaseIntent(q)


def hem_intent(P: dict, q: Tensor, users, lam: float) -> PurchaseIntent:
    """``lam * q + (1 - lam) * u``; users with id < 0 are cold and get ``q``."""
    users = np.asarray(users, dtype=np.int64)
    known = users >= 0
    dtype = q.data.dtype
    u = ad.embedding_lookup(P["user_emb"], np.where(known, users, 0))
    a = np.where(known, lam, 1.0).astype(dtype)[:, None]
    b = np.where(known, 1.0 - lam, 0.0).astype(dtype)[:, None]
    return PurchaseIntent(ad.add(ad.mul(q, Tensor(a)), ad.mul(u, Tensor(b))))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (B, S, d) -> (B, h, S, d/h)
    B, S, d = x.shape
    return ad.transpose(ad.reshape(x, (B, S, heads, d // heads)), (0, 2, 1, 3))


def _history_attention(P: dict, q: Tensor, history, history_mask, heads: int, zero: bool) -> PurchaseIntent:
    history = np.asarray(history, dtype=np.int64)
    mask = np.asarray(history_mask, dtype=bool)
    B, L = history.shape
    if L == 0:
        return PurchaseIntent(q, [np.zeros((B, heads, 0))], np.ones((B, heads)) if zero else None)
    d = q.shape[-1]
    dh = d // heads
    dtype = q.data.dtype
    items = ad.embedding_lookup(P["item_emb"], history)  # (B, L, d)
    qq = ad.reshape(ad.matmul(q, P["attn_Wq"]), (B, heads, 1, dh))
    kk = _split_heads(ad.matmul(items, P["attn_Wk"]), heads)  # (B, h, L, dh)
    logits = ad.scale(ad.matmul(qq, ad.transpose(kk, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))  # (B, h, 1, L)
    has = mask.any(axis=1)
    if zero:
        # f(q, 0) = (q Wq) . (0 Wk) / sqrt(dh) = 0, always live
        logits = ad.concat([Tensor(np.zeros((B, heads, 1, 1), dtype=dtype)), logits], axis=3)
        live = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
    else:
        live = mask.copy()
        live[~has, 0] = True  # placeholder so the row is defined; zeroed below
    w = ad.row_softmax(logits, live[:, None, None, :])  # (B, h, 1, L[+1])
    w_items = ad.index(w, (slice(None), slice(None), 0, slice(1, None))) if zero else ad.index(w, (slice(None), slice(None), 0))
    w_mean = ad.mean_op(w_items, axis=1)  # (B, L)
    if not zero:
        w_mean = ad.mul(w_mean, Tensor(has[:, None].astype(dtype)))
    mixed = ad.reshape(ad.matmul(ad.reshape(w_mean, (B, 1, L)), items), (B, d))
    trace = w_items.data.copy()
    if not zero:
        trace[~has] = 0.0
    zero_w = w.data[:, :, 0, 0].copy() if zero else None
    return PurchaseIntent(ad.add(q, mixed), [trace], zero_w)


def aem_intent(P: dict, q: Tensor, history, history_mask, heads: int = 1) -> PurchaseIntent:
    """``q + sum_i softmax_i(f(q, i)) * i`` over the live history; empty history gives ``q``."""
    return _history_attention(P, q, history, history_mask, heads, zero=False)


def zam_intent(P: dict, q: Tensor, history, history_mask, heads: int = 1) -> PurchaseIntent:
    """Like :func:`aem_intent` but the softmax also covers a zero vector, so history mass < 1."""
    return _history_attention(P, q, history, history_mask, heads, zero=True)


def transformer_layer(P: dict, prefix: str, X: Tensor, mask, heads: int, eps: float = 1e-5):
    """One post-norm encoder layer over ``X`` ``(B, S, d)``; ``mask`` ``(B, S)`` marks live rows.

    Returns ``(output, attention)`` with attention ``(B, heads, S, S)``.
    """
    mask = np.asarray(mask, dtype=bool)
    B, S, d = X.shape
    dh = d // heads
    dtype = X.data.dtype
    Q = _split_heads(ad.matmul(X, P[prefix + "Wq"]), heads)
    K = _split_heads(ad.matmul(X, P[prefix + "Wk"]), heads)
    V = _split_heads(ad.matmul(X, P[prefix + "Wv"]), heads)
    logits = ad.scale(ad.matmul(Q, ad.transpose(K, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    A = ad.row_softmax(logits, np.broadcast_to(mask[:, None, None, :], (B, heads, S, S)))
    ctx = ad.reshape(ad.transpose(ad.matmul(A, V), (0, 2, 1, 3)), (B, S, d))
    ctx = ad.linear(ctx, P[prefix + "Wo"], P[prefix + "bo"])
    X1 = ad.layer_norm(ad.add(X, ctx), P[prefix + "ln1_g"], P[prefix + "ln1_b"], eps)
    F = ad.linear(ad.relu(ad.linear(X1, P[prefix + "W1"], P[prefix + "b1"])), P[prefix + "W2"], P[prefix + "b2"])
    X2 = ad.layer_norm(ad.add(X1, F), P[prefix + "ln2_g"], P[prefix + "ln2_b"], eps)
    X2 = ad.mul(X2, Tensor(mask[:, :, None].astype(dtype)))
    return X2, A.data


def tem_inputs(P: dict, q: Tensor, history, history_mask) -> Tensor:
    """Query at position 0, the k-th history item (oldest first) at position k."""
    history = np.asarray(history, dtype=np.int64)
    B, L = history.shape
    d = q.shape[-1]
    q0 = ad.reshape(ad.add(q, ad.index(P["pos_emb"], 0)), (B, 1, d))
    if L == 0:
        return q0
    items = ad.embedding_lookup(P["item_emb"], history)
    pos = ad.index(P["pos_emb"], slice(1, L + 1))  # (L, d)
    return ad.concat([q0, ad.add(items, pos)], axis=1)


def tem_intent(P: dict, q: Tensor, history, history_mask, config: ModelConfig) -> PurchaseIntent:
    """Query-position output of the last encoder layer over ``(q, history)``."""
    history = np.asarray(history, dtype=np.int64)
    mask_h = np.asarray(history_mask, dtype=bool).reshape(history.shape)
    if history.shape[1] > config.max_history:
        raise ValueError(f"history length {history.shape[1]} exceeds max_history={config.max_history}")
    B = history.shape[0]
    mask = np.concatenate([np.ones((B, 1), dtype=bool), mask_h], axis=1)
    X = tem_inputs(P, q, history, mask_h)
    trace = []
    for n in range(config.layers):
        X, A = transformer_layer(P, f"layer{n}.", X, mask, config.heads, config.ln_eps)
        trace.append(A[:, :, 0, :].copy())
    return PurchaseIntent(ad.index(X, (slice(None), 0)), trace)


def compute_intent(P: dict, config: ModelConfig, query_terms, query_mask, users, history, history_mask) -> PurchaseIntent:
    q = encode_query(P, query_terms, query_mask)
    kind = config.model_kind
    if kind == "QEM":
        return qem_intent(q)
    if kind == "HEM":
        return hem_intent(P, q, users, config.hem_lambda)
    if kind == "AEM":
        return aem_intent(P, q, history, history_mask, config.heads)
    if kind == "ZAM":
        return zam_intent(P, q, history, history_mask, config.heads)
    return tem_intent(P, q, history, history_mask, config)


# ---------------------------------------------------------------- objectives


def item_generation_logprob(P: dict, M: Tensor, positives, negatives) -> Tensor:
    """Per-example negative-sampling loss ``-log s(i+ . M) - sum log s(-i- . M)``, shape ``(B,)``."""
    positives = np.asarray(positives, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    B, d = M.shape
    pos = ad.embedding_lookup(P["item_emb"], positives)
    s_pos = ad.sum_op(ad.mul(pos, M), axis=-1)
    neg = ad.embedding_lookup(P["item_emb"], negatives)  # (B, k, d)
    s_neg = ad.reshape(ad.matmul(neg, ad.reshape(M, (B, d, 1))), (B, negatives.shape[1]))
    loss = ad.add(ad.log_sigmoid(s_pos), ad.sum_op(ad.log_sigmoid(ad.scale(s_neg, -1.0)), axis=-1))
    return ad.scale(loss, -1.0)


def item_language_logprob(P: dict, items, words, word_mask, negatives) -> Tensor:
    """Per-example review-word loss summed over a window, shape ``(B,)``.

    ``words`` ``(B, W)`` with ``word_mask``; ``negatives`` ``(B, W, k)``.
    """
    items = np.asarray(items, dtype=np.int64)
    words = np.asarray(words, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    B, W = words.shape
    k = negatives.shape[2]
    dtype = P["item_emb"].data.dtype
    vec = ad.embedding_lookup(P["item_emb"], items)  # (B, d)
    d = vec.shape[-1]
    col = ad.reshape(vec, (B, d, 1))
    s_pos = ad.reshape(ad.matmul(ad.embedding_lookup(P["word_emb"], words), col), (B, W))
    neg = ad.embedding_lookup(P["word_emb"], negatives.reshape(B, W * k))
    s_neg = ad.reshape(ad.matmul(neg, col), (B, W, k))
    per_word = ad.add(ad.log_sigmoid(s_pos), ad.sum_op(ad.log_sigmoid(ad.scale(s_neg, -1.0)), axis=-1))
    per_word = ad.mul(per_word, Tensor(np.asarray(word_mask, dtype=dtype)))
    return ad.scale(ad.sum_op(per_word, axis=-1), -1.0)


def exact_item_probs(M: np.ndarray, item_emb: np.ndarray) -> np.ndarray:
    """Full softmax ``P(i | q, u)`` over all items, computed in float64."""
    logits = np.atleast_2d(np.asarray(M, dtype=np.float64)) @ np.asarray(item_emb, dtype=np.float64).T
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def exact_word_probs(item_vec: np.ndarray, word_emb: np.ndarray) -> np.ndarray:
    """Full softmax over the vocabulary for one or more item vectors."""
    return exact_item_probs(item_vec, word_emb)


def score_items(M: np.ndarray, item_emb: np.ndarray, candidates=None) -> np.ndarray:
    """Dot-product scores ``item_emb[c] . M``; rank-equivalent to the full softmax."""
    table = item_emb if candidates is None else item_emb[np.asarray(candidates, dtype=np.int64)]
    return table @ np.asarray(M)


def rank_order(scores: np.ndarray, ids=None) -> np.ndarray:
    """Positions sorted by score descending, ties by id ascending."""
    scores = np.asarray(scores)
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    return np.lexsort((ids, -scores))
