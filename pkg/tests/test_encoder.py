import math

import numpy as np
import pytest

from evdrank.encoder import (ContrastiveBatch, CorpusItem, EncoderParams, RetrievalIndex, build_index,
                             contrastive_from_features, contrastive_loss, dumps_params, encode_item, encode_text,
                             encode_texts, feature_matrix, featurize, fit, init_params, load_corpus, loads_params,
                             rank_order, recall_at_h, save_corpus, similarity, top_k, train_step)
from evdrank.errors import CheckpointError, StaleIndex

from conftest import central_difference, max_rel_error


def items(n, seed=0):
    rng = np.random.default_rng(seed)
    vocab = [f"w{i}" for i in range(40)]
    out = []
    for i in range(n):
        attrs = tuple(rng.choice(vocab, size=4, replace=False))
        out.append(CorpusItem(f"it-{i:03d}", " ".join(attrs), attrs))
    return out


# ------------------------------------------------------------- featurizer


def test_featurize_empty_and_deterministic():
    assert featurize("", 64, 0).indices.size == 0
    a, b = featurize("a red tent", 64, 3), featurize("a red tent", 64, 3)
    assert np.array_equal(a.indices, b.indices) and np.array_equal(a.values, b.values)


def test_featurize_counts_unigrams_and_bigrams():
    v = featurize("red tent", 1 << 20, 0)
    assert np.abs(v.values).sum() == 3  # red, tent, "red tent"


def test_attribute_bigrams_stay_inside_attributes():
    joined = featurize(["red tent"], 1 << 20, 0)
    split = featurize(["red", "tent"], 1 << 20, 0)
    assert np.abs(joined.values).sum() == 3 and np.abs(split.values).sum() == 2


def test_feature_matrix_matches_dense_rows():
    rows = ["a tent", "", ("red", "blue sky")]
    X = feature_matrix(rows, 128, 1)
    for r, row in zip(rows, X):
        assert np.array_equal(featurize(r, 128, 1).to_dense(128), row)


# ---------------------------------------------------------------- encoding


def test_zero_features_encode_to_e1():
    p = init_params(64, 8)
    e = encode_text(p, "")
    assert e[0] == 1.0 and np.count_nonzero(e) == 1


def test_shared_featurization_gives_similarity_one():
    p = init_params(256, 16, tied=True)
    item = CorpusItem("x", "red tent", ("red tent",))
    assert similarity(encode_text(p, "red tent"), encode_item(p, item)) == pytest.approx(1.0, abs=1e-12)


def test_similarity_basics():
    a = np.array([1.0, 0.0])
    assert similarity(a, a) == 1.0
    assert similarity(a, np.array([0.0, 1.0])) == 0.0
    assert similarity(a, -a) == -1.0


# ------------------------------------------------------------ contrastive


def test_single_pair_has_zero_loss():
    res = contrastive_loss(init_params(64, 8), ContrastiveBatch.from_items(items(1)))
    assert res.loss_i2t == 0.0 and res.loss_t2i == 0.0
    assert not np.any(res.grad.W_text) and not np.any(res.grad.W_item)


def test_orthogonal_pair_closed_form():
    W = np.zeros((16, 2))
    W[0, 0] = W[1, 1] = 1.0
    p = EncoderParams(W, W, tau=1.0)
    X = np.zeros((2, 16))
    X[0, 0] = X[1, 1] = 1.0
    l_i2t, l_t2i, total, _ = contrastive_from_features(p, X, X)
    expected = math.log1p(math.exp(-1.0))
    assert l_i2t == pytest.approx(expected, abs=1e-12) and l_t2i == pytest.approx(expected, abs=1e-12)
    assert total == pytest.approx(0.626524, abs=1e-5)


def test_loss_against_direct_formula():
    p = init_params(128, 8, tau=0.5, seed=3, tied=False)
    batch = ContrastiveBatch.from_items(items(5, seed=1))
    res = contrastive_loss(p, batch)
    T = encode_texts(p, batch.texts)
    V = np.stack([encode_item(p, it) for it in batch.items])
    S = V @ T.T / p.tau
    i2t = np.mean([-S[i, i] + math.log(sum(math.exp(S[i, j]) for j in range(5))) for i in range(5)])
    t2i = np.mean([-S[i, i] + math.log(sum(math.exp(S[j, i]) for j in range(5))) for i in range(5)])
    assert res.loss_i2t == pytest.approx(i2t, rel=1e-12)
    assert res.loss_t2i == pytest.approx(t2i, rel=1e-12)


@pytest.mark.parametrize("which", ["W_text", "W_item"])
def test_gradient_matches_finite_differences(which):
    p = init_params(64, 6, tau=0.3, seed=5, tied=False)
    batch = ContrastiveBatch.from_items(items(4, seed=2))
    analytic = getattr(contrastive_loss(p, batch).grad, which)
    coords = np.random.default_rng(0).choice(analytic.size, size=40, replace=False)

    def f(W):
        q = EncoderParams(W if which == "W_text" else p.W_text, W if which == "W_item" else p.W_item, p.tau)
        return contrastive_loss(q, batch).loss_total

    numeric = central_difference(f, getattr(p, which), coords)
    assert max_rel_error(analytic.reshape(-1)[coords], numeric) < 1e-5


def test_train_step_decreases_loss_and_is_deterministic():
    p = init_params(128, 8, seed=1, tied=False)
    batch = ContrastiveBatch.from_items(items(6))
    q1, q2 = train_step(p, batch, 0.05), train_step(p, batch, 0.05)
    assert q1 == q2
    assert contrastive_loss(q1, batch).loss_total < contrastive_loss(p, batch).loss_total


def test_train_step_single_pair_is_noop():
    p = init_params(64, 8)
    assert train_step(p, ContrastiveBatch.from_items(items(1)), 0.1) == p


def test_fit_is_deterministic_and_learns():
    corpus = items(20)
    p = init_params(256, 16, seed=2, tied=False)
    a = fit(p, corpus, epochs=30, learning_rate=0.05, batch_size=8, seed=4)
    b = fit(p, corpus, epochs=30, learning_rate=0.05, batch_size=8, seed=4)
    assert a == b
    full = ContrastiveBatch.from_items(corpus)
    assert contrastive_loss(a, full).loss_total < contrastive_loss(p, full).loss_total


def test_fit_text_for_default_equivalent():
    corpus = items(10)
    p = init_params(128, 8, seed=2)
    a = fit(p, corpus, epochs=5, learning_rate=0.05, batch_size=4, seed=1)
    b = fit(p, corpus, epochs=5, learning_rate=0.05, batch_size=4, seed=1,
            text_for=lambda epoch, i: corpus[i].caption)
    assert a == b


# --------------------------------------------------------------- retrieval


def test_index_shapes_and_rebuild():
    p = init_params(64, 8)
    idx = build_index(p, items(1))
    assert idx.item_embeddings.shape == (1, 8)
    assert np.linalg.norm(idx.item_embeddings[0]) == pytest.approx(1.0)
    corpus = items(10)
    assert np.array_equal(build_index(p, corpus).item_embeddings, build_index(p, corpus).item_embeddings)


def test_top_k_query_equal_to_row():
    p = init_params(128, 8)
    corpus = items(10)
    idx = build_index(p, corpus)
    hits = top_k(idx, idx.item_embeddings[3], 3)
    assert hits[0][0] == corpus[3].id and hits[0][1] == pytest.approx(1.0)
    assert len(top_k(idx, idx.item_embeddings[3], 50)) == 10


def test_top_k_ties_by_id():
    emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    idx = RetrievalIndex(("b", "a", "c"), emb, "v")
    assert [i for i, _ in top_k(idx, np.array([1.0, 0.0]), 3)] == ["a", "b", "c"]


def test_stale_index():
    p = init_params(64, 8, seed=0)
    idx = build_index(p, items(3))
    with pytest.raises(StaleIndex):
        top_k(idx, idx.item_embeddings[0], 1, params=init_params(64, 8, seed=1))
    assert top_k(idx, idx.item_embeddings[0], 1, params=p)


def test_rank_order_tie_rule():
    order = rank_order(np.array([0.5, 0.9, 0.5]), ["z", "y", "a"])
    assert order[0].tolist() == [1, 2, 0]


def test_recall_examples():
    assert recall_at_h([["a", "b"]], [{"a"}], 1) == 1.0
    ranked = [f"x{i}" for i in range(10)]
    assert recall_at_h([ranked], [{"x5"}], 5) == 0.0
    assert recall_at_h([ranked], [{"x5"}], 10) == 1.0
    tables, truths = [], []
    for r in (1, 2, 7, 30):
        row = [f"n{i}" for i in range(40)]
        row[r - 1] = "t"
        tables.append(row)
        truths.append({"t"})
    assert recall_at_h(tables, truths, 5) == 0.5


# ------------------------------------------------------------ persistence


def test_params_checkpoint_round_trip():
    p = init_params(64, 8, tau=0.2, hash_seed=3, seed=9, tied=False)
    blob = dumps_params(p)
    assert loads_params(blob) == p
    with pytest.raises(CheckpointError):
        loads_params(blob[:-8])
    with pytest.raises(CheckpointError):
        loads_params(b"garbage")


def test_corpus_round_trip(tmp_path):
    corpus = items(5)
    save_corpus(corpus, tmp_path / "c.jsonl")
    assert load_corpus(tmp_path / "c.jsonl") == corpus


def test_params_validation():
    with pytest.raises(ValueError):
        EncoderParams(np.zeros((16, 2)), np.zeros((16, 2)), tau=0.0)
    with pytest.raises(ValueError):
        EncoderParams(np.zeros((16, 2)), np.zeros((16, 3)))
