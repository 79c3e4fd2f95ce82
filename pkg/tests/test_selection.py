import json

import numpy as np
import pytest

from oracles import bm25_oracle, dense_oracle, flat_grad_oracle, toy_corpus, two_stage_oracle
from ssae.activations import ActivationDataset, write_dataset
from ssae.io_utils import AlignmentError, FormatError, read_csv
from ssae.sae import NumericError, SaeParams
from ssae.selection import (Corpus, Document, EmbeddingSet, SelectionPipeline, bm25_build,
                            bm25_retrieve, dense_retrieve, load_corpus, load_embeddings,
                            load_seed_texts, mean_grad_vector, take_budget, tokenize,
                            tracin_score, tracin_scores, two_stage_select)

SEEDS = ["quark gluon field", "the gauge symmetry of a lattice", "Spin, spin!"]


def test_tokenize_rule():
    assert tokenize("Hello, World_x 3rd-rate") == ["hello", "world", "x", "3rd", "rate"]
    assert tokenize("") == []


def test_bm25_matches_brute_force():
    for seed in range(5):
        texts = toy_corpus(50, seed)
        corpus = Corpus.from_texts(texts)
        res = bm25_retrieve(bm25_build(corpus), SEEDS)
        want = bm25_oracle(dict(enumerate(texts)), SEEDS)
        assert res.doc_ids == [i for i, _ in want]
        np.testing.assert_allclose(res.scores, [s for _, s in want], rtol=1e-12, atol=1e-12)


def test_bm25_hand_computed_value():
    # one doc containing the term once, one without; N=2, df=1, avgdl=1.5
    corpus = Corpus.from_texts(["alpha beta", "gamma"])
    idx = bm25_build(corpus)
    idf = np.log((2 - 1 + 0.5) / (1 + 0.5) + 1)
    assert idx.idf("alpha") == pytest.approx(idf)
    s = idf * 1 * 2.2 / (1 + 1.2 * (1 - 0.75 + 0.75 * 2 / 1.5))
    assert idx.scores(["alpha"])[0] == pytest.approx(s)
    assert idx.scores(["alpha"])[1] == 0


def test_bm25_unknown_terms_and_top_k():
    corpus = Corpus.from_texts(["a b", "c d", "e f"])
    res = bm25_retrieve(bm25_build(corpus), ["zzz"], top_k=2)
    assert res.doc_ids == [0, 1] and res.scores == [0.0, 0.0]


def test_dense_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(5):
        seed = rng.normal(size=(4, 6))
        cand = rng.normal(size=(50, 6))
        ids = rng.permutation(1000)[:50]
        res = dense_retrieve(EmbeddingSet(np.arange(4), seed), EmbeddingSet(ids, cand))
        want = dense_oracle(list(seed), {int(i): v for i, v in zip(ids, cand)})
        assert res.doc_ids == [i for i, _ in want]
        np.testing.assert_allclose(res.scores, [s for _, s in want], atol=1e-12)


def test_dense_ties_broken_by_id():
    cand = EmbeddingSet([7, 3, 5], np.array([[1.0, 0], [2.0, 0], [0, 1.0]]))
    res = dense_retrieve(EmbeddingSet([0], [[1.0, 0]]), cand)
    assert res.doc_ids == [3, 7, 5]


def test_embedding_errors():
    with pytest.raises(NumericError):
        EmbeddingSet([0, 1], [[1.0, 0], [0, 0]])
    with pytest.raises(AlignmentError):
        EmbeddingSet([0], [[1.0, 0], [0, 1.0]])


def test_embedding_file_round_trip(tmp_path):
    v = np.array([[3.0, 4.0], [0.0, 2.0]], np.float32)
    p = tmp_path / "e.saed"
    write_dataset(p, ActivationDataset.from_array(v), ids=[11, 12])
    e = load_embeddings(p)
    assert e.ids.tolist() == [11, 12]
    np.testing.assert_allclose(e.vectors, [[0.6, 0.8], [0, 1]])


def random_params(rng, n=4, m=6):
    return SaeParams(rng.normal(size=(m, n)), rng.normal(size=m) * 0.2,
                     rng.normal(size=(n, m)), rng.normal(size=n) * 0.2)


def test_tracin_matches_flat_gradient_dot_product():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = random_params(rng)
        c, s = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        lam = float(rng.uniform(0, 1))
        want = float(flat_grad_oracle(*p.arrays(), c, lam) @ flat_grad_oracle(*p.arrays(), s, lam))
        assert abs(tracin_score(p, c, s, lam) - want) <= 1e-10 * max(1.0, abs(want))


def test_self_influence_nonnegative_and_batch_scores():
    rng = np.random.default_rng(3)
    p = random_params(rng)
    x = rng.normal(size=(6, 4))
    assert tracin_score(p, x, x, 0.1) >= 0
    blocks = [x[:2], x[2:]]
    np.testing.assert_allclose(tracin_scores(p, blocks, x, 0.1),
                               [tracin_score(p, b, x, 0.1) for b in blocks])
    with pytest.raises(ValueError):
        mean_grad_vector(p, np.zeros((0, 4)), 0.1)


def test_take_budget_overshoots_by_one_doc():
    corpus = Corpus.from_texts(["a b c", "d e", "f g h i"])
    r = take_budget([0, 1, 2], [3, 2, 1], corpus, 4)
    assert r.doc_ids == [0, 1] and r.cum_tokens == [3, 5] and not r.budget_exhausted
    r = take_budget([0, 1, 2], [3, 2, 1], corpus, 100)
    assert r.doc_ids == [0, 1, 2] and r.budget_exhausted


def rows_for(texts, dim=4, seed=0):
    """One activation row per whitespace token; docs addressed by row ranges."""
    rng = np.random.default_rng(seed)
    docs, start = [], 0
    for i, t in enumerate(texts):
        n = len(t.split())
        docs.append(Document(i, t, (start, start + n)))
        start += n
    return Corpus(docs), ActivationDataset.from_array(rng.normal(size=(start, dim)).astype(np.float32))


def test_two_stage_without_rerank_matches_oracle():
    texts = toy_corpus(50, 4)
    cfg = SelectionPipeline("bm25", filter_fraction=0.3, rerank=False, token_budget=60)
    res = two_stage_select(Corpus.from_texts(texts), cfg, seed_texts=SEEDS)
    assert res.doc_ids == two_stage_oracle(texts, SEEDS, 0.3, 60)


def test_two_stage_with_rerank_matches_oracle():
    texts = toy_corpus(20, 5)
    corpus, acts = rows_for(texts)
    rng = np.random.default_rng(6)
    p = random_params(rng)
    seed_rows = rng.normal(size=(5, 4))
    vals = np.asarray(acts.values, dtype=np.float64)
    g_s = flat_grad_oracle(*p.arrays(), seed_rows, 0.1)
    tr = {d.doc_id: float(flat_grad_oracle(*p.arrays(), vals[d.rows[0]:d.rows[1]], 0.1) @ g_s)
          for d in corpus.docs}
    cfg = SelectionPipeline("bm25", filter_fraction=0.5, rerank=True, token_budget=80)
    res = two_stage_select(corpus, cfg, seed_texts=SEEDS, params=p, activations=acts,
                           seed_rows=seed_rows, l1_coeff=0.1)
    assert res.doc_ids == two_stage_oracle(texts, SEEDS, 0.5, 80, grads=tr)


def test_two_stage_dense_requires_known_ids():
    corpus = Corpus.from_texts(["a", "b"])
    cfg = SelectionPipeline("dense", filter_fraction=1.0, rerank=False)
    with pytest.raises(AlignmentError):
        two_stage_select(corpus, cfg, seed_emb=EmbeddingSet([0], [[1.0]]),
                         cand_emb=EmbeddingSet([0, 9], [[1.0], [2.0]]))


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        SelectionPipeline("tfidf")
    with pytest.raises(ValueError):
        SelectionPipeline(filter_fraction=0)
    with pytest.raises(ValueError):
        SelectionPipeline(token_budget=0)


def test_corpus_loading(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps({"id": 3, "text": "x y", "row_start": 0, "row_end": 2}) + "\n\n"
                 + json.dumps({"id": 4, "text": "z"}) + "\n")
    c = load_corpus(p)
    assert c[3].rows == (0, 2) and c[4].rows is None
    assert load_seed_texts(p) == ["x y", "z"]
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": 1}\n')
    with pytest.raises(FormatError):
        load_corpus(bad)
    with pytest.raises(ValueError):
        Corpus.from_texts(["a", "b"], ids=[1, 1])
    plain = tmp_path / "s.txt"
    plain.write_text("first seed\n\nsecond seed\n")
    assert load_seed_texts(plain) == ["first seed", "second seed"]


def test_result_csv(tmp_path):
    corpus = Corpus.from_texts(["a b", "c"])
    take_budget([1, 0], [2.0, 1.0], corpus, 10).to_csv(tmp_path / "r.csv")
    header, rows = read_csv(tmp_path / "r.csv")
    assert header == ["rank", "doc_id", "score", "cum_tokens"]
    assert rows == [["1", "1", "2.0", "1"], ["2", "0", "1.0", "3"]]
