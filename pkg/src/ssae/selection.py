"""Subdomain data selection: Okapi BM25, dense cosine retrieval, SAE TracIn
reranking and the two-stage budgeted pipeline."""

from __future__ import annotations

import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io_utils import AlignmentError, FormatError, write_csv
from .sae import NumericError, SaeParams, ShapeError, grad

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def whitespace_tokens(text: str) -> int:
    return len(text.split())


@dataclass
class Document:
    doc_id: int
    text: str
    rows: tuple[int, int] | None = None  # [start, end) into an ActivationDataset


@dataclass
class Corpus:
    docs: list[Document]

    def __post_init__(self):
        ids = [d.doc_id for d in self.docs]
        if len(set(ids)) != len(ids):
            dup = [i for i, c in Counter(ids).items() if c > 1]
            raise ValueError(f"duplicate doc ids: {dup[:5]}")
        self._by_id = {d.doc_id: d for d in self.docs}

    def __len__(self):
        return len(self.docs)

    def __getitem__(self, doc_id: int) -> Document:
        return self._by_id[doc_id]

    @classmethod
    def from_texts(cls, texts, ids=None) -> "Corpus":
        ids = range(len(texts)) if ids is None else ids
        return cls([Document(int(i), t) for i, t in zip(ids, texts)])


def load_corpus(path) -> Corpus:
    """JSON lines with ``id`` and ``text``; optional ``row_start``/``row_end``."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows = None
                if "row_start" in obj or "row_end" in obj:
                    rows = (int(obj["row_start"]), int(obj["row_end"]))
                docs.append(Document(int(obj["id"]), str(obj["text"]), rows))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    return Corpus(docs)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass
class SelectionResult:
    doc_ids: list[int]
    scores: list[float]
    cum_tokens: list[int] | None = None
    budget_exhausted: bool = False  # budget exceeded what was available

    @property
    def tokens_used(self) -> int:
        return self.cum_tokens[-1] if self.cum_tokens else 0

    def to_csv(self, path) -> None:
        cum = self.cum_tokens or [""] * len(self.doc_ids)
        write_csv(path, ("rank", "doc_id", "score", "cum_tokens"),
                  ((r + 1, d, float(s), c) for r, (d, s, c) in
                   enumerate(zip(self.doc_ids, self.scores, cum))))


def _rank(ids, scores, top_k: int | None):
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    if top_k is not None:
        order = order[:top_k]
    return [ids[i] for i in order], [float(scores[i]) for i in order]


# ---------------------------------------------------------------------------
# BM25
# ---------------------------------------------------------------------------

@dataclass
class Bm25Index:
    doc_ids: list[int]
    postings: dict[str, list[tuple[int, int]]]  # term -> [(doc position, tf)]
    doc_len: np.ndarray
    avgdl: float
    k1: float = 1.2
    b: float = 0.75
    doc_tokens: list[int] = field(default_factory=list)  # whitespace token counts

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def tf(self, term: str, doc_id: int) -> int:
        pos = self.doc_ids.index(doc_id)
        return dict(self.postings.get(term, ())).get(pos, 0)

    def scores(self, query_terms) -> np.ndarray:
        """BM25 score of every document (in corpus order) for a query term multiset."""
        q = Counter(query_terms)
        out = np.zeros(self.n_docs)
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_len / self.avgdl)
        for term in sorted(q):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            pos = np.fromiter((p for p, _ in plist), dtype=np.int64, count=len(plist))
            tf = np.fromiter((t for _, t in plist), dtype=np.float64, count=len(plist))
            out[pos] += q[term] * idf * tf * (self.k1 + 1.0) / (tf + norm[pos])
        return out


def bm25_build(corpus: Corpus, k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    if len(corpus) == 0:
        raise ValueError("cannot index an empty corpus")
    postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
    lens = []
    for pos, doc in enumerate(corpus.docs):
        toks = tokenize(doc.text)
        lens.append(len(toks))
        for term, tf in sorted(Counter(toks).items()):
            postings[term].append((pos, tf))
    doc_len = np.asarray(lens, dtype=np.float64)
    avgdl = float(doc_len.mean())
    if avgdl == 0:
        avgdl = 1.0  # every doc empty: all scores are 0 anyway
    return Bm25Index([d.doc_id for d in corpus.docs], dict(postings), doc_len, avgdl, k1, b,
                     [whitespace_tokens(d.text) for d in corpus.docs])


def bm25_retrieve(index: Bm25Index, seed_texts, top_k: int | None = None) -> SelectionResult:
    """Rank docs against the concatenated seed texts; ties by ascending doc id."""
    if top_k is not None and top_k < 1:
        raise ValueError("top_k must be >= 1")
    terms = [t for s in seed_texts for t in tokenize(s)]
    scores = index.scores(terms)
    ids, sc = _rank(index.doc_ids, list(scores), top_k)
    tok = dict(zip(index.doc_ids, index.doc_tokens))
    return SelectionResult(ids, sc, list(np.cumsum([tok[i] for i in ids]).tolist()))


# ---------------------------------------------------------------------------
# dense retrieval
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingSet:
    ids: np.ndarray
    vectors: np.ndarray  # rows L2-normalized

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"embeddings must be 2-D, got {v.shape}")
        if self.ids.shape != (v.shape[0],):
            raise AlignmentError(f"{self.ids.size} ids for {v.shape[0]} embeddings")
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise NumericError(f"zero-norm embedding at row {int(np.flatnonzero(norms == 0)[0])}")
        self.vectors = v / norms

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def load_embeddings(path) -> EmbeddingSet:
    from .activations import open_dataset, read_ids

    ds = open_dataset(path)
    return EmbeddingSet(read_ids(path, ds.rows), ds.as_float64())


def seed_centroid(seed_emb: EmbeddingSet) -> np.ndarray:
    mean = seed_emb.vectors.mean(axis=0)
    norm = np.linalg.norm(mean)
    if not norm > 0:
        raise NumericError("mean seed embedding has zero norm")
    return mean / norm


def dense_scores(seed_emb: EmbeddingSet, cand_emb: EmbeddingSet) -> np.ndarray:
    if seed_emb.dim != cand_emb.dim:
        raise ShapeError(f"seed dim {seed_emb.dim} != candidate dim {cand_emb.dim}")
    return cand_emb.vectors @ seed_centroid(seed_emb)


def dense_retrieve(seed_emb: EmbeddingSet, cand_emb: EmbeddingSet,
                   top_k: int | None = None) -> SelectionResult:
    """Cosine similarity to the renormalized mean seed vector; ties by ascending id."""
    if top_k is not None and top_k < 1:
        raise ValueError("top_k must be >= 1")
    scores = dense_scores(seed_emb, cand_emb)
    ids, sc = _rank([int(i) for i in cand_emb.ids], list(scores), top_k)
    return SelectionResult(ids, sc)


# ---------------------------------------------------------------------------
# TracIn
# ---------------------------------------------------------------------------

def mean_grad_vector(params: SaeParams, rows, l1_coeff: float) -> np.ndarray:
    """Flattened mean gradient of the per-example SAE loss over ``rows``."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[0] == 0:
        raise ValueError("no rows to take a gradient over")
    return grad(params, rows, l1_coeff).flat()


def tracin_score(params: SaeParams, candidate_rows, seed_rows, l1_coeff: float) -> float:
    """Dot product of mean candidate and mean seed loss gradients at fixed params."""
    g_c = mean_grad_vector(params, candidate_rows, l1_coeff)
    g_s = mean_grad_vector(params, seed_rows, l1_coeff)
    return float(g_c @ g_s)


def tracin_scores(params: SaeParams, candidates, seed_rows, l1_coeff: float) -> np.ndarray:
    """Scores for a list of candidate row blocks against one seed set."""
    g_s = mean_grad_vector(params, seed_rows, l1_coeff)
    return np.array([float(mean_grad_vector(params, c, l1_coeff) @ g_s) for c in candidates])


# ---------------------------------------------------------------------------
# two-stage pipeline
# ---------------------------------------------------------------------------

@dataclass
class SelectionPipeline:
    method: str = "bm25"  # or "dense"
    filter_fraction: float = 0.01
    rerank: bool = True
    token_budget: int = 1_000_000
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.method not in ("bm25", "dense"):
            raise ValueError(f"unknown retrieval method {self.method!r}")
        if not 0 < self.filter_fraction <= 1:
            raise ValueError("filter_fraction must lie in (0, 1]")
        if self.token_budget <= 0:
            raise ValueError("token_budget must be positive")


def take_budget(ids, scores, corpus: Corpus, token_budget: int) -> SelectionResult:
    """Accumulate docs in order until the budget is met (overshooting by at most one doc)."""
    out_ids, out_sc, cum = [], [], []
    total = 0
    for d, s in zip(ids, scores):
        if total >= token_budget:
            break
        total += whitespace_tokens(corpus[d].text)
        out_ids.append(d)
        out_sc.append(float(s))
        cum.append(total)
    return SelectionResult(out_ids, out_sc, cum, budget_exhausted=total < token_budget)


def two_stage_select(corpus: Corpus, cfg: SelectionPipeline, *, seed_texts=None,
                     seed_emb: EmbeddingSet | None = None, cand_emb: EmbeddingSet | None = None,
                     params: SaeParams | None = None, activations=None, seed_rows=None,
                     l1_coeff: float = 0.0) -> SelectionResult:
    """Retrieve, keep the top ``filter_fraction``, optionally rerank by TracIn, then fill the budget.

    Reranking needs ``params``, ``activations`` (an ActivationDataset addressed by
    each doc's ``rows``) and ``seed_rows``. The rerank sort is stable, so equal
    TracIn scores keep their retrieval order.
    """
    if cfg.method == "bm25":
        if seed_texts is None:
            raise ValueError("bm25 selection needs seed_texts")
        stage1 = bm25_retrieve(bm25_build(corpus, cfg.k1, cfg.b), seed_texts)
    else:
        if seed_emb is None or cand_emb is None:
            raise ValueError("dense selection needs seed_emb and cand_emb")
        known = {d.doc_id for d in corpus.docs}
        missing = [int(i) for i in cand_emb.ids if int(i) not in known]
        if missing:
            raise AlignmentError(f"embeddings for unknown doc ids: {missing[:5]}")
        stage1 = dense_retrieve(seed_emb, cand_emb)
    keep = max(1, math.ceil(cfg.filter_fraction * len(stage1.doc_ids) - 1e-9))
    ids, scores = stage1.doc_ids[:keep], stage1.scores[:keep]

    if cfg.rerank:
        if params is None or activations is None or seed_rows is None:
            raise ValueError("TracIn reranking needs params, activations and seed_rows")
        blocks = []
        for d in ids:
            rows = corpus[d].rows
            if rows is None:
                raise AlignmentError(f"doc {d} has no activation rows")
            blocks.append(np.asarray(activations.values[rows[0]:rows[1]]))
        tr = tracin_scores(params, blocks, seed_rows, l1_coeff)
        order = sorted(range(len(ids)), key=lambda i: -tr[i])  # stable
        ids = [ids[i] for i in order]
        scores = [float(tr[i]) for i in order]
    return take_budget(ids, scores, corpus, cfg.token_budget)


def load_seed_texts(path) -> list[str]:
    """Seed texts: a JSON-lines corpus (``text`` fields) or plain text, one seed per line."""
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if lines and lines[0].lstrip().startswith("{"):
        return [d.text for d in load_corpus(path).docs]
    return lines
