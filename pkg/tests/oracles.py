"""Independent brute-force oracles shared by the test modules.

Nothing here imports the package's math: each function re-evaluates a
formula directly (loops, long double, plain Python) so tests compare two
separate derivations.
"""

import math
import re
from collections import Counter

import numpy as np


def sae_loss_ld(w_enc, b_enc, w_dec, b_dec, batch, l1, weights=None):
    """Weighted SAE objective in long double, written with explicit loops."""
    ld = np.longdouble
    x = np.asarray(batch, dtype=ld)
    w_enc, b_enc = np.asarray(w_enc, ld), np.asarray(b_enc, ld)
    w_dec, b_dec = np.asarray(w_dec, ld), np.asarray(b_dec, ld)
    bsz = x.shape[0]
    wts = [ld(1) / bsz] * bsz if weights is None else [ld(w) for w in weights]
    total = ld(0)
    for b in range(bsz):
        f = np.maximum(w_enc @ x[b] + b_enc, ld(0))
        xh = w_dec @ f + b_dec
        total += wts[b] * (np.sum((x[b] - xh) ** 2) + ld(l1) * np.sum(np.abs(f)))
    return total


def fd_gradient(arrays, batch, l1, h=1e-6, weights=None):
    """Central differences over every coordinate of (w_enc, b_enc, w_dec, b_dec).

    Returns a list of gradient arrays plus a list of masks marking coordinates
    that are unsafe to compare: the perturbation flips some ReLU, or some
    pre-activation sits within 1e-7 of the kink.
    """
    base = [np.array(a, dtype=np.longdouble) for a in arrays]
    x = np.asarray(batch, dtype=np.longdouble)

    def pattern(ws):
        return (x @ ws[0].T + ws[1]) > 0

    pre0 = x @ base[0].T + base[1]
    near_kink = bool(np.any(np.abs(pre0) < 1e-7))
    p0 = pattern(base)
    grads, masks = [], []
    for ai, a in enumerate(base):
        g = np.zeros(a.shape, dtype=np.float64)
        mask = np.zeros(a.shape, dtype=bool)
        for idx in np.ndindex(a.shape):
            plus = [c.copy() for c in base]
            minus = [c.copy() for c in base]
            plus[ai][idx] += h
            minus[ai][idx] -= h
            flip = np.any(pattern(plus) != p0) or np.any(pattern(minus) != p0)
            mask[idx] = flip or near_kink
            lp = sae_loss_ld(*plus, batch, l1, weights)
            lm = sae_loss_ld(*minus, batch, l1, weights)
            g[idx] = float((lp - lm) / (2 * np.longdouble(h)))
        grads.append(g)
        masks.append(mask)
    return grads, masks


def tilted_loss_direct(losses, t):
    """(1/t) log((1/N) sum exp(t L)) evaluated with math.fsum, no shifting."""
    n = len(losses)
    return math.log(math.fsum(math.exp(t * v) for v in losses) / n) / t


# --- retrieval -------------------------------------------------------------

def _terms(text):
    return re.findall(r"[^\W_]+", text.lower())


def bm25_oracle(docs, queries, k1=1.2, b=0.75):
    """Okapi BM25 with the +1-smoothed idf, summed over the concatenated query
    terms (repeats counted). ``docs`` is a dict id -> text. Returns a ranked
    list of (id, score), ties by ascending id."""
    toks = {i: _terms(t) for i, t in docs.items()}
    n = len(docs)
    avgdl = sum(len(v) for v in toks.values()) / n
    q = Counter()
    for s in queries:
        q.update(_terms(s))
    out = []
    for i, words in toks.items():
        tf = Counter(words)
        s = 0.0
        for term in sorted(q):
            df = sum(1 for w in toks.values() if term in w)
            if df == 0:
                continue
            idf = math.log((n - df + 0.5) / (df + 0.5) + 1)
            f = tf[term]
            s += q[term] * idf * f * (k1 + 1) / (f + k1 * (1 - b + b * len(words) / avgdl))
        out.append((i, s))
    return sorted(out, key=lambda p: (-p[1], p[0]))


def dense_oracle(seed_vecs, cand):
    """Cosine to the mean of unit-normalized seed vectors; ``cand`` is id -> vector."""
    units = [np.asarray(v, float) / math.sqrt(sum(c * c for c in v)) for v in seed_vecs]
    c = sum(units) / len(units)
    c = c / math.sqrt(sum(v * v for v in c))
    out = []
    for i, v in cand.items():
        v = np.asarray(v, float)
        out.append((i, float(sum(a * b for a, b in zip(v, c)) / math.sqrt(sum(a * a for a in v)))))
    return sorted(out, key=lambda p: (-p[1], p[0]))


def flat_grad_oracle(w_enc, b_enc, w_dec, b_dec, rows, l1):
    """Mean per-row gradient, derived by hand one example at a time, flattened
    in the order w_enc, b_enc, w_dec, b_dec."""
    acc = None
    for x in np.asarray(rows, float):
        pre = w_enc @ x + b_enc
        f = np.maximum(pre, 0)
        r = w_dec @ f + b_dec - x
        gw_dec = 2 * np.outer(r, f)
        gb_dec = 2 * r
        d = (2 * w_dec.T @ r + l1) * (pre > 0)
        parts = [np.outer(d, x).ravel(), d, gw_dec.ravel(), gb_dec]
        v = np.concatenate(parts)
        acc = v if acc is None else acc + v
    return acc / len(rows)


# --- logit lens ------------------------------------------------------------

def top_k_brute(logits, k):
    """Top-k token ids by sorting (value desc, id asc) with Python's sort."""
    return sorted(range(len(logits)), key=lambda i: (-logits[i], i))[:k]


# --- toy corpora -----------------------------------------------------------

_WORDS = ("quark gluon boson lepton photon field gauge symmetry lattice spin "
          "the a of and in on with for is was river bank money loan tree leaf").split()


def toy_corpus(n_docs=50, seed=0):
    """Random short docs over a small vocabulary, with punctuation and case noise."""
    rng = np.random.default_rng(seed)
    texts = []
    for _ in range(n_docs):
        k = int(rng.integers(3, 25))
        words = [_WORDS[int(i)] for i in rng.integers(0, len(_WORDS), size=k)]
        if rng.random() < 0.3:
            words[0] = words[0].capitalize() + ","
        texts.append(" ".join(words) + ("." if rng.random() < 0.5 else ""))
    return texts


def two_stage_oracle(texts, seed_texts, fraction, budget, grads=None):
    """BM25 -> keep ceil(fraction * N) -> optional stable rerank by the given
    per-doc scores -> accumulate whitespace tokens until the budget is met."""
    ranked = bm25_oracle(dict(enumerate(texts)), seed_texts)
    keep = max(1, math.ceil(fraction * len(ranked)))
    ranked = ranked[:keep]
    if grads is not None:
        ranked = sorted(((i, grads[i]) for i, _ in ranked), key=lambda p: -p[1])
    out, total = [], 0
    for i, s in ranked:
        if total >= budget:
            break
        total += len(texts[i].split())
        out.append(i)
    return out
