"""SAE quality and tail-concept metrics.

Every report is plain data plus a CSV writer; plotting is left to the
consumer. Reconstruction MSE and fraction of variance explained stand in
for spliced-in perplexity, which needs a language model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .io_utils import write_csv
from .sae import SaeParams, ShapeError, TrainConfig, decode, encode, per_example_losses, train

CHUNK = 8192
LN2 = math.log(2.0)


def _chunks(ds, chunk: int = CHUNK):
    for start in range(0, ds.rows, chunk):
        yield start, np.asarray(ds.values[start:start + chunk], dtype=np.float64)


def _require_rows(ds):
    if ds.rows == 0:
        raise ValueError("dataset is empty")


# ---------------------------------------------------------------------------
# sparsity and fidelity
# ---------------------------------------------------------------------------

def l0_metric(params: SaeParams, ds, threshold: float = 0.0) -> float:
    """Mean number of features with activation above ``threshold`` per row."""
    _require_rows(ds)
    total = 0
    for _, x in _chunks(ds):
        total += int(np.count_nonzero(encode(params, x) > threshold))
    return total / ds.rows


def recon_metrics(params: SaeParams, ds) -> tuple[float, float | None]:
    """(mean squared reconstruction error, fraction of variance explained).

    The second value is None for a dataset with zero variance.
    """
    _require_rows(ds)
    err = 0.0
    s = np.zeros(ds.dim)
    sq = 0.0
    for _, x in _chunks(ds):
        r = decode(params, encode(params, x)) - x
        err += float(np.einsum("bi,bi->", r, r))
        s += x.sum(axis=0)
        sq += float(np.einsum("bi,bi->", x, x))
    mse = err / ds.rows
    mean = s / ds.rows
    var = sq / ds.rows - float(mean @ mean)
    # recompute exactly when the shortcut is numerically doubtful
    if var <= 1e-12 * max(sq / ds.rows, 1.0):
        var = 0.0
        for _, x in _chunks(ds):
            c = x - mean
            var += float(np.einsum("bi,bi->", c, c))
        var /= ds.rows
    if var == 0.0:
        return mse, None
    return mse, 1.0 - mse / var


def per_row_recon_error(params: SaeParams, ds) -> np.ndarray:
    out = np.empty(ds.rows)
    for start, x in _chunks(ds):
        r = decode(params, encode(params, x)) - x
        out[start:start + x.shape[0]] = np.einsum("bi,bi->b", r, r)
    return out


# ---------------------------------------------------------------------------
# logit lens
# ---------------------------------------------------------------------------

def top_k_tokens(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits; ties go to the lower token id."""
    order = np.lexsort((np.arange(logits.size), -logits))
    return order[:k]


def frequency_buckets(freqs: np.ndarray, n_buckets: int = 10):
    """Assign each token to one of ``n_buckets`` log-spaced frequency ranges.

    Tokens with frequency 0 get bucket -1. Returns (bucket index per token, edges).
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    pos = freqs[freqs > 0]
    idx = np.full(freqs.size, -1, dtype=np.int64)
    if pos.size == 0:
        return idx, np.array([0.0, 0.0])
    lo, hi = float(pos.min()), float(pos.max())
    if lo == hi:
        edges = np.array([lo, hi])
    else:
        edges = np.geomspace(lo, hi, n_buckets + 1)
        edges[0], edges[-1] = lo, hi
    nb = edges.size - 1
    b = np.searchsorted(edges, freqs[freqs > 0], side="right") - 1
    idx[freqs > 0] = np.clip(b, 0, nb - 1)
    return idx, edges


@dataclass
class CoverageReport:
    covered: np.ndarray  # bool per token
    top_tokens: np.ndarray  # (M, top_k)
    buckets: list  # (bucket, freq_lo, freq_hi, n_tokens, n_covered, proportion)
    cum_token_share: np.ndarray
    cum_covered_share: np.ndarray

    BUCKET_HEADER = ("bucket", "freq_lo", "freq_hi", "n_tokens", "n_covered", "proportion")
    CURVE_HEADER = ("cum_token_share", "cum_covered_share")

    def to_csv(self, bucket_path, curve_path) -> None:
        write_csv(bucket_path, self.BUCKET_HEADER, self.buckets)
        write_csv(curve_path, self.CURVE_HEADER,
                  zip(self.cum_token_share.tolist(), self.cum_covered_share.tolist()))


def logit_lens_coverage(params: SaeParams, unembedding, token_freqs, top_k: int = 10,
                        n_buckets: int = 10) -> CoverageReport:
    """Which tokens appear among the top-k logits of at least one decoder direction.

    The cumulative curve orders tokens by descending frequency (ties by id):
    x is the running share of token occurrences, y the running share of
    occurrences of covered tokens, normalized to end at 1.
    """
    u = np.asarray(unembedding, dtype=np.float64)
    freqs = np.asarray(token_freqs, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != params.n:
        raise ShapeError(f"unembedding shape {u.shape} incompatible with n={params.n}")
    v = u.shape[0]
    if freqs.shape != (v,):
        raise ShapeError(f"{freqs.size} token frequencies for vocabulary of {v}")
    if v < top_k:
        raise ValueError(f"vocabulary size {v} < top_k {top_k}")

    logits = u @ params.w_dec  # (V, M)
    top = np.stack([top_k_tokens(logits[:, j], top_k) for j in range(params.m)])
    covered = np.zeros(v, dtype=bool)
    covered[top.ravel()] = True

    bidx, edges = frequency_buckets(freqs, n_buckets)
    buckets = []
    if np.any(bidx == -1):
        m = bidx == -1
        buckets.append((-1, 0.0, 0.0, int(m.sum()), int(covered[m].sum()),
                        float(covered[m].mean())))
    for b in range(edges.size - 1):
        m = bidx == b
        n = int(m.sum())
        buckets.append((b, float(edges[b]), float(edges[b + 1]), n, int(covered[m].sum()),
                        float(covered[m].mean()) if n else float("nan")))

    order = np.lexsort((np.arange(v), -freqs))
    w = freqs[order] if freqs.sum() > 0 else np.ones(v)
    cov_w = w * covered[order]
    if cov_w.sum() == 0:  # covered tokens all have zero frequency
        w = np.ones(v)
        cov_w = covered[order].astype(np.float64)
    x = np.cumsum(w) / w.sum()
    y = np.cumsum(cov_w) / cov_w.sum()
    return CoverageReport(covered, top, buckets, x, y)


# ---------------------------------------------------------------------------
# feature activation statistics
# ---------------------------------------------------------------------------

def activation_count_per_feature(params: SaeParams, ds, threshold: float = 0.0) -> np.ndarray:
    counts = np.zeros(params.m, dtype=np.int64)
    for _, x in _chunks(ds):
        counts += np.count_nonzero(encode(params, x) > threshold, axis=0)
    return counts


def rank_curve(counts) -> np.ndarray:
    return np.sort(np.asarray(counts))[::-1]


@dataclass
class Histogram:
    values: np.ndarray
    edges: np.ndarray
    density: np.ndarray  # mass per bin, sums to 1

    def to_csv(self, path) -> None:
        write_csv(path, ("bin_lo", "bin_hi", "density"),
                  zip(self.edges[:-1].tolist(), self.edges[1:].tolist(), self.density.tolist()))


def _histogram(values, bins, value_range=None) -> Histogram:
    values = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    total = counts.sum()
    density = counts / total if total else counts.astype(np.float64)
    return Histogram(values, edges, density)


def log_ratio_histogram(counts_model, counts_baseline, bins=20) -> Histogram:
    """Histogram of log2((c_model + 1) / (c_baseline + 1)) over features."""
    cm = np.asarray(counts_model, dtype=np.float64)
    cb = np.asarray(counts_baseline, dtype=np.float64)
    if cm.shape != cb.shape:
        raise ShapeError(f"count vectors differ in length: {cm.shape} vs {cb.shape}")
    return _histogram(np.log2((cm + 1.0) / (cb + 1.0)), bins)


def decoder_cosines(params: SaeParams, max_exact: int = 2048, n_samples: int = 200_000,
                    seed: int = 0) -> np.ndarray:
    """Cosines of distinct decoder-column pairs; all pairs up to ``max_exact`` features."""
    m = params.m
    if m < 2:
        raise ValueError("need at least two features")
    w = params.w_dec / np.linalg.norm(params.w_dec, axis=0, keepdims=True)
    if m <= max_exact:
        iu, ju = np.triu_indices(m, k=1)
        return (w.T @ w)[iu, ju]
    rng = np.random.default_rng(seed)
    i = rng.integers(0, m, n_samples)
    j = rng.integers(0, m - 1, n_samples)
    j = np.where(j >= i, j + 1, j)  # distinct pairs
    return np.einsum("ki,ki->i", w[:, i], w[:, j])


def decoder_cosine_distribution(params: SaeParams, bins: int = 50, **kw) -> Histogram:
    return _histogram(decoder_cosines(params, **kw), bins, (-1.0, 1.0))


@dataclass
class PcaResult:
    count: int
    degenerate: bool
    cumulative_ratio: np.ndarray


def pca_components_to_explain(params: SaeParams, variance_threshold: float = 0.9) -> PcaResult:
    """Fewest principal components of the decoder columns (as M points in R^n)
    whose variance share reaches ``variance_threshold``."""
    if not 0 < variance_threshold < 1:
        raise ValueError("variance_threshold must lie in (0, 1)")
    if params.m < 2:
        raise ValueError("need at least two features")
    pts = params.w_dec.T
    c = pts - pts.mean(axis=0)
    cov = c.T @ c / (params.m - 1)
    eig = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = eig.sum()
    if total <= 1e-12 * max(1.0, float(np.abs(pts).max()) ** 2):
        return PcaResult(0, True, np.zeros_like(eig))
    ratio = np.cumsum(eig) / total
    count = int(np.searchsorted(ratio, variance_threshold - 1e-12, side="left")) + 1
    return PcaResult(min(count, eig.size), False, ratio)


@dataclass
class RankErrorCurve:
    rows: list  # (bucket, rank_lo, rank_hi, n_tokens, n_rows, mean_error, var_error)

    HEADER = ("bucket", "rank_lo", "rank_hi", "n_tokens", "n_rows", "mean_error", "var_error")

    def to_csv(self, path) -> None:
        write_csv(path, self.HEADER, self.rows)


def token_rank_error(params: SaeParams, ds, token_freqs=None) -> RankErrorCurve:
    """Per-row reconstruction error grouped by the frequency rank of the row's token.

    Ranks (1 = most frequent, ties by token id) come from ``token_freqs`` when
    given, else from counts in ``ds``. Buckets double in width: ranks 1, 2-3, 4-7, ...
    """
    if ds.token_ids is None:
        raise ValueError("token_rank_error needs token ids")
    _require_rows(ds)
    tids = np.asarray(ds.token_ids, dtype=np.int64)
    errs = per_row_recon_error(params, ds)
    vocab, inverse = np.unique(tids, return_inverse=True)
    if token_freqs is None:
        freq = np.bincount(inverse).astype(np.float64)
    else:
        freq = np.asarray(token_freqs, dtype=np.float64)[vocab]
    order = np.lexsort((vocab, -freq))
    rank_of = np.empty(vocab.size, dtype=np.int64)
    rank_of[order] = np.arange(1, vocab.size + 1)
    row_rank = rank_of[inverse]
    bucket = np.floor(np.log2(row_rank)).astype(np.int64)
    tok_bucket = np.floor(np.log2(rank_of)).astype(np.int64)
    rows = []
    for b in range(int(bucket.max()) + 1):
        m = bucket == b
        if not m.any():
            continue
        e = errs[m]
        hi = min(2 ** (b + 1) - 1, vocab.size)
        rows.append((b, 2 ** b, hi, int((tok_bucket == b).sum()), int(m.sum()),
                     float(e.mean()), float(e.var())))
    return RankErrorCurve(rows)


@dataclass
class FeatureStats:
    counts: np.ndarray
    entropy_nats: np.ndarray  # per row with any activation
    n_silent_rows: int
    max_activation: np.ndarray  # per row
    thresholds: np.ndarray
    detected: np.ndarray  # fraction of rows with max activation > threshold

    @property
    def entropy_bits(self) -> np.ndarray:
        return self.entropy_nats / LN2

    def entropy_csv(self, path) -> None:
        write_csv(path, ("row_index", "entropy_bits"),
                  zip(range(self.entropy_nats.size), self.entropy_bits.tolist()))

    def threshold_csv(self, path) -> None:
        write_csv(path, ("threshold", "proportion_detected"),
                  zip(self.thresholds.tolist(), self.detected.tolist()))


def token_entropy_and_threshold_curves(params: SaeParams, ds, thresholds=None,
                                       threshold: float = 0.0) -> FeatureStats:
    """Entropy of each row's normalized activation vector and the detection curve.

    Rows with no activation are left out of the entropy array and counted.
    """
    _require_rows(ds)
    ents, maxes = [], []
    counts = np.zeros(params.m, dtype=np.int64)
    silent = 0
    for _, x in _chunks(ds):
        f = encode(params, x)
        counts += np.count_nonzero(f > threshold, axis=0)
        maxes.append(f.max(axis=1))
        s = f.sum(axis=1)
        live = s > 0
        silent += int((~live).sum())
        p = f[live] / s[live, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0, p * np.log(p), 0.0)
        ents.append(np.maximum(-plogp.sum(axis=1), 0.0))
    max_act = np.concatenate(maxes)
    if thresholds is None:
        top = float(max_act.max()) if max_act.size else 0.0
        thresholds = np.linspace(0.0, top, 21)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    detected = np.array([(max_act > t).mean() for t in thresholds])
    return FeatureStats(counts, np.concatenate(ents), silent, max_act, thresholds, detected)


# ---------------------------------------------------------------------------
# Pareto sweep
# ---------------------------------------------------------------------------

@dataclass
class ParetoPoint:
    lam: float
    l0: float
    recon_mse: float
    frac_variance_explained: float | None
    split: str
    best_step: int = 0
    val_total_loss: float = float("nan")

    HEADER = ("lambda", "split", "l0", "recon_mse", "frac_variance_explained",
              "best_step", "val_total_loss")

    def row(self):
        fve = "" if self.frac_variance_explained is None else self.frac_variance_explained
        return (self.lam, self.split, self.l0, self.recon_mse, fve, self.best_step,
                self.val_total_loss)


def mean_total_loss(params: SaeParams, ds, l1_coeff: float) -> float:
    tot = 0.0
    for _, x in _chunks(ds):
        tot += float(per_example_losses(params, x, l1_coeff)[2].sum())
    return tot / ds.rows


@dataclass
class SweepResult:
    points: list
    models: dict = field(default_factory=dict)  # lambda -> selected params
    errors: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        write_csv(path, ParetoPoint.HEADER, (p.row() for p in self.points))


def pareto_sweep(base_params: SaeParams, template: TrainConfig, lambdas, train_ds, val_ds,
                 test_splits: dict, eval_interval: int = 0) -> SweepResult:
    """Finetune ``base_params`` once per lambda, keep the checkpoint with the lowest
    validation total loss, and measure it on every test split."""
    lambdas = [float(x) for x in lambdas]
    if not lambdas:
        raise ValueError("need at least one lambda")
    result = SweepResult([])
    for lam in lambdas:
        cfg = replace(template, l1_coeff=lam)
        best = {"loss": math.inf, "step": 0, "params": base_params}
        if cfg.steps == 0:
            best["loss"] = mean_total_loss(base_params, val_ds, lam)

        def keep_best(step, params, cur_lam, lam=lam, best=best):
            v = mean_total_loss(params, val_ds, lam)
            if v < best["loss"]:
                best.update(loss=v, step=step, params=params.copy())

        try:
            train(cfg, train_ds, init=base_params, callback=keep_best,
                  callback_interval=eval_interval)
        except Exception as e:
            raise type(e)(f"lambda={lam}: {e}") from e
        chosen = best["params"]
        result.models[lam] = chosen
        for name, ds in test_splits.items():
            mse, fve = recon_metrics(chosen, ds)
            result.points.append(ParetoPoint(lam, l0_metric(chosen, ds), mse, fve, name,
                                             best["step"], best["loss"]))
    return result


def pareto_auc(points, l0_lo: float, l0_hi: float, split: str | None = None) -> float | None:
    """Trapezoidal area under recon_mse vs l0 on [l0_lo, l0_hi] using linear
    interpolation between sweep points; None when the sweep does not span the range."""
    pts = [p for p in points if split is None or p.split == split]
    if len(pts) < 2:
        return None
    xs = np.array([p.l0 for p in pts])
    ys = np.array([p.recon_mse for p in pts])
    o = np.argsort(xs, kind="stable")
    xs, ys = xs[o], ys[o]
    if xs[0] > l0_lo or xs[-1] < l0_hi:
        return None
    grid = np.union1d(xs[(xs > l0_lo) & (xs < l0_hi)], [l0_lo, l0_hi])
    vals = np.interp(grid, xs, ys)
    return float(np.sum((grid[1:] - grid[:-1]) * (vals[1:] + vals[:-1]) / 2.0))
