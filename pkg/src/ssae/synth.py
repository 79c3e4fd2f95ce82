"""Ground-truth generators and description-length arithmetic.

Gaussian draws use Box-Muller on the uniforms of a seeded
``numpy.random.default_rng(seed)`` (PCG64): for uniforms u1 in (0, 1] and
u2 in [0, 1), z0 = sqrt(-2 ln u1) cos(2 pi u2) and z1 = sqrt(-2 ln u1) sin(2 pi u2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .activations import ActivationDataset
from .sae import SaeParams, encode


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    size = int(np.prod(shape))
    pairs = (size + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(2.0 * np.pi * u2)
    z[1::2] = radius * np.sin(2.0 * np.pi * u2)
    return z[:size].reshape(shape)


# ---------------------------------------------------------------------------
# two-cluster mixture
# ---------------------------------------------------------------------------

@dataclass
class MixtureSpec:
    d: int = 16
    delta: float = 4.0
    sigma: float = 1.0
    q_a: float = 0.9
    n_total: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.n_total < 1:
            raise ValueError("d and n_total must be positive")
        if not (self.delta > 0 and self.sigma > 0):
            raise ValueError("delta and sigma must be positive")
        if not 0 < self.q_a < 1:
            raise ValueError("q_a must lie in (0, 1)")

    @property
    def n_a(self) -> int:
        return int(round(self.q_a * self.n_total))

    @property
    def n_b(self) -> int:
        return self.n_total - self.n_a


def gen_mixture(spec: MixtureSpec):
    """Majority cluster A at the origin, minority cluster B at delta * ones.

    Rows are shuffled; returns (dataset, labels) with labels an array of "A"/"B".
    """
    rng = np.random.default_rng(spec.seed)
    noise = spec.sigma * box_muller(rng, (spec.n_total, spec.d))
    labels = np.array(["A"] * spec.n_a + ["B"] * spec.n_b)
    x = noise
    x[spec.n_a:] += spec.delta
    order = rng.permutation(spec.n_total)
    ds = ActivationDataset.from_array(x[order], source_meta=f"mixture {spec}")
    return ds, labels[order]


# ---------------------------------------------------------------------------
# sparse dictionary data
# ---------------------------------------------------------------------------

@dataclass
class DictionarySpec:
    n: int = 16
    k_true: int = 8
    avg_active: float = 2.0
    coeff_scale: float = 1.0
    noise_sigma: float = 0.01
    n_samples: int = 10_000
    seed: int = 0
    orthogonal: bool = True

    def __post_init__(self):
        if self.n < 1 or self.k_true < 1 or self.n_samples < 1:
            raise ValueError("n, k_true and n_samples must be positive")
        if not 0 < self.avg_active <= self.k_true:
            raise ValueError("need 0 < avg_active <= k_true")
        if self.noise_sigma < 0 or not self.coeff_scale > 0:
            raise ValueError("bad noise_sigma or coeff_scale")


@dataclass
class DictionaryData:
    dataset: ActivationDataset
    true_dirs: np.ndarray  # (n, k_true), unit columns
    true_codes: np.ndarray  # (n_samples, k_true), nonnegative
    orthogonal: bool


def random_directions(rng: np.random.Generator, n: int, k: int, orthogonal: bool = True):
    """Unit columns; Gram-Schmidt (via QR) when k <= n. Returns (dirs, is_orthogonal)."""
    g = box_muller(rng, (n, k))
    if orthogonal and k <= n:
        q, r = np.linalg.qr(g)
        q *= np.sign(np.diag(r))  # unique, sign-fixed factorization
        return q, True
    return g / np.linalg.norm(g, axis=0, keepdims=True), False


def gen_dictionary_data(spec: DictionarySpec) -> DictionaryData:
    """x = sum_i f_i d_i + noise, supports Bernoulli(avg_active / k_true),
    coefficients coeff_scale * U(0.5, 1.5)."""
    rng = np.random.default_rng(spec.seed)
    dirs, ortho = random_directions(rng, spec.n, spec.k_true, spec.orthogonal)
    support = rng.random((spec.n_samples, spec.k_true)) < spec.avg_active / spec.k_true
    mags = spec.coeff_scale * (0.5 + rng.random((spec.n_samples, spec.k_true)))
    codes = np.where(support, mags, 0.0)
    x = codes @ dirs.T
    if spec.noise_sigma > 0:
        x = x + spec.noise_sigma * box_muller(rng, x.shape)
    ds = ActivationDataset.from_array(x, source_meta=f"dictionary {spec}")
    return DictionaryData(ds, dirs, codes, ortho)


def match_features(learned_dec, true_dirs):
    """For each true direction, the best |cosine| over learned columns.

    Returns (mean of best matches, per-direction best |cosine|, argmax column).
    """
    learned = np.asarray(learned_dec, dtype=np.float64)
    true = np.asarray(true_dirs, dtype=np.float64)
    if learned.shape[0] != true.shape[0]:
        raise ValueError(f"dimension mismatch: {learned.shape[0]} vs {true.shape[0]}")
    ln = np.linalg.norm(learned, axis=0)
    tn = np.linalg.norm(true, axis=0)
    cos = np.abs(true.T @ learned) / np.outer(tn, np.where(ln > 0, ln, 1.0))
    cos[:, ln == 0] = 0.0
    best = cos.max(axis=1)
    return float(best.mean()), best, cos.argmax(axis=1)


# ---------------------------------------------------------------------------
# description length
# ---------------------------------------------------------------------------

def binary_entropy(p: float) -> float:
    """H(p) in bits, with H(0) = H(1) = 0."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of range: {p}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def estimate_activation_probs(params: SaeParams, ds: ActivationDataset, labels,
                              threshold: float = 0.0, per_feature: bool = False):
    """Fraction of active (row, feature) entries among each cluster's rows.

    Activations above ``threshold`` count as the binary code 1.
    """
    labels = np.asarray(labels)
    if labels.shape != (ds.rows,):
        raise ValueError(f"{labels.size} labels for {ds.rows} rows")
    active = encode(params, ds.as_float64()) > threshold
    out, feats = [], {}
    for c in ("A", "B"):
        mask = labels == c
        if not mask.any():
            raise ValueError(f"cluster {c} is empty")
        out.append(float(active[mask].sum() / (mask.sum() * params.m)))
        feats[c] = active[mask].mean(axis=0)
    if per_feature:
        return out[0], out[1], feats
    return out[0], out[1]


@dataclass
class MdlReport:
    p_a: float
    p_b: float
    n_a: int
    n_b: int
    k: int
    dl_a: float  # bits per cluster-A point
    dl_b: float
    dl_total_data: float

    HEADER = ("p_a", "p_b", "n_a", "n_b", "k", "dl_a", "dl_b", "dl_total_data")

    def row(self):
        return (self.p_a, self.p_b, self.n_a, self.n_b, self.k,
                self.dl_a, self.dl_b, self.dl_total_data)


def mdl_report(p_a: float, p_b: float, n_a: int, n_b: int, k: int) -> MdlReport:
    if n_a < 0 or n_b < 0 or k < 1:
        raise ValueError("counts must be nonnegative and k >= 1")
    dl_a = k * binary_entropy(p_a)
    dl_b = k * binary_entropy(p_b)
    return MdlReport(p_a, p_b, n_a, n_b, k, dl_a, dl_b, n_a * dl_a + n_b * dl_b)


def delta_dl(report_erm: MdlReport, report_term: MdlReport) -> float:
    """DL_erm - DL_term; positive when the second model encodes the data in fewer bits."""
    return report_erm.dl_total_data - report_term.dl_total_data


@dataclass
class MdlComparison:
    delta_h_a: float
    delta_h_b: float
    delta_dl: float
    entropy_ratio: float  # delta_h_b / |delta_h_a|
    count_ratio: float  # n_a / n_b


def compare_mdl(report_erm: MdlReport, report_term: MdlReport) -> MdlComparison:
    dha = binary_entropy(report_erm.p_a) - binary_entropy(report_term.p_a)
    dhb = binary_entropy(report_erm.p_b) - binary_entropy(report_term.p_b)
    ratio = dhb / abs(dha) if dha != 0 else math.inf
    count_ratio = report_erm.n_a / report_erm.n_b if report_erm.n_b else math.inf
    return MdlComparison(dha, dhb, delta_dl(report_erm, report_term), ratio, count_ratio)
