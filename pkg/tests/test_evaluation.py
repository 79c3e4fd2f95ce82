import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import top_k_brute
from ssae.activations import ActivationDataset
from ssae.evaluation import (activation_count_per_feature, decoder_cosine_distribution,
                             decoder_cosines, frequency_buckets, l0_metric, log_ratio_histogram,
                             logit_lens_coverage, pareto_auc, pareto_sweep,
                             pca_components_to_explain, rank_curve, recon_metrics,
                             token_entropy_and_threshold_curves, token_rank_error, top_k_tokens,
                             ParetoPoint)
from ssae.io_utils import read_csv
from ssae.sae import SaeParams, ShapeError, TrainConfig, encode
from ssae.synth import DictionarySpec, gen_dictionary_data


def ds_of(a, token_ids=None):
    return ActivationDataset.from_array(np.asarray(a, np.float32), token_ids=token_ids)


def identity_sae(n):
    """Perfect reconstruction for nonnegative inputs: f = x, x_hat = f."""
    return SaeParams(np.eye(n), np.zeros(n), np.eye(n), np.zeros(n))


def test_l0_and_recon_on_hand_example():
    p = identity_sae(3)
    ds = ds_of([[1, 0, 2], [0, 0, 0], [-1, 3, 0]])
    # activations: [1,0,2], [0,0,0], [0,3,0]
    assert l0_metric(p, ds) == pytest.approx(3 / 3)
    mse, fve = recon_metrics(p, ds)
    assert mse == pytest.approx(1 / 3)  # only the -1 is lost
    x = np.array([[1, 0, 2], [0, 0, 0], [-1, 3, 0]], float)
    var = ((x - x.mean(0)) ** 2).sum(1).mean()
    assert fve == pytest.approx(1 - (1 / 3) / var)
    assert l0_metric(p, ds, threshold=1.5) == pytest.approx(2 / 3)


def test_fve_none_for_constant_data():
    p = identity_sae(2)
    assert recon_metrics(p, ds_of([[1, 1], [1, 1]]))[1] is None


def test_activation_counts_and_rank_curve():
    p = identity_sae(3)
    ds = ds_of([[1, 0, 2], [1, 0, 0], [1, 3, 0]])
    counts = activation_count_per_feature(p, ds)
    assert counts.tolist() == [3, 1, 1]
    assert rank_curve([1, 5, 3]).tolist() == [5, 3, 1]


def test_top_k_ties_go_to_lower_id():
    logits = np.array([0.0, 2.0, 2.0, 1.0, 2.0])
    assert top_k_tokens(logits, 3).tolist() == [1, 2, 4]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=40), st.integers(1, 10))
def test_top_k_matches_sorting(vals, k):
    logits = np.array(vals, float)
    k = min(k, logits.size)
    assert top_k_tokens(logits, k).tolist() == top_k_brute(list(logits), k)


def signed_permutation(v, seed):
    rng = np.random.default_rng(seed)
    u = np.zeros((v, v))
    u[np.arange(v), rng.permutation(v)] = rng.choice([-1.0, 1.0], size=v)
    return u


def test_logit_lens_toy_orthonormal_vocab():
    v, chosen = 64, [3, 9, 17, 22, 30, 41, 50, 63]
    u = signed_permutation(v, 0)
    w_dec = u[chosen].T  # decoder columns equal chosen vocab rows
    p = SaeParams(np.zeros((8, v)), np.zeros(8), w_dec, np.zeros(v))
    freqs = np.arange(v, 0, -1, dtype=float)
    rep = logit_lens_coverage(p, u, freqs, top_k=10)
    logits = u @ w_dec
    brute = set()
    for j in range(8):
        brute.update(top_k_brute(list(logits[:, j]), 10))
    assert all(rep.covered[c] for c in chosen)
    assert set(np.flatnonzero(rep.covered).tolist()) == brute
    for j, c in enumerate(chosen):
        assert rep.top_tokens[j, 0] == c


def test_logit_lens_random_matches_brute_force():
    rng = np.random.default_rng(5)
    u = rng.normal(size=(50, 6))
    p = SaeParams.fresh(6, 7, seed=1)
    rep = logit_lens_coverage(p, u, rng.integers(0, 100, size=50), top_k=5)
    logits = u @ p.w_dec
    brute = {i for j in range(7) for i in top_k_brute(list(logits[:, j]), 5)}
    assert set(np.flatnonzero(rep.covered).tolist()) == brute
    assert rep.cum_token_share[-1] == pytest.approx(1) and rep.cum_covered_share[-1] == pytest.approx(1)
    assert np.all(np.diff(rep.cum_covered_share) >= 0)


def test_logit_lens_shape_errors():
    p = SaeParams.fresh(4, 3)
    with pytest.raises(ShapeError):
        logit_lens_coverage(p, np.zeros((10, 5)), np.ones(10))
    with pytest.raises(ShapeError):
        logit_lens_coverage(p, np.zeros((10, 4)), np.ones(9))
    with pytest.raises(ValueError):
        logit_lens_coverage(p, np.zeros((5, 4)), np.ones(5), top_k=10)


def test_frequency_buckets():
    idx, edges = frequency_buckets(np.array([0, 1, 10, 100, 1000]), n_buckets=3)
    assert idx.tolist() == [-1, 0, 1, 2, 2]
    np.testing.assert_allclose(edges, [1, 10, 100, 1000])
    idx, _ = frequency_buckets(np.array([5.0, 5.0]))
    assert idx.tolist() == [0, 0]


def test_log_ratio_histogram_and_csv(tmp_path):
    h = log_ratio_histogram(np.array([10, 1, 0]), np.array([1, 10, 0]), bins=4)
    assert h.density.sum() == pytest.approx(1)
    h.to_csv(tmp_path / "h.csv")
    header, rows = read_csv(tmp_path / "h.csv")
    assert header == ["bin_lo", "bin_hi", "density"] and len(rows) == 4


def test_decoder_cosines_exact_pairs():
    w = np.array([[1.0, 0.0, 1 / math.sqrt(2)], [0.0, 1.0, 1 / math.sqrt(2)]])
    p = SaeParams(np.zeros((3, 2)), np.zeros(3), w, np.zeros(2))
    np.testing.assert_allclose(sorted(decoder_cosines(p)), sorted([0.0, 1 / math.sqrt(2), 1 / math.sqrt(2)]))
    assert decoder_cosine_distribution(p, bins=10).density.sum() == pytest.approx(1)


def test_pca_components():
    # columns lying along one axis need one component
    w = np.zeros((3, 4))
    w[0] = [1, -1, 1, -1]
    p = SaeParams(np.zeros((4, 3)), np.zeros(4), w, np.zeros(3))
    assert pca_components_to_explain(p, 0.9).count == 1
    rng = np.random.default_rng(0)
    p = SaeParams.fresh(5, 200, seed=2)
    r = pca_components_to_explain(p, 0.99)
    assert 1 <= r.count <= 5 and not r.degenerate
    q = SaeParams(np.zeros((3, 2)), np.zeros(3), np.ones((2, 3)) / math.sqrt(2), np.zeros(2))
    assert pca_components_to_explain(q, 0.9).degenerate


def test_token_rank_error_buckets():
    p = identity_sae(1)
    # token 7 appears 3x (rank 1), token 2 twice (rank 2), token 5 once (rank 3)
    vals = [[-1], [-1], [-1], [-2], [-2], [1]]
    ds = ds_of(vals, token_ids=[7, 7, 7, 2, 2, 5])
    rows = token_rank_error(p, ds).rows
    assert rows[0][:5] == (0, 1, 1, 1, 3) and rows[0][5] == pytest.approx(1.0)
    assert rows[1][:5] == (1, 2, 3, 2, 3)
    assert rows[1][5] == pytest.approx((4 + 4 + 0) / 3)
    with pytest.raises(ValueError):
        token_rank_error(p, ds_of(vals))


def test_entropy_and_threshold_curves():
    p = identity_sae(2)
    ds = ds_of([[1, 1], [2, 0], [0, 0]])
    fs = token_entropy_and_threshold_curves(p, ds, thresholds=[0, 1.5])
    np.testing.assert_allclose(fs.entropy_bits, [1.0, 0.0])
    assert fs.n_silent_rows == 1
    np.testing.assert_allclose(fs.detected, [2 / 3, 1 / 3])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 20), st.integers(0, 10_000))
def test_metric_invariants(n, m, rows, seed):
    rng = np.random.default_rng(seed)
    p = SaeParams.fresh(n, m, seed=seed)
    ds = ds_of(rng.normal(size=(rows, n)))
    l0 = l0_metric(p, ds)
    assert 0 <= l0 <= m
    counts = activation_count_per_feature(p, ds)
    assert counts.sum() == pytest.approx(l0 * rows)
    assert recon_metrics(p, ds)[0] >= 0
    fs = token_entropy_and_threshold_curves(p, ds)
    assert np.all(fs.entropy_bits <= math.log2(m) + 1e-9)
    assert np.all(np.diff(fs.detected) <= 0)


def test_pareto_sweep_selection_and_zero_steps():
    data = gen_dictionary_data(DictionarySpec(n=6, k_true=4, n_samples=600, seed=1)).dataset
    base = SaeParams.fresh(6, 8, seed=0)
    val = data.subset(np.arange(400, 600))
    test = data.subset(np.arange(400))
    res = pareto_sweep(base, TrainConfig(0.1, steps=0, batch_size=50), [0.1, 1.0], data, val,
                       {"in_dist": test})
    assert [pt.best_step for pt in res.points] == [0, 0]
    x = np.asarray(test.values, float)
    pre = encode(base, x)
    assert res.points[0].l0 == pytest.approx(np.count_nonzero(pre > 0) / 400)
    res = pareto_sweep(base, TrainConfig(0.1, steps=40, lr=3e-3, batch_size=50), [0.01, 0.3],
                       data, val, {"in_dist": test, "ood": val}, eval_interval=10)
    assert len(res.points) == 4
    assert all(pt.best_step in (10, 20, 30, 40) for pt in res.points)


def test_pareto_auc_trapezoid():
    pts = [ParetoPoint(0, 1.0, 4.0, None, "s"), ParetoPoint(0, 3.0, 2.0, None, "s"),
           ParetoPoint(0, 5.0, 0.0, None, "s")]
    # piecewise linear from (1,4) to (5,0): area on [2,4] = 2 * 2 = 4
    assert pareto_auc(pts, 2.0, 4.0) == pytest.approx(4.0)
    assert pareto_auc(pts, 0.5, 4.0) is None
    assert pareto_auc(pts[:1], 1.0, 1.0) is None
