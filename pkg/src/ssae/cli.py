"""Command-line entry point: ``ssae <command> ...``.

Exit codes::

    0  success
    1  unexpected internal error
    2  usage or config error
    3  missing input file
    4  malformed input (format / alignment)
    5  numeric or training failure
    6  LLM endpoint failure

On failure one line goes to stderr: ``error category=<name> message=<text>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from .activations import ActivationDataset, open_dataset, split, write_dataset
from .autointerp import LlmError, ParseError, TokenTexts, run_autointerp
from .evaluation import (activation_count_per_feature, decoder_cosine_distribution,
                         l0_metric, log_ratio_histogram, logit_lens_coverage,
                         pareto_sweep, pca_components_to_explain, rank_curve, recon_metrics,
                         token_entropy_and_threshold_curves, token_rank_error)
from .io_utils import AlignmentError, FormatError, atomic_write_text, read_csv, write_csv
from .sae import (NumericError, SaeParams, ShapeError, TrainingError, load_checkpoint,
                  save_checkpoint, train)
from .selection import (EmbeddingSet, load_corpus, load_embeddings, load_seed_texts,
                        tracin_score, two_stage_select)
from .synth import (DictionarySpec, MixtureSpec, compare_mdl, estimate_activation_probs,
                    gen_dictionary_data, gen_mixture, mdl_report)

log = logging.getLogger("ssae")

EXIT = {"config": 2, "missing_file": 3, "format": 4, "numeric": 5, "llm": 6, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _write_config(out_dir: Path, cfg: dict) -> None:
    atomic_write_text(out_dir / "resolved_config.yaml", C.dump(cfg))


def _resolve(args, extra=None) -> dict:
    return C.resolve(getattr(args, "config", None), getattr(args, "set", None) or (), extra)


def _out_dir(cfg: dict, args) -> Path:
    d = Path(args.out_dir) if getattr(args, "out_dir", None) else Path(cfg["output_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _datasets(cfg: dict):
    path = cfg["data"]["path"]
    if not path:
        raise C.ConfigError("data.path is required")
    ds = open_dataset(path)
    train_ds, val_ds, test_ds = split(ds, cfg["data"]["split"], C.child_seed(cfg["seed"], "split"))
    splits = {"in_dist": test_ds}
    if cfg["data"]["ood_path"]:
        splits["out_of_dist"] = open_dataset(cfg["data"]["ood_path"])
    return ds, train_ds, val_ds, splits


def _init_params(cfg: dict, dim: int, seed: int) -> SaeParams:
    if cfg["model"]["init"]:
        return load_checkpoint(cfg["model"]["init"])
    return SaeParams.fresh(dim, int(cfg["model"]["m"]), seed=seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> None:
    out = Path(args.out)
    seed = args.seed
    if args.kind == "mixture":
        spec = MixtureSpec(d=args.d, delta=args.delta, sigma=args.sigma, q_a=args.q_a,
                           n_total=args.n_total, seed=seed)
        ds, labels = gen_mixture(spec)
        write_dataset(out, ds)
        write_csv(str(out) + ".labels.csv", ("row", "label"), enumerate(labels.tolist()))
    else:
        spec = DictionarySpec(n=args.n, k_true=args.k_true, avg_active=args.avg_active,
                              coeff_scale=args.coeff_scale, noise_sigma=args.noise_sigma,
                              n_samples=args.n_samples, seed=seed)
        data = gen_dictionary_data(spec)
        write_dataset(out, data.dataset)
        write_dataset(str(out) + ".dirs", ActivationDataset.from_array(data.true_dirs.T))
        if not data.orthogonal:
            log.warning("k_true > n: true directions are not orthogonal")
    print(f"wrote {out}")


def cmd_train(args) -> None:
    cfg = _resolve(args, {"data": {"path": args.data}} if args.data else None)
    out = _out_dir(cfg, args)
    tcfg = C.train_config(cfg)
    ds = open_dataset(cfg["data"]["path"]) if cfg["data"]["path"] else None
    if ds is None:
        raise C.ConfigError("data.path is required")
    init = _init_params(cfg, ds.dim, tcfg.seed)
    _write_config(out, cfg)
    t0 = time.time()
    params, tlog = train(tcfg, ds, init=init)
    save_checkpoint(params, out / "checkpoint.sae")
    tlog.to_csv(out / "training_log.csv")
    print(f"trained {tcfg.steps} steps in {time.time() - t0:.1f}s -> {out / 'checkpoint.sae'}")


def cmd_sweep(args) -> None:
    extra = {}
    if args.lambdas:
        extra["sweep"] = {"lambdas": [float(x) for x in args.lambdas.split(",")]}
    if args.data:
        extra["data"] = {"path": args.data}
    cfg = _resolve(args, extra)
    if not cfg["sweep"]["lambdas"]:
        raise C.ConfigError("sweep.lambdas is empty")
    out = _out_dir(cfg, args)
    tcfg = C.train_config(cfg)
    _, train_ds, val_ds, splits = _datasets(cfg)
    base = _init_params(cfg, train_ds.dim, tcfg.seed)
    _write_config(out, cfg)
    res = pareto_sweep(base, tcfg, cfg["sweep"]["lambdas"], train_ds, val_ds, splits,
                       eval_interval=int(cfg["sweep"]["eval_interval"]))
    res.to_csv(out / "pareto.csv")
    for lam, p in res.models.items():
        save_checkpoint(p, out / f"checkpoint_lambda_{lam:g}.sae")
    print(f"wrote {out / 'pareto.csv'} ({len(res.points)} rows)")


def _read_token_freqs(path, vocab: int) -> np.ndarray:
    header, rows = read_csv(path)
    if header[:2] != ["token_id", "frequency"]:
        raise FormatError(f"{path}: expected header token_id,frequency")
    freqs = np.zeros(vocab)
    for r in rows:
        tid = int(r[0])
        if not 0 <= tid < vocab:
            raise AlignmentError(f"{path}: token id {tid} outside vocabulary of {vocab}")
        freqs[tid] = float(r[1])
    return freqs


def cmd_eval(args) -> None:
    extra = {"eval": {k: v for k, v in (("unembedding", args.unembedding),
                                        ("token_freqs", args.token_freqs),
                                        ("baseline", args.baseline)) if v}}
    cfg = _resolve(args, extra)
    out = _out_dir(cfg, args)
    ev = cfg["eval"]
    params = load_checkpoint(args.checkpoint)
    ds = open_dataset(args.data)
    _write_config(out, cfg)
    thr = float(ev["threshold"])

    mse, fve = recon_metrics(params, ds)
    write_csv(out / "metrics.csv", ("l0", "recon_mse", "frac_variance_explained", "rows"),
              [(l0_metric(params, ds, thr), mse, "" if fve is None else fve, ds.rows)])
    counts = activation_count_per_feature(params, ds, thr)
    write_csv(out / "feature_counts.csv", ("feature", "count"), enumerate(counts.tolist()))
    write_csv(out / "rank_curve.csv", ("rank", "count"),
              enumerate(rank_curve(counts).tolist(), 1))
    if params.m >= 2:
        decoder_cosine_distribution(params, seed=C.child_seed(cfg["seed"], "cosine")).to_csv(
            out / "decoder_cosines.csv")
        rows = []
        for thr_v in sorted({0.5, 0.8, 0.9, 0.95, 0.99, float(ev["variance_threshold"])}):
            r = pca_components_to_explain(params, thr_v)
            rows.append((thr_v, r.count, int(r.degenerate)))
        write_csv(out / "pca_components.csv", ("variance_threshold", "components", "degenerate"),
                  rows)
    stats = token_entropy_and_threshold_curves(params, ds, threshold=thr)
    stats.entropy_csv(out / "token_entropy.csv")
    stats.threshold_csv(out / "threshold_curve.csv")
    if ds.token_ids is not None:
        token_rank_error(params, ds).to_csv(out / "token_rank_error.csv")
    if ev["unembedding"]:
        u = open_dataset(ev["unembedding"]).as_float64()
        if not ev["token_freqs"]:
            raise C.ConfigError("eval.token_freqs is required with eval.unembedding")
        freqs = _read_token_freqs(ev["token_freqs"], u.shape[0])
        logit_lens_coverage(params, u, freqs, int(ev["top_k"]), int(ev["n_buckets"])).to_csv(
            out / "coverage_buckets.csv", out / "coverage_curve.csv")
    if ev["baseline"]:
        base = load_checkpoint(ev["baseline"])
        log_ratio_histogram(counts, activation_count_per_feature(base, ds, thr)).to_csv(
            out / "log_ratio_histogram.csv")
    print(f"wrote reports to {out}")


def cmd_select(args) -> None:
    extra = {"selection": {k: v for k, v in (
        ("method", args.method), ("filter_fraction", args.filter_fraction),
        ("token_budget", args.budget), ("rerank", True if args.rerank else None)) if v is not None}}
    cfg = _resolve(args, extra)
    scfg = C.selection_config(cfg)
    corpus = load_corpus(args.corpus)
    kw = {}
    if scfg.method == "bm25":
        if not args.seeds:
            raise C.ConfigError("--seeds is required for bm25 selection")
        kw["seed_texts"] = load_seed_texts(args.seeds)
    else:
        if not (args.seed_embeddings and args.cand_embeddings):
            raise C.ConfigError("dense selection needs --seed-embeddings and --cand-embeddings")
        kw["seed_emb"] = load_embeddings(args.seed_embeddings)
        kw["cand_emb"] = load_embeddings(args.cand_embeddings)
    if scfg.rerank:
        if not (args.checkpoint and args.activations and args.seed_activations):
            raise C.ConfigError(
                "reranking needs --checkpoint, --activations and --seed-activations")
        kw["params"] = load_checkpoint(args.checkpoint)
        kw["activations"] = open_dataset(args.activations)
        kw["seed_rows"] = open_dataset(args.seed_activations).as_float64()
        kw["l1_coeff"] = (float(args.l1_coeff) if args.l1_coeff is not None
                          else float(cfg["train"]["l1_coeff"]))
    res = two_stage_select(corpus, scfg, **kw)
    res.to_csv(args.out)
    if res.budget_exhausted:
        print(f"warning: token budget {scfg.token_budget} exceeds available "
              f"{res.tokens_used} tokens; returning everything", file=sys.stderr)
    print(f"selected {len(res.doc_ids)} docs ({res.tokens_used} tokens) -> {args.out}")


def cmd_tracin(args) -> None:
    params = load_checkpoint(args.checkpoint)
    cands = open_dataset(args.candidates)
    seeds = open_dataset(args.seeds).as_float64()
    lam = float(args.l1_coeff)
    rows = []
    if args.corpus:
        for doc in load_corpus(args.corpus).docs:
            if doc.rows is None:
                raise AlignmentError(f"doc {doc.doc_id} has no activation rows")
            block = np.asarray(cands.values[doc.rows[0]:doc.rows[1]])
            rows.append((doc.doc_id, tracin_score(params, block, seeds, lam)))
    else:
        vals = cands.as_float64()
        rows = [(i, tracin_score(params, vals[i:i + 1], seeds, lam)) for i in range(cands.rows)]
    write_csv(args.out, ("candidate", "score"), rows)
    print(f"wrote {len(rows)} scores -> {args.out}")


def _load_texts(path) -> TokenTexts:
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                seqs.append([str(t) for t in json.loads(line)["tokens"]])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    return TokenTexts.from_sequences(seqs)


def cmd_autointerp(args) -> None:
    extra = {"autointerp": {"mock_mode": True}} if args.mock else None
    cfg = _resolve(args, extra)
    llm, opts = C.llm_config(cfg)
    params = load_checkpoint(args.checkpoint)
    ds = open_dataset(args.data)
    texts = _load_texts(args.texts)
    if len(texts.tokens) != ds.rows:
        raise AlignmentError(f"{len(texts.tokens)} tokens in {args.texts} for {ds.rows} rows")
    feats = (range(params.m) if not args.features
             else [int(f) for f in args.features.split(",")])
    res = run_autointerp(llm, params, ds, texts, feats, seed=C.child_seed(cfg["seed"], "autointerp"),
                         k=int(opts["top_k"]),
                         subject_specific_instructions=opts["subject_specific_instructions"],
                         sep=args.token_sep)
    res.to_csv(args.out)
    scores = res.f1_scores()
    mean = f"{np.mean(scores):.3f}" if scores else "n/a"
    print(f"scored {len(scores)} features (mean F1 {mean}), skipped {res.n_skipped} -> {args.out}")


def cmd_mdl(args) -> None:
    if args.erm and args.term:
        if not (args.data and args.labels):
            raise C.ConfigError("--data and --labels are required with checkpoints")
        ds = open_dataset(args.data)
        _, rows = read_csv(args.labels)
        labels = np.array([r[1] for r in rows])
        reports = []
        for ck in (args.erm, args.term):
            p = load_checkpoint(ck)
            pa, pb = estimate_activation_probs(p, ds, labels, args.threshold)
            reports.append(mdl_report(pa, pb, int((labels == "A").sum()),
                                      int((labels == "B").sum()), p.m))
    else:
        probs = (args.p_a_erm, args.p_b_erm, args.p_a_term, args.p_b_term)
        if any(v is None for v in probs) or args.n_a is None or args.n_b is None:
            raise C.ConfigError("give --erm/--term checkpoints or all of --p-a-erm, --p-b-erm, "
                                "--p-a-term, --p-b-term, --n-a, --n-b")
        reports = [mdl_report(args.p_a_erm, args.p_b_erm, args.n_a, args.n_b, args.k),
                   mdl_report(args.p_a_term, args.p_b_term, args.n_a, args.n_b, args.k)]
    cmp = compare_mdl(*reports)
    write_csv(args.out, ("model",) + reports[0].HEADER + ("delta_h_a", "delta_h_b", "delta_dl"),
              [("erm",) + reports[0].row() + ("", "", ""),
               ("term",) + reports[1].row() + (cmp.delta_h_a, cmp.delta_h_b, cmp.delta_dl)])
    k = reports[0].k
    print(f"delta_H_A = {cmp.delta_h_a:.4f} bits, delta_H_B = {cmp.delta_h_b:.4f} bits")
    print(f"delta_DL = {cmp.delta_dl:.4f} bits = k x {cmp.delta_dl / k:.4f} bits (k={k})")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config(p) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. train.steps=0 (repeatable)")
    p.add_argument("--out-dir", help="output directory (overrides output_dir)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ssae", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("kind", choices=("dictionary", "mixture"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--k-true", type=int, default=8)
    p.add_argument("--avg-active", type=float, default=2.0)
    p.add_argument("--coeff-scale", type=float, default=1.0)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--delta", type=float, default=4.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--q-a", type=float, default=0.9)
    p.add_argument("--n-total", type=int, default=1000)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train or finetune an SAE")
    _add_config(p)
    p.add_argument("--data", help="SAED dataset (overrides data.path)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="lambda sweep with validation checkpoint selection")
    _add_config(p)
    p.add_argument("--data")
    p.add_argument("--lambdas", help="comma-separated sparsity coefficients")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="metric reports for a checkpoint")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--unembedding", help="SAED matrix, one row per vocabulary token")
    p.add_argument("--token-freqs", help="CSV token_id,frequency")
    p.add_argument("--baseline", help="checkpoint for activation-count log ratios")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select", help="two-stage training data selection")
    _add_config(p)
    p.add_argument("--corpus", required=True, help="JSON lines with id and text")
    p.add_argument("--seeds", help="seed texts (plain lines or JSON lines)")
    p.add_argument("--method", choices=("bm25", "dense"))
    p.add_argument("--filter-fraction", type=float)
    p.add_argument("--budget", type=int, help="token budget")
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--seed-embeddings")
    p.add_argument("--cand-embeddings")
    p.add_argument("--checkpoint")
    p.add_argument("--activations", help="SAED activations addressed by doc row ranges")
    p.add_argument("--seed-activations")
    p.add_argument("--l1-coeff", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("tracin", help="TracIn scores of candidates against a seed set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--seeds", required=True)
    p.add_argument("--corpus", help="score per document row range instead of per row")
    p.add_argument("--l1-coeff", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tracin)

    p = sub.add_parser("autointerp", help="explanation F1 scoring via a chat endpoint")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--texts", required=True, help='JSON lines {"tokens": [...]}, rows in order')
    p.add_argument("--features", help="comma-separated feature ids (default: all)")
    p.add_argument("--token-sep", default=" ",
                   help='string joining tokens in rendered examples ("" for subword tokens)')
    p.add_argument("--mock", action="store_true", help="canned responses, no network")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_autointerp)

    p = sub.add_parser("mdl", help="description-length comparison of two SAEs")
    p.add_argument("--erm")
    p.add_argument("--term")
    p.add_argument("--data")
    p.add_argument("--labels")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--p-a-erm", type=float)
    p.add_argument("--p-b-erm", type=float)
    p.add_argument("--p-a-term", type=float)
    p.add_argument("--p-b-term", type=float)
    p.add_argument("--n-a", type=int)
    p.add_argument("--n-b", type=int)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mdl)
    return ap


def _category(e: BaseException) -> str:
    if isinstance(e, CliError):
        return e.category
    if isinstance(e, C.ConfigError):
        return "config"
    if isinstance(e, FileNotFoundError):
        return "missing_file"
    if isinstance(e, (FormatError, AlignmentError, ShapeError)):
        return "format"
    if isinstance(e, (NumericError, TrainingError)):
        return "numeric"
    if isinstance(e, (LlmError, ParseError)):
        return "llm"
    if isinstance(e, ValueError):
        return "config"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - mapped to exit codes
        cat = _category(e)
        msg = str(e).replace("\n", " ")
        print(f"error category={cat} message={msg}", file=sys.stderr)
        if cat == "internal":
            log.debug("traceback", exc_info=True)
        return EXIT[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
