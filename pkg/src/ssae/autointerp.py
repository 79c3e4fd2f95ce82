"""Automated interpretability: explain features with an Interpreter prompt,
score explanations with a Predictor prompt (F1), and rate feature diversity.

Any HTTP chat-completion endpoint of the common shape works::

    POST <endpoint_url>
    Authorization: Bearer <token from $auth_token_env_var_name>
    {"model": ..., "temperature": 0,
     "messages": [{"role": "system", "content": ...}, {"role": "user", "content": ...}]}

    -> {"choices": [{"message": {"content": "..."}}]}

Prompt templates live in ``prompts/`` next to this module; the files end
with one newline that is not part of the template.
"""

from __future__ import annotations

import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .io_utils import write_csv
from .sae import SaeParams, encode

logger = logging.getLogger(__name__)

PROMPT_DIR = Path(__file__).with_name("prompts")


class LlmError(RuntimeError):
    pass


class LlmNetworkError(LlmError):
    pass


class LlmTimeoutError(LlmError):
    pass


class LlmAuthError(LlmError):
    pass


class LlmStatusError(LlmError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}")
        self.status = status


class LlmResponseError(LlmError):
    """Response body lacks an expected field."""


class ParseError(ValueError):
    pass


def load_template(name: str, prompt_dir: Path | None = None) -> str:
    text = ((prompt_dir or PROMPT_DIR) / f"{name}.txt").read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def fill(template: str, **fields) -> str:
    """Substitute ``{name}`` placeholders; other braces are left alone."""
    for k, v in fields.items():
        template = template.replace("{" + k + "}", v)
    return template


@dataclass(frozen=True)
class Prompt:
    kind: str  # interpreter | predictor | aggregation | diversity
    system: str
    user: str
    n_examples: int = 0

    @property
    def text(self) -> str:
        return self.system + "\n\n" + self.user if self.system else self.user


# ---------------------------------------------------------------------------
# examples
# ---------------------------------------------------------------------------

@dataclass
class TokenTexts:
    """Token strings aligned to activation rows, grouped into contexts.

    ``contexts[c]`` is a [start, end) row range; ``tokens[r]`` the token of row r.
    """

    tokens: list[str]
    contexts: list[tuple[int, int]]

    @classmethod
    def from_sequences(cls, sequences) -> "TokenTexts":
        tokens, contexts, start = [], [], 0
        for seq in sequences:
            tokens.extend(seq)
            contexts.append((start, start + len(seq)))
            start += len(seq)
        return cls(tokens, contexts)

    def context_tokens(self, c: int) -> list[str]:
        s, e = self.contexts[c]
        return self.tokens[s:e]


def _wrap(run, sep):
    # leading whitespace of a subword token stays outside the delimiters
    text = sep.join(run)
    body = text.lstrip()
    return text[:len(text) - len(body)] + "<<" + body + ">>"


def render_highlighted(tokens, active, sep: str = " ") -> str:
    """Join tokens, wrapping each run of active tokens in one <<...>> pair."""
    parts, run = [], []
    for tok, on in zip(tokens, active):
        if on:
            run.append(tok)
            continue
        if run:
            parts.append(_wrap(run, sep))
            run = []
        parts.append(tok)
    if run:
        parts.append(_wrap(run, sep))
    return sep.join(parts)


@dataclass
class ActivatingExample:
    context: int
    max_activation: float
    text: str


def feature_activations(params: SaeParams, ds, feature_id: int) -> np.ndarray:
    if not 0 <= feature_id < params.m:
        raise IndexError(f"feature {feature_id} out of range for M={params.m}")
    x = np.asarray(ds.values, dtype=np.float64)
    return encode(params, x)[:, feature_id]


def context_maxima(acts: np.ndarray, texts: TokenTexts) -> np.ndarray:
    return np.array([acts[s:e].max() if e > s else 0.0 for s, e in texts.contexts])


def top_activating_examples(params: SaeParams, ds, texts: TokenTexts, feature_id: int,
                            k: int = 10, threshold: float = 0.0, sep: str = " "):
    """The ``k`` contexts with the highest max activation of a feature, rendered
    with delimiters. Returns (examples, dead) where ``dead`` flags a feature
    that never fires."""
    if len(texts.tokens) != ds.rows:
        raise ValueError(f"{len(texts.tokens)} tokens for {ds.rows} activation rows")
    acts = feature_activations(params, ds, feature_id)
    cmax = context_maxima(acts, texts)
    live = np.flatnonzero(cmax > threshold)
    if live.size == 0:
        return [], True
    starts = np.array([texts.contexts[c][0] for c in live])
    order = live[np.lexsort((starts, -cmax[live]))][:k]
    out = []
    for c in order:
        s, e = texts.contexts[c]
        text = render_highlighted(texts.tokens[s:e], acts[s:e] > threshold, sep)
        out.append(ActivatingExample(int(c), float(cmax[c]), text))
    return out, False


def sample_balanced(cmax: np.ndarray, n_each: int = 5, seed: int = 0):
    """Pick activating contexts (max at or above the median positive maximum)
    and silent contexts, uniformly and seeded. Returns (context ids, truth),
    shuffled together."""
    rng = np.random.default_rng(seed)
    pos = cmax[cmax > 0]
    if pos.size == 0:
        raise ValueError("feature never activates")
    hot = np.flatnonzero(cmax >= np.median(pos))
    cold = np.flatnonzero(cmax == 0)
    hot = rng.choice(hot, size=min(n_each, hot.size), replace=False)
    cold = rng.choice(cold, size=min(n_each, cold.size), replace=False)
    ids = np.concatenate([hot, cold])
    truth = np.concatenate([np.ones(hot.size, int), np.zeros(cold.size, int)])
    perm = rng.permutation(ids.size)
    return ids[perm].tolist(), truth[perm].tolist()


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------

def build_interpreter_prompt(examples, prompt: str = "", subject_specific_instructions: str = "",
                             prompt_dir: Path | None = None) -> Prompt:
    """System prompt plus numbered, delimited examples (strings or ActivatingExample)."""
    texts = [e.text if isinstance(e, ActivatingExample) else str(e) for e in examples]
    if not texts:
        raise ValueError("need at least one example")
    system = fill(load_template("interpreter_system", prompt_dir), prompt=prompt,
                  subject_specific_instructions=subject_specific_instructions)
    user = "\n" + "".join(f"Example {i}: {t}\n" for i, t in enumerate(texts, 1))
    return Prompt("interpreter", system, user, len(texts))


def build_predictor_prompt(explanation: str, examples, prompt_dir: Path | None = None) -> Prompt:
    if not explanation or not explanation.strip():
        raise ValueError("explanation is empty")
    texts = [str(e) for e in examples]
    if not texts:
        raise ValueError("need at least one example")
    user = (f"Feature explanation: {explanation}\nText examples:\n"
            + "".join(f"Example {i}:{t}\n" for i, t in enumerate(texts)))
    return Prompt("predictor", load_template("predictor_system", prompt_dir), user, len(texts))


def _numbered(explanations) -> str:
    return "\n".join(f"{i + 1}. {e}" for i, e in enumerate(explanations))


def build_aggregation_prompt(explanations, prompt_dir: Path | None = None) -> Prompt:
    if not explanations:
        raise ValueError("need at least one explanation")
    body = fill(load_template("aggregation", prompt_dir), explanations=_numbered(explanations))
    return Prompt("aggregation", "", body, len(explanations))


def build_diversity_prompt(explanations, prompt_dir: Path | None = None) -> Prompt:
    if not explanations:
        raise ValueError("need at least one explanation")
    body = fill(load_template("diversity", prompt_dir), explanations=_numbered(explanations))
    return Prompt("diversity", "", body, len(explanations))


# ---------------------------------------------------------------------------
# client
# ---------------------------------------------------------------------------

def default_mock(prompt: Prompt) -> str:
    if prompt.kind == "interpreter":
        return "The examples share a pattern.\n[EXPLANATION]: mock explanation"
    if prompt.kind == "predictor":
        return "[" + ",".join("1" for _ in range(prompt.n_examples)) + "]"
    if prompt.kind == "aggregation":
        return "mock unified explanation"
    return ("Unified explanation:\nmock unified explanation\n\nDiversity Score: 50\n"
            "Justification: mock")


@dataclass
class LlmClientConfig:
    endpoint_url: str = ""
    model_name: str = ""
    auth_token_env_var_name: str = "SSAE_LLM_TOKEN"
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_s: float = 1.0
    mock_mode: bool = False
    mock_response: str | Callable[[Prompt], str] | None = None
    max_in_flight: int = 4

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if not self.mock_mode and not self.endpoint_url:
            raise ValueError("endpoint_url is required unless mock_mode is set")


_TRANSIENT = {408, 409, 425, 429, 500, 502, 503, 504}


def request_body(cfg: LlmClientConfig, prompt: Prompt) -> dict:
    messages = []
    if prompt.system:
        messages.append({"role": "system", "content": prompt.system})
    messages.append({"role": "user", "content": prompt.user})
    return {"model": cfg.model_name, "messages": messages, "temperature": 0}


def response_text(body) -> str:
    if not isinstance(body, dict) or "choices" not in body:
        raise LlmResponseError("response missing field 'choices'")
    choices = body["choices"]
    if not choices:
        raise LlmResponseError("response field 'choices' is empty")
    msg = choices[0].get("message") if isinstance(choices[0], dict) else None
    if not isinstance(msg, dict):
        raise LlmResponseError("response missing field 'choices[0].message'")
    if not isinstance(msg.get("content"), str):
        raise LlmResponseError("response missing field 'choices[0].message.content'")
    return msg["content"]


def call_llm(cfg: LlmClientConfig, prompt: Prompt, client=None, sleep=time.sleep) -> str:
    """Send one chat completion; retry transient failures with exponential backoff."""
    if cfg.mock_mode:
        mock = cfg.mock_response
        if mock is None:
            return default_mock(prompt)
        return mock(prompt) if callable(mock) else mock

    import httpx

    token = os.environ.get(cfg.auth_token_env_var_name, "")
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    own = client is None
    client = client or httpx.Client(timeout=cfg.timeout_s)
    last: LlmError | None = None
    try:
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                sleep(cfg.backoff_s * 2 ** (attempt - 1))
            try:
                resp = client.post(cfg.endpoint_url, json=request_body(cfg, prompt),
                                   headers=headers, timeout=cfg.timeout_s)
            except httpx.TimeoutException as e:
                last = LlmTimeoutError(f"request timed out: {e}")
                continue
            except httpx.TransportError as e:
                last = LlmNetworkError(f"network error: {e}")
                continue
            if resp.status_code in (401, 403):
                raise LlmAuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code in _TRANSIENT:
                last = LlmStatusError(resp.status_code, resp.text)
                continue
            if not 200 <= resp.status_code < 300:
                raise LlmStatusError(resp.status_code, resp.text)
            try:
                body = resp.json()
            except ValueError as e:
                raise LlmResponseError(f"response body is not JSON: {e}") from None
            return response_text(body)
    finally:
        if own:
            client.close()
    raise last


# ---------------------------------------------------------------------------
# parsing and scoring
# ---------------------------------------------------------------------------

_LIST_RE = re.compile(r"\[\s*([01](?:\s*,\s*[01])*)\s*,?\s*\]")
_SCORE_RE = re.compile(r"Diversity Score:\s*\[?\s*(-?\d+(?:\.\d+)?)")


def parse_explanation(response: str) -> str:
    lines = [ln.strip() for ln in response.strip().splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty interpreter response")
    last = re.sub(r"^\[?EXPLANATION\]?:\s*", "", lines[-1], flags=re.IGNORECASE).strip()
    if not last:
        raise ParseError("interpreter response has an empty explanation line")
    return last


def parse_prediction(response: str) -> list[int]:
    """First bracketed list of 0/1 values in the response."""
    m = _LIST_RE.search(response)
    if not m:
        raise ParseError(f"no 0/1 list in response: {response[:80]!r}")
    return [int(v) for v in re.findall(r"[01]", m.group(1))]


def f1(preds, truth) -> float:
    preds = np.asarray(preds, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if preds.shape != truth.shape:
        raise ValueError(f"{preds.size} predictions for {truth.size} labels")
    tp = int(np.sum((preds == 1) & (truth == 1)))
    pp, ap = int(preds.sum()), int(truth.sum())
    # 2PR/(P+R) reduces to 2TP/(PP+AP); the count form avoids rounding
    if tp == 0:
        return 0.0
    return 2 * tp / (pp + ap)


def parse_diversity_score(response: str) -> tuple[int, bool]:
    """Score from the "Diversity Score:" line, clamped to [1, 100]; flag if clamped."""
    m = _SCORE_RE.search(response)
    if not m:
        raise ParseError("no 'Diversity Score:' line in response")
    raw = float(m.group(1))
    score = int(round(min(max(raw, 1.0), 100.0)))
    return score, not 1.0 <= raw <= 100.0


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

@dataclass
class FeatureExplanation:
    feature_id: int
    explanation: str
    source_contexts: list[int]


@dataclass
class PredictionRecord:
    feature_id: int
    example_contexts: list[int]
    predicted: list[int] | None
    truth: list[int]
    f1: float | None
    explanation: str = ""
    skipped_reason: str = ""


@dataclass
class AutointerpResult:
    records: list[PredictionRecord] = field(default_factory=list)

    @property
    def n_skipped(self) -> int:
        return sum(r.f1 is None for r in self.records)

    def f1_scores(self) -> list[float]:
        return [r.f1 for r in self.records if r.f1 is not None]

    def to_csv(self, path) -> None:
        write_csv(path, ("feature_id", "f1", "n_skipped"),
                  ((r.feature_id, "" if r.f1 is None else float(r.f1), int(r.f1 is None))
                   for r in self.records))


def explain_feature(cfg: LlmClientConfig, params, ds, texts: TokenTexts, feature_id: int,
                    k: int = 10, subject_specific_instructions: str = "", client=None,
                    sep: str = " "):
    examples, dead = top_activating_examples(params, ds, texts, feature_id, k, sep=sep)
    if dead:
        return None
    p = build_interpreter_prompt(examples, subject_specific_instructions=subject_specific_instructions)
    text = parse_explanation(call_llm(cfg, p, client))
    return FeatureExplanation(feature_id, text, [e.context for e in examples])


def score_feature(cfg: LlmClientConfig, params, ds, texts: TokenTexts, feature_id: int,
                  seed: int = 0, k: int = 10, n_each: int = 5,
                  subject_specific_instructions: str = "", client=None,
                  sep: str = " ") -> PredictionRecord:
    """Explain a feature, then ask the predictor to label 5 activating and
    5 silent contexts; F1 against the true labels."""
    acts = feature_activations(params, ds, feature_id)
    cmax = context_maxima(acts, texts)
    if not np.any(cmax > 0):
        return PredictionRecord(feature_id, [], None, [], None, skipped_reason="dead feature")
    try:
        expl = explain_feature(cfg, params, ds, texts, feature_id, k,
                               subject_specific_instructions, client, sep)
    except ParseError as e:
        return PredictionRecord(feature_id, [], None, [], None, skipped_reason=str(e))
    ids, truth = sample_balanced(cmax, n_each, seed)
    plain = [sep.join(texts.context_tokens(c)) for c in ids]
    p = build_predictor_prompt(expl.explanation, plain)
    try:
        preds = parse_prediction(call_llm(cfg, p, client))
        if len(preds) != len(truth):
            raise ParseError(f"{len(preds)} predictions for {len(truth)} examples")
    except ParseError as e:
        return PredictionRecord(feature_id, ids, None, truth, None, expl.explanation, str(e))
    return PredictionRecord(feature_id, ids, preds, truth, f1(preds, truth), expl.explanation)


def run_autointerp(cfg: LlmClientConfig, params, ds, texts: TokenTexts, feature_ids,
                   seed: int = 0, client=None, **kw) -> AutointerpResult:
    """Score features concurrently (up to ``cfg.max_in_flight``); results in feature order."""
    feature_ids = list(feature_ids)

    def one(fid):
        return score_feature(cfg, params, ds, texts, fid, seed=seed + fid, client=client, **kw)

    if cfg.max_in_flight == 1 or len(feature_ids) <= 1:
        recs = [one(f) for f in feature_ids]
    else:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            recs = list(pool.map(one, feature_ids))
    for r in recs:
        if r.f1 is None:
            logger.info("feature %d skipped: %s", r.feature_id, r.skipped_reason)
    return AutointerpResult(recs)


@dataclass
class DiversityResult:
    unified_explanation: str
    score: int
    out_of_range: bool


def diversity_score_pipeline(cfg: LlmClientConfig, explanations, client=None) -> DiversityResult:
    """Unify per-chunk explanations, then score diversity from 1 to 100.

    Both prompts receive the per-chunk explanations; the first response is the
    unified explanation. An unparseable score raises ParseError.
    """
    explanations = [e for e in explanations if e and e.strip()]
    if not explanations:
        raise ValueError("need at least one chunk explanation")
    unified = call_llm(cfg, build_aggregation_prompt(explanations), client).strip()
    score, flag = parse_diversity_score(call_llm(cfg, build_diversity_prompt(explanations), client))
    return DiversityResult(unified, score, flag)


def chunk_explanations(cfg: LlmClientConfig, params, ds, texts: TokenTexts, feature_id: int,
                       chunk_contexts: int, k: int = 10, seed: int = 0, client=None,
                       sep: str = " ") -> list[str]:
    """Explain a feature separately on consecutive chunks of contexts, drawing
    ``k`` examples uniformly from the top half (by max activation) of each chunk."""
    acts = feature_activations(params, ds, feature_id)
    cmax = context_maxima(acts, texts)
    rng = np.random.default_rng(seed)
    out = []
    for start in range(0, len(texts.contexts), chunk_contexts):
        idx = np.arange(start, min(start + chunk_contexts, len(texts.contexts)))
        live = idx[cmax[idx] > 0]
        if live.size == 0:
            continue
        ranked = live[np.argsort(-cmax[live], kind="stable")]
        top_half = ranked[: max(1, math.ceil(ranked.size / 2))]
        pick = np.sort(rng.choice(top_half, size=min(k, top_half.size), replace=False))
        ex = []
        for c in pick:
            s, e = texts.contexts[c]
            ex.append(render_highlighted(texts.tokens[s:e], acts[s:e] > 0, sep))
        try:
            out.append(parse_explanation(call_llm(cfg, build_interpreter_prompt(ex), client)))
        except ParseError as e:
            logger.info("chunk at context %d skipped: %s", start, e)
    return out
