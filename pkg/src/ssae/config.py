"""Run configuration: one YAML document per run, validated against a fixed schema.

Precedence, lowest first: built-in defaults, the config file, ``--set
section.key=value`` overrides, dedicated command-line flags.

Randomness: every consumer derives its seed from the global ``seed`` with
``child_seed(seed, name)``, i.e. the first 32-bit word of
``numpy.random.SeedSequence(seed, spawn_key=(crc32(name),))``. Names used:
"train", "split", "stream", "autointerp", "gen", "cosine". An explicit
``train.seed`` overrides the derived one.
"""

from __future__ import annotations

import copy
import zlib

import numpy as np
import yaml

from .autointerp import LlmClientConfig
from .sae import AdaptiveLambdaConfig, TiltConfig, TrainConfig
from .selection import SelectionPipeline


class ConfigError(ValueError):
    pass


_TILT = {"t": None, "hard_max_threshold": 1e6}
_ADAPTIVE = {"l0_target_low": None, "l0_target_high": None, "lambda_step_factor": 1.02,
             "check_interval": 50}

DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "data": {"path": None, "split": [0.6, 0.2, 0.2], "ood_path": None},
    "model": {"m": 32, "init": None},
    "train": {
        "l1_coeff": 0.1,
        "steps": 1000,
        "lr": 5e-5,
        "batch_size": 4096,
        "lr_decay_last_steps": 0,
        "buffer_batches": 4,
        "tilt": None,
        "adaptive_lambda": None,
        "seed": None,
    },
    "sweep": {"lambdas": [], "eval_interval": 0},
    "eval": {
        "threshold": 0.0,
        "top_k": 10,
        "variance_threshold": 0.9,
        "unembedding": None,
        "token_freqs": None,
        "baseline": None,
        "n_buckets": 10,
    },
    "selection": {
        "method": "bm25",
        "filter_fraction": 0.01,
        "rerank": False,
        "token_budget": 1_000_000,
        "k1": 1.2,
        "b": 0.75,
    },
    "autointerp": {
        "endpoint_url": "",
        "model_name": "",
        "auth_token_env_var_name": "SSAE_LLM_TOKEN",
        "timeout_s": 60.0,
        "max_retries": 3,
        "backoff_s": 1.0,
        "mock_mode": False,
        "mock_response": None,
        "max_in_flight": 4,
        "top_k": 10,
        "subject_specific_instructions": "",
    },
}

_SUBSCHEMA = {("train", "tilt"): _TILT, ("train", "adaptive_lambda"): _ADAPTIVE}


def child_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1)[0])


def _merge(base: dict, update: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        key_path = path + (k,)
        if k not in base:
            raise ConfigError(f"unknown config key {'.'.join(key_path)!r}")
        sub = _SUBSCHEMA.get(key_path)
        if sub is not None and v is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"{'.'.join(key_path)} must be a mapping")
            out[k] = _merge(sub, v, key_path)
        elif isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{'.'.join(key_path)} must be a mapping")
            out[k] = _merge(base[k], v, key_path)
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def _nest(keys, value) -> dict:
    d = value
    for k in reversed(keys):
        d = {k: d}
    return d


def resolve(path=None, overrides=(), extra: dict | None = None) -> dict:
    """Defaults <- file <- overrides <- extra; unknown keys raise ConfigError."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = yaml.safe_load(fh) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, doc)
    for item in overrides:
        keys, value = parse_override(item)
        cfg = _merge(cfg, _nest(keys, value))
    if extra:
        cfg = _merge(cfg, extra)
    return cfg


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    try:
        tilt = TiltConfig(**t.pop("tilt")) if t.get("tilt") else None
        t.pop("tilt", None)
        ada = t.pop("adaptive_lambda")
        ada = AdaptiveLambdaConfig(**ada) if ada else None
        for k in ("l1_coeff", "lr"):
            t[k] = float(t[k])  # YAML reads "1e-3" (no dot) as a string
        for k in ("steps", "batch_size", "lr_decay_last_steps", "buffer_batches"):
            t[k] = int(t[k])
        seed = t.pop("seed")
        seed = child_seed(cfg["seed"], "train") if seed is None else int(seed)
        return TrainConfig(tilt=tilt, adaptive_lambda=ada, seed=seed, **t)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from None


def selection_config(cfg: dict) -> SelectionPipeline:
    try:
        return SelectionPipeline(**cfg["selection"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"selection: {e}") from None


def llm_config(cfg: dict) -> tuple[LlmClientConfig, dict]:
    a = dict(cfg["autointerp"])
    extra = {"top_k": a.pop("top_k"),
             "subject_specific_instructions": a.pop("subject_specific_instructions")}
    try:
        return LlmClientConfig(**a), extra
    except (TypeError, ValueError) as e:
        raise ConfigError(f"autointerp: {e}") from None
