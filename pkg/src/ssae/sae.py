"""Single-layer sparse autoencoder: forward pass, analytic gradients, Adam,
decoder unit-norm constraint, ERM/tilted objectives and the training loop.

All arithmetic is float64. Datasets may be stored as float32; batches are
promoted before use.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

HARD_MAX_DEFAULT = 1e6


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass
class SaeParams:
    """Encoder/decoder weights.

    ``w_enc`` is (M, n), ``w_dec`` is (n, M) with unit-norm columns (the
    feature directions).
    """

    w_enc: np.ndarray
    b_enc: np.ndarray
    w_dec: np.ndarray
    b_dec: np.ndarray

    def __post_init__(self):
        self.w_enc = np.asarray(self.w_enc, dtype=np.float64)
        self.b_enc = np.asarray(self.b_enc, dtype=np.float64)
        self.w_dec = np.asarray(self.w_dec, dtype=np.float64)
        self.b_dec = np.asarray(self.b_dec, dtype=np.float64)
        m, n = self.w_enc.shape
        if m < 1 or n < 1:
            raise ShapeError(f"need M >= 1 and n >= 1, got M={m}, n={n}")
        if self.b_enc.shape != (m,):
            raise ShapeError(f"b_enc shape {self.b_enc.shape} != ({m},)")
        if self.w_dec.shape != (n, m):
            raise ShapeError(f"w_dec shape {self.w_dec.shape} != ({n}, {m})")
        if self.b_dec.shape != (n,):
            raise ShapeError(f"b_dec shape {self.b_dec.shape} != ({n},)")

    @property
    def m(self) -> int:
        return self.w_enc.shape[0]

    @property
    def n(self) -> int:
        return self.w_enc.shape[1]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.w_enc, self.b_enc, self.w_dec, self.b_dec

    def copy(self) -> "SaeParams":
        return SaeParams(*(a.copy() for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def zeros_like(cls, other: "SaeParams") -> "SaeParams":
        return cls(*(np.zeros_like(a) for a in other.arrays()))

    @classmethod
    def fresh(cls, n: int, m: int, seed: int = 0) -> "SaeParams":
        """Encoder uniform in +-1/sqrt(n), decoder its normalized transpose, zero biases."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(n)
        w_enc = rng.uniform(-bound, bound, size=(m, n))
        w_dec = w_enc.T.copy()
        w_dec /= np.linalg.norm(w_dec, axis=0, keepdims=True)
        return cls(w_enc, np.zeros(m), w_dec, np.zeros(n))


# Gradients share the parameter layout.
Gradients = SaeParams


@dataclass
class TiltConfig:
    t: float
    hard_max_threshold: float = HARD_MAX_DEFAULT

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"tilt t must be > 0, got {self.t}")
        if not self.hard_max_threshold > 0:
            raise ValueError("hard_max_threshold must be > 0")


@dataclass
class AdaptiveLambdaConfig:
    l0_target_low: float
    l0_target_high: float
    lambda_step_factor: float = 1.02
    check_interval: int = 50

    def __post_init__(self):
        if not 0 < self.l0_target_low < self.l0_target_high:
            raise ValueError("need 0 < l0_target_low < l0_target_high")
        if not self.lambda_step_factor > 1:
            raise ValueError("lambda_step_factor must be > 1")
        if self.check_interval < 1:
            raise ValueError("check_interval must be >= 1")


@dataclass
class TrainConfig:
    l1_coeff: float
    steps: int
    lr: float = 5e-5
    batch_size: int = 4096
    lr_decay_last_steps: int = 0
    buffer_batches: int = 4
    tilt: TiltConfig | None = None
    adaptive_lambda: AdaptiveLambdaConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.l1_coeff < 0:
            raise ValueError("l1_coeff must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 <= self.lr_decay_last_steps <= self.steps:
            raise ValueError(
                f"lr_decay_last_steps={self.lr_decay_last_steps} must lie in [0, steps={self.steps}]"
            )

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``; linear decay over the final window."""
        d = self.lr_decay_last_steps
        if d == 0:
            return self.lr
        return self.lr * min(1.0, (self.steps - step) / d)


@dataclass
class LossBreakdown:
    recon: float
    l1: float
    total: float


@dataclass
class AdamState:
    first_moment: SaeParams
    second_moment: SaeParams
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: SaeParams, **kw) -> "AdamState":
        return cls(SaeParams.zeros_like(params), SaeParams.zeros_like(params), **kw)


# ---------------------------------------------------------------------------
# forward pass and loss
# ---------------------------------------------------------------------------

def _check_last_dim(a: np.ndarray, size: int, what: str):
    if a.ndim not in (1, 2) or a.shape[-1] != size:
        raise ShapeError(f"{what} has shape {a.shape}, expected last dimension {size}")


def encode(params: SaeParams, x) -> np.ndarray:
    """ReLU(W_enc x + b_enc). Accepts a vector or a (B, n) batch."""
    x = np.asarray(x, dtype=np.float64)
    _check_last_dim(x, params.n, "input")
    return np.maximum(x @ params.w_enc.T + params.b_enc, 0.0)


def decode(params: SaeParams, f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    _check_last_dim(f, params.m, "code")
    return f @ params.w_dec.T + params.b_dec


def per_example_losses(params: SaeParams, batch, l1_coeff: float):
    """Return (recon, l1, total) arrays of shape (B,)."""
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    f = encode(params, x)
    r = decode(params, f) - x
    recon = np.einsum("bi,bi->b", r, r)
    l1 = f.sum(axis=1)
    return recon, l1, recon + l1_coeff * l1


def loss(params: SaeParams, x, l1_coeff: float) -> LossBreakdown:
    if l1_coeff < 0:
        raise ValueError("l1_coeff must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input")
    _check_last_dim(x, params.n, "input")
    if x.ndim != 1:
        raise ShapeError("loss takes a single vector; use per_example_losses for batches")
    recon, l1, _ = per_example_losses(params, x, l1_coeff)
    recon_v, l1_v = float(recon[0]), float(l1[0])
    return LossBreakdown(recon_v, l1_v, recon_v + l1_coeff * l1_v)


def grad(params: SaeParams, batch, l1_coeff: float, weights=None) -> Gradients:
    """Gradient of sum_b weights_b * L(x_b) w.r.t. all four parameter arrays.

    ``weights`` defaults to uniform 1/B (ERM). The ReLU subgradient at 0 is 0.
    """
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    _check_last_dim(x, params.n, "batch")
    b = x.shape[0]
    if weights is None:
        w = np.full(b, 1.0 / b)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (b,):
            raise ShapeError(f"weights shape {w.shape} != ({b},)")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")

    pre = x @ params.w_enc.T + params.b_enc
    active = pre > 0
    f = np.where(active, pre, 0.0)
    r = f @ params.w_dec.T + params.b_dec - x
    wr = 2.0 * w[:, None] * r  # d/dxhat, weighted
    g_w_dec = wr.T @ f
    g_b_dec = wr.sum(axis=0)
    d_pre = (wr @ params.w_dec + l1_coeff * w[:, None]) * active
    g_w_enc = d_pre.T @ x
    g_b_enc = d_pre.sum(axis=0)
    out = Gradients(g_w_enc, g_b_enc, g_w_dec, g_b_dec)
    if not all(np.all(np.isfinite(a)) for a in out.arrays()):
        raise NumericError("non-finite gradient")
    return out


# ---------------------------------------------------------------------------
# tilted objective
# ---------------------------------------------------------------------------

def _hard_max_weights(losses: np.ndarray) -> np.ndarray:
    is_max = losses == losses.max()
    return is_max / is_max.sum()


def tilt_weights(losses, tilt: TiltConfig) -> np.ndarray:
    """Per-example gradient coefficients of the tilted loss, softmax(t * L)."""
    losses = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite losses")
    if tilt.t >= tilt.hard_max_threshold:
        return _hard_max_weights(losses)
    e = np.exp(tilt.t * (losses - losses.max()))
    return e / e.sum()


def tilted_loss(losses, tilt: TiltConfig) -> float:
    """(1/t) log mean exp(t L), shifted by max(L) for stability."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("need at least one loss")
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite losses")
    top = float(losses.max())
    if tilt.t >= tilt.hard_max_threshold:
        return top
    # expm1/log1p keep the small-t limit accurate
    s = np.mean(np.expm1(tilt.t * (losses - top)))
    return top + math.log1p(s) / tilt.t


# ---------------------------------------------------------------------------
# optimizer and decoder constraint
# ---------------------------------------------------------------------------

def adam_step(params: SaeParams, state: AdamState, grads: Gradients, lr: float):
    """One bias-corrected Adam update. Returns new (params, state); inputs untouched."""
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, m, v, g in zip(params.arrays(), state.first_moment.arrays(),
                          state.second_moment.arrays(), grads.arrays()):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(SaeParams(*new_m), SaeParams(*new_v), t, b1, b2, state.eps)
    return SaeParams(*new_p), new_state


def project_decoder_grad(w_dec: np.ndarray, g_dec: np.ndarray) -> np.ndarray:
    """Remove from each gradient column its component along the decoder column."""
    norms_sq = np.einsum("ij,ij->j", w_dec, w_dec)
    safe = np.where(norms_sq > 0, norms_sq, 1.0)
    coef = np.einsum("ij,ij->j", w_dec, g_dec) / safe
    return g_dec - w_dec * np.where(norms_sq > 0, coef, 0.0)


def normalize_decoder(w_dec: np.ndarray, rng: np.random.Generator | None = None):
    """Rescale columns to unit norm. Zero columns get a fresh random unit direction.

    Returns (w_dec, list of reinitialized column indices).
    """
    w = w_dec.copy()
    norms = np.linalg.norm(w, axis=0)
    dead = np.flatnonzero(~(norms > 0))
    if dead.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        for j in dead:
            v = rng.standard_normal(w.shape[0])
            w[:, j] = v / np.linalg.norm(v)
            norms[j] = 1.0
        logger.warning("reinitialized zero-norm decoder columns %s", dead.tolist())
    w /= norms
    return w, dead.tolist()


def renormalize_decoder(params: SaeParams, grads: Gradients | None = None,
                        rng: np.random.Generator | None = None):
    """Apply both halves of the decoder constraint.

    With ``grads`` given, their decoder part is projected onto the tangent
    space of the current columns (call before the optimizer step). The
    params' decoder columns are rescaled to unit norm (call after the step).
    """
    new_grads = None
    if grads is not None:
        new_grads = Gradients(grads.w_enc, grads.b_enc,
                              project_decoder_grad(params.w_dec, grads.w_dec), grads.b_dec)
    w_dec, _ = normalize_decoder(params.w_dec, rng)
    return SaeParams(params.w_enc, params.b_enc, w_dec, params.b_dec), new_grads


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainingLog:
    step: list = field(default_factory=list)
    mean_loss: list = field(default_factory=list)
    max_loss: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    l0_estimate: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    dead_features: list = field(default_factory=list)
    reinitialized_columns: list = field(default_factory=list)
    dropped_rows_per_epoch: int = 0

    HEADER = ("step", "mean_loss", "max_loss", "lambda", "l0_estimate", "lr")

    def rows(self):
        return zip(self.step, self.mean_loss, self.max_loss, self.lam, self.l0_estimate, self.lr)

    def to_csv(self, path) -> None:
        from .io_utils import atomic_write_text

        lines = [",".join(self.HEADER)]
        for s, a, b, c, d, e in self.rows():
            lines.append(f"{s},{a!r},{b!r},{c!r},{d!r},{e!r}")
        atomic_write_text(path, "\n".join(lines) + "\n")


def _batches_forever(data, cfg: TrainConfig):
    from .activations import ShuffleStream, stream_batches

    epoch = 0
    while True:
        stream = ShuffleStream(cfg.batch_size, cfg.buffer_batches, seed=cfg.seed, epoch=epoch)
        got = False
        for batch in stream_batches(data, stream):
            got = True
            yield epoch, batch
        if not got:
            raise TrainingError(
                f"dataset has {len(data)} rows, fewer than batch_size={cfg.batch_size}")
        epoch += 1


def train(config: TrainConfig, data, init: SaeParams | None = None, m: int | None = None,
          callback=None, callback_interval: int = 0):
    """Optimize an SAE on ``data`` (an ActivationDataset).

    ``init`` is finetuned when given; otherwise a fresh SAE with ``m``
    features is seeded from ``config.seed``. ``callback(step, params, l1_coeff)``
    is invoked every ``callback_interval`` completed steps and after the last.

    Returns (params, TrainingLog).
    """
    if len(data) == 0:
        raise TrainingError("empty dataset")
    if init is None:
        if m is None:
            raise ValueError("need either init params or feature count m")
        init = SaeParams.fresh(data.dim, m, seed=config.seed)
    if data.dim != init.n:
        raise ShapeError(f"dataset dim {data.dim} != SAE input dim {init.n}")

    params = init.copy()
    log = TrainingLog()
    if config.steps == 0:
        return init, log

    state = AdamState.init(params)
    reinit_rng = np.random.default_rng([config.seed, 0x5AE])
    tilt = config.tilt
    lam = float(config.l1_coeff)
    ada = config.adaptive_lambda
    l0_window: list[float] = []
    fired = np.zeros(params.m, dtype=bool)
    current_epoch = 0
    completed_epoch = False
    batches = _batches_forever(data, config)

    for step in range(config.steps):
        epoch, batch = next(batches)
        if epoch != current_epoch:
            log.dead_features.append(int((~fired).sum()))
            fired[:] = False
            current_epoch = epoch
            completed_epoch = True
        x = batch.astype(np.float64)
        f = encode(params, x)
        r = decode(params, f) - x
        losses = np.einsum("bi,bi->b", r, r) + lam * f.sum(axis=1)
        if not np.all(np.isfinite(losses)):
            raise TrainingError("non-finite loss", step=step)
        weights = None if tilt is None else tilt_weights(losses, tilt)
        l0 = float(np.count_nonzero(f > 0) / x.shape[0])
        fired |= np.any(f > 0, axis=0)

        g = grad(params, x, lam, weights)
        g.w_dec = project_decoder_grad(params.w_dec, g.w_dec)
        lr = config.lr_at(step)
        params, state = adam_step(params, state, g, lr)
        params.w_dec, dead_cols = normalize_decoder(params.w_dec, reinit_rng)
        if dead_cols:
            log.reinitialized_columns.append((step, dead_cols))

        log.step.append(step)
        log.mean_loss.append(float(losses.mean()))
        log.max_loss.append(float(losses.max()))
        log.lam.append(lam)
        log.l0_estimate.append(l0)
        log.lr.append(lr)

        if ada is not None:
            l0_window.append(l0)
            if len(l0_window) == ada.check_interval:
                running = float(np.mean(l0_window))
                if running > ada.l0_target_high:
                    lam *= ada.lambda_step_factor
                elif running < ada.l0_target_low:
                    lam /= ada.lambda_step_factor
                l0_window.clear()

        done = step + 1
        if callback is not None and (
            done == config.steps or (callback_interval and done % callback_interval == 0)
        ):
            callback(done, params, lam)

    # one entry per completed epoch; a run shorter than an epoch reports its whole span
    if not completed_epoch:
        log.dead_features.append(int((~fired).sum()))
    from .activations import dropped_rows

    log.dropped_rows_per_epoch = dropped_rows(len(data), config.batch_size)
    return params, log


# ---------------------------------------------------------------------------
# checkpoint format: "SAE1", u32 version, u32 n, u32 M, then f32 arrays
# b_enc, w_enc (row-major), b_dec, w_dec (column-major); little-endian.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SAE1"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIII")


def checkpoint_bytes(params: SaeParams) -> bytes:
    head = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.n, params.m)
    f32 = np.dtype("<f4")
    body = b"".join([
        params.b_enc.astype(f32).tobytes(),
        np.ascontiguousarray(params.w_enc).astype(f32).tobytes(),
        params.b_dec.astype(f32).tobytes(),
        np.ascontiguousarray(params.w_dec.T).astype(f32).tobytes(),
    ])
    return head + body


def save_checkpoint(params: SaeParams, path) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(params))


def load_checkpoint(path) -> SaeParams:
    from .io_utils import FormatError

    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, n, m = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    expected = _CKPT_HEADER.size + 4 * (m + m * n + n + n * m)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f4", offset=_CKPT_HEADER.size).astype(np.float64)
    b_enc, rest = vals[:m], vals[m:]
    w_enc, rest = rest[: m * n].reshape(m, n), rest[m * n:]
    b_dec, rest = rest[:n], rest[n:]
    w_dec = rest.reshape(m, n).T
    return SaeParams(w_enc.copy(), b_enc.copy(), w_dec.copy(), b_dec.copy())
