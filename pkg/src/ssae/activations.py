"""Activation dumps: the "SAED" binary format, buffered shuffling and splits.

Layout (little-endian)::

    magic "SAED" | u32 version=1 | u64 rows | u32 dim | u8 has_token_ids
    f32 values, row-major (rows * dim)
    u32 token ids (rows), only if has_token_ids

One row is one token-position activation.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io_utils import AlignmentError, FormatError, atomic_write_bytes, write_csv

MAGIC = b"SAED"
VERSION = 1
_HEADER = struct.Struct("<4sIQIB")
_VALIDATE_CHUNK = 1 << 16


@dataclass
class ActivationDataset:
    values: np.ndarray
    token_ids: np.ndarray | None = None
    source_meta: str = ""

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {self.values.shape}")
        if self.token_ids is not None:
            self.token_ids = np.asarray(self.token_ids)
            if self.token_ids.shape != (self.rows,):
                raise AlignmentError(
                    f"token_ids has {self.token_ids.size} entries for {self.rows} rows")

    @classmethod
    def from_array(cls, values, token_ids=None, source_meta: str = "") -> "ActivationDataset":
        vals = np.ascontiguousarray(values, dtype=np.float32)
        tids = None if token_ids is None else np.asarray(token_ids, dtype=np.uint32)
        ds = cls(vals, tids, source_meta)
        ds.validate()
        return ds

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.rows

    def validate(self) -> None:
        """Raise FormatError naming the first row holding a non-finite value."""
        for start in range(0, self.rows, _VALIDATE_CHUNK):
            chunk = np.asarray(self.values[start:start + _VALIDATE_CHUNK])
            bad = ~np.isfinite(chunk).all(axis=1)
            if bad.any():
                row = start + int(np.flatnonzero(bad)[0])
                raise FormatError(f"non-finite value in row {row}")

    def subset(self, indices) -> "ActivationDataset":
        idx = np.asarray(indices, dtype=np.int64)
        tids = None if self.token_ids is None else np.asarray(self.token_ids)[idx]
        return ActivationDataset(np.asarray(self.values[idx]), tids, self.source_meta)

    def as_float64(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def dataset_bytes(ds: ActivationDataset) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, ds.rows, ds.dim, int(ds.token_ids is not None))
    parts = [head, np.ascontiguousarray(ds.values, dtype="<f4").tobytes()]
    if ds.token_ids is not None:
        parts.append(np.asarray(ds.token_ids, dtype="<u4").tobytes())
    return b"".join(parts)


def write_dataset(path, ds: ActivationDataset, ids=None) -> None:
    """Write ``ds``; ``ids`` (u64 per row) go to a ``<path>.ids`` sidecar."""
    atomic_write_bytes(path, dataset_bytes(ds))
    if ids is not None:
        ids = np.asarray(ids, dtype="<u8")
        if ids.shape != (ds.rows,):
            raise AlignmentError(f"{ids.size} ids for {ds.rows} rows")
        atomic_write_bytes(ids_path(path), ids.tobytes())


def ids_path(path) -> Path:
    return Path(str(path) + ".ids")


def open_dataset(path, validate: bool = True) -> ActivationDataset:
    """Memory-map a SAED file. Values are read lazily; ``validate`` scans for NaN/inf."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(
            f"{path}: truncated header, expected {_HEADER.size} bytes, found {len(head)}")
    magic, version, rows, dim, has_tok = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if has_tok not in (0, 1):
        raise FormatError(f"{path}: bad has_token_ids flag {has_tok}")
    value_bytes = 4 * rows * dim
    expected = _HEADER.size + value_bytes + (4 * rows if has_tok else 0)
    if size != expected:
        if has_tok and size > _HEADER.size + value_bytes and (size - _HEADER.size - value_bytes) % 4 == 0:
            found = (size - _HEADER.size - value_bytes) // 4
            raise AlignmentError(
                f"{path}: token id block holds {found} ids for {rows} rows "
                f"(expected {expected} bytes, found {size})")
        raise FormatError(f"{path}: expected {expected} bytes, found {size}")

    if rows * dim:
        values = np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(rows, dim))
    else:
        values = np.zeros((rows, dim), dtype=np.float32)
    token_ids = None
    if has_tok:
        token_ids = np.fromfile(path, dtype="<u4", count=rows, offset=_HEADER.size + value_bytes)
    ds = ActivationDataset(values, token_ids, source_meta=str(path))
    if validate:
        try:
            ds.validate()
        except FormatError as e:
            raise FormatError(f"{path}: {e}") from None
    return ds


def read_ids(path, rows: int) -> np.ndarray:
    p = ids_path(path)
    ids = np.fromfile(p, dtype="<u8")
    if ids.shape != (rows,):
        raise AlignmentError(f"{p}: {ids.size} ids for {rows} rows")
    return ids


def export_csv(path, ds: ActivationDataset) -> None:
    """Debug export: one row per activation, token id first when present."""
    header = ([] if ds.token_ids is None else ["token_id"]) + [f"x{j}" for j in range(ds.dim)]
    vals = np.asarray(ds.values, dtype=np.float64)

    def rows():
        for i in range(ds.rows):
            lead = [] if ds.token_ids is None else [int(ds.token_ids[i])]
            yield lead + [float(v) for v in vals[i]]

    write_csv(path, header, rows())


# ---------------------------------------------------------------------------
# shuffling
# ---------------------------------------------------------------------------

@dataclass
class ShuffleStream:
    batch_size: int
    buffer_batches: int = 4
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.buffer_batches < 1:
            raise ValueError("buffer_batches must be >= 1")


def dropped_rows(rows: int, batch_size: int) -> int:
    """Rows lost per epoch to the partial final batch."""
    return rows % batch_size


@dataclass
class BatchStream:
    """One epoch of batches. Fill a buffer in file order, permute, emit, refill."""

    ds: ActivationDataset
    cfg: ShuffleStream
    stats: dict = field(default_factory=lambda: {"batches": 0, "rows": 0, "dropped_rows": 0})

    def __iter__(self):
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, cfg.epoch])
        buf = cfg.batch_size * cfg.buffer_batches
        self.stats = {"batches": 0, "rows": 0, "dropped_rows": 0}
        for start in range(0, self.ds.rows, buf):
            chunk = np.asarray(self.ds.values[start:start + buf])
            chunk = chunk[rng.permutation(chunk.shape[0])]
            full = chunk.shape[0] // cfg.batch_size
            for k in range(full):
                self.stats["batches"] += 1
                self.stats["rows"] += cfg.batch_size
                yield chunk[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            self.stats["dropped_rows"] += chunk.shape[0] - full * cfg.batch_size


def stream_batches(ds: ActivationDataset, cfg: ShuffleStream) -> BatchStream:
    return BatchStream(ds, cfg)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_sizes(rows: int, fractions) -> list[int]:
    """Floor each share; leftover rows go to the first (train) split."""
    sizes = [math.floor(f * rows + 1e-9) for f in fractions]
    sizes[0] += rows - sum(sizes)
    return sizes


def split(ds: ActivationDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Seeded disjoint partition into len(fractions) datasets (file order kept within each)."""
    fractions = [float(f) for f in fractions]
    if any(not f > 0 for f in fractions):
        raise ValueError(f"split fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
    sizes = split_sizes(ds.rows, fractions)
    if min(sizes) == 0:
        raise ValueError(f"split of {ds.rows} rows by {fractions} leaves an empty part: {sizes}")
    perm = np.random.default_rng(seed).permutation(ds.rows)
    out, start = [], 0
    for s in sizes:
        out.append(ds.subset(np.sort(perm[start:start + s])))
        start += s
    return tuple(out)
