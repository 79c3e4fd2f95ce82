import struct
from collections import Counter

import numpy as np
import pytest

from ssae.activations import (ActivationDataset, ShuffleStream, dropped_rows, export_csv,
                              open_dataset, read_ids, split, split_sizes, stream_batches,
                              write_dataset)
from ssae.io_utils import AlignmentError, FormatError, read_csv


def tagged(rows, dim, seed=0):
    """Rows whose first coordinate is the row index, so batches can be traced back."""
    v = np.random.default_rng(seed).normal(size=(rows, dim)).astype(np.float32)
    v[:, 0] = np.arange(rows)
    return ActivationDataset.from_array(v)


def test_round_trip_with_token_ids_and_sidecar(tmp_path):
    v = np.arange(12, dtype=np.float32).reshape(4, 3)
    ds = ActivationDataset.from_array(v, token_ids=[5, 6, 7, 2 ** 32 - 1])
    p = tmp_path / "a.saed"
    write_dataset(p, ds, ids=[10, 11, 12, 2 ** 63])
    back = open_dataset(p)
    np.testing.assert_array_equal(back.values, v)
    np.testing.assert_array_equal(back.token_ids, [5, 6, 7, 2 ** 32 - 1])
    np.testing.assert_array_equal(read_ids(p, 4), [10, 11, 12, 2 ** 63])


def test_file_layout_is_documented_header_plus_f32(tmp_path):
    p = tmp_path / "a.saed"
    write_dataset(p, ActivationDataset.from_array(np.array([[1.5, -2.0]], dtype=np.float32)))
    raw = p.read_bytes()
    assert struct.unpack("<4sIQIB", raw[:21]) == (b"SAED", 1, 1, 2, 0)
    assert np.frombuffer(raw[21:], "<f4").tolist() == [1.5, -2.0]


def test_zero_rows(tmp_path):
    p = tmp_path / "z.saed"
    write_dataset(p, ActivationDataset.from_array(np.zeros((0, 5), np.float32)))
    ds = open_dataset(p)
    assert ds.rows == 0 and ds.dim == 5


def test_truncated_file_reports_sizes(tmp_path):
    p = tmp_path / "a.saed"
    write_dataset(p, tagged(10, 3))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError, match="expected 141 bytes, found 137"):
        open_dataset(p)
    p.write_bytes(b"SAED")
    with pytest.raises(FormatError, match="truncated header"):
        open_dataset(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "a.saed"
    write_dataset(p, tagged(2, 2))
    p.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        open_dataset(p)


def test_token_id_count_mismatch_is_alignment_error(tmp_path):
    p = tmp_path / "a.saed"
    write_dataset(p, ActivationDataset.from_array(np.ones((3, 2), np.float32), token_ids=[1, 2, 3]))
    p.write_bytes(p.read_bytes() + b"\0\0\0\0")
    with pytest.raises(AlignmentError):
        open_dataset(p)
    with pytest.raises(AlignmentError):
        write_dataset(tmp_path / "b.saed", tagged(3, 2), ids=[1, 2])


def test_nan_row_is_named(tmp_path):
    v = np.ones((5, 2), np.float32)
    v[3, 1] = np.nan
    p = tmp_path / "a.saed"
    p.write_bytes(struct.pack("<4sIQIB", b"SAED", 1, 5, 2, 0) + v.astype("<f4").tobytes())
    with pytest.raises(FormatError, match="row 3"):
        open_dataset(p)
    assert open_dataset(p, validate=False).rows == 5


def test_export_csv(tmp_path):
    ds = ActivationDataset.from_array(np.array([[1, 2]], np.float32), token_ids=[9])
    export_csv(tmp_path / "a.csv", ds)
    header, rows = read_csv(tmp_path / "a.csv")
    assert header == ["token_id", "x0", "x1"] and rows == [["9", "1.0", "2.0"]]


def collect(ds, cfg):
    stream = stream_batches(ds, cfg)
    batches = [b.copy() for b in stream]
    return batches, stream.stats


def test_stream_multiset_oracle_random_datasets():
    rng = np.random.default_rng(11)
    for trial in range(10):
        rows, dim = int(rng.integers(1, 400)), int(rng.integers(1, 6))
        bs, bufb = int(rng.integers(1, 40)), int(rng.integers(1, 5))
        ds = tagged(rows, dim, seed=trial)
        batches, stats = collect(ds, ShuffleStream(bs, bufb, seed=trial))
        emitted = Counter(int(r) for b in batches for r in b[:, 0])
        assert all(c == 1 for c in emitted.values())
        assert sum(emitted.values()) == rows - dropped_rows(rows, bs)
        assert stats["dropped_rows"] == rows % bs
        assert all(b.shape == (bs, dim) for b in batches)
        for b in batches:  # row contents preserved
            idx = b[:, 0].astype(int)
            np.testing.assert_array_equal(b, np.asarray(ds.values)[idx])


def test_stream_is_deterministic_and_epochs_differ():
    ds = tagged(256, 4)
    a, _ = collect(ds, ShuffleStream(16, 4, seed=3, epoch=0))
    b, _ = collect(ds, ShuffleStream(16, 4, seed=3, epoch=0))
    c, _ = collect(ds, ShuffleStream(16, 4, seed=3, epoch=1))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_stream_rejects_bad_config():
    with pytest.raises(ValueError):
        ShuffleStream(0)
    with pytest.raises(ValueError):
        ShuffleStream(4, buffer_batches=0)


def test_split_sizes_and_disjointness():
    assert split_sizes(10, (0.6, 0.2, 0.2)) == [6, 2, 2]
    assert split_sizes(11, (0.6, 0.2, 0.2)) == [7, 2, 2]
    ds = tagged(10, 2)
    parts = split(ds, seed=1)
    assert [p.rows for p in parts] == [6, 2, 2]
    ids = [int(r) for p in parts for r in np.asarray(p.values)[:, 0]]
    assert sorted(ids) == list(range(10))
    again = split(ds, seed=1)
    for p, q in zip(parts, again):
        np.testing.assert_array_equal(p.values, q.values)


def test_split_rejects_bad_fractions():
    ds = tagged(10, 2)
    with pytest.raises(ValueError):
        split(ds, (0.5, 0.6))
    with pytest.raises(ValueError):
        split(ds, (1.0, 0.0))
    with pytest.raises(ValueError):
        split(tagged(2, 2), (0.6, 0.2, 0.2))
