"""Dataset ingestion, standardization, the synthetic partition, and binary
round trips with corruption diagnostics."""

import struct

import numpy as np
import pytest

from trajdistill.data import (
    LabeledDataset,
    SyntheticDataset,
    init_synthetic,
    load_dataset,
    load_synthetic,
    save_raw_tensor,
    save_synthetic,
    standardize,
)
from trajdistill.exceptions import (
    DimensionError,
    FormatError,
    IngestionError,
    InitError,
    PartitionError,
)


def _real(seed=0, n=40, classes=4):
    rng = np.random.Generator(np.random.PCG64(seed))
    images = rng.standard_normal((n, 1, 4, 4)).astype(np.float32)
    labels = (np.arange(n) % classes).astype(np.int64)
    return LabeledDataset(images, labels, classes)


# ---------------------------------------------------------------------------
# standardization and validation
# ---------------------------------------------------------------------------


def test_standardize_zero_mean_unit_std():
    rng = np.random.Generator(np.random.PCG64(1))
    raw = rng.integers(0, 256, size=(50, 2, 5, 5)).astype(np.float32)
    x, stats = standardize(raw)
    assert np.abs(x.mean(axis=(0, 2, 3))).max() < 1e-5
    np.testing.assert_allclose(x.std(axis=(0, 2, 3)), 1.0, atol=1e-5)
    # reusing train stats reproduces the same transform
    x2, _ = standardize(raw, stats)
    np.testing.assert_array_equal(x, x2)


def test_labeled_dataset_validation():
    ok = np.zeros((4, 1, 2, 2), dtype=np.float32)
    labels = np.array([0, 1, 0, 1], dtype=np.int64)
    with pytest.raises(DimensionError):
        LabeledDataset(np.zeros((4, 2, 2)), labels, 2)
    with pytest.raises(DimensionError):
        LabeledDataset(ok, labels[:3], 2)
    with pytest.raises(DimensionError):
        LabeledDataset(ok, np.array([0, 1, 2, 1]), 2)  # label out of range
    with pytest.raises(DimensionError):
        LabeledDataset(ok, labels, 1)
    ds = LabeledDataset(ok, labels, 2)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1.0


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------


def _write_idx_pair(prefix, images_u8, labels_u8):
    n, h, w = images_u8.shape
    with open(f"{prefix}-images.idx", "wb") as f:
        f.write(struct.pack(">I", 0x00000803))
        f.write(struct.pack(">III", n, h, w))
        f.write(images_u8.tobytes())
    with open(f"{prefix}-labels.idx", "wb") as f:
        f.write(struct.pack(">I", 0x00000801))
        f.write(struct.pack(">I", n))
        f.write(labels_u8.tobytes())


def test_idx_like_roundtrip(tmp_path):
    rng = np.random.Generator(np.random.PCG64(2))
    images = rng.integers(0, 256, size=(12, 5, 5)).astype(np.uint8)
    labels = (np.arange(12) % 3).astype(np.uint8)
    prefix = str(tmp_path / "mini")
    _write_idx_pair(prefix, images, labels)
    ds = load_dataset(prefix, "idx_like")
    assert ds.images.shape == (12, 1, 5, 5)
    assert ds.classes == 3
    np.testing.assert_array_equal(ds.labels, labels.astype(np.int64))
    want, _ = standardize(images[:, None, :, :])
    np.testing.assert_array_equal(ds.images, want)


def test_idx_bad_magic_names_offset(tmp_path):
    p = tmp_path / "bad-images.idx"
    p.write_bytes(struct.pack(">I", 0x12345678) + b"\x00" * 8)
    (tmp_path / "bad-labels.idx").write_bytes(struct.pack(">II", 0x00000801, 0))
    with pytest.raises(IngestionError, match="byte 0"):
        load_dataset(str(tmp_path / "bad"), "idx_like")


def test_idx_truncated_payload(tmp_path):
    prefix = str(tmp_path / "cut")
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    labels = np.zeros(3, dtype=np.uint8)
    _write_idx_pair(prefix, images, labels)
    blob = open(f"{prefix}-images.idx", "rb").read()
    open(f"{prefix}-images.idx", "wb").write(blob[:-4])
    with pytest.raises(IngestionError, match="byte"):
        load_dataset(prefix, "idx_like")


def test_csv_roundtrip(tmp_path):
    p = tmp_path / "data.csv"
    rows = ["1," + ",".join(str(10 * i + j) for j in range(4)) for i in range(6)]
    rows = [f"{i % 2}," + r.split(",", 1)[1] for i, r in enumerate(rows)]
    p.write_text("\n".join(rows) + "\n")
    ds = load_dataset(str(p), "csv", image_shape=(1, 2, 2))
    assert ds.images.shape == (6, 1, 2, 2)
    assert ds.classes == 2
    np.testing.assert_array_equal(ds.labels, np.arange(6) % 2)


def test_csv_field_count_error_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("0,1,2,3,4\n1,1,2,3\n")
    with pytest.raises(IngestionError, match="line 2"):
        load_dataset(str(p), "csv", image_shape=(1, 2, 2))


def test_csv_needs_shape(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("0,1,2,3,4\n")
    with pytest.raises(IngestionError, match="shape"):
        load_dataset(str(p), "csv")


def test_raw_tensor_roundtrip_bit_exact(tmp_path):
    ds = _real(3)
    p = tmp_path / "ds.rtd"
    save_raw_tensor(ds, p)
    back = load_dataset(str(p), "raw_tensor")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.classes == ds.classes
    p2 = tmp_path / "ds2.rtd"
    save_raw_tensor(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_raw_tensor_checksum(tmp_path):
    ds = _real(4)
    p = tmp_path / "ds.rtd"
    save_raw_tensor(ds, p)
    blob = bytearray(p.read_bytes())
    blob[40] ^= 0x01
    p.write_bytes(bytes(blob))
    with pytest.raises(IngestionError, match="checksum"):
        load_dataset(str(p), "raw_tensor")


def test_unknown_format_rejected():
    with pytest.raises(IngestionError, match="unknown dataset format"):
        load_dataset("whatever", "parquet")


# ---------------------------------------------------------------------------
# synthetic set
# ---------------------------------------------------------------------------


def test_init_from_real_draws_member_images():
    real = _real(5)
    syn = init_synthetic(real, ipc=4, mode="from_real", seed=6)
    assert len(syn) == 16
    assert syn.ipc == 4
    # every synthetic image is a verbatim copy of some real image of the
    # same class
    for img, lab in zip(syn.images, syn.labels):
        pool = real.images[real.labels == lab]
        assert any(np.array_equal(img, cand) for cand in pool)


def test_init_interleaves_partition():
    real = _real(7)
    syn = init_synthetic(real, ipc=4, mode="from_real", seed=8)
    np.testing.assert_array_equal(syn.labels, np.repeat(np.arange(4), 4))
    want_mask = np.tile([True, False, True, False], 4)
    np.testing.assert_array_equal(syn.foundation_mask, want_mask)
    assert len(syn.foundation_indices()) == len(syn.complement_indices()) == 8
    assert not set(syn.foundation_indices()) & set(syn.complement_indices())


def test_init_noise_mode_stats():
    real = _real(9)
    syn = init_synthetic(real, ipc=2, mode="noise", seed=10)
    assert syn.images.shape == (8, 1, 4, 4)
    assert abs(float(syn.images.mean())) < 0.5  # loose unit-normal sanity
    assert 0.5 < float(syn.images.std()) < 1.5


def test_init_determinism():
    real = _real(11)
    a = init_synthetic(real, 2, "from_real", seed=12)
    b = init_synthetic(real, 2, "from_real", seed=12)
    np.testing.assert_array_equal(a.images, b.images)
    c = init_synthetic(real, 2, "from_real", seed=13)
    assert not np.array_equal(a.images, c.images)


def test_init_errors():
    real = _real(14, n=6, classes=3)  # only 2 per class
    with pytest.raises(InitError):
        init_synthetic(real, 4, "from_real", seed=0)
    with pytest.raises(InitError):
        init_synthetic(real, 2, "fractal", seed=0)
    with pytest.raises(PartitionError):
        init_synthetic(real, 3, "noise", seed=0)  # odd ipc
    with pytest.raises(PartitionError):
        init_synthetic(real, 0, "noise", seed=0)


def test_partition_validation():
    images = np.zeros((4, 1, 2, 2), dtype=np.float32)
    labels = np.array([0, 0, 1, 1], dtype=np.int64)
    good_mask = np.array([True, False, True, False])
    SyntheticDataset(images, labels, 2, 2, good_mask)
    with pytest.raises(PartitionError):
        SyntheticDataset(images, labels, 2, 2, np.array([True, True, True, False]))
    with pytest.raises(PartitionError):
        SyntheticDataset(images, np.array([0, 0, 0, 1]), 2, 2, good_mask)
    with pytest.raises(PartitionError):
        SyntheticDataset(images[:3], labels[:3], 2, 2, good_mask[:3])


def test_synthetic_roundtrip_bit_exact(tmp_path):
    real = _real(15)
    syn = init_synthetic(real, 4, "from_real", seed=16, config_hash="abc123def456")
    p = tmp_path / "s.synd"
    save_synthetic(syn, p)
    back = load_synthetic(p)
    np.testing.assert_array_equal(back.images, syn.images)
    np.testing.assert_array_equal(back.labels, syn.labels)
    np.testing.assert_array_equal(back.foundation_mask, syn.foundation_mask)
    assert back.config_hash == "abc123def456"
    assert back.ipc == 4 and back.classes == 4
    p2 = tmp_path / "s2.synd"
    save_synthetic(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_synthetic_corruption_detected(tmp_path):
    real = _real(17)
    syn = init_synthetic(real, 2, "from_real", seed=18)
    p = tmp_path / "s.synd"
    save_synthetic(syn, p)
    blob = bytearray(p.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum|truncated|magic"):
        load_synthetic(p)


def test_synthetic_bad_magic(tmp_path):
    p = tmp_path / "s.synd"
    p.write_bytes(b"XXXX" + b"\x00" * 30)
    with pytest.raises(FormatError, match="magic"):
        load_synthetic(p)
