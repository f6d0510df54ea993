"""Real dataset ingestion and the learnable synthetic set.

Three on-disk layouts are understood:

* ``idx_like``  -- big-endian magic/dims header pair (``<prefix>-images.idx``
  and ``<prefix>-labels.idx``, u8 pixels).  Pixels are scaled to [0, 1]
  and standardized per channel on load.
* ``csv``       -- one row per example: ``label, pixel...`` in row-major
  channel-major order; scaled and standardized like idx_like.
* ``raw_tensor`` -- this package's own little-endian dump (magic ``RTDS``)
  of float32 images that are already normalized; loaded verbatim, so a
  save/load round trip is bit-exact.

The synthetic set S holds ipc images per class, split half and half into
a foundation subset and a complement subset by interleaving within each
class.  Pixels are the learnable thing; labels and the split never move.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DimensionError,
    FormatError,
    IngestionError,
    InitError,
    PartitionError,
)

RAW_MAGIC = b"RTDS"
SYN_MAGIC = b"SYND"
FORMAT_VERSION = 1


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    classes: int
    stats: tuple = None  # (per-channel mean, per-channel std) used to normalize

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionError("images must be (N, C, H, W)")
        if self.labels.shape != (len(self.images),):
            raise DimensionError("labels must be one id per image")
        if self.classes < 2:
            raise DimensionError("need at least 2 classes")
        if len(self.images) < self.classes:
            raise DimensionError(
                f"{len(self.images)} examples cannot cover {self.classes} classes"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DimensionError(f"label outside [0, {self.classes})")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self):
        return len(self.images)


def standardize(images: np.ndarray, stats=None):
    """Scale u8-range pixels to [0, 1], then shift/scale each channel to
    zero mean, unit variance.  Pass ``stats`` from the training split to
    normalize a test split consistently."""
    x = images.astype(np.float32) / 255.0
    if stats is None:
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        std = np.where(std < 1e-6, 1.0, std)
        stats = (mean.astype(np.float32), std.astype(np.float32))
    mean, std = stats
    x = (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return x, stats


# ---------------------------------------------------------------------------
# idx_like
# ---------------------------------------------------------------------------


def _read_idx(path, expect_dims: int) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise IngestionError(f"{path}: header truncated at byte {len(blob)}")
    magic = struct.unpack_from(">I", blob, 0)[0]
    ndim = magic & 0xFF
    if magic >> 8 != 0x000008 or ndim != expect_dims:
        raise IngestionError(
            f"{path}: bad magic 0x{magic:08x} at byte 0 "
            f"(wanted u8 data with {expect_dims} dims)"
        )
    off = 4
    dims = []
    for _ in range(ndim):
        if off + 4 > len(blob):
            raise IngestionError(f"{path}: dimension header truncated at byte {off}")
        dims.append(struct.unpack_from(">I", blob, off)[0])
        off += 4
    count = int(np.prod(dims)) if dims else 0
    if off + count != len(blob):
        raise IngestionError(
            f"{path}: payload is {len(blob) - off} bytes at byte {off}, "
            f"header promises {count}"
        )
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=off).reshape(dims)


def _load_idx_like(path, stats):
    images = _read_idx(f"{path}-images.idx", 3)
    labels = _read_idx(f"{path}-labels.idx", 1).astype(np.int64)
    if len(images) != len(labels):
        raise IngestionError(
            f"{path}: {len(images)} images but {len(labels)} labels"
        )
    x = images[:, None, :, :]  # single channel
    x, stats = standardize(x, stats)
    classes = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(x, labels, classes, stats)


# ---------------------------------------------------------------------------
# csv
# ---------------------------------------------------------------------------


def _load_csv(path, image_shape, stats):
    if image_shape is None:
        raise IngestionError(f"{path}: csv ingestion needs an image shape")
    c, h, w = image_shape
    rows = []
    labels = []
    offset = 0
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.decode("utf-8", errors="replace").strip()
            if line:
                parts = line.split(",")
                if len(parts) != 1 + c * h * w:
                    raise IngestionError(
                        f"{path}: line {lineno} (byte {offset}) has {len(parts)} "
                        f"fields, wanted {1 + c * h * w}"
                    )
                try:
                    labels.append(int(parts[0]))
                    rows.append([float(v) for v in parts[1:]])
                except ValueError as e:
                    raise IngestionError(
                        f"{path}: line {lineno} (byte {offset}): {e}"
                    ) from e
            offset += len(raw)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=np.float32).reshape(len(rows), c, h, w)
    x, stats = standardize(x, stats)
    labels = np.asarray(labels, dtype=np.int64)
    classes = int(labels.max()) + 1
    return LabeledDataset(x, labels, classes, stats)


# ---------------------------------------------------------------------------
# raw_tensor
# ---------------------------------------------------------------------------


def save_raw_tensor(ds: LabeledDataset, path) -> None:
    head = bytearray()
    head += RAW_MAGIC
    head += struct.pack("<I", FORMAT_VERSION)
    n, c, h, w = ds.images.shape
    head += struct.pack("<IIIII", n, c, h, w, ds.classes)
    body = np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
    body += np.ascontiguousarray(ds.labels, dtype="<i8").tobytes()
    crc = zlib.crc32(bytes(head) + body) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(bytes(head))
        f.write(body)
        f.write(struct.pack("<I", crc))


def _load_raw_tensor(path, stats):
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def need(size, what):
        nonlocal off
        if off + size > len(blob):
            raise IngestionError(f"{path}: truncated at byte {off} reading {what}")
        out = blob[off:off + size]
        off += size
        return out

    if need(4, "magic") != RAW_MAGIC:
        raise IngestionError(f"{path}: bad magic at byte 0")
    (version,) = struct.unpack("<I", need(4, "version"))
    if version != FORMAT_VERSION:
        raise IngestionError(f"{path}: unsupported version {version} at byte 4")
    n, c, h, w, classes = struct.unpack("<IIIII", need(20, "dims"))
    images = np.frombuffer(need(4 * n * c * h * w, "images"), dtype="<f4")
    labels = np.frombuffer(need(8 * n, "labels"), dtype="<i8")
    (crc_stored,) = struct.unpack("<I", need(4, "checksum"))
    if off != len(blob):
        raise IngestionError(f"{path}: {len(blob) - off} trailing bytes at byte {off}")
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc_stored:
        raise IngestionError(f"{path}: checksum mismatch at byte {len(blob) - 4}")
    return LabeledDataset(images.reshape(n, c, h, w).copy(),
                          labels.copy(), classes, stats)


_LOADERS = ("idx_like", "raw_tensor", "csv")


def load_dataset(path, fmt: str, image_shape=None, stats=None) -> LabeledDataset:
    """Read a labeled dataset; ``fmt`` picks the layout.

    idx_like and csv are normalized on load ([0, 1] scaling, then
    per-channel standardization); raw_tensor is stored post-normalization
    and comes back verbatim.
    """
    if fmt == "idx_like":
        return _load_idx_like(path, stats)
    if fmt == "raw_tensor":
        return _load_raw_tensor(path, stats)
    if fmt == "csv":
        return _load_csv(path, image_shape, stats)
    raise IngestionError(f"unknown dataset format {fmt!r}, pick from {_LOADERS}")


# ---------------------------------------------------------------------------
# synthetic set
# ---------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    """ipc learnable images per class, half foundation / half complement."""

    images: np.ndarray  # (S, C, H, W)
    labels: np.ndarray  # (S,) int64, class-major order
    classes: int
    ipc: int
    foundation_mask: np.ndarray  # (S,) bool; True = foundation subset
    config_hash: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.foundation_mask = np.ascontiguousarray(self.foundation_mask, dtype=bool)
        s = self.classes * self.ipc
        if self.ipc < 2 or self.ipc % 2:
            raise PartitionError(f"ipc must be even and >= 2, got {self.ipc}")
        if self.images.ndim != 4 or len(self.images) != s:
            raise PartitionError(
                f"expected {s} images ({self.classes} classes x {self.ipc}), "
                f"got {self.images.shape}"
            )
        if self.labels.shape != (s,) or self.foundation_mask.shape != (s,):
            raise PartitionError("labels and mask must have one entry per image")
        for c in range(self.classes):
            sel = self.labels == c
            if int(sel.sum()) != self.ipc:
                raise PartitionError(f"class {c} has {int(sel.sum())} images, wanted {self.ipc}")
            f = int(self.foundation_mask[sel].sum())
            if f != self.ipc // 2:
                raise PartitionError(
                    f"class {c} foundation subset has {f} images, wanted {self.ipc // 2}"
                )

    def __len__(self):
        return len(self.images)

    def foundation_indices(self) -> np.ndarray:
        return np.flatnonzero(self.foundation_mask)

    def complement_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.foundation_mask)


def init_synthetic(real: LabeledDataset, ipc: int, mode: str, seed: int,
                   config_hash: str = "") -> SyntheticDataset:
    """Build the starting synthetic set.

    mode "from_real" copies ipc random real images per class (no
    replacement); "noise" draws unit normal pixels, matching the scale of
    standardized data.  The foundation/complement split interleaves within
    each class: even slots foundation, odd slots complement.
    """
    if ipc < 2 or ipc % 2:
        raise PartitionError(f"ipc must be even and >= 2, got {ipc}")
    if mode not in ("from_real", "noise"):
        raise InitError(f"unknown init mode {mode!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    shape = real.images.shape[1:]
    chunks = []
    labels = []
    mask = []
    for c in range(real.classes):
        if mode == "from_real":
            pool = np.flatnonzero(real.labels == c)
            if len(pool) < ipc:
                raise InitError(
                    f"class {c} has {len(pool)} real examples, cannot draw {ipc}"
                )
            pick = rng.choice(pool, size=ipc, replace=False)
            chunks.append(real.images[pick].copy())
        else:
            chunks.append(rng.standard_normal((ipc,) + shape).astype(np.float32))
        labels.extend([c] * ipc)
        mask.extend([i % 2 == 0 for i in range(ipc)])
    return SyntheticDataset(
        images=np.concatenate(chunks).astype(np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        classes=real.classes,
        ipc=ipc,
        foundation_mask=np.asarray(mask, dtype=bool),
        config_hash=config_hash,
    )


def save_synthetic(syn: SyntheticDataset, path) -> None:
    head = bytearray()
    head += SYN_MAGIC
    head += struct.pack("<I", FORMAT_VERSION)
    s, c, h, w = syn.images.shape
    head += struct.pack("<IIIII", syn.classes, syn.ipc, c, h, w)
    hb = syn.config_hash.encode()
    head += struct.pack("<H", len(hb)) + hb
    body = np.ascontiguousarray(syn.images, dtype="<f4").tobytes()
    body += np.ascontiguousarray(syn.labels, dtype="<i8").tobytes()
    body += np.packbits(syn.foundation_mask).tobytes()
    crc = zlib.crc32(bytes(head) + body) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(bytes(head))
        f.write(body)
        f.write(struct.pack("<I", crc))


def load_synthetic(path) -> SyntheticDataset:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def need(size, what):
        nonlocal off
        if off + size > len(blob):
            raise FormatError(f"{path}: truncated at byte {off} reading {what}")
        out = blob[off:off + size]
        off += size
        return out

    if need(4, "magic") != SYN_MAGIC:
        raise FormatError(f"{path}: not a synthetic-set file (bad magic)")
    (version,) = struct.unpack("<I", need(4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    classes, ipc, c, h, w = struct.unpack("<IIIII", need(20, "dims"))
    (hlen,) = struct.unpack("<H", need(2, "hash length"))
    config_hash = need(hlen, "config hash").decode()
    s = classes * ipc
    images = np.frombuffer(need(4 * s * c * h * w, "images"), dtype="<f4")
    labels = np.frombuffer(need(8 * s, "labels"), dtype="<i8")
    mask_bytes = need((s + 7) // 8, "mask")
    (crc_stored,) = struct.unpack("<I", need(4, "checksum"))
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc_stored:
        raise FormatError(f"{path}: checksum mismatch (file corrupt)")
    mask = np.unpackbits(np.frombuffer(mask_bytes, dtype=np.uint8), count=s).astype(bool)
    return SyntheticDataset(
        images=images.reshape(s, c, h, w).copy(),
        labels=labels.copy(),
        classes=classes,
        ipc=ipc,
        foundation_mask=mask,
        config_hash=config_hash,
    )
