"""Expert trajectory recording, storage, and sampling.

An expert is a throwaway network trained on the real data with plain
SGD + momentum; what we keep is its parameter vector sampled every
``stride`` optimizer steps (once per epoch by default), snapshot 0 being
the untouched initialization.  Optional EMA smoothing records a running
average instead of the raw iterate, which flattens the trajectory the
students later have to follow.

Buffers serialize to a little-endian binary file (magic ``TJBF``) with a
trailing CRC so truncation and corruption are loud.
"""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import models
from .autodiff import Tensor, grad, softmax_cross_entropy
from .exceptions import ConfigError, FormatError, NumericError, StateError, TrainingError
from .models import ModelSpec

FORMAT_VERSION = 1
_MAGIC = b"TJBF"


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 256
    ema_decay: float = 0.0  # 0 records raw iterates
    snapshot_stride: int = 0  # optimizer steps per snapshot; 0 means once per epoch

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("expert training needs lr > 0, epochs >= 1, batch_size >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in [0, 1)")
        if self.snapshot_stride < 0:
            raise ConfigError("snapshot_stride must be >= 0")


class TrajectoryBuffer:
    """Snapshots for E experts: float32 array of shape (E, T+1, P)."""

    def __init__(self, spec: ModelSpec, snapshots: np.ndarray, hyper: TrainHyper,
                 stride_steps: int, final_accs=None):
        snapshots = np.asarray(snapshots, dtype=np.float32)
        if snapshots.ndim != 3:
            raise StateError("snapshots must be (experts, T+1, P)")
        if snapshots.shape[2] != models.param_count(spec):
            raise StateError(
                f"snapshot width {snapshots.shape[2]} does not match "
                f"{spec.arch} parameter count {models.param_count(spec)}"
            )
        snapshots.flags.writeable = False
        self.spec = spec
        self.snapshots = snapshots
        self.hyper = hyper
        self.stride_steps = int(stride_steps)
        self.final_accs = list(final_accs) if final_accs is not None else []

    @property
    def experts(self) -> int:
        return self.snapshots.shape[0]

    @property
    def steps(self) -> int:
        """T: index of the last snapshot (snapshot 0 is the init)."""
        return self.snapshots.shape[1] - 1

    def sample(self, rng: np.random.Generator):
        """Uniformly pick one expert; returns (index, read-only (T+1, P) view)."""
        if self.experts == 0:
            raise StateError("cannot sample from an empty trajectory buffer")
        e = int(rng.integers(self.experts))
        return e, self.snapshots[e]


def accuracy(spec: ModelSpec, theta: np.ndarray, images: np.ndarray,
             labels: np.ndarray, batch_size: int = 1024) -> float:
    """Top-1 accuracy of a flat parameter vector on a labeled array pair."""
    th = Tensor(theta)
    hits = 0
    for lo in range(0, len(images), batch_size):
        xb = Tensor(images[lo:lo + batch_size])
        logits = models.apply(spec, th, xb)
        hits += int(np.sum(np.argmax(logits.data, axis=1) == labels[lo:lo + batch_size]))
    return hits / len(images)


def train_expert(images: np.ndarray, labels: np.ndarray, spec: ModelSpec,
                 hyper: TrainHyper, seed, expert_id: int = 0):
    """Train one expert; returns (snapshots (T+1, P) float32, final accuracy).

    Deterministic per seed: the init and the shuffles come from seeded
    streams, and the arithmetic is single-threaded numpy.
    """
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_seq, data_seq = seq.spawn(2)
    rng = np.random.Generator(np.random.PCG64(data_seq))
    theta = models.init_params(spec, init_seq, dtype=np.float32)

    n = len(images)
    steps_per_epoch = max(1, (n + hyper.batch_size - 1) // hyper.batch_size)
    stride = hyper.snapshot_stride or steps_per_epoch
    total = steps_per_epoch * hyper.epochs
    if total // stride < 1:
        raise ConfigError(
            f"snapshot stride {stride} exceeds total steps {total}; nothing to record"
        )

    ema = theta.copy() if hyper.ema_decay > 0 else None
    velocity = np.zeros_like(theta)
    snaps = [theta.copy()]
    step = 0
    try:
        for _ in range(hyper.epochs):
            order = rng.permutation(n)
            for lo in range(0, n, hyper.batch_size):
                idx = order[lo:lo + hyper.batch_size]
                th = Tensor(theta, requires_grad=True)
                loss = softmax_cross_entropy(
                    models.apply(spec, th, Tensor(images[idx])), labels[idx]
                )
                g = grad(loss, [th])[0].data
                velocity = hyper.momentum * velocity + g
                theta = theta - hyper.lr * velocity
                if ema is not None:
                    ema = hyper.ema_decay * ema + (1.0 - hyper.ema_decay) * theta
                step += 1
                if step % stride == 0:
                    snaps.append((ema if ema is not None else theta).copy())
    except NumericError as e:
        raise TrainingError(f"expert {expert_id} diverged at step {step + 1}: {e}") from e

    snapshots = np.stack(snaps).astype(np.float32)
    final_acc = accuracy(spec, snapshots[-1], images, labels)
    return snapshots, final_acc


def _expert_job(args):
    images, labels, spec, hyper, seq, eid = args
    return train_expert(images, labels, spec, hyper, seq, expert_id=eid)


def build_buffer(images: np.ndarray, labels: np.ndarray, spec: ModelSpec,
                 hyper: TrainHyper, experts: int, seed: int,
                 threads: int = 1) -> TrajectoryBuffer:
    """Train ``experts`` independently seeded experts and stack their
    trajectories.  Workers only parallelize across experts; each expert is
    self-seeded, so the result does not depend on ``threads``."""
    if experts < 1:
        raise ConfigError("need at least one expert")
    seqs = np.random.SeedSequence(seed).spawn(experts)
    jobs = [(images, labels, spec, hyper, seqs[e], e) for e in range(experts)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=min(threads, experts)) as pool:
            results = list(pool.map(_expert_job, jobs))
    else:
        results = [_expert_job(j) for j in jobs]
    snaps = np.stack([r[0] for r in results])
    accs = [r[1] for r in results]
    steps_per_epoch = max(1, (len(images) + hyper.batch_size - 1) // hyper.batch_size)
    stride = hyper.snapshot_stride or steps_per_epoch
    return TrajectoryBuffer(spec, snaps, hyper, stride, accs)


# ---------------------------------------------------------------------------
# binary round trip
# ---------------------------------------------------------------------------


def save_buffer(buf: TrajectoryBuffer, path) -> None:
    spec = buf.spec
    head = bytearray()
    head += _MAGIC
    head += struct.pack("<I", FORMAT_VERSION)
    arch = spec.arch.encode()
    head += struct.pack("<H", len(arch)) + arch
    head += struct.pack("<II", spec.depth, spec.width)
    head += struct.pack("<I", len(spec.input_shape))
    head += struct.pack(f"<{len(spec.input_shape)}I", *spec.input_shape)
    head += struct.pack("<I", spec.classes)
    e, t1, p = buf.snapshots.shape
    head += struct.pack("<IIQI", e, t1 - 1, p, buf.stride_steps)
    h = buf.hyper
    head += struct.pack("<ddIId", h.lr, h.momentum, h.epochs, h.batch_size, h.ema_decay)
    accs = np.asarray(buf.final_accs, dtype=np.float64)
    head += struct.pack("<I", len(accs)) + accs.tobytes()
    payload = np.ascontiguousarray(buf.snapshots, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(head) + payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(bytes(head))
        f.write(payload)
        f.write(struct.pack("<I", crc))


class _Reader:
    def __init__(self, blob: bytes, what: str):
        self.blob = blob
        self.off = 0
        self.what = what

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.blob):
            raise FormatError(
                f"{self.what}: truncated at byte {self.off}, needed {size} more"
            )
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += size
        return vals

    def raw(self, size: int) -> bytes:
        if self.off + size > len(self.blob):
            raise FormatError(
                f"{self.what}: truncated at byte {self.off}, needed {size} more"
            )
        out = self.blob[self.off:self.off + size]
        self.off += size
        return out


def load_buffer(path) -> TrajectoryBuffer:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, f"trajectory buffer {path}")
    if r.raw(4) != _MAGIC:
        raise FormatError(f"{path}: not a trajectory buffer (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    (alen,) = r.unpack("<H")
    arch = r.raw(alen).decode()
    depth, width = r.unpack("<II")
    (ndim,) = r.unpack("<I")
    shape = r.unpack(f"<{ndim}I")
    (classes,) = r.unpack("<I")
    spec = ModelSpec(arch=arch, depth=depth, width=width,
                     input_shape=shape, classes=classes)
    e, t, p, stride = r.unpack("<IIQI")
    lr, momentum, epochs, batch, ema = r.unpack("<ddIId")
    hyper = TrainHyper(lr=lr, momentum=momentum, epochs=epochs,
                       batch_size=batch, ema_decay=ema)
    (n_accs,) = r.unpack("<I")
    accs = np.frombuffer(r.raw(8 * n_accs), dtype="<f8")
    if p != models.param_count(spec):
        raise FormatError(
            f"{path}: header claims {p} parameters but {arch} has "
            f"{models.param_count(spec)}"
        )
    count = e * (t + 1) * p
    payload = np.frombuffer(r.raw(4 * count), dtype="<f4").reshape(e, t + 1, p)
    (crc_stored,) = r.unpack("<I")
    if r.off != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.off} trailing bytes after checksum")
    crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if crc != crc_stored:
        raise FormatError(f"{path}: checksum mismatch (file corrupt)")
    return TrajectoryBuffer(spec, payload.copy(), hyper, stride, list(accs))
