"""Synthetic benchmark data: noisy Gaussian bumps on a small grid.

Each class is a smooth spatial bump at a class-specific location; samples
jitter the center, vary the amplitude, and add pixel noise.  Class
structure lives in where the energy sits, so a couple of clean prototypes
can carry it, while individual samples are noisy enough that a random
handful of real images makes a weak training set.  That gap is exactly
what distillation is supposed to close.

Run as a module to write train/test splits in raw_tensor format:

    python -m trajdistill.toydata OUTDIR [--seed 0] [--train 3000] [--test 600]
"""

from __future__ import annotations

import argparse
import os

import numpy as np

from .data import LabeledDataset, save_raw_tensor, standardize

# centers chosen asymmetric so no flip/rotation maps one class onto another
_CENTERS = [(1.8, 2.2), (5.4, 4.9), (2.3, 5.9), (5.8, 1.7), (3.9, 3.4)]


def make_blobs(n: int, classes: int = 3, size: int = 8, seed: int = 0,
               noise: float = 0.5, jitter: float = 1.5, width: float = 1.3,
               amp_lo: float = 0.6, amp_hi: float = 1.4, stats=None):
    """One split of the bump dataset; returns (LabeledDataset, stats).

    Pass the training split's ``stats`` when generating the test split so
    both are standardized consistently.
    """
    if classes > len(_CENTERS):
        raise ValueError(f"at most {len(_CENTERS)} classes supported")
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = rng.integers(0, classes, size=n).astype(np.int64)
    rr, cc = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    images = np.empty((n, 1, size, size), dtype=np.float32)
    scale = size / 8.0  # keep geometry comparable across grid sizes
    for i in range(n):
        cr, cc0 = _CENTERS[labels[i]]
        cr = cr * scale + rng.uniform(-jitter, jitter)
        cc0 = cc0 * scale + rng.uniform(-jitter, jitter)
        amp = rng.uniform(amp_lo, amp_hi)
        bump = amp * np.exp(-(((rr - cr) ** 2 + (cc - cc0) ** 2) / (2.0 * width ** 2)))
        img = bump + rng.normal(0.0, noise, size=(size, size))
        images[i, 0] = img
    # map roughly [0, amp_hi] onto u8 scale, then standardize like any ingested set
    raw = np.clip(images * 160.0 + 40.0, 0.0, 255.0)
    x, stats = standardize(raw, stats)
    return LabeledDataset(x, labels, classes, stats), stats


def make_splits(n_train: int = 3000, n_test: int = 600, classes: int = 3,
                size: int = 8, seed: int = 0, **kw):
    """Train and test splits sharing the training normalization."""
    train, stats = make_blobs(n_train, classes, size, seed, **kw)
    test, _ = make_blobs(n_test, classes, size, seed + 1, stats=stats, **kw)
    return train, test


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("outdir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=3000)
    p.add_argument("--test", type=int, default=600)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--size", type=int, default=8)
    args = p.parse_args(argv)
    train, test = make_splits(args.train, args.test, args.classes, args.size, args.seed)
    os.makedirs(args.outdir, exist_ok=True)
    tr = os.path.join(args.outdir, "blobs_train.rtd")
    te = os.path.join(args.outdir, "blobs_test.rtd")
    save_raw_tensor(train, tr)
    save_raw_tensor(test, te)
    print(f"wrote {tr} ({len(train)} examples) and {te} ({len(test)} examples)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
