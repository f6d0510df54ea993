"""Downstream evaluation: train fresh nets on a synthetic set, test on
real held-out data.

Each run gets its own seed-derived init, batch order, and augmentation
stream, so the spread across runs measures how architecture-agnostic the
distilled images are.  A run that diverges is recorded as a failure with
a warning instead of killing the whole evaluation; the synthetic set is
never modified.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import augment as aug
from . import models
from .autodiff import Tensor, grad, softmax_cross_entropy
from .data import LabeledDataset, SyntheticDataset
from .exceptions import DimensionError, NumericError, TrainingError
from .models import ModelSpec
from .trajectories import accuracy


@dataclass
class EvalResult:
    accuracies: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (run index, reason)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def runs(self) -> int:
        return len(self.accuracies)


def train_on_synthetic(images: np.ndarray, labels: np.ndarray, spec: ModelSpec,
                       epochs: int, lr: float, momentum: float,
                       batch_size: int, policy: aug.AugmentPolicy,
                       seed) -> np.ndarray:
    """SGD-train one fresh net on the given images; returns its flat
    parameters.  batch_size 0 means full batch."""
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_seq, data_seq = seq.spawn(2)
    rng = np.random.Generator(np.random.PCG64(data_seq))
    theta = models.init_params(spec, init_seq, dtype=np.float32)
    velocity = np.zeros_like(theta)
    n = len(images)
    bs = batch_size if 0 < batch_size < n else n
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            xb = Tensor(images[idx])
            if policy.transforms:
                xb = aug.apply(policy, xb, rng)
            th = Tensor(theta, requires_grad=True)
            loss = softmax_cross_entropy(models.apply(spec, th, xb), labels[idx])
            g = grad(loss, [th])[0].data
            velocity = momentum * velocity + g
            theta = theta - lr * velocity
            step += 1
    return theta


def _eval_job(args):
    (images, labels, test_images, test_labels, spec, epochs, lr, momentum,
     batch_size, policy, seq, run) = args
    try:
        theta = train_on_synthetic(images, labels, spec, epochs, lr, momentum,
                                   batch_size, policy, seq)
        return run, accuracy(spec, theta, test_images, test_labels), None
    except (NumericError, TrainingError) as e:
        return run, None, str(e)


def evaluate(synthetic: SyntheticDataset, test: LabeledDataset, spec: ModelSpec,
             runs: int = 10, epochs: int = 1000, lr: float = 0.02,
             momentum: float = 0.9, batch_size: int = 0,
             policy: aug.AugmentPolicy | None = None, seed: int = 0,
             threads: int = 1) -> EvalResult:
    """Mean/stddev test accuracy of ``runs`` independently seeded nets
    trained on the synthetic set."""
    if synthetic.images.shape[1:] != spec.input_shape:
        raise DimensionError(
            f"synthetic images {synthetic.images.shape[1:]} do not match model "
            f"input {spec.input_shape}"
        )
    if test.images.shape[1:] != spec.input_shape:
        raise DimensionError(
            f"test images {test.images.shape[1:]} do not match model input "
            f"{spec.input_shape}"
        )
    if synthetic.classes != spec.classes or test.classes != spec.classes:
        raise DimensionError("class counts disagree between data and model")
    policy = policy if policy is not None else aug.AugmentPolicy()
    images = np.array(synthetic.images, dtype=np.float32)  # private copy
    labels = synthetic.labels.copy()
    seqs = np.random.SeedSequence(seed).spawn(runs)
    jobs = [
        (images, labels, test.images, test.labels, spec, epochs, lr, momentum,
         batch_size, policy, seqs[r], r)
        for r in range(runs)
    ]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=min(threads, runs)) as pool:
            outcomes = list(pool.map(_eval_job, jobs))
    else:
        outcomes = [_eval_job(j) for j in jobs]
    result = EvalResult()
    for run, acc, err in outcomes:
        if err is None:
            result.accuracies.append(acc)
            result.seeds.append(run)
        else:
            warnings.warn(f"evaluation run {run} diverged: {err}")
            result.failures.append((run, err))
    if not result.accuracies:
        raise TrainingError("every evaluation run diverged")
    return result
