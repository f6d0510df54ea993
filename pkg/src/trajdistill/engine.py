"""The distillation engine: progressive trajectory matching with overlap
mitigation.

Each iteration samples an expert trajectory, starts a student at the
expert's parameters, lets it take t SGD steps on the synthetic set, and
measures how far it lands from where the expert got after t snapshot
units, normalized by how far the expert itself moved.  The step size t
follows a progressive schedule (1 up to max_step), so early iterations
shape short-horizon behavior and later ones long-horizon behavior.

Two devices keep the foundation and complement halves of the synthetic
set from collapsing onto each other while t grows:

* an overlap penalty, the negated class-masked kernel discrepancy between
  the halves (maximizing their separation), and
* staged retraining: at fixed fractions of max_step the complement half is
  reset to a snapshot of itself recorded half an interval earlier, then
  re-trained under the larger-t regime.

Reductions that tests compare against naive reference loops use ordered
summation (``osum``), so equality is exact in float64, not approximate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import augment as aug
from . import autodiff as ad
from . import models
from .autodiff import Tensor, grad
from .exceptions import (
    ConfigError,
    DegenerateTrajectoryError,
    DimensionError,
    NumericError,
    PartitionError,
    ScheduleError,
    StateError,
    UnrollError,
)

SCHEDULES = ("progressive", "fixed", "random_segment")


@dataclass(frozen=True)
class DistillConfig:
    """Outer-loop knobs.  ``max_step`` counts expert snapshot units; the
    student takes ``steps_per_unit`` SGD steps per unit."""

    iterations: int = 2000
    max_step: int = 10
    schedule: str = "progressive"
    fixed_step: int = 0
    segment_length: int = 2
    steps_per_unit: int = 1
    inner_batch: int = 0  # 0 = full synthetic set each student step
    student_lr: float = 0.02
    learn_student_lr: bool = True
    student_lr_lr: float = 1e-2
    image_lr: float = 50.0
    image_momentum: float = 0.5
    beta1: float = 1.0
    beta2: float = 0.0
    kernel_sigma: float = 0.0  # 0 = median pairwise distance at init
    retrain_points: int = 0  # k
    ipc: int = 2
    init: str = "from_real"
    dtype: str = "float32"
    checkpoint_every: int = 0
    save_every: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.max_step < 1:
            raise ConfigError("max_step must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.schedule == "fixed" and not 1 <= self.fixed_step <= self.max_step:
            raise ConfigError("fixed schedule needs 1 <= fixed_step <= max_step")
        if self.schedule == "random_segment" and not 1 <= self.segment_length <= self.max_step:
            raise ConfigError("random_segment needs 1 <= segment_length <= max_step")
        if self.steps_per_unit < 1:
            raise ConfigError("steps_per_unit must be >= 1")
        if self.inner_batch < 0:
            raise ConfigError("inner_batch must be >= 0")
        if self.student_lr <= 0 or self.image_lr <= 0 or self.student_lr_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.image_momentum < 1:
            raise ConfigError("image_momentum must be in [0, 1)")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("beta weights must be >= 0")
        if self.kernel_sigma < 0:
            raise ConfigError("kernel_sigma must be >= 0 (0 = median heuristic)")
        if self.retrain_points < 0:
            raise ConfigError("retrain_points must be >= 0")
        if self.ipc < 2 or self.ipc % 2:
            raise ConfigError("ipc must be even and >= 2")
        if self.init not in ("from_real", "noise"):
            raise ConfigError("init must be 'from_real' or 'noise'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be 'float32' or 'float64'")
        if self.checkpoint_every < 0 or self.save_every < 0:
            raise ConfigError("periodic intervals must be >= 0")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class DistillSchedule:
    """Per-iteration step sizes plus the retraining bookkeeping.

    ``replace_with[m]`` names the snapshot (a midpoint value) that the
    complement set is reset to the first time t reaches m;
    ``record_for`` is the reverse index of midpoints to record at.
    """

    steps: np.ndarray
    starts: np.ndarray
    retrain_points: tuple = ()
    record_for: dict = field(default_factory=dict)
    replace_with: dict = field(default_factory=dict)


def retrain_schedule(max_step: int, k: int) -> tuple:
    """Retraining points m_i = max_step - i * max_step / (k + 1), i = 1..k,
    rounded half-up, deduplicated, floored at 1.  Descending order."""
    if k < 0:
        raise ScheduleError("retrain_points must be >= 0")
    if k == 0:
        return ()
    if k >= max_step:
        raise ScheduleError(
            f"retrain_points {k} must be smaller than max_step {max_step}"
        )
    out = []
    for i in range(1, k + 1):
        m = _half_up(max_step - max_step / (k + 1) * i)
        if m >= 1 and m not in out:
            out.append(m)
    return tuple(out)


def make_schedule(config: DistillConfig, buffer_steps: int,
                  rng: np.random.Generator | None = None) -> DistillSchedule:
    """Build the full per-iteration schedule against a buffer with
    ``buffer_steps`` recorded snapshot intervals."""
    n, t_max = config.iterations, config.max_step
    if t_max > buffer_steps:
        raise ScheduleError(
            f"max_step {t_max} exceeds the buffer's {buffer_steps} snapshot steps"
        )
    if config.schedule == "progressive":
        if n < t_max:
            raise ScheduleError(
                f"a progressive schedule needs iterations >= max_step "
                f"({n} < {t_max})"
            )
        i = np.arange(1, n + 1, dtype=np.int64)
        steps = np.clip(np.ceil(i * t_max / n).astype(np.int64), 1, t_max)
        starts = np.zeros(n, dtype=np.int64)
    elif config.schedule == "fixed":
        steps = np.full(n, config.fixed_step, dtype=np.int64)
        starts = np.zeros(n, dtype=np.int64)
    else:  # random_segment
        if rng is None:
            raise ScheduleError("random_segment schedule needs an rng")
        steps = np.full(n, config.segment_length, dtype=np.int64)
        starts = rng.integers(0, buffer_steps - config.segment_length + 1,
                              size=n, dtype=np.int64)

    k = config.retrain_points
    if k > 0 and config.schedule != "progressive":
        warnings.warn(
            "retraining points only apply to the progressive schedule; ignoring"
        )
        k = 0
    points = retrain_schedule(t_max, k) if k else ()
    record_for: dict = {}
    replace_with: dict = {}
    lower = list(points[1:]) + [0]
    for m, m_next in zip(points, lower):
        if m_next + 1 > m - 1:
            raise ScheduleError(
                f"retraining interval ({m_next}, {m}) too narrow for a midpoint"
            )
        mid = min(max(_half_up((m + m_next) / 2), m_next + 1), m - 1)
        record_for[mid] = m
        replace_with[m] = mid
    steps.flags.writeable = False
    starts.flags.writeable = False
    return DistillSchedule(steps, starts, points, record_for, replace_with)


class SnapshotStore:
    """Write-once map from step-size value to a saved complement-pixel
    array."""

    def __init__(self):
        self._snaps: dict = {}

    def put(self, t: int, images: np.ndarray) -> None:
        if t in self._snaps:
            raise StateError(f"snapshot for t={t} already recorded")
        arr = np.array(images)
        arr.flags.writeable = False
        self._snaps[int(t)] = arr

    def get(self, t: int) -> np.ndarray:
        if t not in self._snaps:
            raise StateError(f"no snapshot recorded for t={t}")
        return self._snaps[t]

    def __contains__(self, t) -> bool:
        return int(t) in self._snaps

    def keys(self):
        return sorted(self._snaps)

    def state(self) -> dict:
        return {t: np.array(v) for t, v in self._snaps.items()}

    @classmethod
    def from_state(cls, state: dict) -> "SnapshotStore":
        out = cls()
        for t, v in state.items():
            out.put(t, v)
        return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def matching_loss(theta_student: Tensor, theta_target, theta_start) -> Tensor:
    """Squared distance from the student's endpoint to the expert's target,
    normalized by the expert's own movement over the same span.

    Numerator terms accumulate in index order, and the denominator is the
    same ordered float64 sum ``param_distance_sq`` uses, so a naive loop
    reproduces the value bit for bit in 64-bit mode.
    """
    target_np = theta_target.data if isinstance(theta_target, Tensor) else np.asarray(theta_target)
    start_np = theta_start.data if isinstance(theta_start, Tensor) else np.asarray(theta_start)
    if theta_student.shape != target_np.shape or target_np.shape != start_np.shape:
        raise DimensionError("matching_loss needs three equal-length vectors")
    den = models.param_distance_sq(target_np, start_np)
    if den == 0.0:
        raise DegenerateTrajectoryError(
            "expert target equals expert start; matching loss is undefined"
        )
    diff = ad.sub(theta_student, ad.constant(target_np, dtype=theta_student.dtype))
    num = ad.osum(ad.mul(diff, diff))
    return ad.div(num, ad.constant(np.asarray(den, dtype=theta_student.dtype)))


def gaussian_kernel(a, b, sigma: float, class_a: int = 0, class_b: int = 0) -> float:
    """Class-masked Gaussian kernel between two image vectors:
    exp(-(||a - b||^2 / (2 sigma^2))) when the classes agree, else 0."""
    if sigma <= 0:
        raise ConfigError("kernel sigma must be positive")
    if class_a != class_b:
        return 0.0
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError("kernel inputs must have the same size")
    d = a - b
    d2 = float(np.cumsum(d * d)[-1])
    return float(np.exp(-(d2 / (2.0 * sigma * sigma))))


def _pair_sq_dists(f: Tensor, c: Tensor) -> Tensor:
    """(n, m) ordered-sum squared distances between rows of two flat sets."""
    n, d = f.shape
    m = c.shape[0]
    a3 = ad.broadcast_to(ad.reshape(f, (n, 1, d)), (n, m, d))
    b3 = ad.broadcast_to(ad.reshape(c, (1, m, d)), (n, m, d))
    diff = ad.sub(a3, b3)
    return ad.osum(ad.mul(diff, diff), axis=2)


def _class_mask(la: np.ndarray, lb: np.ndarray, dtype) -> np.ndarray:
    return (la[:, None] == lb[None, :]).astype(dtype)


def overlap_loss(foundation: Tensor, complement: Tensor,
                 foundation_labels, complement_labels, sigma: float) -> Tensor:
    """Sum over all pairs of 2 k(f_i, c_j) - k(c_i, c_j) - k(f_i, f_j) with
    the class-masked Gaussian kernel: the negated (unnormalized) squared
    discrepancy between the two subsets.  Gradient ascent on separation.

    Per-entry arithmetic and the final reduction are ordered to match a
    naive double loop exactly in float64.
    """
    if sigma <= 0:
        raise ConfigError("kernel sigma must be positive")
    lf = np.asarray(foundation_labels)
    lc = np.asarray(complement_labels)
    n = foundation.shape[0]
    if complement.shape[0] != n:
        raise PartitionError(
            f"subset sizes differ: {n} foundation vs {complement.shape[0]} complement"
        )
    if lf.shape != (n,) or lc.shape != (n,):
        raise PartitionError("need one label per subset image")
    f = ad.reshape(foundation, (n, int(np.prod(foundation.shape[1:]))))
    c = ad.reshape(complement, (n, int(np.prod(complement.shape[1:]))))
    denom = ad.constant(np.asarray(2.0 * sigma * sigma, dtype=foundation.dtype))
    dt = f.dtype

    def kmat(a, b, la, lb):
        k = ad.exp(ad.neg(ad.div(_pair_sq_dists(a, b), denom)))
        return ad.mul(k, ad.constant(_class_mask(la, lb, dt)))

    k_fc = kmat(f, c, lf, lc)
    k_cc = kmat(c, c, lc, lc)
    k_ff = kmat(f, f, lf, lf)
    # 2k_fc - (k_cc + k_ff): this association makes each entry the exact
    # IEEE negation of the mmd term (k_ff + k_cc) - 2k_fc
    combined = ad.sub(ad.mul(ad.constant(np.asarray(2.0, dtype=dt)), k_fc),
                      ad.add(k_cc, k_ff))
    return ad.osum(combined)


def subset_mmd(foundation: np.ndarray, complement: np.ndarray,
               foundation_labels, complement_labels, sigma: float) -> float:
    """Diagnostic: sqrt of the biased class-masked MMD^2 between the two
    subsets.  Shares its kernel arithmetic with ``overlap_loss``, of which
    it is the negation scaled by 1/n^2."""
    f = Tensor(np.asarray(foundation, dtype=np.float64))
    c = Tensor(np.asarray(complement, dtype=np.float64))
    n = f.shape[0]
    total = overlap_loss(f, c, foundation_labels, complement_labels, sigma).item()
    mmd2 = -total / (n * n)
    return math.sqrt(max(mmd2, 0.0))


def median_sigma(images: np.ndarray) -> float:
    """Median pairwise Euclidean distance between flattened images; the
    default kernel bandwidth, fixed once at initialization."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    n = len(x)
    if n < 2:
        raise PartitionError("median bandwidth needs at least two images")
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=2)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    if med <= 0:
        warnings.warn("all synthetic images identical; falling back to sigma=1")
        return 1.0
    return med


# ---------------------------------------------------------------------------
# student unroll
# ---------------------------------------------------------------------------


def student_unroll(loss_fn, theta0, images: Tensor, labels: np.ndarray,
                   steps: int, eta, batch_size: int = 0,
                   rng: np.random.Generator | None = None,
                   build_graph: bool = True) -> Tensor:
    """Run ``steps`` SGD updates theta <- theta - eta * dL/dtheta with
    ``loss_fn(theta, batch_images, batch_labels)`` and return the final
    parameters, differentiable with respect to the images and eta.

    steps=0 returns theta0 untouched.  A non-finite inner loss raises
    UnrollError naming the offending step.
    """
    if steps < 0:
        raise UnrollError("negative step count")
    theta = theta0 if isinstance(theta0, Tensor) else Tensor(theta0, requires_grad=True)
    if not isinstance(eta, Tensor):
        eta = ad.constant(np.asarray(eta, dtype=theta.dtype))
    n = images.shape[0]
    use_batch = 0 < batch_size < n
    if use_batch and rng is None:
        raise UnrollError("minibatched unroll needs an rng")
    for step in range(steps):
        if use_batch:
            idx = rng.permutation(n)[:batch_size]
            xb = ad.take(images, idx.astype(np.int64), axis=0)
            yb = labels[idx]
        else:
            xb, yb = images, labels
        try:
            loss = loss_fn(theta, xb, yb)
            g = grad(loss, [theta], build_graph=build_graph)[0]
        except NumericError as e:
            raise UnrollError(f"non-finite student loss at inner step {step + 1}") from e
        theta = ad.sub(theta, ad.mul(eta, g))
    return theta


# ---------------------------------------------------------------------------
# the distiller
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    iteration: int
    step: int
    expert: int
    match_loss: float
    overlap_loss: float
    mmd: float
    student_lr: float


class Distiller:
    """Owns the synthetic pixels and walks the schedule one step at a time.

    The synthetic labels and the foundation/complement split never change;
    only pixels (and optionally the student learning rate) receive
    gradients.  ``state()``/``load_state()`` round-trip everything needed
    to resume mid-run bit-exactly, including the rng.
    """

    def __init__(self, buffer, synthetic, config: DistillConfig,
                 policy: aug.AugmentPolicy | None = None, seed: int = 0):
        self.buffer = buffer
        self.config = config
        self.spec = buffer.spec
        self.policy = policy if policy is not None else aug.AugmentPolicy()
        self.dtype = config.np_dtype

        if synthetic.images.shape[1:] != self.spec.input_shape:
            raise DimensionError(
                f"synthetic images {synthetic.images.shape[1:]} do not match "
                f"model input {self.spec.input_shape}"
            )
        if synthetic.classes != self.spec.classes:
            raise DimensionError(
                f"synthetic set has {synthetic.classes} classes, model expects "
                f"{self.spec.classes}"
            )
        self.synthetic = synthetic
        self.labels = synthetic.labels.copy()
        self.f_idx = synthetic.foundation_indices().astype(np.int64)
        self.c_idx = synthetic.complement_indices().astype(np.int64)

        seq = np.random.SeedSequence(seed)
        sched_seq, run_seq = seq.spawn(2)
        self.schedule = make_schedule(
            config, buffer.steps, rng=np.random.Generator(np.random.PCG64(sched_seq))
        )
        self.rng = np.random.Generator(np.random.PCG64(run_seq))

        self.pixels = synthetic.images.astype(self.dtype).copy()
        self.v_pixels = np.zeros_like(self.pixels)
        self.rho = float(np.log(config.student_lr))
        self.v_rho = 0.0
        self.sigma = config.kernel_sigma or median_sigma(self.pixels)
        self.store = SnapshotStore()
        self.recorded: set = set()
        self.replaced: set = set()
        self.iteration = 0

    @property
    def student_lr(self) -> float:
        return float(np.exp(self.rho))

    def _inner_loss_fn(self):
        def fn(theta, xb, yb):
            if self.policy.transforms:
                xb = aug.apply(self.policy, xb, self.rng)
            logits = models.apply(self.spec, theta, xb)
            return ad.softmax_cross_entropy(logits, yb)
        return fn

    def step(self) -> MetricsRecord:
        """One outer iteration: unroll, backprop to pixels, apply any
        snapshot/retraining event whose step size is reached first here."""
        cfg = self.config
        if self.iteration >= len(self.schedule.steps):
            raise StateError("schedule exhausted; increase iterations")
        i = self.iteration
        t = int(self.schedule.steps[i])
        start = int(self.schedule.starts[i])
        expert, traj = self.buffer.sample(self.rng)
        theta0_np = traj[start].astype(self.dtype)
        target_np = traj[start + t].astype(self.dtype)

        pixels = Tensor(self.pixels, requires_grad=True)
        if cfg.learn_student_lr:
            rho = Tensor(np.asarray(self.rho, dtype=self.dtype), requires_grad=True)
            eta = ad.exp(rho)
        else:
            rho = None
            eta = ad.constant(np.asarray(cfg.student_lr, dtype=self.dtype))

        theta0 = Tensor(theta0_np, requires_grad=True)
        theta_t = student_unroll(
            self._inner_loss_fn(), theta0, pixels, self.labels,
            t * cfg.steps_per_unit, eta, cfg.inner_batch, self.rng,
        )
        l_match = matching_loss(theta_t, target_np, theta0_np)
        loss = ad.mul(ad.constant(np.asarray(cfg.beta1, dtype=self.dtype)), l_match)
        if cfg.beta2 > 0:
            f_imgs = ad.take(pixels, self.f_idx, axis=0)
            c_imgs = ad.take(pixels, self.c_idx, axis=0)
            l_over = overlap_loss(f_imgs, c_imgs, self.labels[self.f_idx],
                                  self.labels[self.c_idx], self.sigma)
            loss = ad.add(loss, ad.mul(
                ad.constant(np.asarray(cfg.beta2, dtype=self.dtype)), l_over))
            over_val = float(l_over.data)
        else:
            over_val = float(overlap_loss(
                Tensor(self.pixels[self.f_idx]), Tensor(self.pixels[self.c_idx]),
                self.labels[self.f_idx], self.labels[self.c_idx], self.sigma,
            ).data)
        n_sub = len(self.f_idx)
        mmd_val = math.sqrt(max(-over_val / (n_sub * n_sub), 0.0))

        targets = [pixels] + ([rho] if rho is not None else [])
        grads = grad(loss, targets)
        g_pix = grads[0].data.astype(self.pixels.dtype)
        self.v_pixels = cfg.image_momentum * self.v_pixels + g_pix
        self.pixels = self.pixels - cfg.image_lr * self.v_pixels
        if rho is not None:
            g_rho = float(grads[1].data)
            self.v_rho = cfg.image_momentum * self.v_rho + g_rho
            self.rho = self.rho - cfg.student_lr_lr * self.v_rho

        # snapshot/retraining events, each firing only at the first
        # iteration whose step size reaches the value
        if t in self.schedule.record_for and t not in self.recorded:
            self.store.put(t, self.pixels[self.c_idx])
            self.recorded.add(t)
        if t in self.schedule.replace_with and t not in self.replaced:
            snap = self.store.get(self.schedule.replace_with[t])
            self.pixels[self.c_idx] = snap.astype(self.pixels.dtype)
            self.v_pixels[self.c_idx] = 0.0
            self.replaced.add(t)

        self.iteration += 1
        return MetricsRecord(
            iteration=self.iteration,
            step=t,
            expert=expert,
            match_loss=float(l_match.data),
            overlap_loss=over_val,
            mmd=mmd_val,
            student_lr=self.student_lr,
        )

    def run(self, iterations: int | None = None, on_record=None) -> list:
        """Drive ``step`` until the schedule ends (or ``iterations`` more
        records), returning the records."""
        remaining = len(self.schedule.steps) - self.iteration
        todo = remaining if iterations is None else min(iterations, remaining)
        records = []
        for _ in range(todo):
            rec = self.step()
            records.append(rec)
            if on_record is not None:
                on_record(rec)
        return records

    def current_synthetic(self):
        from .data import SyntheticDataset

        return SyntheticDataset(
            images=self.pixels.astype(np.float32),
            labels=self.labels.copy(),
            classes=self.synthetic.classes,
            ipc=self.synthetic.ipc,
            foundation_mask=self.synthetic.foundation_mask.copy(),
            config_hash=self.synthetic.config_hash,
        )

    # ---- resume support ----

    def state(self) -> dict:
        return {
            "iteration": self.iteration,
            "pixels": np.array(self.pixels),
            "v_pixels": np.array(self.v_pixels),
            "rho": self.rho,
            "v_rho": self.v_rho,
            "sigma": self.sigma,
            "store": self.store.state(),
            "recorded": set(self.recorded),
            "replaced": set(self.replaced),
            "rng_state": self.rng.bit_generator.state,
        }

    def load_state(self, state: dict) -> None:
        if state["pixels"].shape != self.pixels.shape:
            raise StateError("checkpoint pixel shape does not match this run")
        self.iteration = int(state["iteration"])
        self.pixels = np.array(state["pixels"])
        self.v_pixels = np.array(state["v_pixels"])
        self.rho = float(state["rho"])
        self.v_rho = float(state["v_rho"])
        self.sigma = float(state["sigma"])
        self.store = SnapshotStore.from_state(state["store"])
        self.recorded = set(state["recorded"])
        self.replaced = set(state["replaced"])
        self.rng.bit_generator.state = state["rng_state"]
