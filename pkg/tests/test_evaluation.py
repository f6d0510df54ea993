"""Evaluation harness: trains fresh nets on a synthetic set and scores
them; must never mutate the set, must be seed-deterministic, and must
survive (and record) diverging runs."""

import numpy as np
import pytest

from trajdistill.data import LabeledDataset, SyntheticDataset
from trajdistill.evaluation import evaluate, train_on_synthetic
from trajdistill.exceptions import DimensionError
from trajdistill.models import ModelSpec
from trajdistill.augment import AugmentPolicy

SPEC = ModelSpec("mlp", depth=1, width=8, input_shape=(1, 3, 3), classes=2)


def _synthetic(seed=0, scale=1.0):
    rng = np.random.Generator(np.random.PCG64(seed))
    images = rng.standard_normal((4, 1, 3, 3)).astype(np.float32) * scale
    images[0, 0, 0, 0] += 3.0
    images[1, 0, 0, 0] += 3.0
    images[2, 0, 2, 2] += 3.0
    images[3, 0, 2, 2] += 3.0
    return SyntheticDataset(
        images=images,
        labels=np.array([0, 0, 1, 1], dtype=np.int64),
        classes=2, ipc=2,
        foundation_mask=np.array([True, False, True, False]),
    )


def _test_set(seed=1, n=40):
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = (np.arange(n) % 2).astype(np.int64)
    images = rng.standard_normal((n, 1, 3, 3)).astype(np.float32) * 0.3
    for i, c in enumerate(labels):
        images[i, 0, 0 if c == 0 else 2, 0 if c == 0 else 2] += 3.0
    return LabeledDataset(images, labels, 2)


def test_learns_separable_task():
    res = evaluate(_synthetic(), _test_set(), SPEC, runs=3, epochs=50, lr=0.05,
                   seed=0)
    assert res.runs == 3
    assert res.mean > 0.8
    assert res.std >= 0.0
    assert res.failures == []


def test_never_mutates_synthetic_images():
    syn = _synthetic()
    before = syn.images.copy()
    evaluate(syn, _test_set(), SPEC, runs=2, epochs=20, lr=0.05, seed=1)
    np.testing.assert_array_equal(syn.images, before)


def test_determinism_and_seed_sensitivity():
    a = evaluate(_synthetic(), _test_set(), SPEC, runs=3, epochs=20, lr=0.05, seed=2)
    b = evaluate(_synthetic(), _test_set(), SPEC, runs=3, epochs=20, lr=0.05, seed=2)
    assert a.accuracies == b.accuracies
    # accuracy saturates on this toy task, so seed sensitivity is checked on
    # the trained parameters themselves
    syn = _synthetic()
    t1 = train_on_synthetic(syn.images, syn.labels, SPEC, epochs=5, lr=0.05,
                            momentum=0.9, batch_size=0, policy=AugmentPolicy(), seed=2)
    t2 = train_on_synthetic(syn.images, syn.labels, SPEC, epochs=5, lr=0.05,
                            momentum=0.9, batch_size=0, policy=AugmentPolicy(), seed=2)
    t3 = train_on_synthetic(syn.images, syn.labels, SPEC, epochs=5, lr=0.05,
                            momentum=0.9, batch_size=0, policy=AugmentPolicy(), seed=3)
    np.testing.assert_array_equal(t1, t2)
    assert not np.array_equal(t1, t3)


def test_threads_do_not_change_result():
    a = evaluate(_synthetic(), _test_set(), SPEC, runs=2, epochs=15, lr=0.05,
                 seed=4, threads=1)
    b = evaluate(_synthetic(), _test_set(), SPEC, runs=2, epochs=15, lr=0.05,
                 seed=4, threads=2)
    assert a.accuracies == b.accuracies


def test_partial_divergence_recorded_not_fatal(monkeypatch):
    import trajdistill.evaluation as ev
    from trajdistill.exceptions import NumericError

    real = ev.train_on_synthetic
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NumericError("operation produced non-finite values")
        return real(*args, **kwargs)

    monkeypatch.setattr(ev, "train_on_synthetic", flaky)
    with pytest.warns(UserWarning, match="diverged"):
        res = evaluate(_synthetic(), _test_set(), SPEC, runs=3, epochs=10,
                       lr=0.05, seed=5)
    assert res.runs == 2
    assert len(res.failures) == 1
    assert res.failures[0][0] == 1  # second run, zero-indexed


def test_all_divergent_is_fatal():
    from trajdistill.exceptions import TrainingError

    with np.errstate(all="ignore"):
        with pytest.warns(UserWarning, match="diverged"):
            with pytest.raises(TrainingError, match="every evaluation run"):
                evaluate(_synthetic(), _test_set(), SPEC, runs=2, epochs=40,
                         lr=1e30, momentum=0.0, seed=6)


def test_shape_validation():
    syn = _synthetic()
    wrong = ModelSpec("mlp", depth=1, width=8, input_shape=(1, 4, 4), classes=2)
    with pytest.raises(DimensionError):
        evaluate(syn, _test_set(), wrong, runs=1, epochs=1)


def test_train_on_synthetic_with_augmentation():
    syn = _synthetic()
    policy = AugmentPolicy(transforms=("brightness", "cutout"), seed=6)
    theta = train_on_synthetic(syn.images, syn.labels, SPEC, epochs=10, lr=0.05,
                               momentum=0.9, batch_size=0, policy=policy, seed=7)
    assert np.all(np.isfinite(theta))
