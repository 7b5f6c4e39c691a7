import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgcnn import tensor as T
from dgcnn.data import Dataset, LabeledCloud, SynthSpec, synth_dataset
from dgcnn.errors import DataError, NumericError, ParameterError
from dgcnn.models import ClassifierConfig, DGCNNClassifier
from dgcnn.tensor import Tensor
from dgcnn.train import (
    AugmentConfig,
    OptimizerState,
    TrainConfig,
    augment,
    classification_report,
    cosine_lr,
    evaluate_classification,
    miou_shapenet,
    random_dropout_eval,
    sgd_step,
    side_drop,
    train_classifier,
)

# ---------------------------------------------------------------- schedule


def test_cosine_lr_endpoints():
    s = OptimizerState(total_epochs=50)
    assert cosine_lr(0, s) == 0.1
    assert cosine_lr(50, s) == 0.001
    assert cosine_lr(25, s) == pytest.approx(0.0505, abs=1e-15)


def test_cosine_lr_range():
    s = OptimizerState(total_epochs=10)
    for bad in (-1, 11):
        with pytest.raises(ParameterError):
            cosine_lr(bad, s)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400))
def test_cosine_lr_monotone_and_bounded(total):
    s = OptimizerState(total_epochs=total)
    lrs = [cosine_lr(e, s) for e in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(0.001 <= lr <= 0.1 for lr in lrs)


def test_cosine_lr_formula():
    s = OptimizerState(total_epochs=7)
    for e in range(8):
        expected = 0.001 + 0.5 * (0.1 - 0.001) * (1 + math.cos(math.pi * e / 7))
        assert cosine_lr(e, s) == pytest.approx(expected, rel=1e-14)


# ---------------------------------------------------------------- sgd


def test_sgd_zero_gradient():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    sgd_step(p, {"w": np.zeros(2)}, OptimizerState(total_epochs=1), lr=0.1)
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_sgd_hand_iteration():
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    state = OptimizerState(total_epochs=1)
    sgd_step(p, {"w": np.ones(1)}, state, lr=0.1)
    assert p["w"].data[0] == pytest.approx(-0.1)
    sgd_step(p, {"w": np.ones(1)}, state, lr=0.1)
    assert p["w"].data[0] == pytest.approx(-0.29)


def test_sgd_non_finite_gradient():
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    with pytest.raises(NumericError):
        sgd_step(p, {"w": np.array([np.inf])}, OptimizerState(total_epochs=1), lr=0.1)


# ---------------------------------------------------------------- augmentation


def test_augment_disabled_identity():
    x = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(augment(x, np.random.default_rng(1), AugmentConfig.disabled()), x)


def test_augment_degenerate_ranges_identity():
    x = np.random.default_rng(0).normal(size=(10, 3))
    cfg = AugmentConfig(scale_range=(1.0, 1.0), shift_range=0.0, jitter_sigma=0.0)
    np.testing.assert_array_equal(augment(x, np.random.default_rng(1), cfg), x)


def test_augment_reproducible_and_bounded():
    x = np.zeros((2, 200, 3))
    a = augment(x, np.random.default_rng(3))
    assert a.tobytes() == augment(x, np.random.default_rng(3)).tobytes()
    only_jitter = augment(x, np.random.default_rng(3), AugmentConfig(scale=False, shift=False))
    assert np.abs(only_jitter).max() <= 0.05
    only_shift = augment(x, np.random.default_rng(3), AugmentConfig(scale=False, jitter=False))
    # One shift per cloud, shared by all its points.
    assert np.abs(only_shift).max() <= 0.2 and (only_shift == only_shift[:, :1]).all()
    ones = np.ones((1, 50, 3))
    scaled = augment(ones, np.random.default_rng(4), AugmentConfig(shift=False, jitter=False))
    assert 0.66 <= scaled[0, 0, 0] <= 1.5 and (scaled == scaled[0, 0, 0]).all()


# ---------------------------------------------------------------- metrics


def test_classification_report_examples():
    rep = classification_report(np.arange(4), np.arange(4))
    assert rep.overall_accuracy == 1.0 and rep.mean_class_accuracy == 1.0
    true = np.array([0] * 10 + [1] * 90)
    pred = np.zeros(100, dtype=int)
    rep = classification_report(pred, true)
    assert rep.overall_accuracy == pytest.approx(0.10) and rep.mean_class_accuracy == pytest.approx(0.50)
    assert classification_report([1], [0]).overall_accuracy in (0.0, 1.0)


def test_mean_class_accuracy_skips_absent_classes():
    rep = classification_report([0, 0, 2], [0, 1, 2], num_classes=4)
    assert rep.mean_class_accuracy == pytest.approx((1 + 0 + 1) / 3)


def test_miou_hand_example():
    rep = miou_shapenet([np.array([0, 1, 1, 1])], [np.array([0, 0, 1, 1])], [0], {0: [0, 1]})
    assert rep.miou == 7 / 12


def test_miou_absent_part_counts_as_one():
    rep = miou_shapenet([np.array([0, 0])], [np.array([0, 0])], [0], {0: [0, 1, 2]})
    assert rep.miou == 1.0 and list(rep.per_shape_iou) == [1.0]


def test_miou_label_outside_part_set():
    with pytest.raises(DataError):
        miou_shapenet([np.array([0, 5])], [np.array([0, 0])], [0], {0: [0, 1]})


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=30))
def test_miou_of_identical_labelings_is_one(labels):
    x = np.array(labels)
    assert miou_shapenet([x], [x], [0], {0: [0, 1, 2, 3]}).miou == 1.0


def test_miou_mean_over_shapes():
    pred = [np.array([0, 1, 1, 1]), np.array([2, 2])]
    true = [np.array([0, 0, 1, 1]), np.array([2, 3])]
    rep = miou_shapenet(pred, true, [0, 1], {0: [0, 1], 1: [2, 3]})
    assert rep.miou == pytest.approx((7 / 12 + (1 / 2 + 0) / 2) / 2)


# ---------------------------------------------------------------- evaluation


class ConstantModel:
    """Predicts class 0 for every cloud."""

    cfg = ClassifierConfig(k=1, num_classes=2)

    def __call__(self, points, training=False, rng=None):
        b = np.asarray(points).shape[0]
        return Tensor(np.tile([1.0, 0.0], (b, 1)))


def toy_dataset(labels, n=8):
    rng = np.random.default_rng(0)
    return Dataset([LabeledCloud(rng.normal(size=(n, 3)), class_label=c) for c in labels], "test")


def test_evaluate_classification_counts():
    rep = evaluate_classification(ConstantModel(), toy_dataset([0] * 10 + [1] * 90))
    assert rep.overall_accuracy == pytest.approx(0.1) and rep.mean_class_accuracy == pytest.approx(0.5)
    with pytest.raises(ParameterError):
        evaluate_classification(ConstantModel(), toy_dataset([]))


def small_model(seed=0):
    cfg = ClassifierConfig(k=4, edgeconv_widths=(8, 8), embed_width=16, head_widths=(8,), num_classes=2)
    return DGCNNClassifier(cfg, np.random.default_rng(seed))


def test_random_dropout_keep_all_equals_plain_eval():
    ds = toy_dataset([0, 1, 0, 1], n=16)
    m = small_model()
    full = evaluate_classification(m, ds)
    kept = random_dropout_eval(m, ds, 1.0, np.random.default_rng(0))
    assert kept.overall_accuracy == full.overall_accuracy


def test_random_dropout_reproducible_and_guarded():
    ds = toy_dataset([0, 1, 0, 1], n=16)
    m = small_model()
    a = random_dropout_eval(m, ds, 0.5, np.random.default_rng(5))
    b = random_dropout_eval(m, ds, 0.5, np.random.default_rng(5))
    assert a.per_class_accuracy == b.per_class_accuracy
    with pytest.raises(ParameterError):
        random_dropout_eval(m, ds, 0.1, np.random.default_rng(5))


# ---------------------------------------------------------------- side drop


def column(values):
    pts = np.zeros((len(values), 3))
    pts[:, 2] = values
    return pts


def test_side_drop_examples():
    pts = column(np.arange(1.0, 11.0))
    assert sorted(side_drop(pts, 0.5, "top")[:, 2].tolist()) == [1, 2, 3, 4, 5]
    assert sorted(side_drop(pts, 0.5, "bottom")[:, 2].tolist()) == [6, 7, 8, 9, 10]
    assert sorted(side_drop(pts, 1.0, "left")[:, 2].tolist()) == list(range(1, 11))


def test_side_drop_other_axes():
    pts = np.random.default_rng(0).normal(size=(40, 3))
    kept = side_drop(pts, 0.25, "right")
    assert kept.shape == (10, 3) and kept[:, 0].max() <= np.sort(pts[:, 0])[9]
    kept = side_drop(pts, 0.25, "front")
    assert kept[:, 1].max() <= np.sort(pts[:, 1])[9]


def test_side_drop_errors():
    with pytest.raises(ParameterError):
        side_drop(column([1.0, 2.0]), 0.1, "top")
    with pytest.raises(ParameterError):
        side_drop(column([1.0, 2.0]), 0.5, "up")
    with pytest.raises(ParameterError):
        side_drop(column([1.0, 2.0]), 0.0, "top")


# ---------------------------------------------------------------- training loop


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(epochs=0)
    with pytest.raises(TypeError):
        TrainConfig.from_dict({"epochz": 3})


def test_training_is_deterministic_and_learns():
    spec = SynthSpec(classes=("cube", "sphere"), train_per_class=8, test_per_class=2, points=24)
    train = synth_dataset(spec, np.random.default_rng(0))
    cfg = TrainConfig(epochs=15, batch_size=8, augment=AugmentConfig.disabled())

    def run():
        model = small_model(1)
        before = evaluate_classification(model, train).overall_accuracy
        with T.strict_mode():
            records = train_classifier(model, train, cfg, seed=3)
        return records, before, evaluate_classification(model, train).overall_accuracy

    (a, before, after), (b, _, _) = run(), run()
    assert [r.row() for r in a] == [r.row() for r in b]
    losses = [r.loss for r in a]
    # Batch statistics over 8 clouds are noisy; compare windows, not single epochs.
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    assert after > before
    assert a[0].lr == 0.1 and a[-1].lr == cosine_lr(14, OptimizerState(total_epochs=15))
