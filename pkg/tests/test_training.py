import math

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import small_config
from protopart.data import Dataset
from oracles import cost_scan
from protopart.exceptions import InvalidArgumentError, InvalidConfigError
from protopart.model import build_model, init_last_layer
from protopart.tensor import Tape, Tensor, finite_diff_grad, relative_error
from protopart import tensor as T
from protopart.training import (
    StageReport,
    TrainConfig,
    accuracy,
    cluster_cost,
    joint_objective,
    last_layer_objective,
    parse_log_line,
    push_stage,
    separation_cost,
    similarity_table,
    stage1_sgd,
    stage3_convex_last_layer,
    train_full,
)


def snapshot(model):
    return {
        "backbone": [p.values.copy() for p in model.backbone.parameters()],
        "prototypes": model.prototypes.values.copy(),
        "last_layer": model.last_layer.values.copy(),
    }


def same(a, b):
    return all(x.tobytes() == y.tobytes() for x, y in zip(a, b)) if isinstance(a, list) else a.tobytes() == b.tobytes()


def off_mask(model):
    return model.allocation[None, :] != np.arange(model.n_classes)[:, None]


# ---------------------------------------------------------------- config


@pytest.mark.parametrize(
    "bad",
    [dict(lambda_cluster=-1.0), dict(lambda_separation=-0.1), dict(lambda_l1=-1e-4), dict(batch_size=0), dict(momentum=1.0)],
)
def test_config_validation(bad):
    with pytest.raises(InvalidConfigError):
        TrainConfig(**bad).validate()


# ---------------------------------------------------------------- costs


def test_cluster_zero_when_prototypes_are_patches(small_model, toy_dataset):
    z = small_model.features(Tensor(toy_dataset.images[:4])).values
    labels = toy_dataset.labels[:4]
    protos = small_model.prototypes.values.copy()
    for j, k in enumerate(small_model.allocation):
        i = int(np.flatnonzero(labels == k)[0])
        protos[j] = z[i, 1:2, 2:3]
    small_model.prototypes = Tensor(protos)
    # every image needs its own exact patch, so use one image per class
    first = [int(np.flatnonzero(labels == k)[0]) for k in range(2)]
    assert cluster_cost(z[first], labels[first], small_model).item() == 0.0


def one_image_model(distance_own, distance_off):
    # 1x1 latent, D=1, z = 0: squared distance to prototype value p is p^2
    model = build_model(small_config(addon_channels=1, prototypes_per_class=1), 0)
    model.prototypes = Tensor(np.array([math.sqrt(distance_own), math.sqrt(distance_off)]).reshape(2, 1, 1, 1))
    return model, np.zeros((1, 1, 1, 1)), np.array([0])


def test_cluster_hand_value():
    model, z, y = one_image_model(0.25, 9.0)
    assert cluster_cost(z, y, model).item() == pytest.approx(0.25, abs=1e-15)


def test_separation_hand_value():
    model, z, y = one_image_model(0.25, 4.0)
    assert separation_cost(z, y, model).item() == pytest.approx(-4.0, abs=1e-15)


def test_separation_zero_when_off_prototype_is_a_patch():
    model, z, y = one_image_model(0.25, 0.0)
    assert separation_cost(z, y, model).item() == 0.0


def test_costs_match_triple_loop(rng):
    model = build_model(small_config(n_classes=3, prototypes_per_class=2, prototype_shape=(2, 2)), 1)
    z = rng.random((5,) + model.config.latent_shape())
    y = np.array([0, 1, 2, 1, 0])
    protos = model.prototypes.values
    assert cluster_cost(z, y, model).item() == pytest.approx(cost_scan(z, y, protos, model.allocation, True), abs=1e-12)
    assert separation_cost(z, y, model).item() == pytest.approx(-cost_scan(z, y, protos, model.allocation, False), abs=1e-12)


def test_cluster_nonnegative_separation_nonpositive(small_model, toy_dataset):
    z = small_model.features(Tensor(toy_dataset.images)).values
    assert cluster_cost(z, toy_dataset.labels, small_model).item() >= 0
    assert separation_cost(z, toy_dataset.labels, small_model).item() <= 0


def test_separation_needs_off_class_prototype():
    model = build_model(small_config(n_classes=1, prototypes_per_class=2), 0)
    with pytest.raises(InvalidConfigError):
        separation_cost(np.zeros((1,) + model.config.latent_shape()), np.array([0]), model)


# ---------------------------------------------------------------- joint objective


def test_objective_without_penalties_is_cross_entropy(small_model, toy_dataset):
    x, y = toy_dataset.images[:6], toy_dataset.labels[:6]
    total, parts = joint_objective(x, y, small_model, TrainConfig(lambda_cluster=0.0, lambda_separation=0.0))
    logits = small_model.predict_logits(x)
    assert total.item() == pytest.approx(T.softmax_cross_entropy(Tensor(logits), y).item(), abs=1e-14)


def test_objective_is_sum_of_independent_terms(small_model, toy_dataset):
    x, y = toy_dataset.images[:8], toy_dataset.labels[:8]
    total, _ = joint_objective(x, y, small_model, TrainConfig(lambda_cluster=0.8, lambda_separation=0.08))
    z = small_model.features(Tensor(x)).values
    ce = T.softmax_cross_entropy(Tensor(small_model.predict_logits(x)), y).item()
    expected = ce + 0.8 * cluster_cost(z, y, small_model).item() + 0.08 * separation_cost(z, y, small_model).item()
    assert total.item() == pytest.approx(expected, abs=1e-12)


def test_clustered_batch_without_separation_is_cross_entropy(small_model, toy_dataset):
    first = [int(np.flatnonzero(toy_dataset.labels == k)[0]) for k in range(2)]
    x, y = toy_dataset.images[first], toy_dataset.labels[first]
    z = small_model.features(Tensor(x)).values
    protos = small_model.prototypes.values.copy()
    for j, k in enumerate(small_model.allocation):
        protos[j] = z[k, 0:1, 0:1]
    small_model.prototypes = Tensor(protos)
    total, parts = joint_objective(x, y, small_model, TrainConfig(lambda_separation=0.0))
    assert parts["clst"].item() == 0.0
    assert total.item() == parts["crsent"].item()


def test_objective_gradient_wrt_prototypes_matches_fd(small_model, toy_dataset):
    x, y = toy_dataset.images[:5], toy_dataset.labels[:5]
    config = TrainConfig()
    with Tape() as tape:
        total, _ = joint_objective(x, y, small_model, config)
        tape.backward(total)
    analytic = small_model.prototypes.grad.copy()
    original = small_model.prototypes

    def objective(p):
        small_model.prototypes = p
        return joint_objective(x, y, small_model, config)[0]

    numeric = finite_diff_grad(objective, original.values).values
    small_model.prototypes = original
    assert relative_error(analytic, numeric) < 1e-4


# ---------------------------------------------------------------- stage 1


def test_stage1_zero_epochs_is_noop(small_model, toy_dataset):
    before = snapshot(small_model)
    report = stage1_sgd(small_model, toy_dataset, TrainConfig(stage1_epochs=0))
    after = snapshot(small_model)
    assert report.epochs == 0
    assert all(same(before[k], after[k]) for k in before)


def test_stage1_zero_learning_rate(small_model, toy_dataset):
    before = snapshot(small_model)
    report = stage1_sgd(small_model, toy_dataset, TrainConfig(stage1_epochs=3, lr_backbone=0.0, lr_prototypes=0.0))
    after = snapshot(small_model)
    assert all(same(before[k], after[k]) for k in before)
    assert max(report.total) - min(report.total) < 1e-12


def test_stage1_never_touches_last_layer(small_model, toy_dataset):
    w = small_model.last_layer.values.copy()
    stage1_sgd(small_model, toy_dataset, TrainConfig(stage1_epochs=2))
    assert small_model.last_layer.values.tobytes() == w.tobytes()


def test_stage1_learns_toy_blobs(small_model, toy_dataset):
    report = stage1_sgd(small_model, toy_dataset, TrainConfig(stage1_epochs=20))
    assert report.acc[-1] >= 0.95
    assert accuracy(small_model, toy_dataset) >= 0.95


def test_stage1_log_format(small_model, toy_dataset):
    lines = []
    report = stage1_sgd(small_model, toy_dataset, TrainConfig(stage1_epochs=2), log=lines.append)
    assert len(lines) == 2
    for e, line in enumerate(report.log_lines()):
        parsed = parse_log_line(line)
        assert list(parsed) == ["epoch", "crsent", "clst", "sep", "total", "acc"]
        assert parsed["epoch"] == e and parsed["total"] == report.total[e]


def test_stage1_costs_have_signs(small_model, toy_dataset):
    report = stage1_sgd(small_model, toy_dataset, TrainConfig(stage1_epochs=3))
    assert min(report.clst) >= 0 and max(report.sep) <= 0


# ---------------------------------------------------------------- stage 3


def test_stage3_only_changes_last_layer(small_model, toy_dataset):
    before = snapshot(small_model)
    stage3_convex_last_layer(small_model, toy_dataset, TrainConfig(stage3_epochs=3))
    after = snapshot(small_model)
    assert same(before["backbone"], after["backbone"])
    assert same(before["prototypes"], after["prototypes"])
    assert not same(before["last_layer"], after["last_layer"])


def test_stage3_huge_penalty_zeroes_off_class(small_model, toy_dataset):
    stage3_convex_last_layer(small_model, toy_dataset, TrainConfig(lambda_l1=1e6, stage3_epochs=5))
    assert np.abs(small_model.last_layer.values[off_mask(small_model)]).mean() < 0.01


@pytest.mark.parametrize("lambda_l1", [0.0, 1e-4, 1e-2])
def test_stage3_objective_non_increasing(small_model, toy_dataset, lambda_l1):
    report = stage3_convex_last_layer(small_model, toy_dataset, TrainConfig(lambda_l1=lambda_l1, stage3_epochs=15))
    assert all(b <= a + 1e-9 for a, b in zip(report.total, report.total[1:]))


def test_stage3_unpenalised_approaches_logistic_optimum(toy_dataset):
    # untrained scores are non-separable but badly conditioned, so convergence is slow but steady
    model = build_model(small_config(), 4)
    scores, _ = similarity_table(model, toy_dataset.images)
    labels = toy_dataset.labels
    mask = off_mask(model)
    start = init_last_layer(model.allocation, 2)

    def f(w):
        return last_layer_objective(w.reshape(start.shape), scores, labels, mask, 0.0)

    reference = minimize(f, start.ravel(), method="BFGS", options={"gtol": 1e-10}).fun
    gaps = []
    for epochs in (20, 100, 400):
        report = stage3_convex_last_layer(model.copy(), toy_dataset, TrainConfig(lambda_l1=0.0, stage3_epochs=epochs))
        gaps.append(report.total[-1] - reference)
    assert min(gaps) >= -1e-9
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 5e-3


def test_stage3_shrinks_off_class_weights(small_model, toy_dataset):
    stage1_sgd(small_model, toy_dataset, TrainConfig(stage1_epochs=5))
    assert np.abs(small_model.last_layer.values[off_mask(small_model)]).mean() == 0.5
    stage3_convex_last_layer(small_model, toy_dataset, TrainConfig())
    assert np.abs(small_model.last_layer.values[off_mask(small_model)]).mean() < 0.5


# ---------------------------------------------------------------- full schedule


def test_one_cycle_ends_with_exact_patches(small_model, toy_dataset):
    train_full(small_model, toy_dataset, TrainConfig(stage1_epochs=2, stage3_epochs=2, cycles=1))
    z = small_model.features(Tensor(toy_dataset.images)).values
    for record in small_model.projection_records:
        assert toy_dataset.labels[record.image_index] == record.class_index
        patch = z[record.image_index, record.row : record.row + 1, record.col : record.col + 1]
        assert patch.tobytes() == small_model.prototypes.values[record.prototype].tobytes()


def test_second_cycle_does_not_regress(toy_dataset, toy_test_dataset):
    config = TrainConfig(stage1_epochs=4, stage3_epochs=3, cycles=1)
    one = build_model(small_config(), 0)
    train_full(one, toy_dataset, config)
    two = build_model(small_config(), 0)
    train_full(two, toy_dataset, TrainConfig(stage1_epochs=4, stage3_epochs=3, cycles=2))
    assert accuracy(two, toy_test_dataset) >= accuracy(one, toy_test_dataset) - 0.05


def test_zero_stage1_epochs_is_push_then_last_layer(toy_dataset):
    config = TrainConfig(stage1_epochs=0, stage3_epochs=2, cycles=1)
    a = build_model(small_config(), 2)
    train_full(a, toy_dataset, config)
    b = build_model(small_config(), 2)
    push_stage(b, toy_dataset)
    stage3_convex_last_layer(b, toy_dataset, config)
    assert a.prototypes.values.tobytes() == b.prototypes.values.tobytes()
    assert a.last_layer.values.tobytes() == b.last_layer.values.tobytes()


def test_train_full_reports_and_lineage(small_model, toy_dataset):
    reports = train_full(small_model, toy_dataset, TrainConfig(stage1_epochs=1, stage3_epochs=1, cycles=2, seed=9))
    assert [r.stage for r in reports] == ["stage1", "push", "stage3"] * 2
    assert all(isinstance(r, StageReport) for r in reports)
    assert small_model.seed_lineage == (0, 9)


def test_train_full_is_deterministic(toy_dataset):
    config = TrainConfig(stage1_epochs=2, stage3_epochs=2, cycles=1, seed=3)
    a, b = build_model(small_config(), 1), build_model(small_config(), 1)
    train_full(a, toy_dataset, config)
    train_full(b, toy_dataset, config)
    assert same(snapshot(a)["backbone"], snapshot(b)["backbone"])
    assert a.last_layer.values.tobytes() == b.last_layer.values.tobytes()


def test_train_full_needs_every_class(small_model, toy_dataset):
    keep = toy_dataset.labels == 0
    only_zero = Dataset(toy_dataset.images[keep], toy_dataset.labels[keep], n_classes=2)
    with pytest.raises(InvalidArgumentError):
        train_full(small_model, only_zero, TrainConfig(stage1_epochs=1, cycles=1))


def test_clst_zero_implies_zero_move(small_model, toy_dataset):
    # place every prototype on a same-class patch: clst cannot go lower and push must not move anything
    z = small_model.features(Tensor(toy_dataset.images)).values
    protos = small_model.prototypes.values.copy()
    for j, k in enumerate(small_model.allocation):
        i = int(np.flatnonzero(toy_dataset.labels == k)[j % 2])
        protos[j] = z[i, 2:3, 3:4]
    small_model.prototypes = Tensor(protos)
    push_stage(small_model, toy_dataset)
    assert max(r.move_distance for r in small_model.projection_records) == 0.0
