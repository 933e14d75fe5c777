"""Finite-difference audit of the stage-1 objective on small random networks."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ConvBlock, ModelConfig, build_model, prototype_layer
from .tensor import Tape, Tensor, finite_diff_grad, relative_error
from .training import TrainConfig, joint_objective


@dataclass(frozen=True)
class GradcheckResult:
    trial: int
    parameter: str
    n_values: int
    rel_error: float


def random_instance(rng):
    """A tiny model, batch and labels whose latent is at most 6 x 6 x 4 with m <= 6."""
    n_classes = int(rng.integers(2, 4))
    per_class = int(rng.integers(1, 6 // n_classes + 1))
    size = int(rng.integers(5, 9))
    blocks = (ConvBlock(int(rng.integers(2, 5)), kernel=3, padding=1, pool=2 if size > 6 else 0),)
    config = ModelConfig(
        input_shape=(size, size, 3),
        blocks=blocks,
        addon_channels=int(rng.integers(2, 5)),
        prototype_shape=(1, 1) if rng.random() < 0.5 else (2, 2),
        n_classes=n_classes,
        prototypes_per_class=per_class,
    )
    model = build_model(config, seed=int(rng.integers(2**31)))
    # zero biases put dead-channel pixels exactly on a ReLU kink, where central differences are meaningless
    for b in model.backbone.biases:
        b.values = rng.normal(0.0, 0.1, b.shape)
    # perturb the last layer so every logit depends on every score
    model.last_layer = Tensor(model.last_layer.values + rng.normal(0.0, 0.3, model.last_layer.shape))
    n = int(rng.integers(n_classes, 5))
    images = rng.uniform(0.0, 1.0, size=(n,) + config.input_shape)
    labels = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, n - n_classes)])
    return model, images, labels


def _named_parameters(model):
    names = []
    for i in range(len(model.backbone.weights)):
        names += [f"conv{i}.weight", f"conv{i}.bias"]
    return list(zip(names, model.backbone.parameters())) + [("prototypes", model.prototypes)]


def check_instance(model, images, labels, config=None, step=1e-5, trial=0):
    """Compare backprop and central differences for every trainable tensor."""
    config = config or TrainConfig()
    params = _named_parameters(model)
    with Tape() as tape:
        total, _ = joint_objective(images, labels, model, config)
        tape.backward(total)
    analytic = {name: p.grad.copy() for name, p in params}

    results = []
    for name, p in params:
        original = p.values

        def objective(values, p=p):
            p.values = values.values
            return joint_objective(images, labels, model, config)[0]

        numeric = finite_diff_grad(objective, original, step).values
        p.values = original
        results.append(GradcheckResult(trial, name, original.size, relative_error(analytic[name], numeric)))

    # last layer: cross-entropy of the linear head over fixed scores
    scores = prototype_layer(model.features(Tensor(images)), Tensor(model.prototypes.values), model.config.epsilon)[0]
    scores = Tensor(scores.values)
    w = Tensor(model.last_layer.values.copy(), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.softmax_cross_entropy(T.linear(scores, w), labels))
    numeric = finite_diff_grad(lambda v: T.softmax_cross_entropy(T.linear(scores, v), labels), w.values, step).values
    results.append(GradcheckResult(trial, "last_layer", w.size, relative_error(w.grad, numeric)))
    return results


def gradient_check(seed=0, trials=20, step=1e-5):
    """Run ``trials`` random instances; returns one result per (trial, parameter)."""
    results = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        model, images, labels = random_instance(rng)
        weights = TrainConfig(lambda_cluster=float(rng.uniform(0.1, 1.0)), lambda_separation=float(rng.uniform(0.01, 0.2)))
        results += check_instance(model, images, labels, weights, step, trial)
    return results


def worst(results):
    return max(results, key=lambda r: r.rel_error)
