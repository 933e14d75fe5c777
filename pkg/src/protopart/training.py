"""Three-stage ProtoPNet training.

1. minibatch SGD on the backbone and prototypes with the last layer frozen,
   minimising ``CrsEnt + lambda_cluster * Clst + lambda_separation * Sep``;
2. projection of every prototype onto a same-class training patch;
3. proximal gradient descent on the last layer alone, with an L1 penalty on
   the weights that connect a prototype to a class it does not belong to.

The stages can be cycled.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import InvalidArgumentError, InvalidConfigError, TrainingDivergedError
from .model import init_last_layer, prototype_layer
from .projection import project_prototypes
from .tensor import Tape, Tensor


@dataclass
class TrainConfig:
    lambda_cluster: float = 0.8
    lambda_separation: float = 0.08
    lambda_l1: float = 1e-4
    lr_backbone: float = 1e-2
    lr_prototypes: float = 3e-3
    lr_last_layer: float = 0.0  # 0 selects 1 / (Lipschitz bound of the cross-entropy gradient)
    momentum: float = 0.9
    batch_size: int = 32
    stage1_epochs: int = 10
    stage3_epochs: int = 20
    stage3_steps: int = 50
    cycles: int = 2
    seed: int = 0

    def validate(self):
        if min(self.lambda_cluster, self.lambda_separation, self.lambda_l1) < 0:
            raise InvalidConfigError("cost weights must be non-negative")
        if min(self.lr_backbone, self.lr_prototypes, self.lr_last_layer) < 0:
            raise InvalidConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be at least 1")
        if min(self.stage1_epochs, self.stage3_epochs, self.cycles) < 0 or self.stage3_steps < 1:
            raise InvalidConfigError("epoch, step and cycle counts must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfigError("momentum must lie in [0, 1)")
        return self


@dataclass
class StageReport:
    stage: str
    cycle: int = 0
    crsent: list = field(default_factory=list)
    clst: list = field(default_factory=list)
    sep: list = field(default_factory=list)
    total: list = field(default_factory=list)
    acc: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def epochs(self):
        return len(self.total)

    def log_lines(self):
        return [
            f"epoch={e} crsent={self.crsent[e]!r} clst={self.clst[e]!r} sep={self.sep[e]!r} "
            f"total={self.total[e]!r} acc={self.acc[e]!r}"
            for e in range(self.epochs)
        ]

    def add(self, crsent, clst, sep, total, acc):
        self.crsent.append(float(crsent))
        self.clst.append(float(clst))
        self.sep.append(float(sep))
        self.total.append(float(total))
        self.acc.append(float(acc))


def parse_log_line(line):
    """Inverse of :meth:`StageReport.log_lines` for one line."""
    out = {}
    for item in line.split():
        key, _, value = item.partition("=")
        out[key] = int(value) if key == "epoch" else float(value)
    return out


def _own_mask(labels, allocation):
    return np.asarray(labels)[:, None] == np.asarray(allocation)[None, :]


def cluster_from_distances(min_distances, labels, allocation):
    """Mean over the batch of the smallest distance to an own-class prototype."""
    return T.mean(T.masked_min(min_distances, _own_mask(labels, allocation), axis=1))


def separation_from_distances(min_distances, labels, allocation):
    """Negative mean over the batch of the smallest distance to an off-class prototype."""
    off = ~_own_mask(labels, allocation)
    if not off.any(axis=1).all():
        raise InvalidConfigError("separation cost needs at least two classes with prototypes")
    return -T.mean(T.masked_min(min_distances, off, axis=1))


def _min_distances(latents, model):
    z = latents if isinstance(latents, Tensor) else Tensor(latents)
    return prototype_layer(z, model.prototypes, model.config.epsilon)[2]


def cluster_cost(latents, labels, model):
    return cluster_from_distances(_min_distances(latents, model), labels, model.allocation)


def separation_cost(latents, labels, model):
    return separation_from_distances(_min_distances(latents, model), labels, model.allocation)


def joint_objective(images, labels, model, config):
    """Stage-1 objective; returns ``(total, parts)`` with parts keyed by term name.

    The last layer enters as a constant, so gradients flow only into the
    backbone and the prototypes.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    labels = np.asarray(labels)
    z = model.features(x)
    scores, _, min_d = prototype_layer(z, model.prototypes, model.config.epsilon)
    logits = T.linear(scores, Tensor(model.last_layer.values))
    crsent = T.softmax_cross_entropy(logits, labels)
    clst = cluster_from_distances(min_d, labels, model.allocation)
    total = crsent + config.lambda_cluster * clst
    if model.n_classes > 1:
        sep = separation_from_distances(min_d, labels, model.allocation)
        total = total + config.lambda_separation * sep
    else:
        sep = Tensor(0.0)
    return total, {"crsent": crsent, "clst": clst, "sep": sep, "logits": logits}


class MomentumSGD:
    """Heavy-ball SGD: ``v = momentum * v + g; p -= lr * v``."""

    def __init__(self, groups, momentum=0.9):
        self.groups = [(list(params), lr) for params, lr in groups]
        self.momentum = momentum
        self.velocity = {id(p): np.zeros_like(p.values) for params, _ in self.groups for p in params}

    def zero_grad(self):
        for params, _ in self.groups:
            for p in params:
                p.grad = None

    def step(self):
        for params, lr in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                v = self.velocity[id(p)]
                v *= self.momentum
                v += p.grad
                p.values -= lr * v


def _epoch_order(n, seed, cycle, epoch):
    return np.random.default_rng([seed, cycle, epoch]).permutation(n)


def stage1_sgd(model, dataset, config, cycle=0, log=None):
    """Stage 1: SGD on backbone and prototypes; the last layer is never touched."""
    config.validate()
    report = StageReport("stage1", cycle)
    start = time.perf_counter()
    opt = MomentumSGD(
        [(model.backbone.parameters(), config.lr_backbone), ([model.prototypes], config.lr_prototypes)],
        config.momentum,
    )
    n = len(dataset)
    tape = Tape()
    for epoch in range(config.stage1_epochs):
        sums = np.zeros(5)
        order = _epoch_order(n, config.seed, cycle, epoch)
        for begin in range(0, n, config.batch_size):
            idx = order[begin : begin + config.batch_size]
            labels = dataset.labels[idx]
            opt.zero_grad()
            tape.reset()
            with tape:
                total, parts = joint_objective(dataset.images[idx], labels, model, config)
                tape.backward(total)
            if not math.isfinite(total.item()):
                raise TrainingDivergedError(epoch)
            opt.step()
            correct = np.sum(np.argmax(parts["logits"].values, axis=1) == labels)
            values = [parts["crsent"].item(), parts["clst"].item(), parts["sep"].item(), total.item()]
            sums += np.array(values + [correct / len(idx)]) * len(idx)
        report.add(*(sums / n))
        if log:
            log(f"cycle={cycle} stage=1 " + report.log_lines()[-1])
    report.seconds = time.perf_counter() - start
    return report


def similarity_table(model, images, batch_size=128):
    """(similarity scores N x m, min distances N x m) without recording gradients."""
    scores, dists = [], []
    for i in range(0, len(images), batch_size):
        z = model.features(Tensor(images[i : i + batch_size]))
        s, _, d = prototype_layer(z, model.prototypes, model.config.epsilon)
        scores.append(s.values)
        dists.append(d.values)
    return np.concatenate(scores), np.concatenate(dists)


def _cross_entropy(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -np.mean(log_p[np.arange(len(labels)), labels]), np.exp(log_p)


_MAX_STEP = 1e12
_MAX_BACKTRACKS = 80


def last_layer_objective(weights, scores, labels, off_mask, lambda_l1):
    ce, _ = _cross_entropy(scores @ weights.T, labels)
    return ce + lambda_l1 * np.abs(weights[off_mask]).sum()


def _soft_threshold(weights, threshold, mask):
    shrunk = np.sign(weights) * np.maximum(np.abs(weights) - threshold, 0.0)
    return np.where(mask, shrunk, weights)


def stage3_convex_last_layer(model, dataset, config, cycle=0, log=None):
    """Stage 3: proximal gradient descent on the last layer only.

    Each step takes a gradient step on the mean cross-entropy and then
    soft-thresholds the off-class weights.  The step size starts at
    ``lr_last_layer`` (0 means ``1/L`` with ``L = lambda_max(S^T S / n) / 2``,
    a bound on the gradient's Lipschitz constant), is doubled before every
    step and halved until the quadratic upper bound holds, so the objective
    never increases.
    """
    config.validate()
    report = StageReport("stage3", cycle)
    start = time.perf_counter()
    scores, min_d = similarity_table(model, dataset.images)
    labels = dataset.labels
    n = len(labels)
    own = _own_mask(labels, model.allocation)
    clst = float(np.mean(np.where(own, min_d, np.inf).min(axis=1)))
    sep = float(-np.mean(np.where(~own, min_d, np.inf).min(axis=1))) if model.n_classes > 1 else 0.0

    off_mask = ~(model.allocation[None, :] == np.arange(model.n_classes)[:, None])
    onehot = np.eye(model.n_classes)[labels]
    weights = model.last_layer.values.copy()
    if config.lr_last_layer > 0:
        step = config.lr_last_layer
    else:
        lipschitz = 0.5 * np.linalg.eigvalsh(scores.T @ scores / n)[-1]
        step = 1.0 / lipschitz if lipschitz > 0 else 1.0

    ce, probs = _cross_entropy(scores @ weights.T, labels)
    for epoch in range(config.stage3_epochs):
        for _ in range(config.stage3_steps):
            grad = (probs - onehot).T @ scores / n
            step = min(2.0 * step, _MAX_STEP)
            for _ in range(_MAX_BACKTRACKS):
                candidate = _soft_threshold(weights - step * grad, step * config.lambda_l1, off_mask)
                move = candidate - weights
                ce_new, probs_new = _cross_entropy(scores @ candidate.T, labels)
                if ce_new <= ce + np.sum(grad * move) + np.sum(move * move) / (2.0 * step):
                    weights, ce, probs = candidate, ce_new, probs_new
                    break
                step *= 0.5
        total = ce + config.lambda_l1 * np.abs(weights[off_mask]).sum()
        if not math.isfinite(total):
            raise TrainingDivergedError(epoch)
        acc = np.mean(np.argmax(scores @ weights.T, axis=1) == labels)
        report.add(ce, clst, sep, total, acc)
        if log:
            log(f"cycle={cycle} stage=3 " + report.log_lines()[-1])
    model.last_layer = Tensor(weights, requires_grad=True)
    report.seconds = time.perf_counter() - start
    return report


def push_stage(model, dataset, cycle=0, workers=1, log=None):
    start = time.perf_counter()
    records = project_prototypes(model, dataset, workers=workers)
    report = StageReport("push", cycle, seconds=time.perf_counter() - start)
    if log:
        moved = max((r.move_distance for r in records), default=0.0)
        log(f"cycle={cycle} stage=push prototypes={len(records)} max_move={moved!r}")
    return report


def train_full(model, dataset, config, log=None, workers=1):
    """Run ``config.cycles`` cycles of stage 1, projection and stage 3."""
    config.validate()
    missing = set(range(model.n_classes)) - set(np.unique(dataset.labels).tolist())
    if missing:
        raise InvalidArgumentError(f"classes {sorted(missing)} have no training images")
    model.last_layer = Tensor(init_last_layer(model.allocation, model.n_classes), requires_grad=True)
    reports = []
    for cycle in range(config.cycles):
        reports.append(stage1_sgd(model, dataset, config, cycle, log))
        reports.append(push_stage(model, dataset, cycle, workers, log))
        reports.append(stage3_convex_last_layer(model, dataset, config, cycle, log))
    model.seed_lineage = tuple(model.seed_lineage) + (int(config.seed),)
    return reports


def accuracy(model, dataset, batch_size=128):
    logits = model.predict_logits(dataset.images, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))

