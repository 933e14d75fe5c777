"""Prototype projection ("push") and a checker for the projection bound.

Projection replaces each prototype of class k by its nearest latent patch
among all class-k training images.  If the move is small relative to how far
a test image's nearest patches are from the prototypes, each class logit can
change by at most ``m' * log((1 + delta) * (2 - delta))``; the checker
evaluates that bound and its preconditions on a concrete input.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import InvalidArgumentError, InvalidDatasetError
from .model import prototype_activation
from .tensor import Tensor


@dataclass
class ProjectionRecord:
    prototype: int
    class_index: int
    image_index: int
    row: int
    col: int
    squared_distance: float
    move_distance: float
    before: np.ndarray = field(default=None, repr=False)
    after: np.ndarray = field(default=None, repr=False)


def latent_batches(model, images, batch_size=64, workers=1):
    """Yield (start index, latent array) over ``images`` in order."""
    starts = range(0, len(images), batch_size)

    def run(start):
        return start, model.features(Tensor(images[start : start + batch_size])).values

    if workers <= 1:
        yield from map(run, starts)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(run, starts)


def patch_at(z, row, col, shape):
    h1, w1 = shape
    return z[row : row + h1, col : col + w1, :]


def project_prototypes(model, dataset, batch_size=64, workers=1):
    """Push every prototype onto its nearest same-class training patch (in place).

    Ties are resolved by the lowest (image index, row, column).  Returns one
    :class:`ProjectionRecord` per prototype.
    """
    allocation = model.allocation
    present = np.bincount(dataset.labels, minlength=model.n_classes)
    missing = [k for k in np.unique(allocation) if present[k] == 0]
    if missing:
        raise InvalidDatasetError(f"no training images for classes {missing}")

    protos = Tensor(model.prototypes.values.copy())
    m = protos.shape[0]
    shape = protos.shape[1:3]
    best = np.full(m, np.inf)
    where = np.zeros((m, 3), dtype=np.int64)
    patches = np.zeros_like(protos.values)

    for start, z in latent_batches(model, dataset.images, batch_size, workers):
        maps = T.l2_distance_maps(Tensor(z), protos).values  # n, H', W', m
        n, ho, wo, _ = maps.shape
        labels = dataset.labels[start : start + n]
        for j in range(m):
            own = np.flatnonzero(labels == allocation[j])
            if own.size == 0:
                continue
            flat = maps[own, :, :, j].reshape(-1)
            pos = int(np.argmin(flat))
            if flat[pos] < best[j]:
                i, rc = divmod(pos, ho * wo)
                r, c = divmod(rc, wo)
                best[j] = flat[pos]
                where[j] = (start + own[i], r, c)
                patches[j] = patch_at(z[own[i]], r, c, shape)

    records = []
    before = model.prototypes.values
    for j in range(m):
        move = float(np.sqrt(np.sum((patches[j] - before[j]) ** 2)))
        records.append(
            ProjectionRecord(
                prototype=j,
                class_index=int(allocation[j]),
                image_index=int(where[j, 0]),
                row=int(where[j, 1]),
                col=int(where[j, 2]),
                squared_distance=float(best[j]),
                move_distance=move,
                before=before[j].copy(),
                after=patches[j].copy(),
            )
        )
    model.prototypes = Tensor(patches, requires_grad=True)
    model.projection_records = records
    return records


# ---------------------------------------------------------------- projection bound


def theorem_constants(delta, m_prime):
    """Return ``(theta, delta_max)`` for a margin parameter ``delta`` in (0, 1)."""
    if not 0.0 < delta < 1.0:
        raise InvalidArgumentError(f"delta must lie in (0, 1), got {delta}")
    if m_prime < 1:
        raise InvalidArgumentError("m_prime must be a positive integer")
    theta = min(math.sqrt(1.0 + delta) - 1.0, 1.0 - 1.0 / math.sqrt(2.0 - delta))
    delta_max = m_prime * math.log((1.0 + delta) * (2.0 - delta))
    return theta, delta_max


ASSUMPTIONS = ("a1", "a2a", "a2b", "a3", "a4")


@dataclass
class TheoremReport:
    image_id: object
    correct_class: int
    delta: float
    theta: float
    m_prime: int
    delta_max: float
    epsilon: float
    flags: dict
    correct_before: bool
    logits_before: np.ndarray
    logits_after: np.ndarray
    true_logit_change: np.ndarray
    nearest_before: list = field(repr=False, default_factory=list)
    nearest_after: list = field(repr=False, default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def logit_change(self):
        return self.logits_after - self.logits_before

    @property
    def assumptions_hold(self):
        return self.correct_before and all(self.flags[a] for a in ASSUMPTIONS)

    @property
    def margin_before(self):
        others = np.delete(self.logits_before, self.correct_class)
        return float(self.logits_before[self.correct_class] - others.max()) if others.size else math.inf

    @property
    def prediction_unchanged(self):
        return int(np.argmax(self.logits_after)) == int(np.argmax(self.logits_before))

    @property
    def verdict(self):
        if not self.assumptions_hold:
            return "assumptions unmet"
        return "bound violated" if self.violations else "bound holds"

    def to_text(self):
        lines = [
            f"image_id={self.image_id}",
            f"correct_class={self.correct_class}",
            f"delta={self.delta!r}",
            f"theta={self.theta!r}",
            f"m_prime={self.m_prime}",
            f"delta_max={self.delta_max!r}",
            f"epsilon={self.epsilon!r}",
            f"correct_before={int(self.correct_before)}",
        ]
        lines += [f"{name}={int(self.flags[name])}" for name in ASSUMPTIONS]
        lines.append(f"a4_native={int(self.flags.get('a4_native', False))}")
        for k, change in enumerate(self.logit_change):
            lines.append(f"logit_change[{k}]={float(change)!r}")
        for k, change in enumerate(self.true_logit_change):
            lines.append(f"true_logit_change[{k}]={float(change)!r}")
        lines.append(f"margin_before={self.margin_before!r}")
        lines.append(f"prediction_unchanged={int(self.prediction_unchanged)}")
        lines.append(f"verdict={self.verdict}")
        return "\n".join(lines) + "\n"


def parse_report(text):
    """Parse ``key=value`` lines back into a dict of strings."""
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def _nearest(z, prototypes):
    """Per-prototype argmin patch index and the flattened (patches x m) distance table."""
    maps = T.l2_distance_maps(Tensor(z), Tensor(prototypes)).values
    ho, wo, m = maps.shape
    flat = maps.reshape(ho * wo, m)
    idx = np.argmin(flat, axis=0)
    return idx, flat, (ho, wo)


def check_projection_bound(z, before, after, allocation, epsilon, delta, label=None, true_weights=None, image_id=None):
    """Evaluate the projection bound on one latent tensor ``z`` (H x W x D).

    ``before``/``after`` are the prototype banks (m x H1 x W1 x D).  Logits
    use the 1 (own class) / 0 (other classes) last layer; ``true_weights``,
    if given, is only used for the informational ``true_logit_change``.
    """
    allocation = np.asarray(allocation)
    n_classes = int(allocation.max()) + 1
    counts = np.bincount(allocation, minlength=n_classes)
    m_prime = int(counts[0])
    uniform = bool(np.all(counts == m_prime))
    theta, delta_max = theorem_constants(delta, m_prime)
    idx_b, flat_b, (ho, wo) = _nearest(z, before)
    _, flat_a, _ = _nearest(z, after)
    m = len(allocation)
    cols = np.arange(m)
    d_before = flat_b[idx_b, cols]
    d_after_at_z = flat_a[idx_b, cols]
    d_after_min = flat_a.min(axis=0)

    pattern = (allocation[None, :] == np.arange(n_classes)[:, None]).astype(np.float64)
    logits_before = pattern @ prototype_activation(d_before, epsilon)
    logits_after = pattern @ prototype_activation(d_after_min, epsilon)
    predicted = int(np.argmax(logits_before))
    c = predicted if label is None else int(label)
    correct_before = predicted == c

    move = np.sqrt(np.sum((after - before).reshape(m, -1) ** 2, axis=1))
    gap = np.sqrt(d_before)
    wrong = allocation != c
    a2a = bool(np.all(move[wrong] <= theta * gap[wrong] - math.sqrt(epsilon)))
    right = ~wrong
    a2b = bool(
        np.all(move[right] <= (math.sqrt(1.0 + delta) - 1.0) * gap[right])
        and np.all(gap[right] <= math.sqrt(1.0 - delta))
    )
    flags = {
        "a1": bool(np.all(d_after_at_z <= d_after_min)),
        "a2a": a2a,
        "a2b": a2b,
        "a3": uniform,
        "a4": True,  # the 1/0 last layer is substituted above
    }
    true_change = np.zeros(n_classes)
    if true_weights is not None:
        true_weights = np.asarray(true_weights)
        flags["a4_native"] = bool(np.array_equal(true_weights, pattern))
        true_change = true_weights @ (
            prototype_activation(d_after_min, epsilon) - prototype_activation(d_before, epsilon)
        )

    def patch(index):
        r, col = divmod(int(index), wo)
        return (r, col)

    report = TheoremReport(
        image_id=image_id,
        correct_class=c,
        delta=float(delta),
        theta=theta,
        m_prime=m_prime,
        delta_max=delta_max,
        epsilon=float(epsilon),
        flags=flags,
        correct_before=correct_before,
        logits_before=logits_before,
        logits_after=logits_after,
        true_logit_change=true_change,
        nearest_before=[patch(i) for i in idx_b],
        nearest_after=[patch(i) for i in np.argmin(flat_a, axis=0)],
    )
    if report.assumptions_hold:
        change = report.logit_change
        if -change[c] > delta_max:
            report.violations.append(f"class {c} logit dropped by {-change[c]!r} > {delta_max!r}")
        for k in range(n_classes):
            if k != c and change[k] > delta_max:
                report.violations.append(f"class {k} logit rose by {change[k]!r} > {delta_max!r}")
        if report.margin_before >= 2.0 * delta_max and not report.prediction_unchanged:
            report.violations.append("prediction changed despite a top-2 margin >= 2*delta_max")
    return report


def verify_projection_theorem(model_before, model_after, x, delta, label=None, image_id=None):
    """Check the projection bound for image ``x`` between two model snapshots.

    The snapshots must share their configuration and backbone; only the
    prototypes (and possibly the last layer) may differ.
    """
    if model_before.config != model_after.config:
        raise InvalidArgumentError("models do not share a configuration")
    if not np.array_equal(model_before.allocation, model_after.allocation):
        raise InvalidArgumentError("models allocate prototypes differently")
    for wa, wb in zip(model_before.backbone.parameters(), model_after.backbone.parameters()):
        if not np.array_equal(wa.values, wb.values):
            raise InvalidArgumentError("models differ in their backbone; only prototypes may change")
    x = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    z = model_before.features(Tensor(x)).values
    return check_projection_bound(
        z,
        model_before.prototypes.values,
        model_after.prototypes.values,
        model_before.allocation,
        model_before.config.epsilon,
        delta,
        label=label,
        true_weights=model_before.last_layer.values,
        image_id=image_id,
    )
