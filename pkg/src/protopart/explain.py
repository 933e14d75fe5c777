"""Case-based explanations, latent-space neighbours, pruning and ensembling."""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import write_ppm
from .exceptions import InvalidArgumentError
from .model import check_images, model_forward
from .projection import latent_batches
from .tensor import Tensor


@dataclass(frozen=True)
class PatchBox:
    """Pixel rectangle; ``bottom`` and ``right`` are exclusive."""

    top: int
    left: int
    bottom: int
    right: int
    image_id: object = None
    percentile: float = 95.0

    def contains(self, row, col):
        return self.top <= row < self.bottom and self.left <= col < self.right

    def as_tuple(self):
        return (self.top, self.left, self.bottom, self.right)


@dataclass
class PrototypeEvidence:
    prototype: int
    class_index: int
    score: float
    weights: np.ndarray
    points: np.ndarray
    activation_map: np.ndarray = field(repr=False)
    box: PatchBox = None


@dataclass
class Explanation:
    image_id: object
    predicted_class: int
    class_totals: np.ndarray
    logits: np.ndarray
    entries: list

    def to_text(self):
        c = self.predicted_class
        lines = [f"image={self.image_id} predicted={c}", "proto_id class score weight points box=(t,l,b,r)"]
        for e in self.entries:
            t, l, b, r = e.box.as_tuple()
            lines.append(
                f"{e.prototype} {e.class_index} {e.score!r} {float(e.weights[c])!r} "
                f"{float(e.points[c])!r} box=({t},{l},{b},{r})"
            )
        lines += [f"class={k} total={float(v)!r}" for k, v in enumerate(self.class_totals)]
        return "\n".join(lines) + "\n"


def _interp_matrix(src, dst):
    """dst x src matrix of align-corners linear interpolation weights."""
    out = np.zeros((dst, src))
    if src == 1 or dst == 1:
        out[:, 0] = 1.0
        return out
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    rows = np.arange(dst)
    out[rows, lo] = 1.0 - frac
    out[rows, lo + 1] += frac
    return out


def upsample_map(activation, target):
    """Bilinear (corner-aligned) resize of a 2-d map to ``target = (H, W)``."""
    activation = np.asarray(activation, dtype=np.float64)
    h, w = activation.shape
    th, tw = target
    if th < h or tw < w:
        raise InvalidArgumentError(f"target {target} smaller than map {activation.shape}")
    return _interp_matrix(h, th) @ activation @ _interp_matrix(w, tw).T


def extract_patch_box(upsampled, percentile=95.0, image_id=None):
    """Smallest box covering every pixel at or above the ``percentile`` threshold.

    The threshold is the ``ceil(percentile / 100 * N)``-th smallest value.
    """
    if not 0.0 < percentile < 100.0:
        raise InvalidArgumentError("percentile must lie in (0, 100)")
    values = np.asarray(upsampled, dtype=np.float64)
    flat = np.sort(values, axis=None)
    rank = min(max(math.ceil(percentile * flat.size / 100.0), 1), flat.size)
    rows, cols = np.nonzero(values >= flat[rank - 1])
    return PatchBox(int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1, image_id, percentile)


def activation_maps(distance_maps, epsilon):
    """Similarity maps from distance maps (same shape)."""
    return T.log_activation(Tensor(distance_maps), epsilon).values


def explain_image(model, x, image_id=None, percentile=95.0):
    x = check_images(x, model.config)
    if x.ndim != 3:
        raise InvalidArgumentError("explain_image takes a single H x W x 3 image")
    out = model_forward(x, model)
    scores = out.similarity_scores.values
    logits = out.logits.values
    weights = model.last_layer.values
    points = weights * scores[None, :]
    maps = activation_maps(out.distance_maps.values, model.config.epsilon)
    target = model.config.input_shape[:2]
    entries = []
    for j in range(model.n_prototypes):
        up = upsample_map(maps[:, :, j], target)
        entries.append(
            PrototypeEvidence(
                prototype=j,
                class_index=int(model.allocation[j]),
                score=float(scores[j]),
                weights=weights[:, j].copy(),
                points=points[:, j].copy(),
                activation_map=up,
                box=extract_patch_box(up, percentile, image_id),
            )
        )
    return Explanation(image_id, int(np.argmax(logits)), points.sum(axis=1), logits, entries)


# ---------------------------------------------------------------- rendering

# 256-entry blue-to-red ramp
COLOR_TABLE = np.stack([np.arange(256) / 255.0, np.zeros(256), 1.0 - np.arange(256) / 255.0], axis=1)


def heatmap_overlay(image, activation, alpha=0.5):
    """Min-max normalise ``activation``, colour it and blend over ``image``."""
    lo, hi = activation.min(), activation.max()
    norm = (activation - lo) / (hi - lo) if hi > lo else np.zeros_like(activation)
    colours = COLOR_TABLE[np.floor(norm * 255.0 + 0.5).astype(int)]
    return (1.0 - alpha) * np.asarray(image) + alpha * colours


def crop(image, box):
    return np.asarray(image)[box.top : box.bottom, box.left : box.right]


def write_explanation(explanation, image, out_dir):
    """Write heatmap and patch-crop PPMs per prototype plus ``report.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for e in explanation.entries:
        write_ppm(heatmap_overlay(image, e.activation_map), out / f"prototype_{e.prototype:03d}_heatmap.ppm")
        write_ppm(crop(image, e.box), out / f"prototype_{e.prototype:03d}_patch.ppm")
    (out / "report.txt").write_text(explanation.to_text(), encoding="utf-8")
    return out / "report.txt"


def parse_explanation_totals(text):
    """Per-class totals from a report written by :meth:`Explanation.to_text`."""
    totals = {}
    for line in text.splitlines():
        if line.startswith("class="):
            k, total = line.split()
            totals[int(k.split("=")[1])] = float(total.split("=")[1])
    return np.array([totals[k] for k in sorted(totals)])


# ---------------------------------------------------------------- neighbours


@dataclass(frozen=True)
class PrototypeMatch:
    prototype: int
    class_index: int
    score: float
    box: PatchBox


@dataclass(frozen=True)
class PatchMatch:
    image_index: int
    row: int
    col: int
    class_index: int
    distance: float


def nearest_prototypes_to_image(model, x, top_n=3, image_id=None, percentile=95.0):
    """Prototypes ranked by similarity to ``x`` (ties: lower index first)."""
    if not 1 <= top_n <= model.n_prototypes:
        raise InvalidArgumentError(f"top_n must lie in [1, {model.n_prototypes}]")
    explanation = explain_image(model, x, image_id, percentile)
    scores = np.array([e.score for e in explanation.entries])
    order = np.argsort(-scores, kind="stable")[:top_n]
    return [
        PrototypeMatch(int(j), explanation.entries[j].class_index, float(scores[j]), explanation.entries[j].box)
        for j in order
    ]


def _all_distances(model, images, batch_size=64, workers=1):
    """Distance maps of every image to every prototype: N x H' x W' x m."""
    protos = Tensor(model.prototypes.values)
    chunks = [
        T.l2_distance_maps(Tensor(z), protos).values
        for _, z in latent_batches(model, np.asarray(images, dtype=np.float64), batch_size, workers)
    ]
    return np.concatenate(chunks)


def _rank_patches(dist, labels, top_n):
    # dist: N x H' x W'; flattened order is (image, row, col), so a stable sort breaks ties that way
    n, ho, wo = dist.shape
    flat = dist.reshape(-1)
    order = np.argsort(flat, kind="stable")[:top_n]
    out = []
    for pos in order:
        i, rc = divmod(int(pos), ho * wo)
        r, c = divmod(rc, wo)
        out.append(PatchMatch(i, r, c, int(labels[i]), float(flat[pos])))
    return out


def nearest_patches_to_prototype(model, dataset, prototype, top_n=5, workers=1):
    """Dataset patches ranked by ascending squared distance to one prototype."""
    if not 0 <= prototype < model.n_prototypes:
        raise InvalidArgumentError(f"prototype index {prototype} out of range")
    dist = _all_distances(model, dataset.images, workers=workers)[..., prototype]
    return _rank_patches(dist, dataset.labels, top_n)


@dataclass
class PruneEntry:
    prototype: int
    class_index: int
    neighbours: list
    own_class_count: int
    pruned: bool
    removed: bool


@dataclass
class PruneReport:
    z: int
    tau: int
    entries: list
    refused_classes: list
    count_before: int
    count_after: int

    def to_text(self):
        lines = [f"z={self.z} tau={self.tau} before={self.count_before} after={self.count_after}"]
        for e in self.entries:
            lines.append(
                f"prototype={e.prototype} class={e.class_index} own={e.own_class_count} "
                f"pruned={int(e.pruned)} removed={int(e.removed)}"
            )
        if self.refused_classes:
            lines.append("refused_classes=" + ",".join(str(k) for k in self.refused_classes))
        return "\n".join(lines) + "\n"


def prune_prototypes(model, dataset, z=6, tau=3, workers=1):
    """Drop prototypes whose ``z`` nearest training patches hold fewer than ``tau`` own-class patches.

    A class is never left without prototypes: if every prototype of a class
    qualifies, none of them is removed and the class is listed in
    ``refused_classes``.  Returns a new model; the input is not modified.
    """
    if not z >= tau >= 1:
        raise InvalidArgumentError("pruning needs z >= tau >= 1")
    dist = _all_distances(model, dataset.images, workers=workers)
    entries = []
    for j in range(model.n_prototypes):
        neighbours = _rank_patches(dist[..., j], dataset.labels, z)
        k = int(model.allocation[j])
        own = sum(nb.class_index == k for nb in neighbours)
        entries.append(PruneEntry(j, k, neighbours, own, own < tau, own < tau))

    refused = []
    for k in range(model.n_classes):
        members = [e for e in entries if e.class_index == k]
        if members and all(e.pruned for e in members):
            refused.append(k)
            for e in members:
                e.removed = False

    keep = np.array([not e.removed for e in entries])
    kept_index = {int(j): new for new, j in enumerate(np.flatnonzero(keep))}
    pruned = model.copy()
    pruned.prototypes = Tensor(model.prototypes.values[keep].copy(), requires_grad=True)
    pruned.allocation = model.allocation[keep].copy()
    pruned.last_layer = Tensor(model.last_layer.values[:, keep].copy(), requires_grad=True)
    counts = tuple(int(c) for c in np.bincount(pruned.allocation, minlength=model.n_classes))
    pruned.config = replace(model.config, prototypes_per_class=counts)
    pruned.backbone.config = pruned.config
    pruned.projection_records = [
        replace(r, prototype=kept_index[r.prototype]) for r in model.projection_records if r.prototype in kept_index
    ]
    report = PruneReport(z, tau, entries, refused, model.n_prototypes, int(keep.sum()))
    return pruned, report


# ---------------------------------------------------------------- ensembles


def ensemble_logits(models, x):
    """Element-wise sum of each model's logits on ``x``."""
    if not models:
        raise InvalidArgumentError("ensemble needs at least one model")
    n_classes = models[0].n_classes
    shape = tuple(models[0].config.input_shape)
    for m in models[1:]:
        if m.n_classes != n_classes:
            raise InvalidArgumentError(f"class counts differ: {n_classes} vs {m.n_classes}")
        if tuple(m.config.input_shape) != shape:
            raise InvalidArgumentError("models expect different input sizes")
    total = None
    for m in models:
        logits = m.predict_logits(np.asarray(x)) if np.ndim(x) == 4 else model_forward(x, m).logits.values
        total = logits.copy() if total is None else total + logits
    return total
