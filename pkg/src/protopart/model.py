"""ProtoPNet architecture: backbone ``f``, prototype layer ``g_p``, last layer ``h``.

Inference on an image ``x``::

    z = f(x)                                # H x W x D, every value in (0, 1)
    d[j] = min over patches |z~ - p_j|^2    # one squared distance per prototype
    s[j] = log((d[j] + 1) / (d[j] + eps))   # similarity score
    logits = w_h @ s                        # no bias
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .exceptions import InvalidArgumentError, InvalidConfigError, InvalidShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ConvBlock:
    """One backbone stage: conv (ReLU) optionally followed by a max-pool.

    ``pool=0`` disables pooling; ``pool_stride`` defaults to ``pool``.
    """

    filters: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: int = 2
    pool_stride: int = 0

    def output_extent(self, extent):
        out = (extent + 2 * self.padding - self.kernel) // self.stride + 1
        if self.pool:
            out = (out - self.pool) // (self.pool_stride or self.pool) + 1
        return out


# 32 -> conv(pad 1) 32 -> pool 16 -> conv(pad 0) 14 -> pool 7 -> conv(pad 1) 7
DEFAULT_BLOCKS = (
    ConvBlock(16, padding=1, pool=2),
    ConvBlock(32, padding=0, pool=2),
    ConvBlock(64, padding=1, pool=0),
)


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (32, 32, 3)
    blocks: tuple = DEFAULT_BLOCKS
    addon_channels: int = 64
    prototype_shape: tuple = (1, 1)
    n_classes: int = 5
    prototypes_per_class: object = 3
    epsilon: float = 1e-4

    def __post_init__(self):
        # normalise so that configs compare equal however they were spelled
        per_class = self.prototypes_per_class
        if isinstance(per_class, (int, np.integer)):
            per_class = (int(per_class),) * self.n_classes
        object.__setattr__(self, "prototypes_per_class", tuple(int(c) for c in per_class))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "prototype_shape", tuple(int(v) for v in self.prototype_shape))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def class_counts(self):
        """Number of prototypes allocated to each class (``m_k``)."""
        return self.prototypes_per_class

    @property
    def n_prototypes(self):
        return sum(self.class_counts)

    def allocation(self):
        """Class index of every prototype, class-major (all of class 0 first)."""
        return np.repeat(np.arange(self.n_classes), self.class_counts)

    def latent_shape(self):
        h, w = self.input_shape[:2]
        for block in self.blocks:
            h, w = block.output_extent(h), block.output_extent(w)
            if h < 1 or w < 1:
                raise InvalidConfigError(f"backbone collapses the input at block {block}")
        return (h, w, self.addon_channels)

    def map_shape(self):
        h, w, _ = self.latent_shape()
        return (h - self.prototype_shape[0] + 1, w - self.prototype_shape[1] + 1)

    def validate(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise InvalidConfigError(f"input_shape must be (H, W, C), got {self.input_shape}")
        if self.n_classes < 1:
            raise InvalidConfigError("n_classes must be at least 1")
        counts = self.class_counts
        if len(counts) != self.n_classes or min(counts) < 1:
            raise InvalidConfigError("every class needs at least one prototype")
        if not 0.0 < self.epsilon < 1.0:
            raise InvalidConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.addon_channels < 1:
            raise InvalidConfigError("addon_channels must be positive")
        for block in self.blocks:
            if min(block.filters, block.kernel, block.stride) < 1 or block.padding < 0 or block.pool < 0:
                raise InvalidConfigError(f"invalid conv block {block}")
        h, w, _ = self.latent_shape()
        h1, w1 = self.prototype_shape
        if h1 < 1 or w1 < 1 or h1 > h or w1 > w:
            raise InvalidConfigError(f"prototype {h1}x{w1} does not fit the {h}x{w} latent map")
        return self


@dataclass
class ModelOutput:
    """Every intermediate of a forward pass.

    ``distance_maps`` stacks the per-prototype maps on the last axis
    (``H' x W' x m``, or ``N x H' x W' x m`` for a batch).
    """

    logits: Tensor
    similarity_scores: Tensor
    distance_maps: Tensor
    latent: Tensor
    min_distances: Tensor


def prototype_activation(d2, epsilon=1e-4):
    """Similarity score of a squared distance: ``log((d2 + 1) / (d2 + epsilon))``."""
    d2 = np.asarray(d2, dtype=np.float64)
    out = np.log1p((1.0 - epsilon) / (d2 + epsilon))
    return float(out) if out.ndim == 0 else out


def init_last_layer(allocation, n_classes=None):
    """1 for a class's own prototypes, -0.5 for every other prototype."""
    allocation = np.asarray(allocation, dtype=np.int64)
    if n_classes is None:
        n_classes = int(allocation.max()) + 1
    own = allocation[None, :] == np.arange(n_classes)[:, None]
    return np.where(own, 1.0, -0.5)


class Backbone:
    """Conv blocks with ReLU, then two 1x1 add-on convs (ReLU, sigmoid)."""

    def __init__(self, config, weights, biases):
        self.config = config
        self.weights = list(weights)
        self.biases = list(biases)

    @classmethod
    def initialize(cls, config, rng):
        weights, biases = [], []
        cin = config.input_shape[2]
        shapes = [(b.kernel, b.filters) for b in config.blocks]
        shapes += [(1, config.addon_channels), (1, config.addon_channels)]
        for kernel, cout in shapes:
            limit = np.sqrt(6.0 / (kernel * kernel * cin))
            weights.append(Tensor(rng.uniform(-limit, limit, size=(kernel, kernel, cin, cout)), requires_grad=True))
            biases.append(Tensor(np.zeros(cout), requires_grad=True))
            cin = cout
        return cls(config, weights, biases)

    def parameters(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, x):
        h = x
        for block, w, b in zip(self.config.blocks, self.weights, self.biases):
            h = T.relu(T.conv2d(h, w, stride=block.stride, padding=block.padding, bias=b))
            if block.pool:
                h = T.max_pool(h, "window", block.pool, block.pool_stride or block.pool)
        n = len(self.config.blocks)
        h = T.relu(T.conv2d(h, self.weights[n], bias=self.biases[n]))
        return T.sigmoid(T.conv2d(h, self.weights[n + 1], bias=self.biases[n + 1]))

    def copy(self):
        return Backbone(
            self.config,
            [Tensor(w.values.copy(), requires_grad=True) for w in self.weights],
            [Tensor(b.values.copy(), requires_grad=True) for b in self.biases],
        )


@dataclass
class ProtoPNetModel:
    config: ModelConfig
    backbone: Backbone
    prototypes: Tensor
    allocation: np.ndarray
    last_layer: Tensor
    seed_lineage: tuple = ()
    projection_records: list = field(default_factory=list)

    @property
    def n_prototypes(self):
        return self.prototypes.shape[0]

    @property
    def n_classes(self):
        return self.last_layer.shape[0]

    @property
    def class_counts(self):
        return tuple(int(c) for c in np.bincount(self.allocation, minlength=self.n_classes))

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        return model_forward(x, self)

    def predict_logits(self, images, batch_size=128):
        """Logits for an N x H x W x C array, evaluated in batches without a tape."""
        images = np.asarray(images, dtype=np.float64)
        out = [self.forward(Tensor(images[i : i + batch_size])).logits.values for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.n_classes))

    def copy(self):
        return replace(
            self,
            backbone=self.backbone.copy(),
            prototypes=Tensor(self.prototypes.values.copy(), requires_grad=True),
            allocation=self.allocation.copy(),
            last_layer=Tensor(self.last_layer.values.copy(), requires_grad=True),
            projection_records=list(self.projection_records),
        )


def build_model(config, seed=0):
    """Fresh model: He-uniform convs, prototypes uniform on (0, 1), last layer 1 / -0.5."""
    config.validate()
    rng = np.random.default_rng(seed)
    backbone = Backbone.initialize(config, rng)
    h1, w1 = config.prototype_shape
    prototypes = rng.uniform(0.0, 1.0, size=(config.n_prototypes, h1, w1, config.addon_channels))
    allocation = config.allocation()
    return ProtoPNetModel(
        config=config,
        backbone=backbone,
        prototypes=Tensor(prototypes, requires_grad=True),
        allocation=allocation,
        last_layer=Tensor(init_last_layer(allocation, config.n_classes), requires_grad=True),
        seed_lineage=(int(seed),),
    )


def prototype_layer(z, prototypes, epsilon):
    """(scores, distance maps, min distances) for a latent tensor or batch."""
    maps = T.l2_distance_maps(z, prototypes)
    min_d = T.reduce_min(maps, axis=(-3, -2))
    return T.log_activation(min_d, epsilon), maps, min_d


def prototype_forward(z, model):
    """Similarity scores and distance maps of latent ``z`` against every prototype."""
    h, w, d = model.config.latent_shape()
    if z.shape[-3:] != (h, w, d):
        raise InvalidShapeError(f"latent must be {h}x{w}x{d}, got {z.shape}")
    scores, maps, _ = prototype_layer(z, model.prototypes, model.config.epsilon)
    return scores, maps


def check_images(x, config):
    """Validate an image or batch against the configured input size and [0, 1] range."""
    values = x.values if isinstance(x, Tensor) else np.asarray(x)
    if values.shape[-3:] != tuple(config.input_shape) or values.ndim not in (3, 4):
        raise InvalidShapeError(f"expected images of shape {tuple(config.input_shape)}, got {values.shape}")
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise InvalidArgumentError("pixel values must lie in [0, 1]")
    return x if isinstance(x, Tensor) else Tensor(values)


def model_forward(x, model):
    x = check_images(x, model.config)
    z = model.features(x)
    scores, maps, min_d = prototype_layer(z, model.prototypes, model.config.epsilon)
    logits = T.linear(scores, model.last_layer)
    return ModelOutput(logits=logits, similarity_scores=scores, distance_maps=maps, latent=z, min_distances=min_d)
