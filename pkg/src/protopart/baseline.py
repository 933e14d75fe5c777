"""Non-interpretable reference network: the same backbone with a pooled linear head."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Backbone, check_images
from .tensor import Tape, Tensor
from .training import MomentumSGD, _epoch_order


@dataclass
class BaselineCNN:
    config: object
    backbone: Backbone
    head_weights: Tensor
    head_bias: Tensor

    @classmethod
    def build(cls, config, seed=0):
        config.validate()
        rng = np.random.default_rng(seed)
        backbone = Backbone.initialize(config, rng)
        d, k = config.addon_channels, config.n_classes
        limit = np.sqrt(6.0 / d)
        return cls(
            config,
            backbone,
            Tensor(rng.uniform(-limit, limit, size=(k, d)), requires_grad=True),
            Tensor(np.zeros(k), requires_grad=True),
        )

    def parameters(self):
        return self.backbone.parameters() + [self.head_weights, self.head_bias]

    def forward(self, x):
        z = self.backbone(check_images(x, self.config))
        pooled = T.mean(z, axis=(-3, -2))
        return T.add_bias(T.linear(pooled, self.head_weights), self.head_bias)

    def predict_logits(self, images, batch_size=128):
        images = np.asarray(images, dtype=np.float64)
        return np.concatenate(
            [self.forward(Tensor(images[i : i + batch_size])).values for i in range(0, len(images), batch_size)]
        )


def train_baseline(model, dataset, config, log=None):
    """Cross-entropy SGD with the optimiser, batches and epoch budget of stage 1.

    Runs ``stage1_epochs * cycles`` epochs, matching the number of SGD epochs
    a full ProtoPNet run spends on its backbone.
    """
    config.validate()
    opt = MomentumSGD([(model.parameters(), config.lr_backbone)], config.momentum)
    n = len(dataset)
    tape = Tape()
    losses = []
    for epoch in range(config.stage1_epochs * config.cycles):
        cycle, cycle_epoch = divmod(epoch, config.stage1_epochs)
        order = _epoch_order(n, config.seed, cycle, cycle_epoch)
        total = 0.0
        for begin in range(0, n, config.batch_size):
            idx = order[begin : begin + config.batch_size]
            opt.zero_grad()
            tape.reset()
            with tape:
                loss = T.softmax_cross_entropy(model.forward(Tensor(dataset.images[idx])), dataset.labels[idx])
                tape.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / n)
        if log:
            log(f"baseline epoch={epoch} crsent={losses[-1]!r}")
    return losses
