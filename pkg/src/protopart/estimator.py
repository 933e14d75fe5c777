"""scikit-learn compatible wrappers around the training functions.

Images are passed as arrays of shape ``(n_samples, H, W, 3)`` with values in
[0, 1]; labels may be any hashable values (they are encoded internally).
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .baseline import BaselineCNN, train_baseline
from .data import Dataset
from .explain import explain_image
from .model import DEFAULT_BLOCKS, ModelConfig, build_model
from .tensor import Tensor, softmax
from .training import TrainConfig, train_full


def check_image_array(X, input_shape=None):
    """Validate a batch of RGB images and return it as float64."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_features=1)
    if X.ndim != 4 or X.shape[3] != 3:
        raise ValueError(f"expected images of shape (n_samples, H, W, 3), got {X.shape}")
    if input_shape is not None and X.shape[1:] != tuple(input_shape):
        raise ValueError(f"expected images of shape {tuple(input_shape)}, got {X.shape[1:]}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


class _ImageClassifier(ClassifierMixin, BaseEstimator):
    def _encode(self, X, y):
        X = check_image_array(X)
        y = column_or_1d(y, warn=True)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        self.input_shape_ = X.shape[1:]
        return Dataset(X, self._encoder.transform(y), tuple(str(c) for c in self.classes_))

    def _model_config(self):
        return ModelConfig(
            input_shape=self.input_shape_,
            blocks=tuple(self.blocks),
            addon_channels=self.addon_channels,
            n_classes=len(self.classes_),
            **self._prototype_kwargs(),
        )

    def _prototype_kwargs(self):
        return {}

    def _train_config(self):
        return TrainConfig(
            lr_backbone=self.lr_backbone,
            momentum=self.momentum,
            batch_size=self.batch_size,
            stage1_epochs=self.stage1_epochs,
            cycles=self.cycles,
            seed=self.random_state,
        )

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class ProtoPNetClassifier(_ImageClassifier, TransformerMixin):
    """Prototypical part network trained with the three-stage schedule.

    ``transform`` returns the per-prototype similarity scores, so the
    fitted network can also serve as an interpretable feature extractor.

    Attributes
    ----------
    model_ : ProtoPNetModel
    classes_ : ndarray of original labels
    reports_ : list of StageReport, one per stage run
    """

    def __init__(
        self,
        blocks=DEFAULT_BLOCKS,
        addon_channels=64,
        prototype_shape=(1, 1),
        prototypes_per_class=3,
        epsilon=1e-4,
        lambda_cluster=0.8,
        lambda_separation=0.08,
        lambda_l1=1e-4,
        lr_backbone=1e-2,
        lr_prototypes=3e-3,
        momentum=0.9,
        batch_size=32,
        stage1_epochs=10,
        stage3_epochs=20,
        stage3_steps=50,
        cycles=2,
        random_state=0,
        verbose=False,
    ):
        self.blocks = blocks
        self.addon_channels = addon_channels
        self.prototype_shape = prototype_shape
        self.prototypes_per_class = prototypes_per_class
        self.epsilon = epsilon
        self.lambda_cluster = lambda_cluster
        self.lambda_separation = lambda_separation
        self.lambda_l1 = lambda_l1
        self.lr_backbone = lr_backbone
        self.lr_prototypes = lr_prototypes
        self.momentum = momentum
        self.batch_size = batch_size
        self.stage1_epochs = stage1_epochs
        self.stage3_epochs = stage3_epochs
        self.stage3_steps = stage3_steps
        self.cycles = cycles
        self.random_state = random_state
        self.verbose = verbose

    def _prototype_kwargs(self):
        return {
            "prototype_shape": tuple(self.prototype_shape),
            "prototypes_per_class": self.prototypes_per_class,
            "epsilon": self.epsilon,
        }

    def _train_config(self):
        base = super()._train_config()
        base.lambda_cluster = self.lambda_cluster
        base.lambda_separation = self.lambda_separation
        base.lambda_l1 = self.lambda_l1
        base.lr_prototypes = self.lr_prototypes
        base.stage3_epochs = self.stage3_epochs
        base.stage3_steps = self.stage3_steps
        return base

    def fit(self, X, y):
        dataset = self._encode(X, y)
        self.model_ = build_model(self._model_config(), seed=self.random_state)
        self.reports_ = train_full(self.model_, dataset, self._train_config(), log=print if self.verbose else None)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_logits(check_image_array(X, self.input_shape_))

    def transform(self, X):
        """Similarity score of every image to every prototype, shape (n_samples, m)."""
        check_is_fitted(self, "model_")
        X = check_image_array(X, self.input_shape_)
        return np.concatenate(
            [self.model_.forward(Tensor(X[i : i + 128])).similarity_scores.values for i in range(0, len(X), 128)]
        )

    def explain(self, image, image_id=None):
        check_is_fitted(self, "model_")
        return explain_image(self.model_, image, image_id)


class BaselineCNNClassifier(_ImageClassifier):
    """Same backbone with a global-average-pooled linear head, trained by plain SGD."""

    def __init__(
        self,
        blocks=DEFAULT_BLOCKS,
        addon_channels=64,
        lr_backbone=1e-2,
        momentum=0.9,
        batch_size=32,
        stage1_epochs=10,
        cycles=2,
        random_state=0,
        verbose=False,
    ):
        self.blocks = blocks
        self.addon_channels = addon_channels
        self.lr_backbone = lr_backbone
        self.momentum = momentum
        self.batch_size = batch_size
        self.stage1_epochs = stage1_epochs
        self.cycles = cycles
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, y):
        dataset = self._encode(X, y)
        self.model_ = BaselineCNN.build(self._model_config(), seed=self.random_state)
        self.loss_curve_ = train_baseline(self.model_, dataset, self._train_config(), log=print if self.verbose else None)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_logits(check_image_array(X, self.input_shape_))
