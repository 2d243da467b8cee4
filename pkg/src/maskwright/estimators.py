"""Scikit-learn style estimators wrapping the base networks and the explainer.

``NetworkClassifier`` / ``NetworkRegressor`` fit a base network on raw
arrays; ``MaskExplainer`` fits an explanation network against a fitted base
estimator, exposes masks through ``transform``, and masked predictions
through ``predict``. All three follow the get_params/set_params contract,
so they clone and grid-search like any other estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import tasks
from .architectures import (
    TaskWiring,
    assemble_masked_model,
    chars_base,
    image_base,
    sequence_base,
)
from .errors import ConfigError
from .evaluation import classification_accuracy, collect_masks, regression_rmse
from .masking import masked_forward
from .objectives import RegularizerConfig
from .training import TrainConfig, train_base, train_explainer
from .validation import check_consistent_length, check_images, check_sequences, check_targets


def _dataset_from_arrays(X, y, classification: bool) -> tasks.LabeledDataset:
    # relevance is not used for fitting; a placeholder keeps the type honest
    rel = [np.array([0])] * len(y)
    task = "keyword_seq" if classification else "char_count"
    if np.issubdtype(np.asarray(X).dtype, np.floating):
        task = "planted_patch"
    return tasks.LabeledDataset(np.asarray(X), y, rel, task=task)


class _NetworkBase(BaseEstimator):
    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before using this estimator")

    def _train_cfg(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            lr=self.lr,
            optimizer=self.optimizer,
            eval_every=max(1, self.epochs),
        )


class NetworkClassifier(_NetworkBase, ClassifierMixin):
    """Conv or recurrent classifier chosen from the input type.

    Float [N, C, H, W] (or [N, H, W]) inputs get the image base network;
    integer [N, T] id sequences get the embedding + bidirectional GRU base.
    ``arch_params`` passes sizes straight to the architecture builder.
    """

    def __init__(self, epochs=10, batch_size=32, lr=None, optimizer="adam", seed=0, arch_params=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.seed = seed
        self.arch_params = arch_params

    def fit(self, X, y):
        y = check_targets(y, classification=True)
        check_consistent_length(X, y)
        classes = int(y.max()) + 1 if len(y) else 2
        params = dict(self.arch_params or {})
        if np.issubdtype(np.asarray(X).dtype, np.floating):
            X = check_images(X)
            wiring = image_base(
                image_size=X.shape[2], channels=X.shape[1], classes=classes,
                seed=self.seed, **params,
            )
        else:
            X = check_sequences(X)
            vocab = params.pop("vocab", int(X.max()) + 1)
            wiring = sequence_base(
                vocab=vocab, seq_len=X.shape[1], classes=classes, seed=self.seed, **params
            )
        data = _dataset_from_arrays(X, y, classification=True)
        self.wiring_: TaskWiring = wiring
        self.model_ = wiring.base
        self.classes_ = np.arange(classes)
        self.log_ = train_base(self.model_, data, self._train_cfg())
        return self

    def decision_function(self, X):
        self._check_fitted()
        out = self.model_.forward(np.asarray(X), mode="infer")
        return out.data

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def score(self, X, y):
        y = check_targets(y, classification=True)
        data = _dataset_from_arrays(np.asarray(X), y, classification=True)
        self._check_fitted()
        return classification_accuracy(self.model_, data)


class NetworkRegressor(_NetworkBase, RegressorMixin):
    """Mixed conv/recurrent regressor over integer id sequences."""

    def __init__(self, epochs=10, batch_size=32, lr=None, optimizer="adam", seed=0, arch_params=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.seed = seed
        self.arch_params = arch_params

    def fit(self, X, y):
        y = check_targets(y, classification=False)
        check_consistent_length(X, y)
        X = check_sequences(X)
        params = dict(self.arch_params or {})
        alphabet = params.pop("alphabet", int(X.max()) + 1)
        wiring = chars_base(alphabet=alphabet, seq_len=X.shape[1], seed=self.seed, **params)
        data = _dataset_from_arrays(X, y, classification=False)
        self.wiring_: TaskWiring = wiring
        self.model_ = wiring.base
        self.log_ = train_base(self.model_, data, self._train_cfg())
        return self

    def predict(self, X):
        self._check_fitted()
        out = self.model_.forward(np.asarray(X), mode="infer")
        return out.data.reshape(len(X))

    def rmse(self, X, y):
        self._check_fitted()
        y = check_targets(y, classification=False)
        data = _dataset_from_arrays(np.asarray(X), y, classification=False)
        return regression_rmse(self.model_, data)


class MaskExplainer(_NetworkBase, TransformerMixin):
    """Fits an explanation network against a frozen, already-fitted base.

    ``base`` is a fitted NetworkClassifier / NetworkRegressor (or a
    TaskWiring). ``transform`` returns the per-example masks;
    ``predict`` returns the masked model's predictions.
    """

    def __init__(
        self,
        base=None,
        l1=0.0,
        l2=0.0,
        entropy=0.0,
        entropy_kind="distribution",
        epochs=10,
        batch_size=32,
        lr=None,
        optimizer="adam",
        seed=0,
        explainer_params=None,
    ):
        self.base = base
        self.l1 = l1
        self.l2 = l2
        self.entropy = entropy
        self.entropy_kind = entropy_kind
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.seed = seed
        self.explainer_params = explainer_params

    def _wiring(self) -> TaskWiring:
        if isinstance(self.base, TaskWiring):
            return self.base
        wiring = getattr(self.base, "wiring_", None)
        if wiring is None:
            raise NotFittedError("base estimator must be fitted before the explainer")
        return wiring

    def fit(self, X, y):
        wiring = self._wiring()
        classification = self._is_classification()
        y = check_targets(y, classification)
        check_consistent_length(X, y)
        from .masking import build_explainer

        dims = dict(wiring.explainer_dims)
        dims.update(self.explainer_params or {})
        explainer = build_explainer(wiring.variant, seed=self.seed, **dims)
        self.masked_model_ = assemble_masked_model(wiring, explainer=explainer)
        reg = RegularizerConfig(
            l1_coeff=self.l1,
            l2_coeff=self.l2,
            entropy_coeff=self.entropy,
            entropy_kind=self.entropy_kind,
        )
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            lr=self.lr,
            optimizer=self.optimizer,
            reg=reg,
            eval_every=max(1, self.epochs),
        )
        data = _dataset_from_arrays(np.asarray(X), y, classification)
        self.log_ = train_explainer(self.masked_model_, data, cfg)
        return self

    def _is_classification(self) -> bool:
        if isinstance(self.base, TaskWiring):
            return self.base.variant != "chars"
        return isinstance(self.base, NetworkClassifier)

    def _check_fitted(self):
        if not hasattr(self, "masked_model_"):
            raise NotFittedError("call fit before using this estimator")

    def transform(self, X):
        self._check_fitted()
        return collect_masks(self.masked_model_, np.asarray(X))

    def predict(self, X):
        self._check_fitted()
        out, _ = masked_forward(self.masked_model_, np.asarray(X))
        if self._is_classification():
            return np.argmax(out.data, axis=1)
        return out.data.reshape(len(X))

    def score(self, X, y):
        """Masked accuracy for classification, negative RMSE for regression."""
        self._check_fitted()
        classification = self._is_classification()
        y = check_targets(y, classification)
        data = _dataset_from_arrays(np.asarray(X), y, classification)
        if classification:
            return classification_accuracy(self.masked_model_, data)
        return -regression_rmse(self.masked_model_, data)
