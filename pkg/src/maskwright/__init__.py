"""Explanation masks for frozen networks.

A small differentiable-programming library plus the machinery to train a
secondary explanation network against a frozen base model, synthetic
benchmark tasks with known ground-truth relevance, evaluation metrics,
file formats, and a command-line interface.

The quickest route in is the estimator API::

    clf = NetworkClassifier(epochs=10).fit(X, y)
    explainer = MaskExplainer(base=clf, l2=1e-4).fit(X, y)
    masks = explainer.transform(X)
"""

__version__ = "0.1.0"

from . import (
    architectures,
    autodiff,
    errors,
    evaluation,
    layers,
    masking,
    objectives,
    serialization,
    tasks,
    training,
)
from .autodiff import Tensor, backward, finite_diff_check, tape, tensor_new
from .estimators import MaskExplainer, NetworkClassifier, NetworkRegressor
from .evaluation import MetricsReport, evaluate_masked_model
from .layers import LayerSpec, ModelGraph, graph_forward
from .masking import (
    BroadcastSpec,
    MaskedModel,
    SplitModel,
    apply_mask,
    build_explainer,
    compute_mask,
    masked_forward,
    split_model,
)
from .objectives import RegularizerConfig
from .tasks import LabeledDataset, TaskSpec
from .training import TrainConfig, freeze_parameters, train_base, train_explainer

__all__ = [
    "__version__",
    "architectures",
    "autodiff",
    "errors",
    "evaluation",
    "layers",
    "masking",
    "objectives",
    "serialization",
    "tasks",
    "training",
    "Tensor",
    "backward",
    "finite_diff_check",
    "tape",
    "tensor_new",
    "MaskExplainer",
    "NetworkClassifier",
    "NetworkRegressor",
    "MetricsReport",
    "evaluate_masked_model",
    "LayerSpec",
    "ModelGraph",
    "graph_forward",
    "BroadcastSpec",
    "MaskedModel",
    "SplitModel",
    "apply_mask",
    "build_explainer",
    "compute_mask",
    "masked_forward",
    "split_model",
    "RegularizerConfig",
    "LabeledDataset",
    "TaskSpec",
    "TrainConfig",
    "freeze_parameters",
    "train_base",
    "train_explainer",
]
