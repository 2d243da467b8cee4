"""Mask quality metrics: fidelity, sparsity, and attribution recovery.

The headline attribution metric scores an example 1 when any of its k
highest-weighted mask positions falls in the ground-truth relevant set
(k=3 by default). A stricter overlap fraction is reported alongside it
for diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, EmptyDatasetError
from .layers import ModelGraph
from .masking import MaskedModel, compute_mask, masked_forward

METRIC_KEYS = (
    "base_metric",
    "masked_metric",
    "fidelity_delta",
    "mean_mask",
    "mask_l0_at_half",
    "topk_attr_acc",
    "topk_overlap_frac",
    "k",
    "n_examples",
)


@dataclass
class MetricsReport:
    base_metric: float
    masked_metric: float
    fidelity_delta: float
    mean_mask: float
    mask_l0_at_half: float
    topk_attr_acc: float
    topk_overlap_frac: float
    k: int
    n_examples: int

    def to_json(self) -> str:
        payload = {k: asdict(self)[k] for k in METRIC_KEYS}
        return json.dumps(payload, indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        data = json.loads(text)
        extra = set(data) - set(METRIC_KEYS)
        missing = set(METRIC_KEYS) - set(data)
        if extra or missing:
            raise ConfigError(f"metrics keys mismatch: extra={sorted(extra)} missing={sorted(missing)}")
        return cls(**data)


def _predict(model, inputs, batch_size=256):
    outs = []
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start : start + batch_size]
        if isinstance(model, MaskedModel):
            out, _ = masked_forward(model, chunk)
        else:
            out = model.forward(chunk, mode="infer")
        outs.append(out.data)
    return np.concatenate(outs, axis=0)


def classification_accuracy(model, data) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class)."""
    if len(data) == 0:
        raise EmptyDatasetError("accuracy over an empty dataset")
    logits = _predict(model, data.inputs)
    pred = np.argmax(logits, axis=1)  # argmax already picks the first maximum
    return float(np.mean(pred == np.asarray(data.targets)))


def regression_rmse(model, data) -> float:
    """Root mean squared error of scalar predictions."""
    if len(data) == 0:
        raise EmptyDatasetError("rmse over an empty dataset")
    out = _predict(model, data.inputs).reshape(len(data))
    return float(np.sqrt(np.mean((out - np.asarray(data.targets)) ** 2)))


def mask_sparsity_stats(masks) -> tuple[float, float]:
    """(mean mask value, fraction of values strictly above 0.5)."""
    arr = masks.data if isinstance(masks, Tensor) else np.asarray(masks, dtype=float)
    if arr.size == 0:
        raise EmptyDatasetError("sparsity stats over an empty mask batch")
    return float(arr.mean()), float(np.mean(arr > 0.5))


def _topk_indices(flat_mask: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on the negated values: ties resolve to the lowest index.
    return np.argsort(-flat_mask, kind="stable")[:k]


def topk_attribution_accuracy(masks, relevance_sets, k: int = 3) -> float:
    """Fraction of examples whose top-k mask positions hit the relevant set."""
    arr = masks.data if isinstance(masks, Tensor) else np.asarray(masks, dtype=float)
    n = arr.shape[0]
    flat = arr.reshape(n, -1)
    if k < 1 or k > flat.shape[1]:
        raise ConfigError(f"k={k} invalid for masks of {flat.shape[1]} positions")
    if len(relevance_sets) != n:
        raise ConfigError("relevance count does not match mask count")
    hits = 0
    for i in range(n):
        rel = np.asarray(relevance_sets[i])
        if rel.size == 0:
            raise ConfigError("relevance sets must be nonempty")
        top = _topk_indices(flat[i], k)
        hits += bool(np.intersect1d(top, rel).size)
    return hits / n


def topk_overlap_fraction(masks, relevance_sets, k: int = 3) -> float:
    """Mean |top-k intersect relevance| / min(k, |relevance|) (diagnostic)."""
    arr = masks.data if isinstance(masks, Tensor) else np.asarray(masks, dtype=float)
    n = arr.shape[0]
    flat = arr.reshape(n, -1)
    if k < 1 or k > flat.shape[1]:
        raise ConfigError(f"k={k} invalid for masks of {flat.shape[1]} positions")
    total = 0.0
    for i in range(n):
        rel = np.asarray(relevance_sets[i])
        top = _topk_indices(flat[i], k)
        total += np.intersect1d(top, rel).size / min(k, rel.size)
    return total / n


def fidelity_delta(base_model: ModelGraph, masked_model: MaskedModel, data) -> float:
    """Signed metric change from masking; positive means masking helped.

    Classification: masked accuracy minus base accuracy. Regression: base
    RMSE minus masked RMSE (so an RMSE drop counts as an improvement).
    """
    if data.is_classification:
        return classification_accuracy(masked_model, data) - classification_accuracy(
            base_model, data
        )
    return regression_rmse(base_model, data) - regression_rmse(masked_model, data)


def collect_masks(mm: MaskedModel, inputs, batch_size=256) -> np.ndarray:
    masks = []
    for start in range(0, len(inputs), batch_size):
        masks.append(compute_mask(mm, inputs[start : start + batch_size]).data)
    return np.concatenate(masks, axis=0)


def evaluate_masked_model(mm: MaskedModel, data, k: int = 3) -> MetricsReport:
    """Full evaluation of a masked model against its base on one dataset."""
    if len(data) == 0:
        raise EmptyDatasetError("evaluation over an empty dataset")
    classification = data.is_classification
    base = _composed_base(mm)
    if classification:
        base_metric = classification_accuracy(base, data)
        masked_metric = classification_accuracy(mm, data)
        delta = masked_metric - base_metric
    else:
        base_metric = regression_rmse(base, data)
        masked_metric = regression_rmse(mm, data)
        delta = base_metric - masked_metric
    masks = collect_masks(mm, data.inputs)
    mean_mask, l0 = mask_sparsity_stats(masks)
    return MetricsReport(
        base_metric=base_metric,
        masked_metric=masked_metric,
        fidelity_delta=delta,
        mean_mask=mean_mask,
        mask_l0_at_half=l0,
        topk_attr_acc=topk_attribution_accuracy(masks, data.relevance, k),
        topk_overlap_frac=topk_overlap_fraction(masks, data.relevance, k),
        k=k,
        n_examples=len(data),
    )


class _ComposedBase:
    """Adapter running feature extractor then classifier as one model."""

    def __init__(self, mm: MaskedModel):
        self.mm = mm

    def forward(self, x, mode="infer"):
        return self.mm.base_forward(x)


def _composed_base(mm: MaskedModel) -> _ComposedBase:
    return _ComposedBase(mm)
