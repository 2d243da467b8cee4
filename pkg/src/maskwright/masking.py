"""Split base models, explanation networks, and the masked forward pass.

The explanation network sees the frozen base model's features for the
*unmasked* input, emits a mask, and the mask is broadcast and multiplied
into the maskable input before the base model runs again to produce the
final output. Base weights stay frozen; only the explainer trains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .layers import (
    Activation,
    BatchNorm,
    BiGRULayer,
    Conv1d,
    Conv2d,
    Dense,
    Embedding,
    ModelGraph,
    Reshape,
    ResidualBlock,
    Upsample2x,
)

MASK_POINTS = ("raw_input", "post_embedding")


@dataclass
class SplitModel:
    """A base model partitioned into feature extractor and classifier head."""

    feature_extractor: ModelGraph
    classifier: ModelGraph
    split_index: int


def split_model(base: ModelGraph, split_index: int) -> SplitModel:
    """Partition ``base.layers`` at ``split_index``; parameters are shared."""
    n = len(base.layers)
    if not 0 < split_index < n:
        raise IndexError(f"split index {split_index} out of range (0, {n})")
    f = ModelGraph(base.layers[:split_index], mode=base.mode)
    c = ModelGraph(base.layers[split_index:], mode=base.mode)
    return SplitModel(feature_extractor=f, classifier=c, split_index=split_index)


@dataclass
class BroadcastSpec:
    """How a mask expands to the maskable input's shape.

    ``broadcast_axis`` names the per-example axis along which one mask value
    is replicated (the channel axis for images, the embedding axis for
    sequences), or None when mask and input shapes already agree.
    """

    mask_shape: tuple
    input_shape: tuple
    broadcast_axis: int | None = None

    def __post_init__(self):
        self.mask_shape = tuple(int(s) for s in self.mask_shape)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.broadcast_axis is None:
            if self.mask_shape != self.input_shape:
                raise ConfigError(
                    f"mask {self.mask_shape} must equal input {self.input_shape} "
                    "when no broadcast axis is set"
                )
            return
        ax = self.broadcast_axis
        if not 0 <= ax < len(self.input_shape):
            raise ConfigError(f"broadcast axis {ax} out of range for {self.input_shape}")
        expanded = self.input_shape[:ax] + self.input_shape[ax + 1 :]
        if expanded != self.mask_shape:
            raise ConfigError(
                f"mask {self.mask_shape} with axis {ax} expanded does not give "
                f"input {self.input_shape}"
            )


def apply_mask(x: Tensor, m: Tensor, spec: BroadcastSpec) -> Tensor:
    """x * broadcast(m). Accepts per-example shapes or a leading batch axis."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    m = m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=float))
    if x.shape == spec.input_shape and m.shape == spec.mask_shape:
        offset = 0
    elif (
        x.ndim == len(spec.input_shape) + 1
        and x.shape[1:] == spec.input_shape
        and m.shape == (x.shape[0],) + spec.mask_shape
    ):
        offset = 1
    else:
        raise ShapeError(
            f"apply_mask: input {x.shape} / mask {m.shape} inconsistent with "
            f"spec {spec.input_shape} / {spec.mask_shape}"
        )
    if spec.broadcast_axis is None:
        return ad.mul(x, m)
    ax = spec.broadcast_axis + offset
    return ad.mul(x, ad.expand_axis(m, ax, spec.input_shape[spec.broadcast_axis]))


@dataclass
class MaskedModel:
    """Figure-one assembly: frozen split base model plus trainable explainer.

    ``mask_point`` is "raw_input" for continuous inputs and "post_embedding"
    for discrete ones, where the mask multiplies the embedded representation
    and the embedding layer (the first feature-extractor layer) is reused.
    """

    split: SplitModel
    explainer: ModelGraph
    broadcast: BroadcastSpec
    mask_point: str = "raw_input"

    def __post_init__(self):
        if self.mask_point not in MASK_POINTS:
            raise ConfigError(f"mask_point must be one of {MASK_POINTS}")
        if self.mask_point == "post_embedding":
            first = self.split.feature_extractor.layers[0]
            if first.kind != "embedding":
                raise ConfigError(
                    "post_embedding masking requires the feature extractor to "
                    "start with an embedding layer"
                )
        from .training import freeze_parameters  # local import to avoid a cycle

        freeze_parameters(self.split.feature_extractor, True)
        freeze_parameters(self.split.classifier, True)

    def base_forward(self, x) -> Tensor:
        """The unmasked base model output in infer mode."""
        feats = self.split.feature_extractor.forward(x, mode="infer")
        return self.split.classifier.forward(feats, mode="infer")


def _features_and_maskable(mm: MaskedModel, x):
    """Features feeding the explainer, plus the maskable representation."""
    f = mm.split.feature_extractor
    if mm.mask_point == "post_embedding":
        emb = f.layers[0].forward(x, mode="infer")
        feats = emb
        for i, layer in enumerate(f.layers[1:], start=1):
            feats = layer.forward(feats, mode="infer")
        return feats, emb
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    return f.forward(xt, mode="infer"), xt


def compute_mask(mm: MaskedModel, x) -> Tensor:
    """m = explainer(features(x)); batched, shape [N, *mask_shape]."""
    feats, _ = _features_and_maskable(mm, x)
    m = mm.explainer.forward(feats)
    want = (feats.shape[0],) + mm.broadcast.mask_shape
    if m.shape != want:
        raise ShapeError(f"explainer produced {m.shape}, expected {want}")
    return m


def masked_forward(mm: MaskedModel, x, mask_override=None):
    """Run the full masked pass; returns (output, mask).

    The mask is computed from the unmasked input's features, multiplied into
    the maskable representation, and the base path reruns on the masked
    version in infer mode. ``mask_override`` is a test hook that substitutes
    an exact constant mask (scalar or array) for the explainer output.
    """
    feats, maskable = _features_and_maskable(mm, x)
    n = maskable.shape[0]
    if mask_override is not None:
        data = np.asarray(mask_override, dtype=float)
        if data.ndim == 0:
            data = np.full((n,) + mm.broadcast.mask_shape, float(data))
        elif data.shape == mm.broadcast.mask_shape:
            data = np.broadcast_to(data, (n,) + mm.broadcast.mask_shape).copy()
        elif data.shape != (n,) + mm.broadcast.mask_shape:
            raise ShapeError(f"mask override shape {data.shape} invalid")
        m = Tensor(data)
    else:
        m = mm.explainer.forward(feats)
        want = (n,) + mm.broadcast.mask_shape
        if m.shape != want:
            raise ShapeError(f"explainer produced {m.shape}, expected {want}")

    masked = apply_mask(maskable, m, mm.broadcast)
    f = mm.split.feature_extractor
    h = masked
    start = 1 if mm.mask_point == "post_embedding" else 0
    for layer in f.layers[start:]:
        h = layer.forward(h, mode="infer")
    out = mm.split.classifier.forward(h, mode="infer")
    return out, m


def build_explainer(variant: str, *, seed=None, **dims) -> ModelGraph:
    """Construct one of the three explanation-network families.

    image: reshape the bottleneck vector to a (C, h, w) map, then tanh
    residual conv blocks with a 2x upsample between them and a 1x1 conv +
    sigmoid head emitting an [H, W] mask.

    sequence: stacked bidirectional GRU, a per-timestep dense relu layer,
    a per-timestep linear head, and (by default) a sigmoid squashing to
    honor the [0, 1] mask contract.

    chars: SELU residual conv1d blocks over the embedded sequence, then a
    length-1 conv1d with batch norm and a softplus head (masks in [0, inf)).
    """
    rng = None if seed is None else np.random.default_rng(seed)
    if variant == "image":
        return _image_explainer(rng, **dims)
    if variant == "sequence":
        return _sequence_explainer(rng, **dims)
    if variant == "chars":
        return _chars_explainer(rng, **dims)
    raise ConfigError(f"unknown explainer variant {variant!r}")


def _image_explainer(
    rng,
    bottleneck_dim: int,
    mask_hw: tuple,
    map_shape: tuple | None = None,
    filters: int = 16,
    layers_per_block: int = 4,
    kernel: int = 3,
):
    mask_h, mask_w = (int(s) for s in mask_hw)
    if map_shape is None:
        side = int(round(np.sqrt(bottleneck_dim)))
        if side * side != bottleneck_dim:
            raise ConfigError(
                f"bottleneck of {bottleneck_dim} values is not square-reshapeable; "
                "pass map_shape=(C, h, w) explicitly"
            )
        map_shape = (1, side, side)
    c, h, w = (int(s) for s in map_shape)
    if c * h * w != bottleneck_dim:
        raise ConfigError(f"map shape {map_shape} does not hold {bottleneck_dim} values")
    if mask_h % h or mask_w % w or (mask_h // h) != (mask_w // w):
        raise ConfigError(f"cannot upsample {h}x{w} map to {mask_h}x{mask_w} by doubling")
    ratio = mask_h // h
    if ratio & (ratio - 1):
        raise ConfigError(f"upsample ratio {ratio} is not a power of two")

    layers = [
        Reshape((c, h, w)),
        ResidualBlock("2d", c, filters, layers_per_block, kernel, "tanh", rng=rng),
    ]
    r = ratio
    while r > 1:
        layers.append(Upsample2x())
        layers.append(
            ResidualBlock("2d", filters, filters, layers_per_block, kernel, "tanh", rng=rng)
        )
        r //= 2
    layers += [
        Conv2d(filters, 1, 1, 1, "same", rng=rng),
        Activation("sigmoid"),
        Reshape((mask_h, mask_w)),
    ]
    return ModelGraph(layers)


def _sequence_explainer(
    rng,
    in_dim: int,
    seq_len: int,
    gru_width: int = 16,
    gru_layers: int = 2,
    dense_width: int = 32,
    head_act: str = "sigmoid",
):
    if head_act not in ("sigmoid", "identity", "softplus"):
        raise ConfigError(f"sequence head activation {head_act!r} not supported")
    layers = [
        BiGRULayer(in_dim, gru_width, gru_layers, rng=rng),
        Dense(2 * gru_width, dense_width, "relu", rng=rng),
        Dense(dense_width, 1, "identity", rng=rng),
        Activation(head_act) if head_act != "identity" else Activation("identity"),
        Reshape((seq_len,)),
    ]
    return ModelGraph(layers)


def _chars_explainer(
    rng,
    in_dim: int,
    seq_len: int,
    filters: int = 16,
    blocks: int = 2,
    layers_per_block: int = 4,
    kernel: int = 3,
):
    layers = []
    ch = in_dim
    for _ in range(max(1, blocks)):
        layers.append(ResidualBlock("1d", ch, filters, layers_per_block, kernel, "selu", rng=rng))
        ch = filters
    layers += [
        Conv1d(filters, 1, 1, "same", rng=rng),
        BatchNorm(1),
        Activation("softplus"),
        Reshape((seq_len,)),
    ]
    return ModelGraph(layers)
