"""Default base networks and explainer wiring for the three task families.

Sizes are desk-scale (8x8 bottleneck maps, 16 conv filters, GRU width 32);
the production-scale counterparts are reachable by passing larger numbers,
the wiring is identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .layers import (
    Activation,
    BatchNorm,
    BiGRULayer,
    Conv1d,
    Conv2d,
    Dense,
    Embedding,
    GRULayer,
    MeanOverTime,
    ModelGraph,
    Reshape,
    WordDropout,
)
from .masking import BroadcastSpec, MaskedModel, build_explainer, split_model


@dataclass
class TaskWiring:
    """Everything needed to assemble a MaskedModel around a base network."""

    base: ModelGraph
    split_index: int
    variant: str
    mask_point: str
    broadcast: BroadcastSpec
    explainer_dims: dict


def image_base(
    image_size: int = 16,
    channels: int = 1,
    classes: int = 2,
    conv_channels: tuple = (8, 16, 16, 4),
    head_width: int = 32,
    batchnorm: bool = True,
    seed: int = 0,
) -> TaskWiring:
    """Valid-padding conv stack ending in a spatial bottleneck map.

    Each 3x3 valid conv shrinks the map by 2, so the bottleneck stays
    aligned with image coordinates; the explainer upsamples it back.
    Batch norm after each conv makes the frozen net sensitive to input
    damping, which anchors informative pixels during explainer training.
    """
    rng = np.random.default_rng(seed)
    size = image_size - 2 * len(conv_channels)
    if size < 1:
        raise ConfigError("too many conv layers for this image size")
    ratio = image_size // size
    if size * ratio != image_size or ratio & (ratio - 1):
        raise ConfigError(
            f"bottleneck map {size}x{size} cannot be doubled back to {image_size}"
        )
    layers = []
    c_in = channels
    for c_out in conv_channels:
        layers.append(Conv2d(c_in, c_out, 3, 3, "valid", rng=rng))
        if batchnorm:
            layers.append(BatchNorm(c_out))
        layers.append(Activation("relu"))
        c_in = c_out
    bottleneck = c_in * size * size
    layers.append(Reshape((bottleneck,)))
    split_index = len(layers)
    layers += [Dense(bottleneck, head_width, "relu", rng=rng), Dense(head_width, classes, rng=rng)]
    base = ModelGraph(layers)
    return TaskWiring(
        base=base,
        split_index=split_index,
        variant="image",
        mask_point="raw_input",
        broadcast=BroadcastSpec(
            mask_shape=(image_size, image_size),
            input_shape=(channels, image_size, image_size),
            broadcast_axis=0,
        ),
        explainer_dims={
            "bottleneck_dim": bottleneck,
            "mask_hw": (image_size, image_size),
            "map_shape": (c_in, size, size),
        },
    )


def sequence_base(
    vocab: int = 50,
    seq_len: int = 30,
    classes: int = 2,
    embed_dim: int = 16,
    gru_width: int = 32,
    head_width: int = 32,
    word_dropout: float = 0.0,
    seed: int = 0,
) -> TaskWiring:
    """Embedding, bidirectional GRU, time average, dense softmax head.

    The split sits right after the GRU so the explainer sees the full
    per-timestep recurrent features.
    """
    rng = np.random.default_rng(seed)
    layers = [Embedding(vocab, embed_dim, rng=rng)]
    if word_dropout > 0.0:
        layers.append(WordDropout(word_dropout))
    layers.append(BiGRULayer(embed_dim, gru_width, 1, rng=rng))
    split_index = len(layers)
    layers += [
        MeanOverTime(),
        Dense(2 * gru_width, head_width, "relu", rng=rng),
        Dense(head_width, classes, rng=rng),
    ]
    base = ModelGraph(layers)
    return TaskWiring(
        base=base,
        split_index=split_index,
        variant="sequence",
        mask_point="post_embedding",
        broadcast=BroadcastSpec(
            mask_shape=(seq_len,), input_shape=(seq_len, embed_dim), broadcast_axis=1
        ),
        explainer_dims={"in_dim": 2 * gru_width, "seq_len": seq_len},
    )


def chars_base(
    alphabet: int = 12,
    seq_len: int = 20,
    embed_dim: int = 8,
    conv_filters: int = 16,
    gru_width: int = 16,
    seed: int = 0,
) -> TaskWiring:
    """Mixed conv/recurrent regressor over embedded characters.

    The split sits right after the embedding: the explainer consumes the
    embedded representation itself, and the mask multiplies it.
    """
    rng = np.random.default_rng(seed)
    layers = [Embedding(alphabet, embed_dim, rng=rng)]
    split_index = 1
    layers += [
        Conv1d(embed_dim, conv_filters, 3, "same", rng=rng),
        Activation("relu"),
        GRULayer(conv_filters, gru_width, rng=rng),
        MeanOverTime(),
        Dense(gru_width, 1, rng=rng),
    ]
    base = ModelGraph(layers)
    return TaskWiring(
        base=base,
        split_index=split_index,
        variant="chars",
        mask_point="post_embedding",
        broadcast=BroadcastSpec(
            mask_shape=(seq_len,), input_shape=(seq_len, embed_dim), broadcast_axis=1
        ),
        explainer_dims={"in_dim": embed_dim, "seq_len": seq_len},
    )


def wiring_for_task(task: str, params: dict, seed: int = 0, **overrides) -> TaskWiring:
    """Build the default wiring for a dataset's task kind and dimensions."""
    if task == "planted_patch":
        return image_base(
            image_size=int(params.get("image_size", 16)),
            channels=int(params.get("channels", 1)),
            classes=int(params.get("classes", 2)),
            seed=seed,
            **overrides,
        )
    if task == "keyword_seq":
        return sequence_base(
            vocab=int(params.get("vocab", 50)),
            seq_len=int(params.get("seq_len", 30)),
            seed=seed,
            **overrides,
        )
    if task == "char_count":
        return chars_base(
            alphabet=int(params.get("alphabet", 12)),
            seq_len=int(params.get("seq_len", 20)),
            seed=seed,
            **overrides,
        )
    raise ConfigError(f"unknown task {task!r}")


def assemble_masked_model(wiring: TaskWiring, explainer: ModelGraph | None = None, seed: int = 0) -> MaskedModel:
    """Split the base, build (or accept) an explainer, and freeze the base."""
    split = split_model(wiring.base, wiring.split_index)
    if explainer is None:
        explainer = build_explainer(wiring.variant, seed=seed, **wiring.explainer_dims)
    return MaskedModel(
        split=split,
        explainer=explainer,
        broadcast=wiring.broadcast,
        mask_point=wiring.mask_point,
    )
