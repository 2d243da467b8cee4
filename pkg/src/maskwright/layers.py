"""Parameterized layers and sequential model graphs.

Batch conventions: every ``ModelGraph`` forward takes a leading batch axis.
Images flow as ``[N, C, H, W]``, sequences as ``[N, T, features]`` (embedding
lookups consume integer id arrays ``[N, T]``), dense layers fold any leading
axes down to ``[rows, features]``. The free functions (``forward_dense``,
``forward_gru``, ...) additionally accept the unbatched shapes they are
documented with.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BatchError, ConfigError, ShapeError, StateError

ACTIVATIONS = ("identity", "tanh", "relu", "selu", "sigmoid", "softplus")

LAYER_KINDS = (
    "dense",
    "conv2d",
    "conv1d",
    "gru",
    "bigru",
    "embedding",
    "batchnorm",
    "upsample2x",
    "residual_block",
    "activation",
    "mean_over_time",
    "reshape",
    "word_dropout",
)


def apply_activation(kind: str, x: Tensor) -> Tensor:
    """Apply one of the supported elementwise nonlinearities."""
    if kind == "identity":
        return x
    if kind == "tanh":
        return ad.tanh(x)
    if kind == "relu":
        return ad.relu(x)
    if kind == "selu":
        return ad.selu(x)
    if kind == "sigmoid":
        return ad.sigmoid(x)
    if kind == "softplus":
        return ad.softplus(x)
    raise ConfigError(f"unknown activation {kind!r}")


def glorot_uniform(rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if rng is None:
        return np.zeros(shape)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Free-function forward rules


def forward_dense(x: Tensor, W: Tensor, b: Tensor, act: str = "identity") -> Tensor:
    """act(x @ W + b); leading axes beyond the first are folded into rows."""
    d_in, d_out = W.shape
    if x.ndim < 2:
        raise ShapeError(f"dense input must have rank >= 2, got {x.shape}")
    if x.shape[-1] != d_in:
        raise ShapeError(f"dense input {x.shape} does not match W {W.shape}")
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else ad.reshape(x, (int(np.prod(lead)), d_in))
    y = ad.add_vec(ad.matmul(flat, W), b, 1)
    y = apply_activation(act, y)
    if x.ndim != 2:
        y = ad.reshape(y, lead + (d_out,))
    return y


@dataclass
class GRUParams:
    """Gate parameters with the (update, reset, candidate) blocks concatenated.

    ``W`` is [d_in, 3h], ``U`` is [h, 3h], ``b`` is [3h].
    """

    W: Tensor
    U: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.U.shape[0]


def init_gru_params(rng, d_in: int, hidden: int) -> GRUParams:
    return GRUParams(
        W=Tensor(glorot_uniform(rng, (d_in, 3 * hidden), d_in, hidden), requires_grad=True),
        U=Tensor(glorot_uniform(rng, (hidden, 3 * hidden), hidden, hidden), requires_grad=True),
        b=Tensor(np.zeros(3 * hidden), requires_grad=True),
    )


def forward_gru(x: Tensor, h0, params: GRUParams) -> Tensor:
    """Standard gated recurrence, returning the hidden state at every step.

    z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
    r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
    c_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t

    ``x`` is [T, d] or batched [N, T, d]. ``h0`` is an optional constant
    initial state of shape [h]; gradients do not flow into it.
    """
    single = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ShapeError(f"gru input must be rank 2 or 3, got {x.shape}")
    xb = ad.reshape(x, (1,) + x.shape) if single else x
    n, t_len, d = xb.shape
    h_dim = params.hidden
    if params.W.shape != (d, 3 * h_dim):
        raise ShapeError(f"gru W {params.W.shape} does not match input dim {d}")
    if h0 is None:
        h = Tensor(np.zeros((n, h_dim)))
    else:
        h0d = h0.data if isinstance(h0, Tensor) else np.asarray(h0, dtype=np.float64)
        if h0d.shape != (h_dim,):
            raise ShapeError(f"h0 must have shape ({h_dim},), got {h0d.shape}")
        h = Tensor(np.tile(h0d, (n, 1)))

    xp = ad.reshape(
        ad.add_vec(ad.matmul(ad.reshape(xb, (n * t_len, d)), params.W), params.b, 1),
        (n, t_len, 3 * h_dim),
    )
    u_zr = ad.slice_axis(params.U, 1, 0, 2 * h_dim)
    u_h = ad.slice_axis(params.U, 1, 2 * h_dim, 3 * h_dim)
    states = []
    for t in range(t_len):
        xt = ad.reshape(ad.slice_axis(xp, 1, t, t + 1), (n, 3 * h_dim))
        rec = ad.matmul(h, u_zr)
        z = ad.sigmoid(ad.add(ad.slice_axis(xt, 1, 0, h_dim), ad.slice_axis(rec, 1, 0, h_dim)))
        r = ad.sigmoid(
            ad.add(ad.slice_axis(xt, 1, h_dim, 2 * h_dim), ad.slice_axis(rec, 1, h_dim, 2 * h_dim))
        )
        cand = ad.tanh(
            ad.add(ad.slice_axis(xt, 1, 2 * h_dim, 3 * h_dim), ad.matmul(ad.mul(r, h), u_h))
        )
        h = ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, cand))
        states.append(h)
    out = ad.stack(states, 1)
    return ad.reshape(out, (t_len, h_dim)) if single else out


def forward_bigru(x: Tensor, fwd: GRUParams, bwd: GRUParams) -> Tensor:
    """Concatenate a forward pass and a time-reversed backward pass."""
    single = x.ndim == 2
    time_axis = 0 if single else 1
    feat_axis = 1 if single else 2
    hf = forward_gru(x, None, fwd)
    hb = ad.flip_axis(forward_gru(ad.flip_axis(x, time_axis), None, bwd), time_axis)
    return ad.concat([hf, hb], feat_axis)


def forward_embedding(ids, table: Tensor) -> Tensor:
    """Look up rows of ``table`` for integer ``ids`` ([T] or [N, T])."""
    return ad.embedding_lookup(table, np.asarray(ids))


def forward_batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Batch normalization over axis 0 of a [n, d] tensor.

    Train mode normalizes by the biased batch statistics and, when running
    buffers are supplied, folds them in as
    ``running = momentum * running + (1 - momentum) * batch``. Infer mode
    normalizes by the running statistics.
    """
    if x.ndim != 2:
        raise ShapeError(f"batchnorm expects [n, d] input, got {x.shape}")
    n, d = x.shape
    if mode == "train":
        if n < 2:
            raise BatchError(f"batchnorm needs n >= 2 in train mode, got n={n}")
        mu = ad.reduce_mean(x, [0])
        xc = ad.add_vec(x, ad.neg(mu), 1)
        var = ad.reduce_mean(ad.mul(xc, xc), [0])
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu.data
        if running_var is not None:
            running_var *= momentum
            running_var += (1.0 - momentum) * var.data
        inv = ad.div(1.0, ad.sqrt(ad.add(var, eps)))
        xn = ad.mul_vec(xc, inv, 1)
    elif mode == "infer":
        if running_mean is None or running_var is None:
            raise StateError("batchnorm infer mode requires running statistics")
        xc = ad.add_vec(x, Tensor(-running_mean), 1)
        xn = ad.mul_vec(xc, Tensor(1.0 / np.sqrt(running_var + eps)), 1)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return ad.add_vec(ad.mul_vec(xn, gamma, 1), beta, 1)


def forward_upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor doubling of the two spatial axes."""
    return ad.upsample2x(x)


def forward_residual_block(x: Tensor, convs, act: str) -> Tensor:
    """Run a stack of same-shape conv layers; output act(first + last).

    Each inner layer applies its convolution followed by ``act``; the block
    output sums the first and the final layer outputs and applies ``act``
    once more.
    """
    outs = []
    h = x
    for layer in convs:
        h = apply_activation(act, layer.forward(h))
        outs.append(h)
    if len(outs) == 1:
        return apply_activation(act, ad.add(outs[0], outs[0]))
    first, last = outs[0], outs[-1]
    if first.shape != last.shape:
        raise ShapeError(
            f"residual block shape drift: first {first.shape} vs last {last.shape}"
        )
    return apply_activation(act, ad.add(first, last))


# ---------------------------------------------------------------------------
# Layer specs


@dataclass
class LayerSpec:
    kind: str
    hyperparams: dict = field(default_factory=dict)


_REQUIRED_HYPERPARAMS = {
    "dense": ("in", "out", "act"),
    "conv2d": ("in_ch", "out_ch", "kh", "kw", "padding"),
    "conv1d": ("in_ch", "out_ch", "k", "padding"),
    "gru": ("in", "hidden"),
    "bigru": ("in", "hidden", "layers"),
    "embedding": ("vocab", "dim"),
    "batchnorm": ("features", "eps", "momentum"),
    "upsample2x": (),
    "residual_block": ("conv", "in_ch", "ch", "n_layers", "k", "act"),
    "activation": ("act",),
    "mean_over_time": (),
    "reshape": ("shape",),
    "word_dropout": ("rate",),
}

_POSITIVE_INT_KEYS = {
    "in",
    "out",
    "in_ch",
    "out_ch",
    "kh",
    "kw",
    "k",
    "hidden",
    "layers",
    "vocab",
    "dim",
    "features",
    "ch",
    "n_layers",
}


def validate_layer_spec(spec: LayerSpec):
    if spec.kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {spec.kind!r}")
    required = _REQUIRED_HYPERPARAMS[spec.kind]
    missing = [k for k in required if k not in spec.hyperparams]
    if missing:
        raise ConfigError(f"layer {spec.kind!r} missing hyperparams {missing}")
    for key in required:
        v = spec.hyperparams[key]
        if key in _POSITIVE_INT_KEYS and (not isinstance(v, int) or v < 1):
            raise ConfigError(f"layer {spec.kind!r} hyperparam {key}={v!r} must be a positive int")
    if "act" in spec.hyperparams and spec.hyperparams["act"] not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {spec.hyperparams['act']!r}")
    if "padding" in spec.hyperparams and spec.hyperparams["padding"] not in ("same", "valid"):
        raise ConfigError(f"unknown padding {spec.hyperparams['padding']!r}")
    if spec.kind == "reshape":
        shape = spec.hyperparams["shape"]
        if not shape or any(not isinstance(s, int) or s < 1 for s in shape):
            raise ConfigError(f"reshape target {shape!r} must be positive ints")
    if spec.kind == "word_dropout":
        rate = spec.hyperparams["rate"]
        if not 0.0 <= float(rate) < 1.0:
            raise ConfigError(f"word_dropout rate {rate!r} must be in [0, 1)")


# ---------------------------------------------------------------------------
# Layer classes


class Layer:
    kind = "base"

    def spec(self) -> LayerSpec:
        raise NotImplementedError

    def forward(self, x, mode: str = "infer", rng=None):
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        """Pure per-example shape function; raises on contract violations."""
        raise NotImplementedError

    def param_items(self):
        return []

    def buffer_items(self):
        return []


class Dense(Layer):
    kind = "dense"

    def __init__(self, d_in: int, d_out: int, act: str = "identity", rng=None):
        self.d_in, self.d_out, self.act = d_in, d_out, act
        self.W = Tensor(glorot_uniform(rng, (d_in, d_out), d_in, d_out), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def spec(self):
        return LayerSpec("dense", {"in": self.d_in, "out": self.d_out, "act": self.act})

    def forward(self, x, mode="infer", rng=None):
        return forward_dense(x, self.W, self.b, self.act)

    def out_shape(self, in_shape):
        if not in_shape or in_shape[-1] != self.d_in:
            raise ShapeError(f"dense expects (..., {self.d_in}), got {in_shape}")
        return in_shape[:-1] + (self.d_out,)

    def param_items(self):
        return [("W", self.W), ("b", self.b)]


class Activation(Layer):
    kind = "activation"

    def __init__(self, act: str):
        if act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
        self.act = act

    def spec(self):
        return LayerSpec("activation", {"act": self.act})

    def forward(self, x, mode="infer", rng=None):
        return apply_activation(self.act, x)

    def out_shape(self, in_shape):
        return in_shape


class Conv2d(Layer):
    """Linear 2D convolution (no activation); flows [N, C, H, W]."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kh=3, kw=3, padding="same", rng=None):
        self.in_ch, self.out_ch, self.kh, self.kw, self.padding = in_ch, out_ch, kh, kw, padding
        fan_in, fan_out = in_ch * kh * kw, out_ch * kh * kw
        self.K = Tensor(
            glorot_uniform(rng, (out_ch, in_ch, kh, kw), fan_in, fan_out), requires_grad=True
        )
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)

    def spec(self):
        return LayerSpec(
            "conv2d",
            {
                "in_ch": self.in_ch,
                "out_ch": self.out_ch,
                "kh": self.kh,
                "kw": self.kw,
                "padding": self.padding,
            },
        )

    def forward(self, x, mode="infer", rng=None):
        y = ad.conv2d(x, self.K, self.padding)
        return ad.add_vec(y, self.b, 1 if y.ndim == 4 else 0)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"conv2d expects ({self.in_ch}, H, W), got {in_shape}")
        c, h, w = in_shape
        if self.padding == "same":
            return (self.out_ch, h, w)
        ho, wo = h - self.kh + 1, w - self.kw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {self.kh}x{self.kw} larger than input {h}x{w}")
        return (self.out_ch, ho, wo)

    def param_items(self):
        return [("K", self.K), ("b", self.b)]


class Conv1d(Layer):
    """Linear 1D convolution over time; flows [N, T, C] (channels last)."""

    kind = "conv1d"

    def __init__(self, in_ch, out_ch, k=3, padding="same", rng=None):
        self.in_ch, self.out_ch, self.k, self.padding = in_ch, out_ch, k, padding
        self.K = Tensor(
            glorot_uniform(rng, (out_ch, in_ch, k), in_ch * k, out_ch * k), requires_grad=True
        )
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)

    def spec(self):
        return LayerSpec(
            "conv1d",
            {"in_ch": self.in_ch, "out_ch": self.out_ch, "k": self.k, "padding": self.padding},
        )

    def forward(self, x, mode="infer", rng=None):
        if x.ndim == 3:
            y = ad.conv1d(ad.transpose(x, (0, 2, 1)), self.K, self.padding)
            y = ad.add_vec(y, self.b, 1)
            return ad.transpose(y, (0, 2, 1))
        y = ad.conv1d(ad.transpose(x, (1, 0)), self.K, self.padding)
        y = ad.add_vec(y, self.b, 0)
        return ad.transpose(y, (1, 0))

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.in_ch:
            raise ShapeError(f"conv1d expects (T, {self.in_ch}), got {in_shape}")
        t = in_shape[0] if self.padding == "same" else in_shape[0] - self.k + 1
        if t < 1:
            raise ShapeError(f"conv1d kernel {self.k} larger than input length {in_shape[0]}")
        return (t, self.out_ch)

    def param_items(self):
        return [("K", self.K), ("b", self.b)]


class GRULayer(Layer):
    kind = "gru"

    def __init__(self, d_in, hidden, rng=None):
        self.d_in, self.hidden = d_in, hidden
        self.p = init_gru_params(rng, d_in, hidden)

    def spec(self):
        return LayerSpec("gru", {"in": self.d_in, "hidden": self.hidden})

    def forward(self, x, mode="infer", rng=None):
        return forward_gru(x, None, self.p)

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.d_in:
            raise ShapeError(f"gru expects (T, {self.d_in}), got {in_shape}")
        return (in_shape[0], self.hidden)

    def param_items(self):
        return [("W", self.p.W), ("U", self.p.U), ("b", self.p.b)]


class BiGRULayer(Layer):
    """Stack of bidirectional recurrences; layer j consumes [T, 2h] of j-1."""

    kind = "bigru"

    def __init__(self, d_in, hidden, layers=1, rng=None):
        self.d_in, self.hidden, self.layers = d_in, hidden, layers
        self.stack = []
        d = d_in
        for _ in range(layers):
            self.stack.append((init_gru_params(rng, d, hidden), init_gru_params(rng, d, hidden)))
            d = 2 * hidden

    def spec(self):
        return LayerSpec("bigru", {"in": self.d_in, "hidden": self.hidden, "layers": self.layers})

    def forward(self, x, mode="infer", rng=None):
        h = x
        for fwd, bwd in self.stack:
            h = forward_bigru(h, fwd, bwd)
        return h

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.d_in:
            raise ShapeError(f"bigru expects (T, {self.d_in}), got {in_shape}")
        return (in_shape[0], 2 * self.hidden)

    def param_items(self):
        items = []
        for j, (fwd, bwd) in enumerate(self.stack):
            for tag, p in (("fwd", fwd), ("bwd", bwd)):
                items += [
                    (f"l{j}.{tag}.W", p.W),
                    (f"l{j}.{tag}.U", p.U),
                    (f"l{j}.{tag}.b", p.b),
                ]
        return items


class Embedding(Layer):
    kind = "embedding"

    def __init__(self, vocab, dim, rng=None):
        self.vocab, self.dim = vocab, dim
        self.table = Tensor(glorot_uniform(rng, (vocab, dim), vocab, dim), requires_grad=True)

    def spec(self):
        return LayerSpec("embedding", {"vocab": self.vocab, "dim": self.dim})

    def forward(self, x, mode="infer", rng=None):
        ids = x.data.astype(np.int64) if isinstance(x, Tensor) else np.asarray(x)
        return forward_embedding(ids, self.table)

    def out_shape(self, in_shape):
        return in_shape + (self.dim,)

    def param_items(self):
        return [("table", self.table)]


class BatchNorm(Layer):
    """Per-feature normalization.

    Features live on the last axis, except for rank-4 conv maps
    [N, C, H, W], where the channel axis is normalized over batch and
    space. All other leading axes fold into the batch.
    """

    kind = "batchnorm"

    def __init__(self, features, eps=1e-5, momentum=0.9, rng=None):
        self.features, self.eps, self.momentum = features, eps, momentum
        self.gamma = Tensor(np.ones(features), requires_grad=True)
        self.beta = Tensor(np.zeros(features), requires_grad=True)
        self.running_mean = Tensor(np.zeros(features))
        self.running_var = Tensor(np.ones(features))

    def spec(self):
        return LayerSpec(
            "batchnorm",
            {"features": self.features, "eps": self.eps, "momentum": self.momentum},
        )

    def forward(self, x, mode="infer", rng=None):
        conv_map = x.ndim == 4
        if conv_map:
            if x.shape[1] != self.features:
                raise ShapeError(f"batchnorm expects {self.features} channels, got {x.shape}")
            x = ad.transpose(x, (0, 2, 3, 1))
        elif x.shape[-1] != self.features:
            raise ShapeError(f"batchnorm expects (..., {self.features}), got {x.shape}")
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else ad.reshape(x, (int(np.prod(lead)), self.features))
        y = forward_batchnorm(
            flat,
            self.gamma,
            self.beta,
            mode,
            running_mean=self.running_mean.data,
            running_var=self.running_var.data,
            eps=self.eps,
            momentum=self.momentum,
        )
        if x.ndim != 2:
            y = ad.reshape(y, lead + (self.features,))
        return ad.transpose(y, (0, 3, 1, 2)) if conv_map else y

    def out_shape(self, in_shape):
        if len(in_shape) == 3:
            if in_shape[0] != self.features:
                raise ShapeError(f"batchnorm expects {self.features} channels, got {in_shape}")
            return in_shape
        if not in_shape or in_shape[-1] != self.features:
            raise ShapeError(f"batchnorm expects (..., {self.features}), got {in_shape}")
        return in_shape

    def param_items(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffer_items(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Upsample2x(Layer):
    kind = "upsample2x"

    def spec(self):
        return LayerSpec("upsample2x", {})

    def forward(self, x, mode="infer", rng=None):
        return forward_upsample2x(x)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"upsample2x expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        return (c, 2 * h, 2 * w)


class ResidualBlock(Layer):
    """Conv stack whose first and final layer outputs are summed.

    ``conv`` selects 2d (image maps) or 1d (sequences); inner convolutions
    use same padding so shapes are preserved.
    """

    kind = "residual_block"

    def __init__(self, conv, in_ch, ch, n_layers=4, k=3, act="tanh", rng=None):
        if conv not in ("2d", "1d"):
            raise ConfigError(f"residual_block conv must be '2d' or '1d', got {conv!r}")
        self.conv, self.in_ch, self.ch = conv, in_ch, ch
        self.n_layers, self.k, self.act = n_layers, k, act
        mk = (
            (lambda ci: Conv2d(ci, ch, k, k, "same", rng=rng))
            if conv == "2d"
            else (lambda ci: Conv1d(ci, ch, k, "same", rng=rng))
        )
        self.convs = [mk(in_ch if j == 0 else ch) for j in range(n_layers)]

    def spec(self):
        return LayerSpec(
            "residual_block",
            {
                "conv": self.conv,
                "in_ch": self.in_ch,
                "ch": self.ch,
                "n_layers": self.n_layers,
                "k": self.k,
                "act": self.act,
            },
        )

    def forward(self, x, mode="infer", rng=None):
        return forward_residual_block(x, self.convs, self.act)

    def out_shape(self, in_shape):
        shape = in_shape
        for c in self.convs:
            shape = c.out_shape(shape)
        return shape

    def param_items(self):
        items = []
        for j, c in enumerate(self.convs):
            items += [(f"conv{j}.K", c.K), (f"conv{j}.b", c.b)]
        return items


class MeanOverTime(Layer):
    kind = "mean_over_time"

    def spec(self):
        return LayerSpec("mean_over_time", {})

    def forward(self, x, mode="infer", rng=None):
        if x.ndim == 3:
            return ad.reduce_mean(x, [1])
        if x.ndim == 2:
            return ad.reduce_mean(x, [0])
        raise ShapeError(f"mean_over_time expects (T, d) or (N, T, d), got {x.shape}")

    def out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"mean_over_time expects (T, d), got {in_shape}")
        return (in_shape[1],)


class Reshape(Layer):
    """Reshape each example to a fixed target shape (batch axis untouched)."""

    kind = "reshape"

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)

    def spec(self):
        return LayerSpec("reshape", {"shape": self.shape})

    def forward(self, x, mode="infer", rng=None):
        return ad.reshape(x, (x.shape[0],) + self.shape)

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape


class WordDropout(Layer):
    """Zeroes whole timesteps of [N, T, d] in train mode (inverted scaling)."""

    kind = "word_dropout"

    def __init__(self, rate):
        self.rate = float(rate)
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"word_dropout rate {rate!r} must be in [0, 1)")

    def spec(self):
        return LayerSpec("word_dropout", {"rate": self.rate})

    def forward(self, x, mode="infer", rng=None):
        if mode != "train" or self.rate == 0.0:
            return x
        if rng is None:
            raise StateError("word_dropout in train mode needs an rng")
        n, t, d = x.shape
        keep = (rng.random((n, t, 1)) >= self.rate).astype(np.float64) / (1.0 - self.rate)
        return ad.mul(x, Tensor(np.broadcast_to(keep, (n, t, d)).copy()))

    def out_shape(self, in_shape):
        return in_shape


_LAYER_BUILDERS = {
    "dense": lambda h, rng: Dense(h["in"], h["out"], h["act"], rng=rng),
    "conv2d": lambda h, rng: Conv2d(h["in_ch"], h["out_ch"], h["kh"], h["kw"], h["padding"], rng=rng),
    "conv1d": lambda h, rng: Conv1d(h["in_ch"], h["out_ch"], h["k"], h["padding"], rng=rng),
    "gru": lambda h, rng: GRULayer(h["in"], h["hidden"], rng=rng),
    "bigru": lambda h, rng: BiGRULayer(h["in"], h["hidden"], h["layers"], rng=rng),
    "embedding": lambda h, rng: Embedding(h["vocab"], h["dim"], rng=rng),
    "batchnorm": lambda h, rng: BatchNorm(h["features"], h["eps"], h["momentum"], rng=rng),
    "upsample2x": lambda h, rng: Upsample2x(),
    "residual_block": lambda h, rng: ResidualBlock(
        h["conv"], h["in_ch"], h["ch"], h["n_layers"], h["k"], h["act"], rng=rng
    ),
    "activation": lambda h, rng: Activation(h["act"]),
    "mean_over_time": lambda h, rng: MeanOverTime(),
    "reshape": lambda h, rng: Reshape(h["shape"]),
    "word_dropout": lambda h, rng: WordDropout(h["rate"]),
}


def layer_from_spec(spec: LayerSpec, rng=None) -> Layer:
    """Build a layer from its spec; zero-initialized when ``rng`` is None."""
    validate_layer_spec(spec)
    return _LAYER_BUILDERS[spec.kind](spec.hyperparams, rng)


# ---------------------------------------------------------------------------
# Model graphs


class ModelGraph:
    """An ordered stack of layers with named parameters and a train/infer mode."""

    def __init__(self, layers, mode: str = "train"):
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown mode {mode!r}")
        self.layers = list(layers)
        self.mode = mode
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        self.trainable: dict[str, bool] = {}
        for i, layer in enumerate(self.layers):
            prefix = f"L{i}.{layer.kind}"
            for local, t in layer.param_items():
                name = f"{prefix}.{local}"
                self.params[name] = t
                self.trainable[name] = t.requires_grad
            for local, t in layer.buffer_items():
                self.buffers[f"{prefix}.{local}"] = t

    def set_mode(self, mode: str):
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown mode {mode!r}")
        self.mode = mode

    def specs(self) -> list[LayerSpec]:
        return [layer.spec() for layer in self.layers]

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if self.trainable[n]}

    def forward(self, x, rng=None, mode: str | None = None):
        m = self.mode if mode is None else mode
        out = x
        if isinstance(out, np.ndarray) and np.issubdtype(out.dtype, np.floating):
            out = Tensor(out)
        for i, layer in enumerate(self.layers):
            try:
                out = layer.forward(out, mode=m, rng=rng)
            except (ShapeError, ConfigError, BatchError, StateError, IndexError) as e:
                raise type(e)(f"layer {i} ({layer.kind}): {e}") from e
        return out

    def output_shape(self, in_shape: tuple) -> tuple:
        """Compose the per-example shape functions of all layers."""
        shape = tuple(in_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def param_bytes(self) -> bytes:
        """Concatenated parameter payloads in name order (checksum helper)."""
        return b"".join(self.params[n].data.tobytes() for n in sorted(self.params))


def graph_forward(model: ModelGraph, x, rng=None, mode=None):
    """Sequential application of the graph's layers to a batched input."""
    return model.forward(x, rng=rng, mode=mode)


def graph_from_specs(specs, seed=None, mode: str = "train") -> ModelGraph:
    rng = None if seed is None else np.random.default_rng(seed)
    return ModelGraph([layer_from_spec(s, rng=rng) for s in specs], mode=mode)
