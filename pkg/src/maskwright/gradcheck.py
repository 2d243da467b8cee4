"""Finite-difference verification of every layer and loss in the package.

Each check builds a small random instance, runs central differences at
h=1e-5 against the tape's analytic gradients (inputs and every parameter),
and records the worst relative error. The full suite is the acceptance
gradient oracle and also backs the ``gradcheck`` CLI subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as L
from .architectures import assemble_masked_model, image_base
from .autodiff import Tensor, finite_diff_check
from .masking import masked_forward
from .objectives import (
    RegularizerConfig,
    cross_entropy_loss,
    entropy_penalty,
    l1_penalty,
    l2_penalty,
    mse_loss,
    total_objective,
)

DEFAULT_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_err) and self.max_rel_err < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max_rel_err={self.max_rel_err:.3e} (tol {self.tolerance:g})"


def _loss_of(out: Tensor) -> Tensor:
    return ad.reduce_sum(ad.mul(out, out))


def _layer_instance(name: str, rng):
    if name == "dense":
        return L.Dense(3, 4, "tanh", rng=rng), (3,)
    if name == "conv2d":
        return L.Conv2d(2, 3, 3, 3, "same", rng=rng), (2, 4, 4)
    if name == "conv1d":
        return L.Conv1d(2, 3, 3, "valid", rng=rng), (5, 2)
    if name == "gru":
        return L.GRULayer(2, 3, rng=rng), (4, 2)
    if name == "bigru":
        return L.BiGRULayer(2, 2, 2, rng=rng), (4, 2)
    if name == "batchnorm":
        return L.BatchNorm(3), (3,)
    if name == "upsample2x":
        return L.Upsample2x(), (2, 3, 3)
    if name == "residual_block_2d":
        return L.ResidualBlock("2d", 1, 3, 2, 3, "tanh", rng=rng), (1, 4, 4)
    if name == "residual_block_1d":
        return L.ResidualBlock("1d", 2, 3, 2, 3, "selu", rng=rng), (5, 2)
    if name == "mean_over_time":
        return L.MeanOverTime(), (4, 3)
    if name == "reshape":
        return L.Reshape((6,)), (2, 3)
    if name == "activation":
        return L.Activation("softplus"), (5,)
    if name == "word_dropout":
        return L.WordDropout(0.4), (6, 3)
    raise KeyError(name)


LAYER_CHECKS = (
    "dense",
    "conv2d",
    "conv1d",
    "gru",
    "bigru",
    "embedding",
    "batchnorm",
    "upsample2x",
    "residual_block_2d",
    "residual_block_1d",
    "mean_over_time",
    "reshape",
    "activation",
    "word_dropout",
)

LOSS_CHECKS = (
    "cross_entropy",
    "mse",
    "l1_penalty",
    "l2_penalty",
    "entropy_distribution",
    "entropy_bernoulli",
    "masked_model_objective",
)


def _check_layer(name: str, seed: int, h: float) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    if name == "embedding":
        layer = L.Embedding(6, 3, rng=rng)
        ids = rng.integers(0, 6, size=(3, 4))
        f = lambda _t: _loss_of(layer.forward(ids, mode="train"))
        return finite_diff_check(f, layer.table, h=h)
    layer, in_shape = _layer_instance(name, rng)
    x = Tensor(rng.standard_normal((4,) + in_shape))
    # word dropout draws from its rng; hand it a fresh identical stream per call
    fwd_rng = (lambda: np.random.default_rng(seed + 1)) if name == "word_dropout" else (lambda: None)

    def f(t):
        return _loss_of(layer.forward(t, mode="train", rng=fwd_rng()))

    worst = finite_diff_check(f, Tensor(x.data.copy()), h=h)
    for _pname, p in layer.param_items():
        err = finite_diff_check(lambda _t: f(Tensor(x.data.copy())), p, h=h)
        worst = max(worst, err)
    return worst


def _check_loss(name: str, seed: int, h: float) -> float:
    rng = np.random.default_rng(seed)
    if name == "cross_entropy":
        labels = rng.integers(0, 3, size=6)
        x = Tensor(rng.standard_normal((6, 3)))
        return finite_diff_check(lambda t: cross_entropy_loss(t, labels), x, h=h)
    if name == "mse":
        target = rng.standard_normal(6)
        x = Tensor(rng.standard_normal(6))
        return finite_diff_check(lambda t: mse_loss(t, target), x, h=h)
    if name == "l1_penalty":
        x = Tensor(rng.uniform(0.1, 1.0, size=8))
        return finite_diff_check(lambda t: l1_penalty(t, 1e-3), x, h=h)
    if name == "l2_penalty":
        x = Tensor(rng.uniform(0.1, 1.0, size=8))
        return finite_diff_check(lambda t: l2_penalty(t, 1e-4), x, h=h)
    if name == "entropy_distribution":
        x = Tensor(rng.uniform(0.1, 1.0, size=8))
        return finite_diff_check(lambda t: entropy_penalty(t, 0.1, "distribution"), x, h=h)
    if name == "entropy_bernoulli":
        x = Tensor(rng.uniform(0.1, 0.9, size=8))
        return finite_diff_check(lambda t: entropy_penalty(t, 0.1, "bernoulli"), x, h=h)
    if name == "masked_model_objective":
        wiring = image_base(image_size=8, conv_channels=(2, 2), head_width=4, seed=seed)
        mm = assemble_masked_model(wiring, seed=seed + 1)
        x = rng.random((3, 1, 8, 8))
        labels = rng.integers(0, 2, size=3)
        reg = RegularizerConfig(l1_coeff=1e-3, l2_coeff=1e-4, entropy_coeff=1e-2)

        def f(_t):
            out, mask = masked_forward(mm, x)
            task = cross_entropy_loss(out, labels)
            return total_objective(task, mask, reg, batch_axis=0)

        head = mm.explainer.layers[-3]  # the 1x1 conv head
        return finite_diff_check(f, head.K, h=h)
    raise KeyError(name)


def run_suite(seed: int = 7, instances: int = 20, h: float = 1e-5, tolerance: float = DEFAULT_TOLERANCE):
    """Run every check over ``instances`` seeded instances; returns results."""
    results = []
    for name in LAYER_CHECKS:
        worst = 0.0
        for i in range(instances):
            worst = max(worst, _check_layer(name, seed + 1000 * i, h))
        results.append(CheckResult(f"layer.{name}", worst, tolerance))
    for name in LOSS_CHECKS:
        worst = 0.0
        n = instances if name != "masked_model_objective" else max(1, instances // 4)
        for i in range(n):
            worst = max(worst, _check_loss(name, seed + 1000 * i, h))
        results.append(CheckResult(f"loss.{name}", worst, tolerance))
    return results
