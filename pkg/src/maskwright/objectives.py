"""Task losses, mask regularizers, and their composition into one objective.

Penalties follow the batch-mean convention: when a mask carries a leading
batch axis (``batch_axis=0``), each regularizer is computed per example and
averaged, so coefficients do not depend on batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegenerateMaskError, DomainError, ShapeError

ENTROPY_KINDS = ("distribution", "bernoulli")


@dataclass
class RegularizerConfig:
    """Coefficients for the mask penalties; all must be finite and >= 0."""

    l1_coeff: float = 0.0
    l2_coeff: float = 0.0
    entropy_coeff: float = 0.0
    entropy_kind: str = "distribution"

    def __post_init__(self):
        for name in ("l1_coeff", "l2_coeff", "entropy_coeff"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0.0:
                raise ConfigError(f"{name} must be finite and nonnegative, got {v}")
            setattr(self, name, v)
        if self.entropy_kind not in ENTROPY_KINDS:
            raise ConfigError(f"entropy_kind must be one of {ENTROPY_KINDS}")


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Computed through a max-shifted log-sum-exp so large logits stay finite.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [n, K], got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    # The shift is treated as a constant; its gradient contribution cancels.
    shift = ad.add_vec(logits, Tensor(-logits.data.max(axis=1)), 0)
    lse = ad.log(ad.reduce_sum(ad.exp(shift), [1]))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    true_logit = ad.reduce_sum(ad.mul(shift, Tensor(onehot)), [1])
    return ad.reduce_mean(ad.sub(lse, true_logit))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error between two equal-length vectors."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=float))
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = ad.sub(pred, target)
    return ad.reduce_mean(ad.mul(diff, diff))


def l1_penalty(m: Tensor, coeff: float) -> Tensor:
    """coeff * sum(abs(m))."""
    _check_coeff(coeff)
    return ad.scalar_mul(ad.reduce_sum(ad.absolute(m)), coeff)


def l2_penalty(m: Tensor, coeff: float) -> Tensor:
    """coeff * sum(m**2)."""
    _check_coeff(coeff)
    return ad.scalar_mul(ad.reduce_sum(ad.mul(m, m)), coeff)


def entropy_penalty(m: Tensor, coeff: float, kind: str = "distribution") -> Tensor:
    """Penalize diffuse masks.

    distribution: normalize the mask to a probability vector p and charge its
    Shannon entropy, which is minimal for concentrated masks.
    bernoulli: charge the elementwise binary entropy, minimal for 0/1 masks.
    """
    _check_coeff(coeff)
    if kind not in ENTROPY_KINDS:
        raise ConfigError(f"entropy kind must be one of {ENTROPY_KINDS}")
    if np.any(m.data < 0.0):
        raise DomainError("entropy_penalty requires a nonnegative mask")
    if kind == "distribution":
        if not np.all(m.data.sum() > 0.0):
            raise DegenerateMaskError("mask sums to zero; entropy distribution undefined")
        total = ad.reduce_sum(m)
        # -sum(p log p) = log(S) - sum(m log m) / S  with p = m / S
        ent = ad.sub(ad.log(total), ad.div(ad.reduce_sum(ad.xlogx(m)), total))
        return ad.scalar_mul(ent, coeff)
    if np.any(m.data > 1.0):
        raise DomainError("bernoulli entropy requires mask values in [0, 1]")
    h = ad.neg(ad.add(ad.reduce_sum(ad.xlogx(m)), ad.reduce_sum(ad.xlogx(ad.sub(1.0, m)))))
    return ad.scalar_mul(h, coeff)


def _check_coeff(coeff):
    if not math.isfinite(float(coeff)) or float(coeff) < 0.0:
        raise ConfigError(f"coefficient must be finite and nonnegative, got {coeff}")


def regularizer_terms(mask: Tensor, reg: RegularizerConfig, batch_axis: int | None = None):
    """The three penalty terms for a mask, as scalar tensors.

    With ``batch_axis=0`` the mask is a batch [N, ...]; each penalty is the
    mean of the per-example penalties.
    """
    if batch_axis is None:
        flat = ad.reshape(mask, (1, mask.size))
        n = 1
    elif batch_axis == 0:
        n = mask.shape[0]
        flat = ad.reshape(mask, (n, mask.size // n))
    else:
        raise ConfigError("batch_axis must be None or 0")

    zero = Tensor(np.zeros(()))
    l1 = l2 = ent = zero
    if reg.l1_coeff > 0.0:
        l1 = ad.scalar_mul(ad.reduce_mean(ad.reduce_sum(ad.absolute(flat), [1])), reg.l1_coeff)
    if reg.l2_coeff > 0.0:
        l2 = ad.scalar_mul(ad.reduce_mean(ad.reduce_sum(ad.mul(flat, flat), [1])), reg.l2_coeff)
    if reg.entropy_coeff > 0.0:
        if np.any(flat.data < 0.0):
            raise DomainError("entropy penalty requires a nonnegative mask")
        if reg.entropy_kind == "distribution":
            sums = flat.data.sum(axis=1)
            if np.any(sums <= 0.0):
                raise DegenerateMaskError(
                    "a mask in the batch sums to zero; entropy distribution undefined"
                )
            total = ad.reduce_sum(flat, [1])
            per = ad.sub(ad.log(total), ad.div(ad.reduce_sum(ad.xlogx(flat), [1]), total))
        else:
            if np.any(flat.data > 1.0):
                raise DomainError("bernoulli entropy requires mask values in [0, 1]")
            per = ad.neg(
                ad.add(
                    ad.reduce_sum(ad.xlogx(flat), [1]),
                    ad.reduce_sum(ad.xlogx(ad.sub(1.0, flat)), [1]),
                )
            )
        ent = ad.scalar_mul(ad.reduce_mean(per), reg.entropy_coeff)
    return l1, l2, ent


def total_objective(
    task_loss: Tensor, mask: Tensor, reg: RegularizerConfig, batch_axis: int | None = None
) -> Tensor:
    """task_loss plus every configured penalty on the mask."""
    l1, l2, ent = regularizer_terms(mask, reg, batch_axis=batch_axis)
    return ad.add(ad.add(ad.add(task_loss, l1), l2), ent)
