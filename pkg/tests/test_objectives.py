import numpy as np
import pytest

import maskwright.autodiff as ad
import maskwright.objectives as obj
from maskwright.autodiff import Tensor, backward, finite_diff_check, tape
from maskwright.errors import (
    ConfigError,
    DegenerateMaskError,
    DomainError,
    ShapeError,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Cross entropy


def test_cross_entropy_uniform_logits():
    loss = obj.cross_entropy_loss(Tensor(np.zeros((4, 2))), np.zeros(4, dtype=int))
    np.testing.assert_allclose(loss.item(), np.log(2.0), rtol=1e-12)


def test_cross_entropy_saturated_margin():
    logits = np.zeros((3, 2))
    logits[:, 1] = 20.0
    loss = obj.cross_entropy_loss(Tensor(logits), np.ones(3, dtype=int))
    assert loss.item() < 1e-8


def naive_softmax_ce(logits, labels):
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    return -np.mean(np.log(p[np.arange(len(labels)), labels]))


def test_cross_entropy_matches_naive_oracle():
    g = rng(1)
    logits = g.standard_normal((10, 5))
    labels = g.integers(0, 5, size=10)
    loss = obj.cross_entropy_loss(Tensor(logits), labels)
    np.testing.assert_allclose(loss.item(), naive_softmax_ce(logits, labels), rtol=1e-10)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        obj.cross_entropy_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_gradient():
    g = rng(2)
    labels = g.integers(0, 3, size=6)
    x = Tensor(g.standard_normal((6, 3)))
    err = finite_diff_check(lambda t: obj.cross_entropy_loss(t, labels), x, h=1e-5)
    assert err < 1e-6


def test_cross_entropy_stable_at_huge_logits():
    logits = np.array([[1000.0, 0.0], [0.0, 1000.0]])
    loss = obj.cross_entropy_loss(Tensor(logits), np.array([0, 1]))
    assert np.isfinite(loss.item()) and loss.item() < 1e-8


# ---------------------------------------------------------------------------
# MSE


def test_mse_zero_when_equal():
    p = Tensor(np.array([1.0, 2.0]))
    assert obj.mse_loss(p, np.array([1.0, 2.0])).item() == 0.0


def test_mse_hand_computed():
    assert obj.mse_loss(Tensor(np.zeros(2)), np.ones(2)).item() == 1.0


def test_mse_length_mismatch():
    with pytest.raises(ShapeError):
        obj.mse_loss(Tensor(np.zeros(2)), np.zeros(3))


def test_mse_gradient_formula():
    g = rng(3)
    pred = Tensor(g.standard_normal(5), requires_grad=True)
    target = g.standard_normal(5)
    with tape():
        backward(obj.mse_loss(pred, target))
    np.testing.assert_allclose(pred.grad, 2.0 * (pred.data - target) / 5.0, rtol=1e-12)
    err = finite_diff_check(lambda t: obj.mse_loss(t, target), Tensor(pred.data.copy()))
    assert err < 1e-8


# ---------------------------------------------------------------------------
# Penalties


def test_l1_penalty_paper_coefficient_case():
    # coefficient 1e-3 matches the regression task setting
    m = Tensor(np.array([0.5, 0.5]))
    np.testing.assert_allclose(obj.l1_penalty(m, 1e-3).item(), 1e-3, rtol=1e-12)
    assert obj.l1_penalty(Tensor(np.zeros(4)), 1.0).item() == 0.0


def test_l1_homogeneity():
    g = rng(4)
    m = np.abs(g.standard_normal(6))
    one = obj.l1_penalty(Tensor(m), 0.7).item()
    two = obj.l1_penalty(Tensor(2.0 * m), 0.7).item()
    np.testing.assert_allclose(two, 2.0 * one, rtol=1e-12)


def test_l2_penalty_paper_coefficient_case():
    # coefficient 1e-4 matches the image task setting
    m = Tensor(np.array([1.0, 1.0]))
    np.testing.assert_allclose(obj.l2_penalty(m, 1e-4).item(), 2e-4, rtol=1e-12)
    assert obj.l2_penalty(Tensor(np.zeros(3)), 1.0).item() == 0.0


def test_l2_sign_invariance():
    g = rng(5)
    m = g.standard_normal(8)
    a = obj.l2_penalty(Tensor(m), 0.3).item()
    b = obj.l2_penalty(Tensor(-m), 0.3).item()
    assert a == b


def test_entropy_uniform_distribution_max():
    m = Tensor(np.full(4, 0.25))
    np.testing.assert_allclose(obj.entropy_penalty(m, 1.0).item(), np.log(4.0), rtol=1e-12)
    # scale invariance of the normalized form
    np.testing.assert_allclose(
        obj.entropy_penalty(Tensor(np.full(4, 10.0)), 1.0).item(), np.log(4.0), rtol=1e-12
    )


def test_entropy_one_hot_is_zero():
    m = Tensor(np.array([0.0, 1.0, 0.0]))
    assert obj.entropy_penalty(m, 1.0, "distribution").item() == 0.0
    assert obj.entropy_penalty(m, 1.0, "bernoulli").item() == 0.0


def test_entropy_bernoulli_half_mask():
    n = 7
    m = Tensor(np.full(n, 0.5))
    np.testing.assert_allclose(
        obj.entropy_penalty(m, 1.0, "bernoulli").item(), n * np.log(2.0), rtol=1e-12
    )


def test_entropy_errors():
    with pytest.raises(DomainError):
        obj.entropy_penalty(Tensor(np.array([-0.1, 0.5])), 1.0)
    with pytest.raises(DegenerateMaskError):
        obj.entropy_penalty(Tensor(np.zeros(3)), 1.0, "distribution")
    with pytest.raises(DomainError):
        obj.entropy_penalty(Tensor(np.array([0.5, 1.5])), 1.0, "bernoulli")


def test_entropy_upper_bound_and_equality_iff_uniform():
    g = rng(6)
    for n in (2, 5, 9):
        uniform = obj.entropy_penalty(Tensor(np.full(n, 1.0 / n)), 1.0).item()
        np.testing.assert_allclose(uniform, np.log(n), rtol=1e-12)
        for _ in range(20):
            m = np.abs(g.standard_normal(n)) + 1e-3
            m /= m.sum()
            if np.allclose(m, 1.0 / n):
                continue
            val = obj.entropy_penalty(Tensor(m), 1.0).item()
            assert val < np.log(n)


def test_penalty_monotonicity_in_magnitude():
    g = rng(7)
    m = np.abs(g.standard_normal(5)) + 0.1
    for i in range(5):
        bigger = m.copy()
        bigger[i] *= 1.5
        assert obj.l1_penalty(Tensor(bigger), 1.0).item() > obj.l1_penalty(Tensor(m), 1.0).item()
        assert obj.l2_penalty(Tensor(bigger), 1.0).item() > obj.l2_penalty(Tensor(m), 1.0).item()


def test_invalid_coefficients():
    with pytest.raises(ConfigError):
        obj.l1_penalty(Tensor(np.ones(2)), -1.0)
    with pytest.raises(ConfigError):
        obj.RegularizerConfig(l2_coeff=float("inf"))
    with pytest.raises(ConfigError):
        obj.RegularizerConfig(entropy_kind="gauss")


# ---------------------------------------------------------------------------
# Composition


def test_total_objective_zero_coefficients_is_task_loss():
    task = Tensor(np.asarray(0.37))
    m = Tensor(rng(8).uniform(0, 1, size=6))
    out = obj.total_objective(task, m, obj.RegularizerConfig())
    assert out.item() == 0.37


def test_total_objective_composition():
    task = Tensor(np.asarray(0.0))
    m = Tensor(np.array([1.0, 1.0]))
    out = obj.total_objective(task, m, obj.RegularizerConfig(l2_coeff=1e-4))
    np.testing.assert_allclose(out.item(), 2e-4, rtol=1e-12)


def test_total_objective_batch_mean_convention():
    reg = obj.RegularizerConfig(l1_coeff=1.0, l2_coeff=1.0, entropy_coeff=1.0)
    batch = rng(9).uniform(0.1, 1.0, size=(4, 6))
    got = obj.total_objective(Tensor(np.asarray(0.0)), Tensor(batch), reg, batch_axis=0)
    per = [
        obj.total_objective(Tensor(np.asarray(0.0)), Tensor(row), reg).item() for row in batch
    ]
    np.testing.assert_allclose(got.item(), np.mean(per), rtol=1e-10)


def test_total_objective_end_to_end_differentiable():
    g = rng(10)
    reg = obj.RegularizerConfig(l1_coeff=0.01, l2_coeff=0.02, entropy_coeff=0.05)
    x = Tensor(g.standard_normal((3, 4)))
    target = g.standard_normal(3)

    def f(w):
        m = ad.sigmoid(ad.matmul(x, ad.reshape(w, (4, 2))))  # [3, 2] mask
        pred = ad.reduce_mean(m, [1])
        task = obj.mse_loss(pred, target)
        return obj.total_objective(task, m, reg, batch_axis=0)

    err = finite_diff_check(f, Tensor(g.standard_normal(8)), h=1e-5)
    assert err < 1e-4


def test_total_objective_no_gradient_to_frozen_inputs():
    g = rng(11)
    frozen = Tensor(g.standard_normal((2, 3)), requires_grad=False)
    live = Tensor(g.uniform(0.2, 0.8, size=(2, 3)), requires_grad=True)
    reg = obj.RegularizerConfig(l1_coeff=0.1, entropy_coeff=0.1)
    with tape():
        m = ad.mul(live, ad.sigmoid(frozen))
        loss = obj.total_objective(Tensor(np.asarray(0.0)), m, reg, batch_axis=0)
        backward(loss)
    assert frozen.grad is None
    assert live.grad is not None and np.any(live.grad != 0.0)
