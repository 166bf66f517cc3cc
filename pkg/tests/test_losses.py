"""Loss functions: closed-form values, degeneracies, invariances, gradients."""

import numpy as np
import pytest

from protofed.losses import contrastive_reg, cross_entropy, fedproto_reg
from protofed.prototypes import GlobalPrototypePool

from helpers import fd_array_grad, max_rel_err


def two_class_pool(dim=2):
    return GlobalPrototypePool({0: np.array([[1.0, 0.0]]), 1: np.array([[-1.0, 0.0]])}, 0)


class TestCrossEntropy:
    def test_zero_logits_ln_c(self):
        loss, _ = cross_entropy(np.zeros((4, 10)), np.array([0, 3, 7, 9]))
        assert loss == pytest.approx(np.log(10), abs=1e-12)

    def test_loss_vanishes_as_true_logit_grows(self):
        previous = np.inf
        for scale in (1.0, 5.0, 20.0, 80.0):
            logits = np.zeros((1, 4))
            logits[0, 2] = scale
            loss, _ = cross_entropy(logits, np.array([2]))
            assert loss < previous
            previous = loss
        assert previous < 1e-30

    def test_hand_fixture(self):
        logits = np.array([[2.0, 1.0, 0.0], [-1.0, 0.5, 0.25]])
        labels = np.array([0, 2])
        expected = 0.0
        for row, y in zip(logits, labels):
            z = np.exp(row - row.max())
            expected -= np.log(z[y] / z.sum())
        loss, _ = cross_entropy(logits, labels)
        assert loss == pytest.approx(expected / 2, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        logits = rng.standard_normal((5, 4))
        labels = rng.integers(0, 4, size=5)
        _, dlogits = cross_entropy(logits, labels)
        fd = fd_array_grad(logits, lambda x: cross_entropy(x, labels)[0])
        assert max_rel_err(dlogits, fd) < 1e-4

    def test_invalid_labels(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestContrastive:
    def test_single_class_pool_exact_zero(self):
        rng = np.random.default_rng(0)
        pool = GlobalPrototypePool({2: rng.standard_normal((5, 4))}, 0)
        emb = rng.standard_normal((6, 4))
        loss, grad = contrastive_reg(emb, np.full(6, 2), pool, tau=0.07)
        assert loss == 0.0
        assert not grad.any()

    def test_two_class_scalar_case(self):
        emb = np.array([[1.0, 0.0]])
        loss, _ = contrastive_reg(emb, np.array([0]), two_class_pool(), tau=1.0, normalize=False)
        assert loss == pytest.approx(np.log(1 + np.exp(-2.0)), abs=1e-9)

    def test_temperature_limits(self):
        rng = np.random.default_rng(1)
        pool = GlobalPrototypePool(
            {0: np.array([[2.0, 0.0], [1.5, 0.5]]), 1: np.array([[-1.0, 0.2], [-2.0, 0.0]])}, 0
        )
        emb = np.array([[1.0, 0.0]])  # aligns with class 0: positives dominate
        labels = np.array([0])
        small, _ = contrastive_reg(emb, labels, pool, tau=1e-3, normalize=False)
        assert small == pytest.approx(0.0, abs=1e-6)
        big, _ = contrastive_reg(emb, labels, pool, tau=1e8, normalize=False)
        assert big == pytest.approx(np.log(4 / 2), abs=1e-6)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(2)
        rows = rng.standard_normal((4, 3))
        emb = rng.standard_normal((5, 3))
        labels = rng.integers(0, 2, size=5)
        other = rng.standard_normal((4, 3))
        pool_a = GlobalPrototypePool({0: rows, 1: other}, 0)
        pool_b = GlobalPrototypePool({0: rows[::-1].copy(), 1: other}, 0)
        la, ga = contrastive_reg(emb, labels, pool_a, tau=0.3)
        lb, gb = contrastive_reg(emb, labels, pool_b, tau=0.3)
        assert la == pytest.approx(lb, rel=1e-12)
        assert np.allclose(ga, gb, atol=1e-12)

    def test_rescaling_invariance_with_normalization(self):
        rng = np.random.default_rng(3)
        pool = GlobalPrototypePool({0: rng.standard_normal((2, 4)), 1: rng.standard_normal((3, 4))}, 0)
        emb = rng.standard_normal((4, 4))
        labels = np.array([0, 1, 0, 1])
        base, _ = contrastive_reg(emb, labels, pool, tau=0.07, normalize=True)
        for c in (0.5, 2.0, 4.0):  # power-of-two scales cancel exactly
            scaled, _ = contrastive_reg(c * emb, labels, pool, tau=0.07, normalize=True)
            assert scaled == base
        scaled, _ = contrastive_reg(1.7 * emb, labels, pool, tau=0.07, normalize=True)
        assert scaled == pytest.approx(base, rel=1e-12)

    def test_label_missing_from_pool_contributes_nothing(self):
        rng = np.random.default_rng(4)
        pool = GlobalPrototypePool({0: rng.standard_normal((2, 3))}, 0)
        emb = rng.standard_normal((2, 3))
        both, grad = contrastive_reg(emb, np.array([0, 5]), pool, tau=0.1)
        only_first, _ = contrastive_reg(emb[:1], np.array([0]), pool, tau=0.1)
        assert both == pytest.approx(only_first / 2, rel=1e-12)
        assert not grad[1].any()

    def test_empty_pool_is_silent_zero(self):
        emb = np.ones((2, 3))
        loss, grad = contrastive_reg(emb, np.array([0, 1]), GlobalPrototypePool({}, 0), tau=0.1)
        assert loss == 0.0 and not grad.any()

    @pytest.mark.parametrize("normalize", [True, False])
    def test_gradient_matches_finite_differences(self, normalize):
        rng = np.random.default_rng(5 + normalize)
        pool = GlobalPrototypePool(
            {j: rng.standard_normal((2, 4)) for j in range(3)}, 0
        )
        emb = rng.standard_normal((5, 4))
        labels = rng.integers(0, 3, size=5)
        _, grad = contrastive_reg(emb, labels, pool, tau=0.2, normalize=normalize)
        fd = fd_array_grad(emb, lambda x: contrastive_reg(x, labels, pool, 0.2, normalize)[0])
        assert max_rel_err(grad, fd) < 1e-4

    def test_zero_embedding_normalized_gets_zero_gradient(self):
        pool = two_class_pool()
        emb = np.zeros((1, 2))
        loss, grad = contrastive_reg(emb, np.array([0]), pool, tau=1.0, normalize=True)
        assert np.isfinite(loss)
        assert not grad.any()


class TestFedproto:
    def test_identical_means_zero(self):
        means = {0: np.array([1.0, 2.0])}
        loss, grads = fedproto_reg(means, {0: np.array([1.0, 2.0])}, lam=1.0)
        assert loss == 0.0 and not grads[0].any()

    def test_zero_lambda(self):
        loss, grads = fedproto_reg({0: np.ones(2)}, {0: np.zeros(2)}, lam=0.0)
        assert loss == 0.0 and not grads[0].any()

    def test_three_four_distance(self):
        loss, _ = fedproto_reg({1: np.array([3.0, 4.0])}, {1: np.zeros(2)}, lam=1.0)
        assert loss == pytest.approx(25.0, abs=1e-12)

    def test_no_shared_classes_raises(self):
        with pytest.raises(ValueError):
            fedproto_reg({0: np.ones(2)}, {1: np.ones(2)}, lam=1.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        protos = {j: rng.standard_normal(3) for j in range(3)}
        means = {j: rng.standard_normal(3) for j in range(3)}

        def loss_of(stacked):
            local = {j: stacked[j] for j in range(3)}
            return fedproto_reg(local, protos, lam=0.9)[0]

        _, grads = fedproto_reg(means, protos, lam=0.9)
        stacked = np.stack([means[j] for j in range(3)])
        fd = fd_array_grad(stacked, loss_of)
        for j in range(3):
            assert max_rel_err(grads[j], fd[j]) < 1e-4
