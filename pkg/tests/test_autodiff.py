"""Per-op gradient checks against central finite differences."""

import numpy as np
import pytest

from hopqa import autodiff as ad


def finite_diff(func, arrays, h=1e-6):
    """Central finite-difference gradients of func(arrays) for each array."""
    grads = []
    for idx, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = func(arrays)
            flat[i] = orig - h
            down = func(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_grads(build, arrays, atol=1e-7, rtol=1e-5):
    """build(tensors) -> scalar Tensor; compare backward grads with FD."""
    tensors = [ad.tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(tensors)
    loss.backward()

    def func(arrs):
        ts = [ad.tensor(a) for a in arrs]
        return float(build(ts).data)

    fd = finite_diff(func, [a.copy() for a in arrays])
    for t, g in zip(tensors, fd):
        np.testing.assert_allclose(t.grad, g, atol=atol, rtol=rtol)


rng = np.random.default_rng(42)


class TestElementwise:
    def test_add_broadcast(self):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        check_grads(lambda ts: ad.tsum(ad.mul(ad.add(ts[0], ts[1]), ad.add(ts[0], ts[1]))), [a, b])

    def test_mul_broadcast(self):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 4))
        check_grads(lambda ts: ad.tsum(ad.mul(ts[0], ts[1])), [a, b])

    def test_gelu(self):
        a = rng.normal(size=(5, 3))
        check_grads(lambda ts: ad.tsum(ad.gelu(ts[0])), [a])

    def test_gelu_values(self):
        # gelu(0) = 0 and gelu is near-identity for large positive inputs
        out = ad.gelu(ad.tensor([0.0, 10.0, -10.0])).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(10.0, abs=1e-6)
        assert out[2] == pytest.approx(0.0, abs=1e-6)


class TestMatmulShapes:
    def test_2d(self):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        check_grads(lambda ts: ad.tsum(ad.matmul(ts[0], ts[1])), [a, b])

    def test_batched_times_weight(self):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        check_grads(lambda ts: ad.tsum(ad.matmul(ts[0], ts[1])), [a, b])

    def test_batched_4d(self):
        a, b = rng.normal(size=(2, 2, 3, 4)), rng.normal(size=(2, 2, 4, 3))
        check_grads(lambda ts: ad.tsum(ad.matmul(ts[0], ts[1])), [a, b])


class TestStructural:
    def test_reshape_transpose(self):
        a = rng.normal(size=(2, 6))

        def build(ts):
            x = ad.reshape(ts[0], (2, 2, 3))
            x = ad.transpose(x, (0, 2, 1))
            return ad.tsum(ad.mul(x, x))

        check_grads(build, [a])

    def test_concat(self):
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
        check_grads(lambda ts: ad.tsum(ad.mul(ad.concat(ts, axis=-1), 2.0)), [a, b])

    def test_take(self):
        a = rng.normal(size=(3, 4, 2))
        check_grads(lambda ts: ad.tsum(ad.take(ts[0], 0, axis=1)), [a])

    def test_gather_with_repeats(self):
        table = rng.normal(size=(5, 3))
        ids = np.array([0, 2, 2, 4])
        check_grads(lambda ts: ad.tsum(ad.mul(ad.gather(ts[0], ids), ad.gather(ts[0], ids))),
                    [table])


class TestNormalization:
    def test_layer_norm_grads(self):
        x = rng.normal(size=(4, 6))
        g = rng.normal(size=(6,)) + 1.0
        b = rng.normal(size=(6,))
        check_grads(lambda ts: ad.tsum(ad.layer_norm(ts[0], ts[1], ts[2])), [x, g, b],
                    atol=1e-6, rtol=1e-4)

    def test_layer_norm_statistics(self):
        # Pre-affine output must have ~zero mean and ~unit variance per row.
        x = rng.normal(size=(64, 32)) * 3 + 1
        ones, zeros = ad.tensor(np.ones(32)), ad.tensor(np.zeros(32))
        out = ad.layer_norm(ad.tensor(x), ones, zeros).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.var(axis=-1) - 1).max() < 1e-4

    def test_masked_softmax_grads(self):
        x = rng.normal(size=(3, 5))
        mask = np.array([[True, True, False, True, False],
                         [True, True, True, True, True],
                         [False, True, False, False, True]])
        weights = rng.normal(size=(3, 5))

        def build(ts):
            return ad.tsum(ad.mul(ad.masked_softmax(ts[0], mask), weights))

        check_grads(build, [x])

    def test_masked_softmax_exact_zeros(self):
        x = rng.normal(size=(2, 4))
        mask = np.array([[True, False, True, False], [True, True, False, True]])
        probs = ad.masked_softmax(ad.tensor(x), mask).data
        assert (probs[~mask] == 0.0).all()
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ValueError):
            ad.masked_softmax(ad.tensor(rng.normal(size=(1, 3))), np.zeros((1, 3), dtype=bool))


class TestCrossEntropy:
    def test_grads_mean(self):
        logits = rng.normal(size=(4, 3))
        targets = np.array([0, 2, 1, 2])
        check_grads(lambda ts: ad.cross_entropy_logits(ts[0], targets, "mean"), [logits])

    def test_grads_sum(self):
        logits = rng.normal(size=(3, 5))
        targets = np.array([4, 0, 3])
        check_grads(lambda ts: ad.cross_entropy_logits(ts[0], targets, "sum"), [logits])

    def test_uniform_logits_loss(self):
        logits = ad.tensor(np.zeros((2, 8)))
        loss = ad.cross_entropy_logits(logits, np.array([0, 5]))
        assert float(loss.data) == pytest.approx(np.log(8.0), abs=1e-12)

    def test_duplicated_rows_double_gradient_under_sum(self):
        logits = rng.normal(size=(1, 4))
        t1 = ad.tensor(logits, requires_grad=True)
        ad.cross_entropy_logits(t1, np.array([2]), "sum").backward()
        doubled = ad.tensor(np.vstack([logits, logits]), requires_grad=True)
        ad.cross_entropy_logits(doubled, np.array([2, 2]), "sum").backward()
        np.testing.assert_array_equal(doubled.grad.sum(axis=0), 2.0 * t1.grad[0])


class TestGraph:
    def test_shared_subexpression_accumulates(self):
        a = ad.tensor(np.array(3.0), requires_grad=True)
        y = ad.add(ad.mul(a, a), ad.mul(a, 2.0))  # a^2 + 2a, dy/da = 2a + 2
        y.backward()
        assert float(a.grad) == pytest.approx(8.0, abs=1e-12)

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            ad.tensor(np.zeros(3)).backward()
