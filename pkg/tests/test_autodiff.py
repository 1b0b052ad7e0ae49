"""Core autodiff behavior: recorded graphs, gradients, and usage errors."""

import numpy as np
import pytest

from varleak.autodiff import Tensor, UsageError, as_tensor, concat, no_grad


class TestBackward:
    def test_linear_gradient(self):
        w = Tensor(2.0, requires_grad=True)
        x = Tensor(3.0)
        loss = (w * x).sum()
        loss.backward()
        assert w.grad == pytest.approx(3.0)

    def test_unused_parameter_gets_no_gradient(self):
        w = Tensor(np.ones(3), requires_grad=True)
        p = Tensor(np.ones(3), requires_grad=True)
        loss = (w * 2.0).sum()
        loss.backward()
        assert p.grad is None
        assert np.allclose(w.grad, 2.0)

    def test_backward_requires_scalar(self):
        w = Tensor(np.ones(3), requires_grad=True)
        out = w * 2.0
        with pytest.raises(UsageError):
            out.backward()

    def test_backward_without_graph_is_usage_error(self):
        with pytest.raises(UsageError):
            Tensor(1.0, requires_grad=True).backward()
        with pytest.raises(UsageError):
            Tensor(1.0).backward()

    def test_no_grad_blocks_recording(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            loss = (w * 2.0).sum()
        with pytest.raises(UsageError):
            loss.backward()

    def test_gradient_accumulates_across_reuse(self):
        w = Tensor(2.0, requires_grad=True)
        loss = (w * 3.0 + w * 4.0).sum()
        loss.backward()
        assert w.grad == pytest.approx(7.0)

    def test_broadcast_bias_gradient(self):
        b = Tensor(np.zeros(3), requires_grad=True)
        x = Tensor(np.ones((5, 3)))
        loss = (x + b).sum()
        loss.backward()
        assert np.allclose(b.grad, 5.0)


class TestOps:
    def test_matmul_shapes_and_grads(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        c = rng.standard_normal((4, 2))
        loss = ((a @ b) * Tensor(c)).sum()
        loss.backward()
        assert np.allclose(a.grad, c @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ c)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((50, 7)) * 10)
        out = x.softmax(axis=-1)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-9)

    def test_sigmoid_range_and_symmetry(self):
        x = Tensor(np.linspace(-30, 30, 101))
        s = x.sigmoid().data
        assert np.all(s > 0) and np.all(s < 1)
        # sigmoid(x) + sigmoid(-x) = 1; the grid is symmetric
        assert np.allclose(s + s[::-1], 1.0, atol=1e-12)

    def test_clip_gradient_mask(self):
        x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
        loss = x.clip(-1.0, 1.0).sum()
        loss.backward()
        assert np.allclose(x.grad, [0.0, 1.0, 0.0])

    def test_elu_and_leaky_relu_values(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]))
        assert np.allclose(x.leaky_relu(0.2).data, [-0.2, 0.0, 2.0])
        assert np.allclose(x.elu(1.0).data, [np.expm1(-1.0), 0.0, 2.0])

    def test_mean_matches_numpy(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 5))
        t = Tensor(x)
        assert np.allclose(t.mean(axis=0).data, x.mean(axis=0))
        assert float(t.mean().data) == pytest.approx(x.mean())

    def test_concat_splits_gradient(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        weights = np.arange(10.0).reshape(2, 5)
        loss = (concat([a, b], axis=1) * Tensor(weights)).sum()
        loss.backward()
        assert np.allclose(a.grad, weights[:, :3])
        assert np.allclose(b.grad, weights[:, 3:])

    def test_as_tensor_passthrough(self):
        t = Tensor(1.0)
        assert as_tensor(t) is t
        assert isinstance(as_tensor(2.0), Tensor)


class TestDeterminism:
    def test_forward_backward_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            w = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
            x = Tensor(rng.standard_normal((8, 6)))
            loss = ((x @ w).tanh().softmax(axis=-1)
                    * Tensor(rng.standard_normal((8, 4)))).sum()
            loss.backward()
            return loss.data.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()
