"""Layer stacks: forward semantics, shape errors, and the gradient oracle."""

import numpy as np
import pytest

from gradcheck import (finite_difference_grads, max_relative_error,
                       run_gradient_suite, weighted_loss)
from varleak.autodiff import Tensor, UsageError
from varleak.layers import (ConfigError, Network, affine, backward, batch_norm,
                            conv2d, flatten, forward, leaky_relu, sigmoid,
                            softmax, tanh)


def _affine_net(weight, bias):
    net = Network([affine(weight.shape[1])], (weight.shape[0],),
                  zero_init=True, name="t")
    net.params["0.affine.weight"].data = np.asarray(weight, dtype=np.float64)
    net.params["0.affine.bias"].data = np.asarray(bias, dtype=np.float64)
    return net


class TestForward:
    def test_identity_affine(self):
        net = _affine_net(np.eye(3), np.zeros(3))
        out = forward(net, np.array([[1.0, 2.0, 3.0]]), mode="eval")
        assert np.allclose(out.data, [[1.0, 2.0, 3.0]])

    def test_leaky_relu_slope(self):
        net = Network([leaky_relu(0.2)], (2,), name="t")
        out = forward(net, np.array([[-1.0, 2.0]]))
        assert np.allclose(out.data, [[-0.2, 2.0]])

    def test_softmax_symmetry(self):
        net = Network([softmax()], (3,), name="t")
        out = forward(net, np.zeros((1, 3)))
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_shape_mismatch_names_layer(self):
        rng = np.random.default_rng(0)
        net = Network([affine(4)], (3,), rng=rng, name="enc")
        with pytest.raises(ConfigError, match="enc"):
            forward(net, np.ones((2, 5)))

    def test_affine_needs_flat_input(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError, match="affine"):
            Network([affine(4)], (2, 2, 1), rng=rng, name="enc")

    def test_conv_needs_image_input(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError, match="conv2d"):
            Network([conv2d(4, 3, 1)], (8,), rng=rng, name="enc")

    def test_conv_same_padding_geometry(self):
        rng = np.random.default_rng(0)
        net = Network([conv2d(6, 5, 2)], (28, 28, 3), rng=rng)
        assert net.output_shape == (14, 14, 6)
        out = forward(net, rng.standard_normal((2, 28, 28, 3)))
        assert out.data.shape == (2, 14, 14, 6)

    def test_unknown_mode_rejected(self):
        net = Network([flatten()], (2, 2, 1))
        with pytest.raises(ConfigError):
            net.forward(np.ones((1, 2, 2, 1)), mode="training")


class TestBatchNorm:
    def test_train_mode_normalizes_batch(self):
        net = Network([batch_norm()], (4,), name="bn")
        rng = np.random.default_rng(3)
        x = rng.standard_normal((64, 4)) * 3.0 + 1.0
        out = net.forward(x, mode="train")
        assert np.allclose(out.data.mean(axis=0), 0.0, atol=1e-9)
        assert np.allclose(out.data.std(axis=0), 1.0, atol=1e-3)

    def test_running_stats_update_only_in_train(self):
        net = Network([batch_norm(momentum=0.5)], (2,), name="bn")
        x = np.ones((8, 2)) * 4.0
        net.forward(x, mode="train-frozen-stats")
        assert np.allclose(net.buffers["0.batch-norm.running_mean"], 0.0)
        net.forward(x, mode="train")
        assert np.allclose(net.buffers["0.batch-norm.running_mean"], 2.0)

    def test_eval_uses_running_stats(self):
        net = Network([batch_norm()], (2,), name="bn")
        net.buffers["0.batch-norm.running_mean"] = np.array([1.0, 1.0])
        net.buffers["0.batch-norm.running_var"] = np.array([4.0, 4.0])
        out = net.forward(np.array([[3.0, 5.0]]), mode="eval")
        assert np.allclose(out.data, [[1.0, 2.0]], atol=1e-3)


class TestBackwardSurface:
    def test_gradient_map_covers_unused_parameters(self):
        rng = np.random.default_rng(1)
        used = Network([affine(2)], (3,), rng=rng, name="used")
        unused = Network([affine(2)], (3,), rng=rng, name="unused")
        x = rng.standard_normal((4, 3))
        loss = used.forward(x, mode="train").sum()
        grads_used = backward(used, loss)
        grads_unused = backward(unused, loss)
        assert any(np.abs(g).max() > 0 for g in grads_used.values())
        assert all(np.all(g == 0) for g in grads_unused.values())
        assert grads_unused.keys() == dict(unused.params.items()).keys()

    def test_eval_forward_cannot_backward(self):
        rng = np.random.default_rng(1)
        net = Network([affine(2)], (3,), rng=rng)
        loss = net.forward(np.ones((2, 3)), mode="eval").sum()
        with pytest.raises(UsageError):
            backward(net, loss)

    def test_two_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        net = Network([affine(4), tanh(), affine(3)], (5,), rng=rng)
        x = rng.standard_normal((6, 5))
        coeffs = rng.standard_normal((6, 3))
        loss = weighted_loss(net, x, coeffs)
        loss.backward()
        worst = max_relative_error(net.params.grad_map(),
                                   finite_difference_grads(net, x, coeffs))
        assert worst <= 1e-3

    def test_conv_backward_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        net = Network([conv2d(2, 3, 2), leaky_relu(0.2), flatten()],
                      (5, 5, 2), rng=rng)
        x = rng.standard_normal((3, 5, 5, 2))
        coeffs = rng.standard_normal((3,) + net.output_shape)
        loss = weighted_loss(net, x, coeffs)
        loss.backward()
        worst = max_relative_error(net.params.grad_map(),
                                   finite_difference_grads(net, x, coeffs))
        assert worst <= 1e-3

    def test_batch_norm_backward_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        net = Network([affine(3), batch_norm(), sigmoid()], (4,), rng=rng)
        x = rng.standard_normal((5, 4))
        coeffs = rng.standard_normal((5, 3))
        loss = weighted_loss(net, x, coeffs)
        loss.backward()
        worst = max_relative_error(net.params.grad_map(),
                                   finite_difference_grads(net, x, coeffs))
        assert worst <= 1e-3


class TestGradientSuiteSample:
    def test_thirty_random_nets(self):
        # the acceptance suite runs the full 100-network sweep
        assert run_gradient_suite(30, seed=123) <= 1e-3


class TestDeterminism:
    def test_same_seed_same_network_and_gradients(self):
        def build_and_run():
            rng = np.random.default_rng(11)
            net = Network([affine(8), leaky_relu(), affine(3), softmax()],
                          (6,), rng=rng)
            x = rng.standard_normal((10, 6))
            coeffs = rng.standard_normal((10, 3))
            loss = weighted_loss(net, x, coeffs)
            loss.backward()
            return loss.data.copy(), {k: v.copy()
                                      for k, v in net.params.grad_map().items()}

        l1, g1 = build_and_run()
        l2, g2 = build_and_run()
        assert l1.tobytes() == l2.tobytes()
        for k in g1:
            assert g1[k].tobytes() == g2[k].tobytes()
