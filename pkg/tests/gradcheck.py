"""Finite-difference gradient oracle shared by the unit and acceptance suites."""

import numpy as np

from varleak.autodiff import Tensor
from varleak.layers import (Network, affine, batch_norm, conv2d, elu, flatten,
                            leaky_relu, sigmoid, softmax, tanh)


def weighted_loss(net, x, coeffs, mode="train"):
    """Scalar loss sum(c * net(x)); c fixed so softmax has nonzero gradients."""
    out = net.forward(x, mode)
    return (out * Tensor(coeffs)).sum()


def finite_difference_grads(net, x, coeffs, h=1e-5, mode="train"):
    """Central-difference gradient of the weighted loss for every parameter."""
    grads = {}
    for name, p in net.params.items():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(weighted_loss(net, x, coeffs, mode).data)
            flat[i] = orig - h
            lm = float(weighted_loss(net, x, coeffs, mode).data)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for name in numeric:
        a = analytic[name]
        f = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        worst = max(worst, float((np.abs(a - f) / denom).max()))
    return worst


def random_small_net(rng):
    """A random 1-3 layer stack covering every kind except batch-norm-eval.

    Kept under 64 parameters so exhaustive finite differences stay cheap.
    """
    acts = [leaky_relu(0.2), tanh(), elu(), sigmoid(), softmax()]
    family = rng.integers(0, 6)
    if family == 0:  # affine chain with one activation
        d_in, d_mid, d_out = rng.integers(2, 5, 3)
        specs = [affine(int(d_mid)), acts[rng.integers(0, len(acts))],
                 affine(int(d_out))]
        shape = (int(d_in),)
    elif family == 1:  # convolution into an activation
        c_out = int(rng.integers(1, 3))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        specs = [conv2d(c_out, k, stride), acts[rng.integers(0, 4)], flatten()]
        shape = (int(rng.integers(3, 6)), int(rng.integers(3, 6)),
                 int(rng.integers(1, 3)))
    elif family == 2:  # conv then affine readout
        specs = [conv2d(1, 2, 2), flatten(), affine(int(rng.integers(2, 4)))]
        shape = (4, 4, int(rng.integers(1, 3)))
    elif family == 3:  # batch-norm in train mode after an affine
        d_in, d_out = rng.integers(2, 5, 2)
        specs = [affine(int(d_out)), batch_norm(),
                 acts[rng.integers(0, len(acts))]]
        shape = (int(d_in),)
    elif family == 4:  # batch-norm on a conv feature map
        specs = [conv2d(2, 2, 1), batch_norm(), leaky_relu(0.2), flatten()]
        shape = (3, 3, 1)
    else:  # flatten then affine with a final activation
        d_out = int(rng.integers(2, 5))
        specs = [flatten(), affine(d_out), acts[rng.integers(0, len(acts))]]
        shape = (2, int(rng.integers(2, 4)), 1)
    net = Network(specs, shape, rng=rng)
    assert net.params.n_scalars() <= 64
    return net, shape


def run_gradient_suite(n_nets, seed=0, h=1e-5):
    """Check ``n_nets`` random small networks; returns the worst error seen."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_nets):
        net, shape = random_small_net(rng)
        batch = int(rng.integers(2, 5))
        x = rng.standard_normal((batch,) + shape)
        coeffs = rng.standard_normal((batch,) + net.output_shape)
        loss = weighted_loss(net, x, coeffs)
        loss.backward()
        analytic = net.params.grad_map()
        numeric = finite_difference_grads(net, x, coeffs, h=h)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
