"""Diagonal-Gaussian latent machinery.

Reparameterized sampling, the closed-form KL divergence to the standard
normal prior, and a Monte-Carlo KL estimator that serves as the independent
oracle for the closed form and for the classifier-based KL estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor

LOG_SIGMA_MIN = np.log(1e-4)
LOG_SIGMA_MAX = np.log(1e4)

_LOG_2PI = np.log(2.0 * np.pi)


class GaussianError(ValueError):
    """Raised for invalid posterior parameters."""


@dataclass
class DiagonalGaussian:
    """Per-example posterior N(mu, diag(sigma^2)).

    ``mu`` and ``sigma`` may be plain arrays or autodiff tensors; shapes are
    either ``(d,)`` for a single distribution or ``(batch, d)``.
    ``sigma`` must be strictly positive element-wise.
    """

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.sigma = as_tensor(self.sigma)
        if self.mu.data.shape != self.sigma.data.shape:
            raise GaussianError(
                f"mu shape {self.mu.data.shape} != sigma shape {self.sigma.data.shape}"
            )
        if np.any(self.sigma.data <= 0):
            raise GaussianError("sigma must be strictly positive")

    @property
    def dim(self):
        return self.mu.data.shape[-1]


@dataclass(frozen=True)
class PriorSpec:
    """Fixed standard isotropic normal prior on the latent space."""

    dim: int

    def sample(self, rng, n):
        return rng.standard_normal((n, self.dim))

    def log_density(self, z):
        z = np.asarray(z, dtype=np.float64)
        return -0.5 * (z * z).sum(axis=-1) - 0.5 * self.dim * _LOG_2PI


def reparam_sample(g, eps):
    """Pathwise sample z = mu + sigma * eps (elementwise product).

    Differentiable in mu and sigma; ``eps`` is treated as a constant draw.
    """
    eps = as_tensor(eps)
    if eps.data.shape[-1] != g.dim:
        raise GaussianError(
            f"eps has dimension {eps.data.shape[-1]}, posterior has {g.dim}"
        )
    return g.mu + g.sigma * eps


def kl_to_standard_normal(g):
    """Closed-form KL(N(mu, diag(sigma^2)) || N(0, I)) in nats.

    Returns 0.5 * sum_i (sigma_i^2 + mu_i^2 - 1 - ln sigma_i^2), summed over
    the last axis: a scalar tensor for a ``(d,)`` posterior, a ``(batch,)``
    tensor for a batched one.  Nonnegative, and zero exactly at
    mu = 0, sigma = 1.
    """
    s2 = g.sigma * g.sigma
    terms = s2 + g.mu * g.mu - 1.0 - s2.log()
    return terms.sum(axis=-1) * 0.5


def gaussian_log_density(z, mu, sigma):
    """log N(z; mu, diag(sigma^2)) summed over the last axis (plain numpy)."""
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    u = (z - mu) / sigma
    d = z.shape[-1]
    return -0.5 * (u * u).sum(axis=-1) - np.log(sigma).sum() - 0.5 * d * _LOG_2PI


def mc_kl(sampler, log_p, log_q, n, batch=200_000):
    """Monte-Carlo KL(P || Q) = E_P[log p(z) - log q(z)] from n samples.

    ``sampler(k)`` must return k i.i.d. draws from P as an ``(k, d)`` array;
    ``log_p`` and ``log_q`` are vectorized log-densities.  Sampling is
    chunked so large n stays within memory.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    total = 0.0
    done = 0
    while done < n:
        k = min(batch, n - done)
        z = sampler(k)
        total += float(np.sum(log_p(z) - log_q(z)))
        done += k
    return total / n


def mc_kl_to_standard_normal(g, n, rng, batch=200_000):
    """Monte-Carlo oracle for :func:`kl_to_standard_normal` on a (d,) posterior."""
    mu = np.asarray(g.mu.data, dtype=np.float64)
    sigma = np.asarray(g.sigma.data, dtype=np.float64)
    d = mu.shape[-1]

    def sampler(k):
        return mu + sigma * rng.standard_normal((k, d))

    def log_p(z):
        return gaussian_log_density(z, mu, sigma)

    def log_q(z):
        return -0.5 * (z * z).sum(axis=-1) - 0.5 * d * _LOG_2PI

    return mc_kl(sampler, log_p, log_q, n, batch=batch)
