"""Leakage measurement: the inferential adversary, neural and
classifier-based mutual-information estimators, the assembled complexity
estimate, and an exact discrete-information oracle.

The exact oracle (direct summation over small alphabets) is the reference
every sampled estimator is validated against.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .datasets import DatasetError, DiscreteJoint
from .gaussian import kl_to_standard_normal
from .layers import Network, affine, backward, leaky_relu, sigmoid
from .models import (build_adversary, build_mine_net, encode, one_hot)
from .optim import adam_step

_LN2 = np.log(2.0)
_D_CLAMP = 1e-7


class LeakageError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Adversary training setup.

    ``data_ratio`` is the fraction of labeled (sensitive, input) pairs the
    adversary can train on.
    """

    data_ratio: float = 1.0
    hidden: tuple = (64, 64)
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.data_ratio <= 1.0:
            raise LeakageError(f"data ratio must lie in (0, 1], got {self.data_ratio}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise LeakageError("invalid adversary optimizer settings")


@dataclass
class MiEstimate:
    """A mutual-information figure in nats plus how it was obtained."""

    value: float
    estimator: str  # "mine" | "density-ratio" | "exact"
    n_samples: int
    steps: int = 0

    def __post_init__(self):
        if self.estimator == "exact" and self.value < 0:
            # direct summation can go a few ulp negative
            if self.value < -1e-9:
                raise LeakageError(f"exact MI came out negative: {self.value}")
            self.value = 0.0

    @property
    def bits(self):
        return self.value / _LN2

    @property
    def nats(self):
        return self.value


# ---------------------------------------------------------------------------
# inferential adversary


def train_adversary(bundle, train_ds, test_ds, config):
    """Train an inference network on (sensitive label, encoded input) pairs.

    The encoder is used read-only.  The adversary sees ``data_ratio`` of the
    training pairs and fresh reparameterization noise every epoch (it
    attacks the release mechanism, not one fixed sample).  Returns
    (AdversaryModel, test accuracy, test mean cross-entropy).
    """
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    n = len(train_ds)
    k = max(1, int(round(config.data_ratio * n)))
    chosen = rng.permutation(n)[:k]
    s_train = train_ds.s[chosen]
    present = np.unique(s_train)
    if len(present) < train_ds.num_s:
        warnings.warn(
            f"adversary training data covers {len(present)} of "
            f"{train_ds.num_s} sensitive classes; proceeding"
        )

    mu, sigma = _encode_moments(bundle, train_ds, chosen)
    adversary = build_adversary(bundle.dz, train_ds.num_s, seed=config.seed,
                                hidden=config.hidden)
    for _ in range(config.epochs):
        z_epoch = mu + sigma * rng.standard_normal(mu.shape)
        order = rng.permutation(k)
        for start in range(0, k, config.batch_size):
            idx = order[start : start + config.batch_size]
            probs = adversary.net.forward(z_epoch[idx], mode="train")
            targets = one_hot(s_train[idx], train_ds.num_s)
            loss = -(probs.clip(1e-12, 1.0).log() * targets).sum() * (1.0 / len(idx))
            adversary.net.params.zero_grads()
            grads = backward(adversary.net, loss)
            adam_step(adversary.net.params, grads, config.lr)

    mu_t, sigma_t = _encode_moments(bundle, test_ds, np.arange(len(test_ds)))
    z_test = mu_t + sigma_t * rng.standard_normal(mu_t.shape)
    probs = adversary.predict_probs(z_test)
    accuracy = float((np.argmax(probs, axis=1) == test_ds.s).mean())
    picked = np.clip(probs[np.arange(len(test_ds)), test_ds.s], 1e-12, 1.0)
    xent = float(-np.log(picked).mean())
    return adversary, accuracy, xent


def _encode_moments(bundle, ds, indices, chunk=4096):
    mu = np.empty((len(indices), bundle.dz))
    sigma = np.empty((len(indices), bundle.dz))
    for start in range(0, len(indices), chunk):
        idx = indices[start : start + chunk]
        x = ds.images[idx].astype(np.float64) / 255.0
        with no_grad():
            posterior, _ = encode(bundle, x, np.zeros((len(idx), bundle.dz)),
                                  mode="eval")
        mu[start : start + chunk] = posterior.mu.data
        sigma[start : start + chunk] = posterior.sigma.data
    return mu, sigma


# ---------------------------------------------------------------------------
# neural MI estimation (Donsker-Varadhan bound)


def mine_estimate(z, a, steps=3000, seed=0, batch_size=256, lr=1e-3,
                  ema_rate=0.99, holdout_fraction=0.2):
    """Lower-bound MI estimate from paired samples via a statistic network.

    ``a`` may be integer labels (one-hot encoded internally) or a float
    feature array.  The network maximizes mean T(joint) - log mean
    exp(T(shuffled)); the gradient of the partition term uses an
    exponential-moving-average baseline, and the reported value is the raw
    bound on a held-out batch.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[0] == 1 and z.shape[1] > 1:
        z = z.T
    a = np.asarray(a)
    if a.ndim == 1 and np.issubdtype(a.dtype, np.integer):
        n_classes = int(a.max()) + 1 if a.size else 0
        if n_classes < 2:
            warnings.warn("attribute has a single class; MI is trivially zero")
            return MiEstimate(0.0, "mine", int(z.shape[0]), 0)
        a = one_hot(a, n_classes)
    elif a.ndim == 1:
        a = a.astype(np.float64)[:, None]
    n = z.shape[0]
    if n < 2:
        raise LeakageError("need at least two paired samples")
    if a.shape[0] != n:
        raise LeakageError("z and a must pair up row-wise")

    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    order = rng.permutation(n)
    n_hold = max(2, int(round(holdout_fraction * n)))
    hold, fit = order[:n_hold], order[n_hold:]
    if len(fit) < 2:
        fit = order
    net = build_mine_net(z.shape[1], a.shape[1], seed=seed).net

    ema = None
    for _ in range(steps):
        idx = fit[rng.integers(0, len(fit), min(batch_size, len(fit)))]
        shuffled = idx[rng.permutation(len(idx))]
        t_joint = net.forward(np.concatenate([z[idx], a[idx]], axis=1),
                              mode="train")
        t_marg = net.forward(np.concatenate([z[idx], a[shuffled]], axis=1),
                             mode="train")
        exp_marg = t_marg.clip(-50.0, 50.0).exp().mean()
        batch_mean = float(exp_marg.data)
        ema = batch_mean if ema is None else (
            ema_rate * ema + (1.0 - ema_rate) * batch_mean)
        # EMA-scaled partition gradient; value term unchanged
        loss = -(t_joint.mean() - exp_marg * (1.0 / ema))
        net.params.zero_grads()
        grads = backward(net, loss)
        adam_step(net.params, grads, lr)

    shuffled_hold = hold[rng.permutation(len(hold))]
    with no_grad():
        t_joint = net.forward(np.concatenate([z[hold], a[hold]], axis=1),
                              mode="eval").data
        t_marg = net.forward(np.concatenate([z[hold], a[shuffled_hold]], axis=1),
                             mode="eval").data
    value = float(t_joint.mean() - np.log(np.exp(np.clip(t_marg, -50, 50)).mean()))
    return MiEstimate(value, "mine", n, steps)


# ---------------------------------------------------------------------------
# classifier-based KL (density-ratio trick)


def latent_discriminator_fn(bundle):
    """The bundle's latent discriminator as a plain batch -> probs callable."""

    def fn(z):
        out = bundle.latent_disc.forward(np.asarray(z, dtype=np.float64),
                                         mode="eval")
        return out.data.reshape(-1)

    return fn


def density_ratio_kl(discriminator, z_samples):
    """Mean log-odds of a posterior-vs-prior discriminator over samples.

    With the convention that the discriminator outputs the probability a
    code came from the learned posterior, the average of
    log(D / (1 - D)) over posterior samples estimates
    KL(aggregated posterior || prior).  Outputs at exactly 0 or 1 are
    clamped and flagged.
    """
    z_samples = np.asarray(z_samples, dtype=np.float64)
    if z_samples.ndim == 1:
        z_samples = z_samples[:, None]
    if z_samples.shape[0] < 1:
        raise LeakageError("need at least one posterior sample")
    d = np.asarray(discriminator(z_samples), dtype=np.float64).reshape(-1)
    if d.shape[0] != z_samples.shape[0]:
        raise LeakageError("discriminator must return one probability per sample")
    if np.any(d <= 0.0) or np.any(d >= 1.0):
        warnings.warn("discriminator output saturated at 0 or 1; clamping")
        d = np.clip(d, _D_CLAMP, 1.0 - _D_CLAMP)
    return float(np.mean(np.log(d) - np.log1p(-d)))


def train_binary_discriminator(pos, neg, hidden=(64, 64), steps=2000,
                               lr=1e-3, batch_size=256, seed=0):
    """Logistic training of D(x) = P(x is from ``pos``); returns a callable.

    Follows the c = 1 convention for positive (posterior) samples and
    c = 0 for negative (prior) samples.
    """
    pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(neg, dtype=np.float64))
    if pos.shape[1] != neg.shape[1]:
        raise LeakageError("sample sets must share a feature dimension")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    specs = []
    for h in hidden:
        specs += [affine(h), leaky_relu()]
    specs += [affine(1), sigmoid()]
    net = Network(specs, (pos.shape[1],), rng=rng, name="ratio_disc")
    for _ in range(steps):
        ip = rng.integers(0, pos.shape[0], batch_size)
        iq = rng.integers(0, neg.shape[0], batch_size)
        d_pos = net.forward(pos[ip], mode="train").reshape(batch_size)
        d_neg = net.forward(neg[iq], mode="train").reshape(batch_size)
        loss = -(
            d_pos.clip(1e-12, 1.0).log().mean()
            + (1.0 - d_neg).clip(1e-12, 1.0).log().mean()
        )
        net.params.zero_grads()
        adam_step(net.params, backward(net, loss), lr)

    def fn(x):
        return net.forward(np.atleast_2d(np.asarray(x, dtype=np.float64)),
                           mode="eval").data.reshape(-1)

    return fn


# ---------------------------------------------------------------------------
# assembled complexity estimate


@dataclass(frozen=True)
class ComplexityEstimate:
    """Per-sample KL bound, aggregated-posterior correction, and their difference."""

    kl_upper: float
    correction: float

    @property
    def corrected(self):
        return self.kl_upper - self.correction


def complexity_estimate(bundle, dataset, discriminator=None, seed=0,
                        max_samples=4096):
    """Complexity of the released representation on an evaluation split.

    ``kl_upper`` is the mean closed-form per-sample KL to the prior;
    ``correction`` is the discriminator log-odds estimate of the
    aggregated-posterior-to-prior KL; their difference is the corrected
    complexity estimate.
    """
    if discriminator is None:
        discriminator = latent_discriminator_fn(bundle)
    n = min(max_samples, len(dataset))
    indices = np.arange(n)
    mu, sigma = _encode_moments(bundle, dataset, indices)
    kl_upper = float(np.mean(
        0.5 * (sigma ** 2 + mu ** 2 - 1.0 - 2.0 * np.log(sigma)).sum(axis=1)))
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    z = mu + sigma * rng.standard_normal(mu.shape)
    correction = density_ratio_kl(discriminator, z)
    return ComplexityEstimate(kl_upper, correction)


# ---------------------------------------------------------------------------
# exact discrete oracle


def _mi_from_table(p):
    """I(A;B) in nats by direct summation over a normalized 2-d table."""
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    mask = p > 0
    ratio = p[mask] / (pa @ pb)[mask]
    return float((p[mask] * np.log(ratio)).sum())


def exact_mi(joint, a="s", b="z"):
    """Mutual information between two axes of a discrete joint, by summation."""
    joint = _as_joint(joint, (a, b))
    table = joint.marginal(a, b)
    total = table.sum()
    if abs(total - 1.0) > 1e-9:
        raise LeakageError(f"table sums to {total}, expected 1")
    return MiEstimate(_mi_from_table(table), "exact", table.size)


def exact_conditional_mi(joint, a, b, given):
    """I(A;B | C) in nats by direct summation."""
    joint = _as_joint(joint, (a, b, given))
    p = joint.marginal(a, b, given)
    pc = p.sum(axis=(0, 1))
    value = 0.0
    for c in range(p.shape[2]):
        if pc[c] <= 0:
            continue
        value += pc[c] * _mi_from_table(p[:, :, c] / pc[c])
    return MiEstimate(value, "exact", p.size)


def _as_joint(joint, names):
    if isinstance(joint, DiscreteJoint):
        return joint
    table = np.asarray(joint, dtype=np.float64)
    if table.ndim != len(names):
        raise LeakageError("axis names must cover every table axis")
    return DiscreteJoint(table, axis_names=tuple(names))


@dataclass(frozen=True)
class MarkovCheck:
    i_sz: float
    i_xz: float
    i_xz_given_s: float

    @property
    def residual(self):
        return self.i_sz - self.i_xz + self.i_xz_given_s

    @property
    def dpi_margin(self):
        return self.i_xz - self.i_sz


def markov_identity_check(p_sx, channel):
    """Exact check of I(S;Z) = I(X;Z) - I(X;Z|S) for a release channel.

    ``p_sx`` is the (S, X) source table and ``channel`` the row-stochastic
    P(Z | X).  Because Z depends on the pair only through X, the identity
    holds exactly; the residual should vanish to numerical precision and
    the processing margin I(X;Z) - I(S;Z) should be nonnegative.
    """
    p_sx = np.asarray(p_sx, dtype=np.float64)
    channel = np.asarray(channel, dtype=np.float64)
    if p_sx.ndim != 2 or channel.ndim != 2:
        raise LeakageError("need a 2-d source table and a 2-d channel")
    if channel.shape[0] != p_sx.shape[1]:
        raise LeakageError("channel rows must match the X alphabet")
    if np.any(channel < 0) or not np.allclose(channel.sum(axis=1), 1.0, atol=1e-9):
        raise LeakageError("channel rows must be distributions")
    joint = DiscreteJoint(p_sx[:, :, None] * channel[None, :, :],
                          axis_names=("s", "x", "z"))
    i_sz = exact_mi(joint, "s", "z").value
    i_xz = exact_mi(joint, "x", "z").value
    i_xz_s = exact_conditional_mi(joint, "x", "z", "s").value
    return MarkovCheck(i_sz, i_xz, i_xz_s)


def empirical_joint(a, b, num_a=None, num_b=None):
    """Empirical 2-d probability table from paired integer samples."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    na = num_a if num_a is not None else int(a.max()) + 1
    nb = num_b if num_b is not None else int(b.max()) + 1
    table = np.zeros((na, nb))
    np.add.at(table, (a, b), 1.0)
    return table / table.sum()
