"""Data-owner optimization: warm-up pre-training followed by the five-block
alternating loop.

Each outer iteration runs five blocks in order, every block on a fresh
mini-batch, updating only its own parameters:

  (1) encoder + utility decoder on prediction loss plus the weighted
      closed-form complexity penalty;
  (2) latent discriminator on posterior-vs-prior samples (weighted by the
      complexity weight);
  (3) encoder adversarially against the latent discriminator;
  (4) attribute discriminator on real labels vs decoded prior samples;
  (5) utility decoder adversarially against the attribute discriminator.

Batch-norm running statistics move only for the network a block trains and
never during the adversarial blocks (3) and (5), so prior-sampled batches
cannot pollute them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import no_grad
from .gaussian import PriorSpec, kl_to_standard_normal
from .layers import backward
from .models import (ModelBundle, build_bundle, decode_utility,
                     discriminate_attribute, discriminate_latent, encode,
                     one_hot, relaxed_attribute_sample, save_bundle,
                     utility_accuracy)
from .optim import adam_step

_PROB_EPS = 1e-12

HISTORY_COLUMNS = (
    "iter", "block1_loss", "block2_loss", "block3_loss", "block4_loss",
    "block5_loss", "util_acc_train", "util_acc_val", "util_acc_test",
    "kl_upper", "kl_correction",
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for one training run.

    ``lr`` drives blocks (2)-(5); block (1) defaults to five times that.
    The warm-up phase pre-trains the encoder and utility decoder together
    on the block-(1) loss before the alternating loop starts.
    """

    beta: float
    dz: int = 8
    arch: str = "desk-mlp"
    batch_size: int = 256
    max_iterations: int = 350
    lr: float = 5e-4
    block1_lr: float = None
    warmup_lr: float = 0.005
    warmup_iterations: int = 50
    warmup_batch: int = 1024
    warmup_beta: float = None          # None: use the main beta
    seed: int = 0
    use_batch_norm: bool = False
    eval_every: int = 25
    patience: int = 20
    checkpoint_every: int = 0          # 0: only the final checkpoint
    gumbel_temperature: float = 0.5
    sigma_offset: float = -2.0         # log-sigma head shift; start low-noise
    eval_probe_size: int = 2048
    eval_train_size: int = 4096

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.batch_size < 1 or self.warmup_batch < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.lr <= 0 or self.warmup_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.block1_lr is not None and self.block1_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.dz < 1:
            raise ValueError("latent dimension must be at least 1")

    @property
    def effective_block1_lr(self):
        return 5.0 * self.lr if self.block1_lr is None else self.block1_lr

    @property
    def effective_warmup_beta(self):
        return self.beta if self.warmup_beta is None else self.warmup_beta


TRAIN_PRESETS = {
    # reference hyper-parameters for the 28x28x3 colored-digit runs
    "mnist-ref": dict(arch="mnist-ref", use_batch_norm=True,
                      warmup_lr=0.005, warmup_iterations=50, warmup_batch=1024,
                      lr=0.0001, max_iterations=500, batch_size=2048),
    # reference hyper-parameters for the 64x64x3 attribute-pair runs
    "celeba-ref": dict(arch="celeba-ref", use_batch_norm=True,
                       warmup_lr=0.0005, warmup_iterations=100, warmup_batch=512,
                       lr=0.00001, max_iterations=500, batch_size=1024),
    # CPU-scale configuration used by tests and desk experiments; warm-up
    # runs without the complexity penalty so high-beta runs start from a
    # useful representation instead of a collapsed one
    "mnist-desk": dict(arch="desk-mlp", use_batch_norm=False,
                       warmup_lr=0.005, warmup_iterations=100, warmup_batch=512,
                       warmup_beta=0.0,
                       lr=5e-4, max_iterations=400, batch_size=256,
                       eval_every=25),
}


def preset_config(name, **overrides):
    if name not in TRAIN_PRESETS:
        raise ValueError(f"unknown training preset {name!r}; "
                         f"choose from {sorted(TRAIN_PRESETS)}")
    base = dict(TRAIN_PRESETS[name])
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainState:
    bundle: ModelBundle
    config: TrainConfig
    train_split: object
    val_split: object
    test_split: object
    prior: PriorSpec
    rngs: dict
    iteration: int = 0
    history: list = field(default_factory=list)
    block_losses: dict = field(default_factory=dict)
    floor_hits: int = 0
    _floor_warned: bool = False


def init_state(config, splits):
    train_split, val_split, test_split = splits
    ss = np.random.SeedSequence(config.seed)
    (s_bundle, s_warm_batch, s_warm_eps, s_batch, s_eps,
     s_prior, s_gumbel, s_eval) = ss.spawn(8)
    bundle = build_bundle(
        arch=config.arch, dz=config.dz, num_u=train_split.num_u,
        input_shape=train_split.image_shape, seed=s_bundle,
        use_batch_norm=config.use_batch_norm or None,
        sigma_offset=config.sigma_offset,
    )
    rngs = {
        "warm_batch": np.random.default_rng(s_warm_batch),
        "warm_eps": np.random.default_rng(s_warm_eps),
        "batch": np.random.default_rng(s_batch),
        "eps": np.random.default_rng(s_eps),
        "prior": np.random.default_rng(s_prior),
        "gumbel": np.random.default_rng(s_gumbel),
        "eval": np.random.default_rng(s_eval),
    }
    return TrainState(bundle, config, train_split, val_split, test_split,
                      PriorSpec(config.dz), rngs)


# ---------------------------------------------------------------------------
# losses


def _batch_features(ds, idx):
    return ds.images[idx].astype(np.float64) / 255.0


def nll_loss(probs, labels, floor=_PROB_EPS):
    """Mean negative log-likelihood with a probability floor.

    Returns (loss tensor, number of floored probabilities).
    """
    m, k = probs.data.shape
    targets = one_hot(labels, k)
    hits = int((probs.data[np.arange(m), np.asarray(labels)] < floor).sum())
    log_p = probs.clip(floor, 1.0).log()
    return -(log_p * targets).sum() * (1.0 / m), hits


def loss_block1(bundle, batch, beta, mode="train"):
    """Prediction loss plus beta times the mean closed-form complexity.

    ``batch`` is (x, u, eps).  At beta = 0 this is exactly the mean
    cross-entropy of the utility decoder.
    """
    x, u, eps = batch
    posterior, z = encode(bundle, x, eps, mode=mode)
    probs = decode_utility(bundle, z, mode=mode)
    nll, hits = nll_loss(probs, u)
    if beta == 0.0:
        return nll, hits
    kl = kl_to_standard_normal(posterior).mean()
    return nll + beta * kl, hits


def _clip_prob(p):
    return p.clip(_PROB_EPS, 1.0 - _PROB_EPS)


def _check_finite(loss, block, iteration):
    if not np.isfinite(loss.data).all():
        raise TrainingError(
            f"non-finite loss in block ({block}) at iteration {iteration}"
        )


# ---------------------------------------------------------------------------
# phases


def pretrain(bundle, train_split, config, rngs=None):
    """Warm up the encoder and utility decoder together on the block-(1) loss.

    Only the encoder and decoder parameters move; the discriminators are
    untouched.  Returns the bundle.
    """
    if rngs is None:
        ss = np.random.SeedSequence(config.seed)
        s_batch, s_eps = ss.spawn(8)[1:3]
        rngs = {"warm_batch": np.random.default_rng(s_batch),
                "warm_eps": np.random.default_rng(s_eps)}
    beta = config.effective_warmup_beta
    n = len(train_split)
    for it in range(config.warmup_iterations):
        idx = rngs["warm_batch"].integers(0, n, config.warmup_batch)
        x = _batch_features(train_split, idx)
        u = train_split.u[idx]
        eps = rngs["warm_eps"].standard_normal((config.warmup_batch, bundle.dz))
        bundle.zero_grads()
        loss, _ = loss_block1(bundle, (x, u, eps), beta)
        _check_finite(loss, "warm-up", it)
        for params in bundle.encoder_param_sets():
            adam_step(params, backward_params(loss, params), config.warmup_lr)
        adam_step(bundle.decoder.params,
                  backward_params(loss, bundle.decoder.params), config.warmup_lr)
    return bundle


def backward_params(loss, params):
    """Gradient map of ``loss`` for one parameter set (backward runs once)."""
    if loss.grad is None:
        loss.backward()
    return params.grad_map()


def train_iteration(state, probe=None):
    """One pass of blocks (1)-(5), each on a fresh mini-batch.

    Only the parameters a block names are updated inside it; everything
    else stays bit-identical.  ``probe(block_id, bundle)`` is called after
    each block when provided.
    """
    config = state.config
    bundle = state.bundle
    ds = state.train_split
    m = config.batch_size
    beta = config.beta
    dz = config.dz
    n = len(ds)
    rngs = state.rngs
    it = state.iteration
    losses = {}

    def fresh_xu():
        idx = rngs["batch"].integers(0, n, m)
        return _batch_features(ds, idx), ds.u[idx]

    # (1) encoder + utility decoder
    x, u = fresh_xu()
    eps = rngs["eps"].standard_normal((m, dz))
    bundle.zero_grads()
    loss1, hits = loss_block1(bundle, (x, u, eps), beta)
    _check_finite(loss1, 1, it)
    state.floor_hits += hits
    if hits and not state._floor_warned:
        warnings.warn("decoder probabilities hit the log floor; "
                      "continuing with clamped values")
        state._floor_warned = True
    for params in bundle.encoder_param_sets():
        adam_step(params, backward_params(loss1, params), config.effective_block1_lr)
    adam_step(bundle.decoder.params,
              backward_params(loss1, bundle.decoder.params),
              config.effective_block1_lr)
    losses["block1_loss"] = loss1.item()
    if probe:
        probe(1, bundle)

    # (2) latent discriminator
    x, _ = fresh_xu()
    eps = rngs["eps"].standard_normal((m, dz))
    with no_grad():
        _, z = encode(bundle, x, eps, mode="train-frozen-stats")
    z_prior = state.prior.sample(rngs["prior"], m)
    bundle.zero_grads()
    d_real = _clip_prob(discriminate_latent(bundle, z.data, mode="train"))
    d_fake = _clip_prob(discriminate_latent(bundle, z_prior, mode="train"))
    loss2 = (d_real.log() + (1.0 - d_fake).log()).sum() * (-beta / m)
    _check_finite(loss2, 2, it)
    if beta != 0.0:
        adam_step(bundle.latent_disc.params,
                  backward_params(loss2, bundle.latent_disc.params), config.lr)
    losses["block2_loss"] = loss2.item()
    if probe:
        probe(2, bundle)

    # (3) encoder adversarially
    x, _ = fresh_xu()
    eps = rngs["eps"].standard_normal((m, dz))
    bundle.zero_grads()
    _, z = encode(bundle, x, eps, mode="train-frozen-stats")
    d = _clip_prob(discriminate_latent(bundle, z, mode="train-frozen-stats"))
    loss3 = d.log().sum() * (beta / m)
    _check_finite(loss3, 3, it)
    if beta != 0.0:
        for params in bundle.encoder_param_sets():
            adam_step(params, backward_params(loss3, params), config.lr)
    losses["block3_loss"] = loss3.item()
    if probe:
        probe(3, bundle)

    # (4) attribute discriminator
    idx = rngs["batch"].integers(0, n, m)
    u_real = one_hot(ds.u[idx], bundle.num_u)
    z_prior = state.prior.sample(rngs["prior"], m)
    with no_grad():
        probs = decode_utility(bundle, z_prior, mode="train-frozen-stats")
        u_fake = relaxed_attribute_sample(probs, rngs["gumbel"],
                                          config.gumbel_temperature)
    bundle.zero_grads()
    d_real = _clip_prob(discriminate_attribute(bundle, u_real, mode="train"))
    d_fake = _clip_prob(discriminate_attribute(bundle, u_fake.data, mode="train"))
    loss4 = (d_real.log() + (1.0 - d_fake).log()).sum() * (-1.0 / m)
    _check_finite(loss4, 4, it)
    adam_step(bundle.attr_disc.params,
              backward_params(loss4, bundle.attr_disc.params), config.lr)
    losses["block4_loss"] = loss4.item()
    if probe:
        probe(4, bundle)

    # (5) utility decoder adversarially
    z_prior = state.prior.sample(rngs["prior"], m)
    bundle.zero_grads()
    probs = decode_utility(bundle, z_prior, mode="train-frozen-stats")
    u_fake = relaxed_attribute_sample(probs, rngs["gumbel"],
                                      config.gumbel_temperature)
    d_fake = _clip_prob(discriminate_attribute(bundle, u_fake,
                                               mode="train-frozen-stats"))
    loss5 = (1.0 - d_fake).log().sum() * (1.0 / m)
    _check_finite(loss5, 5, it)
    adam_step(bundle.decoder.params,
              backward_params(loss5, bundle.decoder.params), config.lr)
    losses["block5_loss"] = loss5.item()
    if probe:
        probe(5, bundle)

    state.block_losses = losses
    state.iteration += 1
    return state


# ---------------------------------------------------------------------------
# evaluation and the outer loop


def _complexity_probe(state):
    """Mean closed-form per-sample KL and the log-odds correction estimate."""
    from .leakage import density_ratio_kl, latent_discriminator_fn

    config = state.config
    ds = state.train_split
    k = min(config.eval_probe_size, len(ds))
    x = _batch_features(ds, np.arange(k))
    eps = state.rngs["eval"].standard_normal((k, config.dz))
    with no_grad():
        posterior, z = encode(state.bundle, x, eps, mode="eval")
        kl_upper = float(kl_to_standard_normal(posterior).mean().item())
    correction = density_ratio_kl(latent_discriminator_fn(state.bundle), z.data)
    return kl_upper, correction


def evaluate(state):
    config = state.config
    train_n = min(config.eval_train_size, len(state.train_split))
    row = {"iter": state.iteration}
    row.update({k: state.block_losses.get(k, float("nan"))
                for k in HISTORY_COLUMNS[1:6]})
    row["util_acc_train"] = utility_accuracy(
        state.bundle, state.train_split.subset(np.arange(train_n)))
    row["util_acc_val"] = utility_accuracy(state.bundle, state.val_split)
    row["util_acc_test"] = utility_accuracy(state.bundle, state.test_split)
    kl_upper, correction = _complexity_probe(state)
    row["kl_upper"] = kl_upper
    row["kl_correction"] = correction
    state.history.append(row)
    return row


def train(config, splits, out_dir=None, log=None):
    """Warm up, then alternate blocks until the budget or an accuracy plateau.

    ``splits`` is a (train, val, test) triple.  Returns (bundle, history);
    when ``out_dir`` is given, checkpoints land there as ``checkpoint.vlmb``
    (plus numbered intermediates if configured).
    """
    from pathlib import Path

    state = init_state(config, splits)
    pretrain(state.bundle, state.train_split, config,
             rngs={"warm_batch": state.rngs["warm_batch"],
                   "warm_eps": state.rngs["warm_eps"]})
    best_val = -np.inf
    evals_since_best = 0
    for _ in range(config.max_iterations):
        train_iteration(state)
        is_eval = (state.iteration % config.eval_every == 0
                   or state.iteration == config.max_iterations)
        if is_eval:
            row = evaluate(state)
            if log:
                log(row)
            if row["util_acc_val"] > best_val:
                best_val = row["util_acc_val"]
                evals_since_best = 0
            else:
                evals_since_best += 1
            if evals_since_best >= config.patience:
                break
        if (out_dir is not None and config.checkpoint_every
                and state.iteration % config.checkpoint_every == 0):
            save_bundle(state.bundle,
                        Path(out_dir) / f"checkpoint_{state.iteration:06d}.vlmb")
    if not state.history or state.history[-1]["iter"] != state.iteration:
        row = evaluate(state)
        if log:
            log(row)
    state.bundle.meta = {"beta": config.beta, "seed": config.seed,
                         "preset_arch": config.arch}
    if out_dir is not None:
        save_bundle(state.bundle, Path(out_dir) / "checkpoint.vlmb")
    return state.bundle, state.history


def write_history_csv(history, path):
    """Metric history as CSV with pinned columns; floats use repr."""
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        cells = []
        for col in HISTORY_COLUMNS:
            v = row[col]
            cells.append(str(int(v)) if col == "iter" else repr(float(v)))
        lines.append(",".join(cells))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_history_csv(path):
    import csv as _csv

    with open(path) as f:
        reader = _csv.DictReader(f)
        return [
            {k: (int(v) if k == "iter" else float(v)) for k, v in row.items()}
            for row in reader
        ]
