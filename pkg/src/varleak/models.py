"""Network definitions: encoder with Gaussian heads, utility decoder,
latent and attribute discriminators, adversary, and the MI statistic net.

Reference stacks are exposed as named presets; ``desk-mlp`` is the small
CPU-friendly default used by tests and desk-scale experiments, keeping the
reference encoder's tail structure (wide affine, tanh, twin heads) without
convolutions or batch norm.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor
from .gaussian import (DiagonalGaussian, LOG_SIGMA_MAX, LOG_SIGMA_MIN,
                       reparam_sample)
from .layers import (ConfigError, Network, affine, batch_norm, conv2d,
                     flatten, leaky_relu, sigmoid, softmax, tanh, elu)

ARCH_PRESETS = ("desk-mlp", "mnist-ref", "celeba-ref")


def _with_bn(specs, use_bn):
    return specs if use_bn else [s for s in specs if s.kind != "batch-norm"]


def arch_preset(name, dz, num_u, use_batch_norm=None):
    """Layer stacks for one preset; returns a dict of spec lists."""
    if name == "desk-mlp":
        bn = False if use_batch_norm is None else use_batch_norm
        stacks = {
            "trunk": [flatten(), affine(256), leaky_relu(), affine(4 * dz), tanh()],
            "decoder": [affine(4 * dz), leaky_relu(), affine(num_u), softmax()],
            "latent_disc": [affine(128), leaky_relu(), affine(64), leaky_relu(),
                            affine(1), sigmoid()],
            "attr_disc": [affine(64), leaky_relu(), affine(64), leaky_relu(),
                          affine(1), sigmoid()],
        }
        if bn:
            raise ConfigError("desk-mlp has no batch-norm variant")
        return stacks
    if name == "mnist-ref":
        bn = True if use_batch_norm is None else use_batch_norm
        return {
            "trunk": _with_bn(
                [conv2d(64, 5, 2), batch_norm(), leaky_relu(),
                 conv2d(128, 5, 2), batch_norm(), leaky_relu(),
                 flatten(),
                 affine(4 * dz), batch_norm(), tanh()], bn),
            "decoder": _with_bn(
                [affine(4 * dz), batch_norm(), leaky_relu(),
                 affine(num_u), softmax()], bn),
            "latent_disc": _with_bn(
                [affine(512), batch_norm(), leaky_relu(),
                 affine(256), batch_norm(), leaky_relu(),
                 affine(1), sigmoid()], bn),
            "attr_disc": _with_bn(
                [affine(8 * num_u), batch_norm(), leaky_relu(),
                 affine(8 * num_u), batch_norm(), leaky_relu(),
                 affine(1), sigmoid()], bn),
        }
    if name == "celeba-ref":
        bn = True if use_batch_norm is None else use_batch_norm
        trunk = []
        for ch in (16, 32, 64, 128, 256):
            trunk += [conv2d(ch, 3, 2), batch_norm(), leaky_relu()]
        trunk += [flatten(), affine(4 * dz), batch_norm(), tanh()]
        return {
            "trunk": _with_bn(trunk, bn),
            "decoder": _with_bn(
                [affine(dz), batch_norm(), leaky_relu(),
                 affine(num_u), softmax()], bn),
            "latent_disc": _with_bn(
                [affine(512), batch_norm(), leaky_relu(),
                 affine(256), batch_norm(), leaky_relu(),
                 affine(1), sigmoid()], bn),
            "attr_disc": _with_bn(
                [affine(4 * num_u), batch_norm(), leaky_relu(),
                 affine(num_u), batch_norm(), leaky_relu(),
                 affine(1), sigmoid()], bn),
        }
    raise ConfigError(f"unknown architecture preset {name!r}")


def mine_statistic_specs():
    """Statistic-network stack: three 100-unit ELU layers then a scalar."""
    return [affine(100), elu(), affine(100), elu(), affine(100), elu(), affine(1)]


def adversary_specs(num_s, hidden=(64, 64)):
    specs = []
    for h in hidden:
        specs += [affine(h), leaky_relu()]
    specs += [affine(num_s), softmax()]
    return specs


@dataclass
class ModelBundle:
    """All data-owner networks plus the latent dimension."""

    arch: str
    dz: int
    num_u: int
    input_shape: tuple
    use_batch_norm: bool
    trunk: Network
    mu_head: Network
    logsig_head: Network
    decoder: Network
    latent_disc: Network
    attr_disc: Network
    sigma_offset: float = 0.0
    meta: dict = field(default_factory=dict)

    def networks(self):
        return {
            "trunk": self.trunk,
            "mu_head": self.mu_head,
            "logsig_head": self.logsig_head,
            "decoder": self.decoder,
            "latent_disc": self.latent_disc,
            "attr_disc": self.attr_disc,
        }

    def encoder_param_sets(self):
        return [self.trunk.params, self.mu_head.params, self.logsig_head.params]

    def zero_grads(self):
        for net in self.networks().values():
            net.params.zero_grads()


def build_bundle(arch="desk-mlp", dz=8, num_u=10, input_shape=(28, 28, 3),
                 seed=0, use_batch_norm=None, zero_init_heads=False,
                 sigma_offset=0.0):
    """Construct a bundle with fan-in-scaled uniform weights (biases zero).

    With ``zero_init_heads`` the mu / log-sigma heads start at zero instead,
    which places the posterior exactly on the standard-normal prior and
    makes the complexity penalty start at zero.  ``sigma_offset`` shifts the
    log-sigma head's output, so a negative value starts the encoder nearly
    deterministic and lets training raise the noise scale where the
    complexity penalty wants it.
    """
    stacks = arch_preset(arch, dz, num_u, use_batch_norm)
    entropy = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = entropy.spawn(6)
    rngs = [np.random.default_rng(s) for s in streams]
    trunk = Network(stacks["trunk"], input_shape, rng=rngs[0], name="trunk")
    head_in = trunk.output_shape
    mu_head = Network([affine(dz)], head_in, rng=rngs[4],
                      zero_init=zero_init_heads, name="mu_head")
    logsig_head = Network([affine(dz)], head_in, rng=rngs[5],
                          zero_init=zero_init_heads, name="logsig_head")
    decoder = Network(stacks["decoder"], (dz,), rng=rngs[1], name="decoder")
    latent_disc = Network(stacks["latent_disc"], (dz,), rng=rngs[2], name="latent_disc")
    attr_disc = Network(stacks["attr_disc"], (num_u,), rng=rngs[3], name="attr_disc")
    return ModelBundle(
        arch, dz, num_u, tuple(input_shape),
        bool(use_batch_norm) if use_batch_norm is not None
        else any(s.kind == "batch-norm" for s in stacks["trunk"]),
        trunk, mu_head, logsig_head, decoder, latent_disc, attr_disc,
        sigma_offset=float(sigma_offset),
    )


@dataclass
class AdversaryModel:
    """Inference network mapping a released latent to attribute probabilities."""

    num_s: int
    net: Network

    def predict_probs(self, z):
        return self.net.forward(z, mode="eval").data


def _seed_rng(seed):
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed))


def build_adversary(dz, num_s, seed=0, hidden=(64, 64)):
    return AdversaryModel(num_s, Network(adversary_specs(num_s, hidden), (dz,),
                                         rng=_seed_rng(seed), name="adversary"))


@dataclass
class MineNet:
    """Statistic network T(z, a) -> R over concatenated inputs."""

    dz: int
    da: int
    net: Network


def build_mine_net(dz, da, seed=0):
    return MineNet(dz, da, Network(mine_statistic_specs(), (dz + da,),
                                   rng=_seed_rng(seed), name="mine"))


# ---------------------------------------------------------------------------
# forward surfaces


def encode(bundle, x, eps, mode="train"):
    """Posterior parameters and a reparameterized sample for a batch.

    ``eps`` is the standard-normal draw, shape (batch, dz); pass zeros for a
    deterministic mean encoding.  Returns (DiagonalGaussian, z).
    """
    h = bundle.trunk.forward(x, mode)
    mu = bundle.mu_head.forward(h, mode)
    logsig = (bundle.logsig_head.forward(h, mode) + bundle.sigma_offset).clip(
        LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    posterior = DiagonalGaussian(mu, logsig.exp())
    z = reparam_sample(posterior, np.asarray(eps, dtype=np.float64))
    return posterior, z


def decode_utility(bundle, z, mode="eval"):
    """Utility-attribute probabilities for latent codes (rows sum to 1)."""
    return bundle.decoder.forward(z, mode)


def discriminate_latent(bundle, z, mode="eval"):
    """P(code came from the encoder rather than the prior), in (0, 1)."""
    out = bundle.latent_disc.forward(z, mode)
    return out.reshape(out.data.shape[0])


def discriminate_attribute(bundle, u_vec, mode="eval"):
    """P(attribute vector is a real label rather than a decoded one)."""
    out = bundle.attr_disc.forward(u_vec, mode)
    return out.reshape(out.data.shape[0])


def one_hot(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], k), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def relaxed_attribute_sample(probs, rng, temperature=0.5):
    """Temperature-relaxed categorical sample from decoder probabilities.

    Gumbel-softmax: keeps block-(5) differentiable through the decoder while
    approaching a hard categorical draw as the temperature drops.
    """
    probs = as_tensor(probs)
    v = rng.uniform(1e-12, 1.0, size=probs.data.shape)
    gumbel = -np.log(-np.log(v))
    logits = probs.clip(1e-12, 1.0).log() + Tensor(gumbel)
    return (logits * (1.0 / temperature)).softmax(axis=-1)


def utility_accuracy(bundle, dataset, batch=4096):
    """Mean accuracy of the decoder on mean-encoded latents.

    Ties in the argmax resolve to the lowest class index.
    """
    correct = 0
    for start in range(0, len(dataset), batch):
        xs = dataset.images[start : start + batch].astype(np.float64) / 255.0
        _, z = encode(bundle, xs, np.zeros((xs.shape[0], bundle.dz)), mode="eval")
        probs = decode_utility(bundle, z.data, mode="eval").data
        correct += int((np.argmax(probs, axis=1)
                        == dataset.u[start : start + batch]).sum())
    return correct / len(dataset)


# ---------------------------------------------------------------------------
# checkpoint container

_CKPT_MAGIC = b"VLMB"
_CKPT_VERSION = 1


def _pack_blob(name, arr):
    name_b = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


class _BlobReader:
    def __init__(self, raw, offset, path):
        self.raw = raw
        self.pos = offset
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def read_blob(self):
        (name_len,) = struct.unpack("<H", self.take(2))
        name = self.take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", self.take(1))
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return name, data.astype(np.float64)


class CheckpointError(ValueError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def save_bundle(bundle, path):
    descriptor = {
        "arch": bundle.arch,
        "dz": bundle.dz,
        "num_u": bundle.num_u,
        "input_shape": list(bundle.input_shape),
        "use_batch_norm": bundle.use_batch_norm,
        "sigma_offset": bundle.sigma_offset,
        "meta": bundle.meta,
    }
    desc = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = []
    for net_name, net in bundle.networks().items():
        for pname, p in net.params.items():
            blobs.append(_pack_blob(f"{net_name}/{pname}", p.data))
        for bname, b in net.buffers.items():
            blobs.append(_pack_blob(f"{net_name}/buffers/{bname}", b))
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(struct.pack("<I", len(blobs)))
        for blob in blobs:
            f.write(blob)


def load_bundle(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: unrecognized checkpoint format")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} unsupported")
    (desc_len,) = struct.unpack("<I", raw[8:12])
    descriptor = json.loads(raw[12 : 12 + desc_len].decode("utf-8"))
    reader = _BlobReader(raw, 12 + desc_len, path)
    (n_blobs,) = struct.unpack("<I", reader.take(4))

    bundle = build_bundle(
        arch=descriptor["arch"], dz=descriptor["dz"], num_u=descriptor["num_u"],
        input_shape=tuple(descriptor["input_shape"]),
        use_batch_norm=descriptor["use_batch_norm"], seed=0,
        sigma_offset=descriptor.get("sigma_offset", 0.0),
    )
    bundle.meta = descriptor.get("meta", {})
    nets = bundle.networks()
    for _ in range(n_blobs):
        name, data = reader.read_blob()
        net_name, rest = name.split("/", 1)
        net = nets[net_name]
        if rest.startswith("buffers/"):
            key = rest[len("buffers/"):]
            if net.buffers[key].shape != data.shape:
                raise CheckpointError(f"{path}: buffer shape mismatch for {name}")
            net.buffers[key] = data
        else:
            if rest not in net.params:
                raise CheckpointError(f"{path}: unknown parameter {name}")
            p = net.params[rest]
            if p.data.shape != data.shape:
                raise CheckpointError(f"{path}: parameter shape mismatch for {name}")
            p.data = data.copy()
    return bundle
