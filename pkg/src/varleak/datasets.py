"""Datasets: colored-digit generation, synthetic discrete sources, splits,
and the binary container format.

The colored-digit generator tints grayscale digits with a color drawn
i.i.d. from a configurable three-color distribution, independently of the
digit label.  The tint places the grayscale intensity in the drawn channel
and zeroes the others, so the color is perfectly recoverable from raw
pixels.  All per-example randomness is counter-based (a hash of
``(seed, example index, stream)``), so parallel and serial generation
produce bit-identical datasets.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _scipy_stats


class DatasetError(ValueError):
    """Invalid dataset contents or parameters."""


class ContainerError(ValueError):
    """Base class for container file problems."""


class UnrecognizedFormatError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class SplitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# counter-based randomness (parallel == serial, bit-exact)

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA1 = np.uint64(0x9E3779B97F4A7C15)
_GAMMA2 = np.uint64(0xD1B54A32D192ED03)


def counter_uniform(seed, index, stream=0):
    """Uniform [0,1) doubles keyed by (seed, example index, stream).

    Pure function of its arguments (splitmix64 finalizer), broadcast over
    ``index`` and ``stream`` arrays.
    """
    s = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        x = (
            s
            + (np.asarray(index, dtype=np.uint64) + np.uint64(1)) * _GAMMA1
            + (np.asarray(stream, dtype=np.uint64) + np.uint64(1)) * _GAMMA2
        )
        z = x
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


# ---------------------------------------------------------------------------
# core container types


@dataclass(frozen=True)
class ColorDistribution:
    """Probabilities of the red, green, and blue tints."""

    p_red: float
    p_green: float
    p_blue: float

    def __post_init__(self):
        probs = np.array([self.p_red, self.p_green, self.p_blue], dtype=np.float64)
        if np.any(probs < 0):
            raise DatasetError("color probabilities must be nonnegative")
        total = probs.sum()
        if abs(total - 1.0) > 1e-6:
            raise DatasetError(f"color probabilities sum to {total}, expected 1")
        probs = probs / total
        object.__setattr__(self, "p_red", float(probs[0]))
        object.__setattr__(self, "p_green", float(probs[1]))
        object.__setattr__(self, "p_blue", float(probs[2]))

    @property
    def probs(self):
        return np.array([self.p_red, self.p_green, self.p_blue])

    @classmethod
    def balanced(cls):
        return cls(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)

    @classmethod
    def biased(cls):
        return cls(1.0 / 2.0, 1.0 / 6.0, 1.0 / 3.0)


@dataclass
class LabeledDataset:
    """Images plus a utility label ``u`` and a sensitive label ``s`` each.

    Pixels are uint8 with shape (N, H, W, C); :meth:`features` rescales to
    float64 in [0, 1].
    """

    images: np.ndarray
    u: np.ndarray
    s: np.ndarray
    num_u: int
    num_s: int
    split: str = "all"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images)
        self.u = np.asarray(self.u, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)
        if self.images.dtype != np.uint8:
            raise DatasetError("pixels must be uint8")
        if self.images.ndim != 4:
            raise DatasetError("images must have shape (N, H, W, C)")
        n = self.images.shape[0]
        if self.u.shape != (n,) or self.s.shape != (n,):
            raise DatasetError("label arrays must have one entry per image")
        if self.num_u < 2 or self.num_s < 2:
            raise DatasetError("attribute alphabets need at least two symbols")
        if n and (self.u.min() < 0 or self.u.max() >= self.num_u):
            raise DatasetError("utility labels outside alphabet range")
        if n and (self.s.min() < 0 or self.s.max() >= self.num_s):
            raise DatasetError("sensitive labels outside alphabet range")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def features(self):
        return self.images.astype(np.float64) / 255.0

    def subset(self, indices, split=None):
        return LabeledDataset(
            self.images[indices], self.u[indices], self.s[indices],
            self.num_u, self.num_s, split or self.split,
        )

    def swap_roles(self):
        """Exchange the utility and sensitive attributes."""
        return LabeledDataset(self.images, self.s.copy(), self.u.copy(),
                              self.num_s, self.num_u, self.split)


# ---------------------------------------------------------------------------
# grayscale digit sources

# 5x7 pixel-font glyphs for the ten digits
_GLYPHS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
]

_GLYPH_SCALE = 3  # 5x7 font scaled to 15x21 on the 28x28 canvas


def _glyph_bitmaps():
    masks = np.zeros((10, 7 * _GLYPH_SCALE, 5 * _GLYPH_SCALE))
    for digit, rows in enumerate(_GLYPHS):
        bitmap = np.array([[c == "1" for c in row] for row in rows], dtype=np.float64)
        masks[digit] = np.kron(bitmap, np.ones((_GLYPH_SCALE, _GLYPH_SCALE)))
    return masks


def synthetic_digits(n, seed, chunk=8192):
    """Procedural stand-in for a handwritten-digit source.

    Renders pixel-font digits with per-example position jitter, brightness,
    and uniform pixel noise.  Returns (images uint8 (n, 28, 28), labels).
    Deterministic in (n, seed); draws are counter-based per index.
    """
    masks = _glyph_bitmaps()
    gh, gw = masks.shape[1:]
    images = np.empty((n, 28, 28), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    pixel_streams = 4 + np.arange(28 * 28)[None, :]
    rows = np.arange(gh)[None, :, None]
    cols = np.arange(gw)[None, None, :]
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        k = len(idx)
        lab = np.floor(counter_uniform(seed, idx, 0) * 10).astype(np.int64)
        off_x = np.floor(counter_uniform(seed, idx, 1) * (28 - gw + 1)).astype(np.int64)
        off_y = np.floor(counter_uniform(seed, idx, 2) * (28 - gh + 1)).astype(np.int64)
        brightness = 120.0 + counter_uniform(seed, idx, 3) * 135.0

        canvas = (counter_uniform(seed, idx[:, None], pixel_streams)
                  * 50.0 - 25.0).reshape(k, 28, 28)
        # per-image glyph placement; index triples are unique so += is safe
        canvas[np.arange(k)[:, None, None], off_y[:, None, None] + rows,
               off_x[:, None, None] + cols] += masks[lab] * brightness[:, None, None]
        images[idx] = np.clip(canvas, 0.0, 255.0).astype(np.uint8)
        labels[idx] = lab
    return images, labels


def load_idx_images(path):
    """Read an IDX image file (the standard handwritten-digit format)."""
    data = _read_maybe_gzip(path)
    if len(data) < 16:
        raise UnrecognizedFormatError(f"{path}: too short for an IDX image file")
    magic, count, h, w = struct.unpack(">IIII", data[:16])
    if magic != 0x00000803:
        raise UnrecognizedFormatError(f"{path}: bad IDX image magic {magic:#x}")
    expected = 16 + count * h * w
    if len(data) < expected:
        raise TruncatedContainerError(f"{path}: truncated IDX image file")
    return np.frombuffer(data, dtype=np.uint8, count=count * h * w, offset=16).reshape(
        count, h, w
    )


def load_idx_labels(path):
    data = _read_maybe_gzip(path)
    if len(data) < 8:
        raise UnrecognizedFormatError(f"{path}: too short for an IDX label file")
    magic, count = struct.unpack(">II", data[:8])
    if magic != 0x00000801:
        raise UnrecognizedFormatError(f"{path}: bad IDX label magic {magic:#x}")
    if len(data) < 8 + count:
        raise TruncatedContainerError(f"{path}: truncated IDX label file")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def _read_maybe_gzip(path):
    path = str(path)
    if path.endswith(".gz"):
        with gzip.open(path, "rb") as f:
            return f.read()
    with open(path, "rb") as f:
        return f.read()


# ---------------------------------------------------------------------------
# colored digit generation


def generate_colored_mnist(gray_images, digit_labels, dist, seed,
                           utility="digit", split="all"):
    """Tint grayscale digits with colors drawn i.i.d. from ``dist``.

    ``utility`` selects the role assignment: "digit" makes the digit the
    utility label and the color the sensitive one; "color" swaps them.
    """
    gray_images = np.asarray(gray_images)
    digit_labels = np.asarray(digit_labels, dtype=np.int64)
    if gray_images.ndim != 3 or gray_images.dtype != np.uint8:
        raise DatasetError("digit source must be uint8 with shape (N, H, W)")
    if digit_labels.shape != gray_images.shape[:1]:
        raise DatasetError("digit source labels do not match image count")
    if utility not in ("digit", "color"):
        raise DatasetError(f"unknown utility role {utility!r}")
    n, h, w = gray_images.shape
    cum = np.cumsum(dist.probs)
    draws = counter_uniform(seed, np.arange(n), 10)
    colors = np.searchsorted(cum, draws, side="right").astype(np.int64)
    colors = np.minimum(colors, 2)  # guard the u == 1.0-boundary edge

    images = np.zeros((n, h, w, 3), dtype=np.uint8)
    for c in range(3):
        sel = colors == c
        images[sel, :, :, c] = gray_images[sel]

    if utility == "digit":
        return LabeledDataset(images, digit_labels, colors, 10, 3, split)
    return LabeledDataset(images, colors, digit_labels, 3, 10, split)


def color_marginals(ds):
    """Empirical frequency of each color (the 3-symbol attribute)."""
    labels = ds.s if ds.num_s == 3 else ds.u
    return np.bincount(labels, minlength=3) / len(ds)


def label_independence_test(ds, quantile=0.999):
    """Chi-square independence check between the u and s labels.

    Returns (statistic, dof, threshold, passed); ``passed`` means the
    statistic stays below the requested chi-square quantile, i.e. the two
    labels look independent.
    """
    table = np.zeros((ds.num_u, ds.num_s))
    np.add.at(table, (ds.u, ds.s), 1.0)
    n = table.sum()
    expected = table.sum(axis=1, keepdims=True) * table.sum(axis=0, keepdims=True) / n
    mask = expected > 0
    statistic = float((((table - expected) ** 2)[mask] / expected[mask]).sum())
    dof = (ds.num_u - 1) * (ds.num_s - 1)
    threshold = float(_scipy_stats.chi2.ppf(quantile, dof))
    return statistic, dof, threshold, statistic < threshold


# ---------------------------------------------------------------------------
# synthetic discrete joints (exactly computable information quantities)


@dataclass
class DiscreteJoint:
    """A normalized probability table over small finite alphabets."""

    table: np.ndarray
    axis_names: tuple = ("s", "u", "x")
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if np.any(self.table < 0):
            raise DatasetError("joint table has negative entries")
        if self.table.ndim != len(self.axis_names):
            raise DatasetError("axis_names must name every table axis")
        if any(n > 64 for n in self.table.shape):
            raise DatasetError("alphabet sizes above 64 are not supported")
        total = self.table.sum()
        if total <= 0:
            raise DatasetError("joint table sums to zero")
        self.table = self.table / total
        self._rng = np.random.default_rng(self.seed)

    def axis(self, name):
        try:
            return self.axis_names.index(name)
        except ValueError:
            raise DatasetError(f"no axis named {name!r}") from None

    def marginal(self, *names):
        keep = tuple(self.axis(n) for n in names)
        drop = tuple(i for i in range(self.table.ndim) if i not in keep)
        out = self.table.sum(axis=drop) if drop else self.table
        # out's axes follow the original order; permute into request order
        remaining = sorted(keep)
        return np.transpose(out, [remaining.index(k) for k in keep])

    def sample(self, n, rng=None):
        """Draw n i.i.d. tuples; returns one int array per axis."""
        rng = self._rng if rng is None else rng
        flat = rng.choice(self.table.size, size=n, p=self.table.reshape(-1))
        return np.unravel_index(flat, self.table.shape)


def synth_discrete_joint(spec, axis_names=("s", "u", "x"), seed=0):
    """Build a DiscreteJoint from an explicit table or a random one.

    ``spec`` is either a probability table or a shape tuple, in which case
    a Dirichlet(1) random table of that shape is drawn from ``seed``.
    """
    if isinstance(spec, tuple) and all(isinstance(k, int) for k in spec):
        rng = np.random.default_rng(seed)
        table = rng.dirichlet(np.ones(int(np.prod(spec)))).reshape(spec)
    else:
        table = np.asarray(spec, dtype=np.float64)
    return DiscreteJoint(table, axis_names=axis_names, seed=seed)


# ---------------------------------------------------------------------------
# splits


def _largest_remainder(total, fractions):
    raw = np.asarray(fractions, dtype=np.float64) * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def split(ds, fractions, seed):
    """Stratified (train, val, test) partition of a dataset.

    Disjoint, exhaustive, deterministic in ``seed``; stratification on the
    (u, s) label pair keeps each split's label marginals close to the
    whole dataset's.  Split sizes equal the largest-remainder rounding of
    ``fractions * len(ds)`` exactly.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,):
        raise SplitError("expected exactly three fractions (train, val, test)")
    if np.any(fr <= 0):
        raise SplitError("fractions must all be positive; empty splits are not allowed")
    if abs(fr.sum() - 1.0) > 1e-9:
        raise SplitError(f"fractions sum to {fr.sum()}, expected 1")
    n = len(ds)
    if n < 3:
        raise SplitError("dataset too small to split three ways")

    rng = np.random.default_rng(seed)
    targets = _largest_remainder(n, fr)

    pair = ds.u * ds.num_s + ds.s
    group_keys = np.unique(pair)
    groups = {}
    quotas = {}
    for key in group_keys:
        idx = np.flatnonzero(pair == key)
        rng.shuffle(idx)
        groups[key] = idx
        quotas[key] = _largest_remainder(len(idx), fr)

    totals = np.sum(list(quotas.values()), axis=0)
    cursor = 0
    while not np.array_equal(totals, targets):
        over = int(np.argmax(totals - targets))
        under = int(np.argmin(totals - targets))
        for _ in range(len(group_keys)):
            key = group_keys[cursor % len(group_keys)]
            cursor += 1
            if quotas[key][over] > 0:
                quotas[key][over] -= 1
                quotas[key][under] += 1
                totals[over] -= 1
                totals[under] += 1
                break

    parts = ([], [], [])
    for key in group_keys:
        idx = groups[key]
        q = quotas[key]
        parts[0].append(idx[: q[0]])
        parts[1].append(idx[q[0] : q[0] + q[1]])
        parts[2].append(idx[q[0] + q[1] :])
    names = ("train", "val", "test")
    return tuple(
        ds.subset(np.sort(np.concatenate(p)), split=name)
        for p, name in zip(parts, names)
    )


# ---------------------------------------------------------------------------
# container format

_MAGIC = b"VLDS"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIII")  # magic, version, count, H, W, C, |U|, |S|


def save_dataset(ds, path):
    """Write the little-endian binary container (lossless round trip)."""
    n, h, w, c = ds.images.shape
    if ds.num_u > 255 or ds.num_s > 255:
        raise DatasetError("container stores labels as single bytes")
    record = np.dtype(
        [("px", np.uint8, (h * w * c,)), ("u", np.uint8), ("s", np.uint8)]
    )
    body = np.empty(n, dtype=record)
    body["px"] = ds.images.reshape(n, -1)
    body["u"] = ds.u.astype(np.uint8)
    body["s"] = ds.s.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, n, h, w, c, ds.num_u, ds.num_s))
        f.write(body.tobytes())


def load_dataset(path, split="all"):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise TruncatedContainerError(f"{path}: truncated container (no header)")
    magic, version, n, h, w, c, num_u, num_s = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise UnrecognizedFormatError(f"{path}: unrecognized format (magic {magic!r})")
    if version != _VERSION:
        raise VersionMismatchError(
            f"{path}: container version {version}, this build reads {_VERSION}"
        )
    record = np.dtype(
        [("px", np.uint8, (h * w * c,)), ("u", np.uint8), ("s", np.uint8)]
    )
    expected = _HEADER.size + n * record.itemsize
    if len(raw) < expected:
        raise TruncatedContainerError(
            f"{path}: truncated container ({len(raw)} bytes, expected {expected})"
        )
    body = np.frombuffer(raw, dtype=record, count=n, offset=_HEADER.size)
    images = body["px"].reshape(n, h, w, c).copy()
    return LabeledDataset(images, body["u"].astype(np.int64),
                          body["s"].astype(np.int64), num_u, num_s, split)


# ---------------------------------------------------------------------------
# generic image-directory ingestion (attribute-pair datasets)


def ingest_image_directory(csv_path, root=None, size=(64, 64),
                           num_u=None, num_s=None, split="all"):
    """Load an attribute dataset from a CSV label table (`path,u,s`).

    Each referenced image file is read, converted to RGB, and resized to
    ``size``.  Alphabet sizes default to max label + 1.
    """
    from pathlib import Path

    from PIL import Image

    csv_path = Path(csv_path)
    base = Path(root) if root is not None else csv_path.parent
    rows = []
    with open(csv_path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"path", "u", "s"} <= set(reader.fieldnames):
            raise DatasetError(f"{csv_path}: label table needs columns path,u,s")
        for row in reader:
            rows.append((row["path"], int(row["u"]), int(row["s"])))
    if not rows:
        raise DatasetError(f"{csv_path}: empty label table")

    images = np.empty((len(rows), size[0], size[1], 3), dtype=np.uint8)
    u = np.empty(len(rows), dtype=np.int64)
    s = np.empty(len(rows), dtype=np.int64)
    for i, (rel, ui, si) in enumerate(rows):
        with Image.open(base / rel) as img:
            img = img.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
            images[i] = np.asarray(img, dtype=np.uint8)
        u[i] = ui
        s[i] = si
    return LabeledDataset(
        images, u, s,
        num_u if num_u is not None else int(u.max()) + 1,
        num_s if num_s is not None else int(s.max()) + 1,
        split,
    )
