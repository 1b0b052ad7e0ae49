"""Experiment orchestration: single runs, resumable sweeps over the
complexity-weight and latent-dimension grids, and plot-ready trend tables.

Records are newline-delimited JSON, one experiment per line, keyed by a
hash of every field that affects the result (so reruns skip completed
points and identical configs imply identical records).
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import (ColorDistribution, generate_colored_mnist,
                       load_dataset, split, synthetic_digits)
from .leakage import AttackConfig, complexity_estimate, mine_estimate, train_adversary
from .models import save_bundle
from .training import TrainConfig, preset_config, train, write_history_csv

SCHEMA_VERSION = 1


class SweepSpecError(ValueError):
    pass


@dataclass
class ExperimentRecord:
    """One sweep point: training, attack, and estimation results."""

    config_hash: str
    beta: float
    dz: int
    seed: int
    status: str = "ok"
    util_acc_train: float = float("nan")
    util_acc_val: float = float("nan")
    util_acc_test: float = float("nan")
    adv_acc: dict = field(default_factory=dict)      # data-ratio -> accuracy
    adv_xent: dict = field(default_factory=dict)
    mi_sz_mine: float = float("nan")
    mi_uz_mine: float = float("nan")
    kl_upper: float = float("nan")
    kl_correction: float = float("nan")
    kl_corrected: float = float("nan")
    wall_time: float = 0.0
    error: str = ""

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


@dataclass
class SweepSpec:
    """Grid definition for a sweep; loadable from a versioned JSON file."""

    betas: list
    dz_list: list
    seeds: list
    output_dir: str
    data_ratios: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    dataset: dict = field(default_factory=lambda: {
        "source": "synthetic", "count": 70000, "data_seed": 123,
        "colors": [1 / 3, 1 / 3, 1 / 3], "utility": "digit", "color_seed": 7,
    })
    subset: int = 10000
    preset: str = "mnist-desk"
    overrides: dict = field(default_factory=dict)
    split_fractions: tuple = (0.8, 0.1, 0.1)
    mine_steps: int = 2000
    mine_samples: int = 8000
    attack_epochs: int = 30

    def __post_init__(self):
        if not self.betas or not self.dz_list or not self.seeds:
            raise SweepSpecError("beta, dz, and seed grids must be non-empty")
        for b in self.betas:
            if not 0.0 <= b <= 1.0:
                raise SweepSpecError(f"beta {b} outside [0, 1]")
        if not self.data_ratios:
            raise SweepSpecError("data-ratio grid must be non-empty")

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            raw = json.load(f)
        version = raw.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise SweepSpecError(
                f"{path}: schema_version {version!r}, expected {SCHEMA_VERSION}"
            )
        known = {f_.name for f_ in cls.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise SweepSpecError(f"{path}: unknown fields {sorted(unknown)}")
        if "split_fractions" in raw:
            raw["split_fractions"] = tuple(raw["split_fractions"])
        return cls(**raw)

    def to_file(self, path):
        payload = {"schema_version": SCHEMA_VERSION, **asdict(self)}
        payload["split_fractions"] = list(self.split_fractions)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def config_hash(payload):
    """Stable hash of a JSON-serializable config description."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _point_payload(spec, beta, dz, seed):
    cfg = preset_config(spec.preset, beta=beta, dz=dz, seed=seed,
                        **spec.overrides)
    return {
        "schema_version": SCHEMA_VERSION,
        "train_config": asdict(cfg),
        "dataset": spec.dataset,
        "subset": spec.subset,
        "split_fractions": list(spec.split_fractions),
        "data_ratios": list(spec.data_ratios),
        "mine_steps": spec.mine_steps,
        "mine_samples": spec.mine_samples,
        "attack_epochs": spec.attack_epochs,
        "seed": seed,
    }


def materialize_dataset(dataset_spec):
    """Load or generate the dataset a spec refers to."""
    if "path" in dataset_spec:
        return load_dataset(dataset_spec["path"])
    if dataset_spec.get("source") != "synthetic":
        raise SweepSpecError(f"unsupported dataset spec {dataset_spec!r}")
    gray, labels = synthetic_digits(dataset_spec.get("count", 70000),
                                    dataset_spec.get("data_seed", 123))
    colors = dataset_spec.get("colors", [1 / 3, 1 / 3, 1 / 3])
    ds = generate_colored_mnist(
        gray, labels, ColorDistribution(*colors),
        seed=dataset_spec.get("color_seed", 7),
        utility=dataset_spec.get("utility", "digit"),
    )
    return ds


def subset_dataset(ds, subset, seed):
    if subset and subset < len(ds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        return ds.subset(np.sort(rng.permutation(len(ds))[:subset]))
    return ds


def run_point(spec, ds, beta, dz, seed, out_dir=None):
    """Train, attack, and estimate one grid point; returns a record."""
    payload = _point_payload(spec, beta, dz, seed)
    h = config_hash(payload)
    record = ExperimentRecord(h, beta, dz, seed)
    started = time.time()
    try:
        ss = np.random.SeedSequence([seed, 0xA]).spawn(4)
        work = subset_dataset(ds, spec.subset, seed)
        splits = split(work, spec.split_fractions, seed=seed)
        cfg = preset_config(spec.preset, beta=beta, dz=dz, seed=seed,
                            **spec.overrides)
        bundle, history = train(cfg, splits)
        last = history[-1]
        record.util_acc_train = last["util_acc_train"]
        record.util_acc_val = last["util_acc_val"]
        record.util_acc_test = last["util_acc_test"]

        for ratio in spec.data_ratios:
            attack_cfg = AttackConfig(
                data_ratio=ratio, seed=int(ss[0].generate_state(1)[0] % 2**31),
                epochs=spec.attack_epochs,
            )
            _, acc, xent = train_adversary(bundle, splits[0], splits[2], attack_cfg)
            record.adv_acc[str(ratio)] = acc
            record.adv_xent[str(ratio)] = xent

        if spec.mine_steps > 0:
            z, s_lab, u_lab = _mine_pairs(bundle, splits[0], spec.mine_samples,
                                          np.random.default_rng(ss[1]))
            record.mi_sz_mine = mine_estimate(
                z, s_lab, steps=spec.mine_steps,
                seed=int(ss[2].generate_state(1)[0] % 2**31)).value
            record.mi_uz_mine = mine_estimate(
                z, u_lab, steps=spec.mine_steps,
                seed=int(ss[3].generate_state(1)[0] % 2**31)).value

        comp = complexity_estimate(bundle, splits[0], seed=seed)
        record.kl_upper = comp.kl_upper
        record.kl_correction = comp.correction
        record.kl_corrected = comp.corrected

        if out_dir is not None:
            point_dir = Path(out_dir) / f"point_{h}"
            point_dir.mkdir(parents=True, exist_ok=True)
            save_bundle(bundle, point_dir / "checkpoint.vlmb")
            write_history_csv(history, point_dir / "metrics.csv")
    except Exception as exc:  # failed points are recorded, sweep continues
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
    record.wall_time = time.time() - started
    return record


def _mine_pairs(bundle, ds, n, rng):
    from .leakage import _encode_moments

    n = min(n, len(ds))
    idx = rng.permutation(len(ds))[:n]
    mu, sigma = _encode_moments(bundle, ds, idx)
    z = mu + sigma * rng.standard_normal(mu.shape)
    return z, ds.s[idx], ds.u[idx]


def append_record(path, record):
    """Append one NDJSON line under an advisory lock."""
    with open(path, "a") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            f.write(record.to_json() + "\n")
            f.flush()
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def read_records(path):
    records = []
    if not Path(path).exists():
        return records
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(ExperimentRecord.from_json(line))
            except (json.JSONDecodeError, TypeError):
                continue  # a torn final line from a killed run
    return records


def sweep_points(spec):
    return [(beta, dz, seed) for beta in spec.betas for dz in spec.dz_list
            for seed in spec.seeds]


def run_sweep(spec, log=None):
    """Run every missing grid point; returns the full record list.

    Completed points (status "ok") are skipped on rerun.  Worker count is
    capped by the VARLEAK_THREADS environment variable (default 1).
    """
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "records.ndjson"
    done = {r.config_hash for r in read_records(records_path) if r.status == "ok"}

    pending = []
    for beta, dz, seed in sweep_points(spec):
        h = config_hash(_point_payload(spec, beta, dz, seed))
        if h not in done:
            pending.append((beta, dz, seed))

    workers = max(1, int(os.environ.get("VARLEAK_THREADS", "1")))
    if pending:
        ds = materialize_dataset(spec.dataset)
        if workers == 1 or len(pending) == 1:
            for beta, dz, seed in pending:
                record = run_point(spec, ds, beta, dz, seed, out_dir)
                append_record(records_path, record)
                if log:
                    log(record)
        else:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=min(workers, len(pending))) as ex:
                futures = [ex.submit(run_point, spec, ds, beta, dz, seed, out_dir)
                           for beta, dz, seed in pending]
                for fut in futures:
                    record = fut.result()
                    append_record(records_path, record)
                    if log:
                        log(record)

    write_trend_csvs(records_path, out_dir, spec)
    return read_records(records_path)


def write_trend_csvs(records_path, out_dir, spec=None):
    """Plot-ready tables: one CSV per latent dimension, x = beta, medians
    over seeds, one adversary-accuracy column per data ratio."""
    records = [r for r in read_records(records_path) if r.status == "ok"]
    out_dir = Path(out_dir)
    written = []
    by_dz = {}
    for r in records:
        by_dz.setdefault(r.dz, []).append(r)
    for dz, recs in sorted(by_dz.items()):
        ratios = sorted({ratio for r in recs for ratio in r.adv_acc},
                        key=float)
        header = (["beta", "util_acc_train", "util_acc_val", "util_acc_test"]
                  + [f"adv_acc_ratio_{ratio}" for ratio in ratios]
                  + ["mi_sz_mine", "mi_uz_mine",
                     "kl_upper", "kl_correction", "kl_corrected"])
        groups = {}
        for r in recs:
            groups.setdefault(r.beta, []).append(r)
        lines = [",".join(header)]
        for beta in sorted(groups):
            g = groups[beta]
            med = lambda vals: float(np.median([v for v in vals]))
            row = [repr(beta),
                   repr(med([r.util_acc_train for r in g])),
                   repr(med([r.util_acc_val for r in g])),
                   repr(med([r.util_acc_test for r in g]))]
            for ratio in ratios:
                row.append(repr(med([r.adv_acc.get(ratio, float("nan"))
                                     for r in g])))
            row += [repr(med([r.mi_sz_mine for r in g])),
                    repr(med([r.mi_uz_mine for r in g])),
                    repr(med([r.kl_upper for r in g])),
                    repr(med([r.kl_correction for r in g])),
                    repr(med([r.kl_corrected for r in g]))]
            lines.append(",".join(row))
        path = out_dir / f"trend_dz{dz}.csv"
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
        written.append(path)
    return written
