"""Command-line entry point.

Subcommands: generate, pretrain, train, attack, estimate-mi, oracle, sweep,
report.  Exit codes: 0 success, 2 validation error, 3 runtime abort.  Every
path validates its inputs before writing any file.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

REPORT_HEADER = ("beta,dz,data_ratio,adv_acc,adv_xent,"
                 "mi_sz_mine,mi_uz_mine,kl_upper,kl_correction")


def _parse_colors(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"--colors needs three comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)


def _parse_ratios(text):
    ratios = tuple(float(p) for p in text.split(",") if p)
    if not ratios:
        raise ValueError("--ratios must list at least one value")
    return ratios


def _load_source(args):
    from .datasets import load_idx_images, load_idx_labels, synthetic_digits

    if args.source == "synthetic":
        return synthetic_digits(args.count, args.data_seed)
    if args.idx_images is None or args.idx_labels is None:
        raise ValueError("--source idx needs --idx-images and --idx-labels")
    for p in (args.idx_images, args.idx_labels):
        if not Path(p).exists():
            raise ValueError(f"source file not found: {p}")
    return load_idx_images(args.idx_images), load_idx_labels(args.idx_labels)


def cmd_generate(args):
    from .datasets import ColorDistribution, color_marginals, generate_colored_mnist, save_dataset

    dist = ColorDistribution(*_parse_colors(args.colors))
    gray, labels = _load_source(args)
    ds = generate_colored_mnist(gray, labels, dist, seed=args.seed,
                                utility=args.utility)
    save_dataset(ds, args.out)
    marg = color_marginals(ds)
    print(f"wrote {args.out}: {len(ds)} images of "
          f"{ds.image_shape[0]}x{ds.image_shape[1]}x{ds.image_shape[2]}, "
          f"|U|={ds.num_u} |S|={ds.num_s}")
    print(f"empirical color marginals: red={marg[0]:.4f} "
          f"green={marg[1]:.4f} blue={marg[2]:.4f}")
    return 0


def _prepare_splits(args):
    from .datasets import load_dataset, split
    from .experiment import subset_dataset

    if not Path(args.data).exists():
        raise ValueError(f"dataset file not found: {args.data}")
    ds = load_dataset(args.data)
    ds = subset_dataset(ds, args.subset, args.seed)
    return split(ds, (0.8, 0.1, 0.1), seed=args.seed)


def _build_config(args):
    from .training import preset_config

    overrides = {}
    if args.iterations is not None:
        overrides["max_iterations"] = args.iterations
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.eval_every is not None:
        overrides["eval_every"] = args.eval_every
    if getattr(args, "checkpoint_every", None):
        overrides["checkpoint_every"] = args.checkpoint_every
    return preset_config(args.preset, beta=args.beta, dz=args.dz,
                         seed=args.seed, **overrides)


def cmd_pretrain(args):
    from .models import save_bundle
    from .training import init_state, pretrain

    config = _build_config(args)
    splits = _prepare_splits(args)
    state = init_state(config, splits)
    pretrain(state.bundle, state.train_split, config,
             rngs={"warm_batch": state.rngs["warm_batch"],
                   "warm_eps": state.rngs["warm_eps"]})
    state.bundle.meta = {"beta": config.beta, "seed": config.seed,
                         "preset_arch": config.arch, "phase": "warmup"}
    save_bundle(state.bundle, args.out)
    from .models import utility_accuracy

    print(f"wrote {args.out}; warm-up val accuracy "
          f"{utility_accuracy(state.bundle, state.val_split):.4f}")
    return 0


def cmd_train(args):
    from .training import train, write_history_csv

    config = _build_config(args)
    splits = _prepare_splits(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def log(row):
        print(f"iter {row['iter']}: val acc {row['util_acc_val']:.4f} "
              f"test acc {row['util_acc_test']:.4f} "
              f"kl_upper {row['kl_upper']:.4f}")

    bundle, history = train(config, splits, out_dir=out_dir,
                            log=log if args.verbose else None)
    write_history_csv(history, out_dir / "metrics.csv")
    last = history[-1]
    print(f"done: test accuracy {last['util_acc_test']:.4f}, "
          f"kl_upper {last['kl_upper']:.4f} "
          f"({out_dir / 'checkpoint.vlmb'}, {out_dir / 'metrics.csv'})")
    return 0


def _load_checkpoint_for(args, ds):
    from .models import load_bundle

    if not Path(args.checkpoint).exists():
        raise ValueError(f"checkpoint not found: {args.checkpoint}")
    bundle = load_bundle(args.checkpoint)
    if args.dz is not None and args.dz != bundle.dz:
        raise ValueError(
            f"checkpoint latent dimension is {bundle.dz}, "
            f"estimator configured for d_z={args.dz}"
        )
    if tuple(bundle.input_shape) != tuple(ds.image_shape):
        raise ValueError(
            f"checkpoint expects input {bundle.input_shape}, "
            f"dataset provides {ds.image_shape}"
        )
    if bundle.num_u != ds.num_u:
        raise ValueError(
            f"checkpoint has |U|={bundle.num_u}, dataset has |U|={ds.num_u}"
        )
    return bundle


def _append_report_rows(path, rows):
    path = Path(path)
    fresh = not path.exists()
    with open(path, "a") as f:
        if fresh:
            f.write(REPORT_HEADER + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")


def _fmt(v):
    return "" if v is None else repr(float(v))


def cmd_attack(args):
    from .leakage import AttackConfig, train_adversary

    splits = _prepare_splits(args)
    bundle = _load_checkpoint_for(args, splits[0])
    ratios = _parse_ratios(args.ratios)
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"data ratio {r} outside (0, 1]")
    beta = bundle.meta.get("beta")
    rows = []
    for ratio in ratios:
        cfg = AttackConfig(data_ratio=ratio, seed=args.seed, epochs=args.epochs)
        _, acc, xent = train_adversary(bundle, splits[0], splits[2], cfg)
        print(f"ratio {ratio}: adversary accuracy {acc:.4f}, "
              f"cross-entropy {xent:.4f}")
        rows.append([_fmt(beta), str(bundle.dz), repr(float(ratio)),
                     _fmt(acc), _fmt(xent), "", "", "", ""])
    _append_report_rows(args.out, rows)
    print(f"appended {len(rows)} rows to {args.out}")
    return 0


def cmd_estimate_mi(args):
    from .experiment import _mine_pairs
    from .leakage import complexity_estimate, mine_estimate

    splits = _prepare_splits(args)
    bundle = _load_checkpoint_for(args, splits[0])
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0x313]))
    z, s_lab, u_lab = _mine_pairs(bundle, splits[0], args.samples, rng)
    mi_sz = mine_estimate(z, s_lab, steps=args.steps, seed=args.seed)
    mi_uz = mine_estimate(z, u_lab, steps=args.steps, seed=args.seed + 1)
    comp = complexity_estimate(bundle, splits[0], seed=args.seed)
    beta = bundle.meta.get("beta")
    print(f"mi(s;z) ~= {mi_sz.value:.4f} nats, mi(u;z) ~= {mi_uz.value:.4f} nats")
    print(f"complexity: kl_upper {comp.kl_upper:.4f}, correction "
          f"{comp.correction:.4f}, corrected {comp.corrected:.4f}")
    _append_report_rows(args.out, [[
        _fmt(beta), str(bundle.dz), "", "", "",
        _fmt(mi_sz.value), _fmt(mi_uz.value),
        _fmt(comp.kl_upper), _fmt(comp.correction),
    ]])
    print(f"appended 1 row to {args.out}")
    return 0


def cmd_oracle(args):
    from .gaussian import DiagonalGaussian, kl_to_standard_normal, mc_kl_to_standard_normal
    from .leakage import density_ratio_kl, markov_identity_check

    rng = np.random.default_rng(args.seed)
    failures = 0

    worst_res, min_margin = 0.0, np.inf
    for _ in range(args.instances):
        ns, nx, nz = rng.integers(2, args.max_alphabet + 1, 3)
        p_sx = rng.dirichlet(np.ones(ns * nx)).reshape(ns, nx)
        channel = rng.dirichlet(np.ones(nz), size=nx)
        chk = markov_identity_check(p_sx, channel)
        worst_res = max(worst_res, abs(chk.residual))
        min_margin = min(min_margin, chk.dpi_margin)
    ok = worst_res <= 1e-10 and min_margin >= -1e-10
    failures += not ok
    print(f"[{'PASS' if ok else 'FAIL'}] markov identity / processing margin: "
          f"max residual {worst_res:.2e}, min margin {min_margin:.2e} "
          f"({args.instances} instances)")

    worst_rel = 0.0
    for _ in range(args.kl_cases):
        d = int(rng.integers(1, 17))
        mu = rng.uniform(-2.0, 2.0, d) + 0.5 * np.sign(rng.standard_normal(d))
        sigma = np.exp(rng.uniform(-1.0, 1.0, d))
        g = DiagonalGaussian(mu, sigma)
        closed = float(kl_to_standard_normal(g).item())
        mc = mc_kl_to_standard_normal(g, args.mc_samples, rng)
        worst_rel = max(worst_rel, abs(closed - mc) / max(closed, 1e-12))
    ok = worst_rel <= 0.02
    failures += not ok
    print(f"[{'PASS' if ok else 'FAIL'}] closed-form vs monte-carlo divergence: "
          f"max relative gap {worst_rel:.4f} ({args.kl_cases} cases, "
          f"{args.mc_samples} samples each)")

    p = rng.dirichlet(np.ones(6))
    q = rng.dirichlet(np.ones(6))
    counts = np.maximum(1, np.round(p * 6000).astype(int))
    p_exact = counts / counts.sum()
    samples = np.repeat(np.arange(6), counts).astype(np.float64)[:, None]

    def bayes(z):
        sym = z[:, 0].astype(int)
        return p_exact[sym] / (p_exact[sym] + q[sym])

    est = density_ratio_kl(bayes, samples)
    exact = float((p_exact * np.log(p_exact / q)).sum())
    ok = abs(est - exact) <= 1e-10
    failures += not ok
    print(f"[{'PASS' if ok else 'FAIL'}] classifier log-odds vs exact divergence: "
          f"gap {abs(est - exact):.2e}")

    return 0 if failures == 0 else 3


def cmd_sweep(args):
    from .experiment import SweepSpec, run_sweep

    spec = SweepSpec.from_file(args.spec)

    def log(record):
        print(f"[{record.status}] beta={record.beta} dz={record.dz} "
              f"seed={record.seed} test acc={record.util_acc_test:.4f} "
              f"corrected={record.kl_corrected:.4f} "
              f"({record.wall_time:.1f}s)"
              + (f" error: {record.error}" if record.error else ""))

    records = run_sweep(spec, log=log)
    ok = sum(r.status == "ok" for r in records)
    print(f"sweep complete: {ok}/{len(records)} points ok; "
          f"records in {Path(spec.output_dir) / 'records.ndjson'}")
    return 0


def cmd_report(args):
    from .experiment import write_trend_csvs

    if not Path(args.records).exists():
        raise ValueError(f"records file not found: {args.records}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = write_trend_csvs(args.records, out_dir)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="varleak",
        description="Complexity-controlled representation release: training, "
                    "attacks, and information estimates.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="build a colored-digit dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--colors", required=True,
                   help="three comma-separated tint probabilities")
    p.add_argument("--source", choices=("synthetic", "idx"), default="synthetic")
    p.add_argument("--count", type=int, default=70000)
    p.add_argument("--data-seed", type=int, default=123)
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")
    p.add_argument("--utility", choices=("digit", "color"), default="digit")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_generate)

    for name, fn in (("pretrain", cmd_pretrain), ("train", cmd_train)):
        p = sub.add_parser(name, help=f"{name} on a dataset")
        p.add_argument("--data", required=True)
        p.add_argument("--preset", default="mnist-desk")
        p.add_argument("--beta", type=float, required=True)
        p.add_argument("--dz", type=int, default=8)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--subset", type=int, default=0)
        p.add_argument("--iterations", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--eval-every", type=int)
        if name == "train":
            p.add_argument("--out-dir", required=True)
            p.add_argument("--checkpoint-every", type=int, default=0)
            p.add_argument("--verbose", action="store_true")
        else:
            p.add_argument("--out", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("attack", help="train the inferential adversary")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ratios", default="0.1,0.5,1.0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subset", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--dz", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("estimate-mi", help="neural MI estimates and complexity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subset", type=int, default=0)
    p.add_argument("--dz", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate_mi)

    p = sub.add_parser("oracle", help="exact-oracle self checks")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--max-alphabet", type=int, default=8)
    p.add_argument("--kl-cases", type=int, default=20)
    p.add_argument("--mc-samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sweep", help="run a grid of experiments, resumably")
    p.add_argument("--spec", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="emit plot-ready trend CSVs")
    p.add_argument("--records", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
