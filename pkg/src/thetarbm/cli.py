"""Command line interface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Option precedence: explicit flags > ``THETARBM_<OPTION>`` environment
variables > ``--config`` file > built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import plotting
from .data import DataConsistencyError, DataFormatError, NormalizationStats, fit_normalization, subsample
from .experiments import EXPERIMENTS, DataSource, ExperimentSpec, norm_scope, run_experiment, sha256, write_csv
from .invariance import REESTIMATED, TRACKED, gamma_score, shifted_support
from .orientation import DEFAULT_BINS, PerturbationSpec, assign_orientations, perturb_indices
from .rbm import UNIT_TYPES, NumericalError, ThetaRBM
from .rotation import MODES, RotationModeError, build_support_set
from .trainer import INIT_MODES, MODEL_KINDS, MOMENTUM_RULES, TrainConfig, train

log = logging.getLogger("thetarbm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ENV_PREFIX = "THETARBM_"


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple:
    try:
        return tuple(float(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in _floats(text))


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = str(text).lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 10x9, got {text!r}") from None


def _optional_float(text: str):
    return None if str(text).lower() in ("", "none", "off") else float(text)


def _bool(text) -> bool:
    return str(text).lower() in ("1", "true", "yes", "on")


def add_data_flags(p: argparse.ArgumentParser, test: bool = True) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--train-images", help="IDX image file of the training split")
    g.add_argument("--train-labels", help="IDX label file of the training split")
    g.add_argument("--amat", help="amat file of the training split")
    if test:
        g.add_argument("--test-images", help="IDX image file of the test split")
        g.add_argument("--test-labels", help="IDX label file of the test split")
        g.add_argument("--test-amat", help="amat file of the test split")
    g.add_argument("--subsample", type=int, help="draw this many training images")
    if test:
        g.add_argument("--test-subsample", type=int, help="draw this many test images")


def add_rotation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--angles", type=_floats, default=(0.0, 90.0, 180.0, 270.0),
                   help="support angles in degrees, e.g. 0,40,80,...,320")
    p.add_argument("--rotation-mode", choices=MODES, default="exact")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS, help="orientation histogram bins")


def add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--model", dest="model_kind", choices=MODEL_KINDS, default="theta")
    g.add_argument("--hidden", type=int, default=d.n_hidden)
    g.add_argument("--eta", type=float, default=d.eta)
    g.add_argument("--alpha", type=float, default=d.alpha)
    g.add_argument("--k", type=int, default=d.k, help="CD steps")
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--sparsity", type=_optional_float, default=d.sparsity_target,
                   help="target mean hidden activation (off by default)")
    g.add_argument("--sparsity-weight", type=float, default=d.sparsity_weight)
    g.add_argument("--init-mode", choices=INIT_MODES, default=d.init_mode)
    g.add_argument("--unit-type", choices=UNIT_TYPES, default=d.unit_type)
    g.add_argument("--momentum-rule", choices=MOMENTUM_RULES, default=d.momentum_rule)
    g.add_argument("--init-std", type=float, default=d.init_std)


def train_config(args) -> TrainConfig:
    return TrainConfig(
        n_hidden=args.hidden, eta=args.eta, alpha=args.alpha, k=args.k, epochs=args.epochs,
        batch_size=args.batch_size, sparsity_target=args.sparsity, sparsity_weight=args.sparsity_weight,
        seed=args.seed, init_mode=args.init_mode, init_std=args.init_std,
        model_kind=getattr(args, "model_kind", "theta"), unit_type=args.unit_type,
        momentum_rule=args.momentum_rule,
    )


def add_common_flags(p: argparse.ArgumentParser, default=None) -> None:
    def d(value):
        return value if default is None else default

    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--threads", type=int, default=d(1))
    p.add_argument("--out-dir", default=d("."))
    p.add_argument("--config", default=d(None), help="key = value (or JSON) file with option defaults")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="thetarbm", description=__doc__.splitlines()[0])
    add_common_flags(parser)
    # repeated after the subcommand; suppressed defaults keep values given before it
    common = argparse.ArgumentParser(add_help=False)
    add_common_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("train", parents=[common], help="train a theta-RBM, RBM or O-RBM")
    add_data_flags(p, test=False)
    add_rotation_flags(p)
    add_train_flags(p)
    p.add_argument("--perturb-n", type=int, default=0)
    p.add_argument("--perturb-p", type=float, default=0.0)
    subs["train"] = p

    p = sub.add_parser("gamma", parents=[common], help="invariance score of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    add_data_flags(p)
    p.add_argument("--angles", type=_floats, help="expected support angles (checked against the checkpoint)")
    p.add_argument("--delta", type=float, default=20.0, help="shift of the evaluation rotations")
    p.add_argument("--gate", choices=(TRACKED, REESTIMATED), default=TRACKED)
    subs["gamma"] = p

    p = sub.add_parser("extract", parents=[common], help="write hidden-unit feature files")
    p.add_argument("--checkpoint", required=True)
    add_data_flags(p)
    subs["extract"] = p

    p = sub.add_parser("classify", parents=[common], help="RBF-SVM on feature files")
    p.add_argument("--train-features", required=True)
    p.add_argument("--test-features", required=True)
    p.add_argument("--C", dest="C", type=float, default=10.0)
    p.add_argument("--kernel-sigma", type=_floats, help="Gaussian width(s); gamma = 1/(2 sigma^2)")
    p.add_argument("--kernel-gamma", type=_floats, help="RBF coefficient(s) in exp(-gamma |a-b|^2)")
    p.add_argument("--tol", type=float, default=1e-3)
    subs["classify"] = p

    p = sub.add_parser("export-filters", parents=[common], help="tile learned filters into a PGM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", type=_grid, default=(10, 9), help="rows x cols, e.g. 10x9")
    p.add_argument("--slices", type=_ints, help="slice indices (default: all)")
    p.add_argument("--units", type=_ints, help="hidden unit indices (default: the first ones)")
    p.add_argument("--output", default="filters.pgm")
    p.add_argument("--png", type=_bool, default=True, help="also render a PNG next to the PGM")
    subs["export-filters"] = p

    p = sub.add_parser("perturb", parents=[common], help="estimate and perturb orientation indices")
    add_data_flags(p, test=False)
    add_rotation_flags(p)
    p.add_argument("--perturb-n", type=int, default=1)
    p.add_argument("--perturb-p", type=float, default=0.1)
    subs["perturb"] = p

    p = sub.add_parser("experiment", parents=[common], help="run a full experiment pipeline")
    p.add_argument("--name", choices=EXPERIMENTS, required=True)
    add_data_flags(p)
    add_rotation_flags(p)
    add_train_flags(p)
    p.add_argument("--sparsities", type=_floats, default=(0.3,))
    p.add_argument("--models", default="rbm,orbm,theta")
    p.add_argument("--C", dest="C", type=float, default=10.0)
    p.add_argument("--kernel-sigma", type=_floats)
    p.add_argument("--kernel-gamma", type=_floats)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--delta", type=float, default=20.0)
    p.add_argument("--gate", choices=(TRACKED, REESTIMATED), default=TRACKED)
    p.add_argument("--perturb-ns", type=_ints, default=(1, 2, 3, 4))
    p.add_argument("--perturb-ps", type=_floats, default=(0.1, 0.2, 0.3, 0.4))
    p.add_argument("--lemma-steps", type=int, default=200)
    p.add_argument("--no-figures", action="store_true")
    subs["experiment"] = p
    return parser, subs


def read_config_file(path) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value.strip("\"'")
    return out


def _apply_defaults(parsers, values: dict, origin: str) -> None:
    """Install ``values`` as defaults on whichever parser owns each option."""
    owners = {}
    for p in parsers:
        for a in p._actions:
            if a.default is argparse.SUPPRESS or not a.option_strings:
                continue
            for name in [a.dest] + [f.lstrip("-").replace("-", "_") for f in a.option_strings]:
                owners.setdefault(name, (p, a))
    for key, raw in values.items():
        hit = owners.get(key.replace("-", "_").lower())
        if hit is None:
            if origin == "config":
                raise UsageError(f"unknown option {key!r} in config file")
            continue
        p, a = hit
        if isinstance(raw, str) and a.type is not None:
            try:
                raw = a.type(raw)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"bad value for {key} from {origin}: {exc}") from None
        elif isinstance(raw, str) and isinstance(a.default, bool):
            raw = _bool(raw)
        elif isinstance(raw, list):
            raw = tuple(raw)
        p.set_defaults(**{a.dest: raw})


def parse_args(argv=None):
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre, _ = parser.parse_known_args(argv)
    sp = subs[pre.command]
    if pre.config:
        if not Path(pre.config).exists():
            raise UsageError(f"--config: file not found: {pre.config}")
        _apply_defaults([sp, parser], read_config_file(pre.config), "config")
    env = {k[len(ENV_PREFIX):].lower(): v for k, v in os.environ.items() if k.startswith(ENV_PREFIX)}
    _apply_defaults([sp, parser], env, "environment")
    return parser.parse_args(argv)


def _check_file(flag: str, path) -> None:
    if path is not None and not Path(path).exists():
        raise UsageError(f"{flag}: file not found: {path}")


def source_from(args, split: str) -> DataSource | None:
    if split == "train":
        amat, images, labels = args.amat, args.train_images, args.train_labels
        flags = ("--amat", "--train-images", "--train-labels")
    else:
        amat, images, labels = args.test_amat, args.test_images, args.test_labels
        flags = ("--test-amat", "--test-images", "--test-labels")
    for flag, path in zip(flags, (amat, images, labels)):
        _check_file(flag, path)
    if amat is None and images is None:
        return None
    if amat is not None and images is not None:
        raise UsageError(f"give either {flags[0]} or {flags[1]}, not both")
    if images is not None and labels is None:
        raise UsageError(f"{flags[1]} needs {flags[2]}")
    return DataSource(amat=amat, images=images, labels=labels)


def _load(src: DataSource, n, seed):
    ds = src.load()
    return ds if n is None else subsample(ds, n, seed)


def _write_manifest(out: Path, command: str, args, inputs, extra=None) -> None:
    settings = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()
                if k not in ("out_dir", "verbose", "config")}
    manifest = {"command": command, "arguments": settings,
                "input_digests": {str(p): sha256(p) for p in inputs if p and Path(p).exists()}}
    if extra:
        manifest.update(extra)
    plotting.atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def cmd_train(args) -> int:
    src = source_from(args, "train")
    if src is None:
        raise UsageError("--amat or --train-images/--train-labels is required")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = train_config(args)
    raw = _load(src, args.subsample, args.seed)
    support = build_support_set(args.angles, raw.side, args.rotation_mode)
    ds = assign_orientations(raw, support, args.bins)
    if args.perturb_n and args.perturb_p:
        ds = perturb_indices(ds, PerturbationSpec(args.perturb_n, args.perturb_p, args.seed), support.size)
    scope = norm_scope(cfg.model_kind)
    stats = fit_normalization(ds, scope)
    ds = stats.apply(ds)
    (out / "checkpoints").mkdir(exist_ok=True)
    rows = []

    def on_epoch(epoch, model, row):
        plotting.atomic_write_bytes(out / "checkpoints" / f"epoch_{epoch:03d}.ckpt", model.to_bytes())
        rows.append(row)
        write_csv(out / "metrics.csv", rows, ["epoch", "recon_error", "mean_activation", "lemma_residual"])

    result = train(cfg, ds, support, on_epoch=on_epoch)
    if not rows:
        write_csv(out / "metrics.csv", rows, ["epoch", "recon_error", "mean_activation", "lemma_residual"])
    plotting.atomic_write_bytes(out / "model.ckpt", result.model.to_bytes())
    plotting.atomic_write_text(out / "config.json", cfg.to_json())
    stats.save(out / "norm.npz")
    meta = {"model_kind": cfg.model_kind, "angles": list(support.angles), "rotation_mode": support.mode,
            "bins": args.bins, "norm_scope": scope}
    plotting.atomic_write_text(out / "model.json", json.dumps(meta, indent=2, sort_keys=True))
    _write_manifest(out, "train", args, src.paths())
    print(f"trained {cfg.model_kind} for {cfg.epochs} epochs -> {out / 'model.ckpt'}")
    return EXIT_OK


def load_checkpoint(path):
    """Model plus the metadata and normalization stats stored next to it."""
    path = Path(path)
    _check_file("--checkpoint", path)
    model = ThetaRBM.load(path)
    meta_path = path.parent / "model.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    else:
        meta = {"model_kind": "theta" if model.n_slices > 1 else "rbm", "angles": list(model.angles),
                "rotation_mode": model.rotation_mode, "bins": DEFAULT_BINS, "norm_scope": None}
    norm = path.parent / "norm.npz"
    stats = NormalizationStats.load(norm) if norm.exists() else None
    return model, meta, stats


def _eval_splits(args, meta, stats):
    """Named, normalized, orientation-assigned datasets requested on the command line."""
    support = None
    out = []
    for split, n, seed in (("train", args.subsample, args.seed), ("test", args.test_subsample, args.seed + 1)):
        src = source_from(args, split)
        if src is None:
            continue
        raw = _load(src, n, seed)
        if support is None:
            support = build_support_set(meta["angles"], raw.side, meta["rotation_mode"])
        ds = assign_orientations(raw, support, meta.get("bins", DEFAULT_BINS))
        if stats is not None:
            ds = stats.apply(ds)
        out.append((split, ds, src))
    if not out:
        raise UsageError("give at least one data split (--amat/--train-images or --test-amat/--test-images)")
    return support, out


def cmd_gamma(args) -> int:
    model, meta, stats = load_checkpoint(args.checkpoint)
    if args.angles is not None and tuple(args.angles) != tuple(meta["angles"]):
        raise DataConsistencyError(f"checkpoint was trained on angles {meta['angles']}, "
                                   f"got --angles {list(args.angles)}")
    support, splits = _eval_splits(args, meta, stats)
    transforms = shifted_support(support, args.delta)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["split,mean_gamma,dead_count,n_hidden,delta"]
    inputs = [args.checkpoint]
    for split, ds, src in splits:
        rep = gamma_score(model, ds, transforms, support, meta["model_kind"], args.gate, args.delta)
        plotting.atomic_write_text(out / f"gamma_{split}.json", rep.to_json())
        lines.append(f"{split},{rep.csv_row()}")
        inputs += src.paths()
        mean = "n/a (all units dead)" if rep.mean_gamma is None else f"{rep.mean_gamma:.4f}"
        print(f"{split}: mean gamma {mean} over {len(rep.gamma) - rep.n_dead} live units")
    plotting.atomic_write_text(out / "gamma.csv", "\n".join(lines) + "\n")
    _write_manifest(out, "gamma", args, inputs)
    return EXIT_OK


def cmd_extract(args) -> int:
    model, meta, stats = load_checkpoint(args.checkpoint)
    support, splits = _eval_splits(args, meta, stats)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [args.checkpoint]
    for split, ds, src in splits:
        f = clf.extract_features(model, ds, support, meta["model_kind"])
        plotting.atomic_write_bytes(out / f"{split}_features.bin", f.to_bytes())
        inputs += src.paths()
        print(f"{split}: {f.rows.shape[0]} x {f.rows.shape[1]} features")
    _write_manifest(out, "extract", args, inputs)
    return EXIT_OK


def cmd_classify(args) -> int:
    _check_file("--train-features", args.train_features)
    _check_file("--test-features", args.test_features)
    ftr = clf.FeatureMatrix.load(args.train_features)
    fte = clf.FeatureMatrix.load(args.test_features)
    candidates = [(f"gamma={g:g}", g) for g in (args.kernel_gamma or ())]
    candidates += [(f"sigma={s:g}", clf.kernel_gamma(sigma=s)) for s in (args.kernel_sigma or ())]
    if not candidates:
        candidates = [("gamma=0.02", 0.02)]
    rows = []
    for label, g in candidates:
        model = clf.svm_train(ftr, args.C, g, args.tol, threads=args.threads)
        _, err = clf.svm_predict(model, fte)
        rows.append({"kernel": label, "kernel_gamma": g, "C": args.C, "test_error": err,
                     "converged": model.extra["converged"]})
        print(f"{label}: test error {100 * err:.2f}%")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "classify.csv", rows, ["kernel", "kernel_gamma", "C", "test_error", "converged"])
    best = min(rows, key=lambda r: r["test_error"])
    _write_manifest(out, "classify", args, [args.train_features, args.test_features],
                    {"best": {k: best[k] for k in ("kernel", "test_error")}})
    return EXIT_OK


def cmd_export_filters(args) -> int:
    model, meta, _ = load_checkpoint(args.checkpoint)
    rows, cols = args.grid
    slices = list(range(model.n_slices)) if args.slices is None else list(args.slices)
    units = args.units
    if units is None:
        per_row = max(1, cols // len(slices))
        units = range(min(model.n_hidden, rows * per_row))
    if len(list(units)) * len(slices) > rows * cols:
        raise UsageError(f"{len(list(units)) * len(slices)} filters do not fit a {rows}x{cols} grid")
    try:
        plotting.select_filters(model, units, slices)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir) / args.output
    plotting.export_filters(model, out, rows, cols, units, slices, png=args.png)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    src = source_from(args, "train")
    if src is None:
        raise UsageError("--amat or --train-images/--train-labels is required")
    raw = _load(src, args.subsample, args.seed)
    support = build_support_set(args.angles, raw.side, args.rotation_mode)
    ds = assign_orientations(raw, support, args.bins)
    pert = perturb_indices(ds, PerturbationSpec(args.perturb_n, args.perturb_p, args.seed), support.size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"image": i, "label": int(lab), "estimated_angle": float(a), "index": int(o), "perturbed_index": int(q)}
            for i, (lab, a, o, q) in enumerate(zip(ds.labels, ds.orientation_angle, ds.orientation_index,
                                                   pert.orientation_index))]
    write_csv(out / "orientations.csv", rows, ["image", "label", "estimated_angle", "index", "perturbed_index"])
    changed = int(np.sum(ds.orientation_index != pert.orientation_index))
    _write_manifest(out, "perturb", args, src.paths())
    print(f"{changed} of {len(ds)} orientation indices perturbed")
    return EXIT_OK


def cmd_experiment(args) -> int:
    out = Path(args.out_dir)
    train_src = test_src = None
    if args.name != "lemma-check":
        train_src = source_from(args, "train")
        test_src = source_from(args, "test")
        if train_src is None or test_src is None:
            raise UsageError("experiments need a training split (--amat/--train-images) "
                             "and a test split (--test-amat/--test-images)")
    models = tuple(m.strip() for m in args.models.split(",") if m.strip())
    bad = [m for m in models if m not in MODEL_KINDS]
    if bad:
        raise UsageError(f"--models: unknown model kind {bad[0]!r}")
    spec = ExperimentSpec(
        name=args.name, out_dir=str(out), train=train_src, test=test_src, config=train_config(args),
        angles=tuple(args.angles), rotation_mode=args.rotation_mode, bins=args.bins,
        n_train=args.subsample, n_test=args.test_subsample, sparsities=tuple(args.sparsities),
        models=models, C=args.C, kernel_gammas=args.kernel_gamma, kernel_sigmas=args.kernel_sigma,
        svm_tol=args.tol, delta=args.delta, gate=args.gate, perturb_ns=tuple(args.perturb_ns),
        perturb_ps=tuple(args.perturb_ps), threads=args.threads, figures=not args.no_figures,
        lemma_steps=args.lemma_steps,
    )
    result = run_experiment(spec)
    print(result["text"], end="")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "gamma": cmd_gamma, "extract": cmd_extract, "classify": cmd_classify,
    "export-filters": cmd_export_filters, "perturb": cmd_perturb, "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"thetarbm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"thetarbm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RotationModeError,) as exc:
        print(f"thetarbm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, DataConsistencyError, FileNotFoundError) as exc:
        print(f"thetarbm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"thetarbm {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
