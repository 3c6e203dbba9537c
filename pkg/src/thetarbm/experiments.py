"""End-to-end experiment pipelines: data -> orientation -> training -> features,
classification and invariance scores, with reports and figures on disk.

Every run writes ``manifest.json`` holding the resolved configuration, seeds
and SHA-256 digests of its inputs. Artifacts contain no wall-clock data, so
repeating a run with the same manifest reproduces them byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import plotting
from .data import ImageDataset, load_amat, load_idx, normalize, subsample
from .invariance import TRACKED, gamma_score, shifted_support
from .orientation import DEFAULT_BINS, PerturbationSpec, assign_orientations, perturb_indices
from .rotation import SupportSet, build_support_set
from .trainer import TrainConfig, TrainerState, init_model, lemma_residual, train, update_step

log = logging.getLogger(__name__)

EXPERIMENTS = ("table1", "table2", "table3", "mnist-generalization", "lemma-check")
KIND_LABELS = {"rbm": "RBM", "orbm": "O-RBM", "theta": "theta-RBM"}
KERNEL_WIDTH = 0.02


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class DataSource:
    """Either an amat file or an IDX image/label pair."""

    amat: str | None = None
    images: str | None = None
    labels: str | None = None

    def __post_init__(self):
        if (self.amat is None) == (self.images is None):
            raise ValueError("give either an amat file or an IDX image/label pair")
        if self.images is not None and self.labels is None:
            raise ValueError("IDX images need a label file")

    def paths(self) -> list[str]:
        return [p for p in (self.amat, self.images, self.labels) if p is not None]

    def load(self) -> ImageDataset:
        if self.amat is not None:
            return load_amat(self.amat)
        return load_idx(self.images, self.labels)


@dataclass
class ExperimentSpec:
    name: str
    out_dir: str
    train: DataSource | None = None
    test: DataSource | None = None
    config: TrainConfig = field(default_factory=TrainConfig)
    angles: tuple = (0.0, 90.0, 180.0, 270.0)
    rotation_mode: str = "exact"
    bins: int = DEFAULT_BINS
    n_train: int | None = None
    n_test: int | None = None
    sparsities: tuple = (0.3,)
    models: tuple = ("rbm", "orbm", "theta")
    C: float = 10.0
    kernel_gammas: tuple | None = None
    kernel_sigmas: tuple | None = None
    svm_tol: float = 1e-3
    delta: float = 20.0
    gate: str = TRACKED
    perturb_ns: tuple = (1, 2, 3, 4)
    perturb_ps: tuple = (0.1, 0.2, 0.3, 0.4)
    threads: int = 1
    figures: bool = True
    lemma_steps: int = 200
    lemma_side: int = 16

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {EXPERIMENTS}")
        if self.name != "lemma-check" and (self.train is None or self.test is None):
            raise ValueError(f"{self.name} needs a training and a test data source")

    def kernel_candidates(self) -> list[tuple[str, float]]:
        """Kernel settings to try; by default a width of 0.02 read both ways."""
        if self.kernel_gammas is None and self.kernel_sigmas is None:
            return [("gamma=0.02", KERNEL_WIDTH),
                    (f"sigma={KERNEL_WIDTH}", clf.kernel_gamma(sigma=KERNEL_WIDTH))]
        out = [(f"gamma={g:g}", float(g)) for g in (self.kernel_gammas or ())]
        out += [(f"sigma={s:g}", clf.kernel_gamma(sigma=s)) for s in (self.kernel_sigmas or ())]
        return out

    def manifest(self) -> dict:
        d = dataclasses.asdict(self)
        d["config"] = dataclasses.asdict(self.config)
        d["input_digests"] = {p: sha256(p) for src in (self.train, self.test) if src is not None for p in src.paths()
                              if Path(p).exists()}
        return d


def norm_scope(kind: str) -> str:
    return "per-orientation-group" if kind == "theta" else "whole-dataset"


def support_for(spec: ExperimentSpec, side: int) -> SupportSet:
    return build_support_set(spec.angles, side, spec.rotation_mode)


class Pipeline:
    """Shared state for one experiment run: raw data, orientations, trained models."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.out = Path(spec.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        seed = spec.config.seed
        train_raw = spec.train.load()
        test_raw = spec.test.load()
        if spec.n_train is not None:
            train_raw = subsample(train_raw, spec.n_train, seed)
        if spec.n_test is not None:
            test_raw = subsample(test_raw, spec.n_test, seed + 1)
        if train_raw.side != test_raw.side:
            raise ValueError("train and test images differ in size")
        self.support = support_for(spec, train_raw.side)
        self.train_raw = assign_orientations(train_raw, self.support, spec.bins)
        self.test_raw = assign_orientations(test_raw, self.support, spec.bins)
        self._models: dict = {}

    def splits(self, kind: str, perturb: PerturbationSpec | None = None):
        train_raw = self.train_raw
        if perturb is not None:
            train_raw = perturb_indices(train_raw, perturb, self.support.size)
        return normalize(train_raw, self.test_raw, norm_scope(kind))

    def model(self, kind: str, sparsity: float | None, perturb: PerturbationSpec | None = None):
        key = (kind, sparsity, None if perturb is None else (perturb.n, perturb.p))
        if key in self._models:
            return self._models[key]
        tag = f"{kind}_s{sparsity}" + ("" if perturb is None else f"_n{perturb.n}_p{perturb.p}")
        cfg = dataclasses.replace(self.spec.config, model_kind=kind, sparsity_target=sparsity)
        train_ds, test_ds, stats = self.splits(kind, perturb)
        log.info("training %s", tag)
        res = train(cfg, train_ds, self.support)
        mdir = self.out / "models" / tag
        mdir.mkdir(parents=True, exist_ok=True)
        plotting.atomic_write_bytes(mdir / "model.ckpt", res.model.to_bytes())
        plotting.atomic_write_text(mdir / "config.json", cfg.to_json())
        stats.save(mdir / "norm.npz")
        write_csv(mdir / "metrics.csv", res.metrics,
                  ["epoch", "recon_error", "mean_activation", "lemma_residual"])
        entry = {"tag": tag, "kind": kind, "model": res.model, "train": train_ds, "test": test_ds,
                 "metrics": res.metrics, "dir": mdir}
        self._models[key] = entry
        return entry

    def features(self, entry):
        if "features" not in entry:
            ftr = clf.extract_features(entry["model"], entry["train"], self.support, entry["kind"])
            fte = clf.extract_features(entry["model"], entry["test"], self.support, entry["kind"])
            plotting.atomic_write_bytes(entry["dir"] / "train_features.bin", ftr.to_bytes())
            plotting.atomic_write_bytes(entry["dir"] / "test_features.bin", fte.to_bytes())
            entry["features"] = (ftr, fte)
        return entry["features"]

    def classify(self, entry) -> dict:
        if "svm" not in entry:
            ftr, fte = self.features(entry)
            entry["svm"] = select_and_classify(ftr, fte, self.spec)
        return entry["svm"]

    def gamma(self, entry, split: str):
        key = f"gamma_{split}"
        if key not in entry:
            ds = entry[split]
            transforms = shifted_support(self.support, self.spec.delta)
            entry[key] = gamma_score(entry["model"], ds, transforms, self.support, entry["kind"],
                                     self.spec.gate, self.spec.delta)
        return entry[key]


def select_and_classify(ftr: clf.FeatureMatrix, fte: clf.FeatureMatrix, spec: ExperimentSpec,
                        holdout: float = 0.2) -> dict:
    """Choose the kernel on a held-out slice of the training features, refit, then test."""
    candidates = spec.kernel_candidates()
    rng = np.random.default_rng(spec.config.seed)
    order = rng.permutation(len(ftr))
    n_val = int(round(holdout * len(ftr))) if len(candidates) > 1 else 0
    scores = []
    for label, g in candidates:
        if n_val:
            fit = clf.FeatureMatrix(ftr.rows[order[n_val:]], ftr.labels[order[n_val:]])
            val = clf.FeatureMatrix(ftr.rows[order[:n_val]], ftr.labels[order[:n_val]])
            m = clf.svm_train(fit, spec.C, g, spec.svm_tol, threads=spec.threads)
            scores.append(clf.svm_predict(m, val)[1])
        else:
            scores.append(0.0)
    best = int(np.argmin(scores))
    label, g = candidates[best]
    model = clf.svm_train(ftr, spec.C, g, spec.svm_tol, threads=spec.threads)
    _, err = clf.svm_predict(model, fte)
    return {"kernel": label, "kernel_gamma": g, "test_error": err,
            "validation_errors": dict(zip([c[0] for c in candidates], scores))}


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_fmt(r.get(c)) for c in columns))
    plotting.atomic_write_text(path, "\n".join(lines) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def aligned_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    out = []
    for n, r in enumerate(cells):
        out.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def run_table1(p: Pipeline) -> dict:
    spec = p.spec
    rows = []
    for kind in spec.models:
        row = {"model": KIND_LABELS[kind]}
        for sp in spec.sparsities:
            res = p.classify(p.model(kind, sp))
            row[f"sparsity_{sp}"] = 100.0 * res["test_error"]
            row[f"kernel_{sp}"] = res["kernel"]
        rows.append(row)
    cols = ["model"] + [f"sparsity_{sp}" for sp in spec.sparsities] + [f"kernel_{sp}" for sp in spec.sparsities]
    write_csv(p.out / "table1.csv", rows, cols)
    text = aligned_table(["model"] + [f"sparsity {sp} (%)" for sp in spec.sparsities],
                         [[r["model"]] + [round(r[f"sparsity_{sp}"], 2) for sp in spec.sparsities] for r in rows])
    plotting.atomic_write_text(p.out / "table1.txt", text)
    if spec.figures:
        _model_figures(p)
    return {"rows": rows, "text": text}


def run_table2(p: Pipeline) -> dict:
    spec = p.spec
    rows = []
    hist = {}
    for kind in spec.models:
        row = {"model": KIND_LABELS[kind]}
        for sp in spec.sparsities:
            entry = p.model(kind, sp)
            for split in ("train", "test"):
                rep = p.gamma(entry, split)
                row[f"s{sp}_{split}"] = rep.mean_gamma
                plotting.atomic_write_text(entry["dir"] / f"gamma_{split}.json", rep.to_json())
            hist[f"{KIND_LABELS[kind]} s={sp}"] = p.gamma(entry, "test").gamma
        rows.append(row)
    cols = ["model"] + [f"s{sp}_{split}" for sp in spec.sparsities for split in ("train", "test")]
    write_csv(p.out / "table2.csv", rows, cols)
    text = aligned_table(["model"] + [f"s={sp} {split}" for sp in spec.sparsities for split in ("train", "test")],
                         [[r["model"]] + [round(r[c], 4) if r[c] is not None else None for c in cols[1:]]
                          for r in rows])
    plotting.atomic_write_text(p.out / "table2.txt", text)
    if spec.figures:
        plotting.plot_gamma_histograms(hist, p.out / "gamma_hist.png")
        _model_figures(p)
    return {"rows": rows, "text": text}


def run_table3(p: Pipeline) -> dict:
    spec = p.spec
    sp = spec.sparsities[0]
    base = p.classify(p.model("theta", sp))["test_error"] * 100.0
    grid = np.zeros((len(spec.perturb_ns), len(spec.perturb_ps)))
    rows = []
    for i, n in enumerate(spec.perturb_ns):
        row = {"n": n}
        for j, prob in enumerate(spec.perturb_ps):
            pert = PerturbationSpec(n, prob, spec.config.seed)
            grid[i, j] = p.classify(p.model("theta", sp, pert))["test_error"] * 100.0
            row[f"p={prob}"] = grid[i, j]
        rows.append(row)
    cols = ["n"] + [f"p={prob}" for prob in spec.perturb_ps]
    write_csv(p.out / "table3.csv", rows + [{"n": "unperturbed", cols[1]: base}], cols)
    body = [[f"n = {r['n']}"] + [f"{r[c]:.2f}{'*' if r[c] > base else ''}" for c in cols[1:]] for r in rows]
    text = aligned_table([""] + [f"p = {prob}" for prob in spec.perturb_ps], body)
    text += f"\nunperturbed theta-RBM test error: {base:.2f}% (* marks cells above it)\n"
    plotting.atomic_write_text(p.out / "table3.txt", text)
    if spec.figures:
        plotting.plot_error_grid(grid, [f"n={n}" for n in spec.perturb_ns],
                                 [f"p={q}" for q in spec.perturb_ps], p.out / "table3.png",
                                 "test error under perturbed orientation")
    return {"rows": rows, "grid": grid, "unperturbed": base, "text": text}


def run_generalization(p: Pipeline) -> dict:
    """Train on the (unrotated) train source, score invariance on the test source."""
    spec = p.spec
    sp = spec.sparsities[0]
    rows = []
    for kind in spec.models:
        entry = p.model(kind, sp)
        rows.append({"model": KIND_LABELS[kind],
                     "gamma_train": p.gamma(entry, "train").mean_gamma,
                     "gamma_test": p.gamma(entry, "test").mean_gamma})
        for split in ("train", "test"):
            plotting.atomic_write_text(entry["dir"] / f"gamma_{split}.json", p.gamma(entry, split).to_json())
    write_csv(p.out / "generalization.csv", rows, ["model", "gamma_train", "gamma_test"])
    text = aligned_table(["model", "gamma train", "gamma test"],
                         [[r["model"], round(r["gamma_train"], 4), round(r["gamma_test"], 4)] for r in rows])
    plotting.atomic_write_text(p.out / "generalization.txt", text)
    if spec.figures:
        _model_figures(p)
    return {"rows": rows, "text": text}


def synthetic_images(n: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """Random smooth blobs, standardized; used where real digits are not needed."""
    yy, xx = np.mgrid[0:side, 0:side]
    imgs = np.zeros((n, side, side))
    for k in range(n):
        for _ in range(3):
            cy, cx = rng.uniform(0, side, 2)
            s = rng.uniform(1.0, side / 4)
            imgs[k] += rng.normal() * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    imgs = imgs.reshape(n, -1)
    return (imgs - imgs.mean(0)) / np.where(imgs.std(0) > 0, imgs.std(0), 1.0)


def lemma_check(cfg: TrainConfig, steps: int = 200, side: int = 16, n_images: int = 200,
                angles=(0.0, 90.0, 180.0, 270.0), on_step=None):
    """Train on synthetic images under exact rotations, recording the slice residual per step.

    Returns ``(model, residuals, images, orientation_index, support)``.
    """
    support = build_support_set(angles, side, "exact")
    rng = np.random.default_rng(cfg.seed)
    images = synthetic_images(n_images, side, rng)
    r = rng.integers(0, support.size, n_images)
    model = init_model(cfg, support, cfg.n_hidden, side * side, rng)
    state = TrainerState.fresh(model)
    residuals = []
    for t in range(steps):
        idx = rng.choice(n_images, size=min(cfg.batch_size, n_images), replace=False)
        update_step(state, images[idx], r[idx], cfg, support, rng)
        res = lemma_residual(model.W, support)
        residuals.append(res)
        if on_step is not None:
            on_step(t, res)
    return model, residuals, images, r, support


def run_lemma_check(spec: ExperimentSpec, out: Path) -> dict:
    cfg = dataclasses.replace(spec.config, model_kind="theta", init_mode="rotated", k=1)
    model, residuals, images, r, support = lemma_check(cfg, spec.lemma_steps, spec.lemma_side)
    write_csv(out / "lemma_residuals.csv", [{"step": t + 1, "max_residual": v} for t, v in enumerate(residuals)],
              ["step", "max_residual"])
    ds = ImageDataset(images, np.zeros(len(images), dtype=np.int64), spec.lemma_side, r)
    rep = gamma_score(model, ds, support.angles, support, "theta", TRACKED, 0.0)
    plotting.atomic_write_text(out / "lemma_gamma.json", rep.to_json())
    plotting.atomic_write_bytes(out / "lemma_model.ckpt", model.to_bytes())
    text = (f"steps: {len(residuals)}\nmax residual over all steps: {max(residuals):.3e}\n"
            f"mean gamma (transforms = support set): {rep.mean_gamma:.12f}\n")
    plotting.atomic_write_text(out / "lemma_check.txt", text)
    return {"residuals": residuals, "gamma": rep, "text": text}


def _model_figures(p: Pipeline) -> None:
    curves = {}
    for entry in p._models.values():
        curves[entry["tag"]] = entry["metrics"]
        m = entry["model"]
        rows = min(10, m.n_hidden)
        plotting.export_filters(m, entry["dir"] / "filters.pgm", rows, m.n_slices, range(rows), png=True)
    if curves:
        plotting.plot_training_curves(curves, p.out / "training_curves.png")


def run_experiment(spec: ExperimentSpec) -> dict:
    """Run one named experiment; the manifest records where a failure happened."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"experiment": spec.name, "spec": spec.manifest(), "status": "running", "stage": "setup"}
    write_manifest(out, manifest)
    try:
        if spec.name == "lemma-check":
            manifest["stage"] = "lemma-check"
            result = run_lemma_check(spec, out)
        else:
            p = Pipeline(spec)
            manifest["stage"] = spec.name
            runner = {"table1": run_table1, "table2": run_table2, "table3": run_table3,
                      "mnist-generalization": run_generalization}[spec.name]
            result = runner(p)
            result["pipeline"] = p
        manifest["status"] = "ok"
        return result
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        write_manifest(out, manifest)


def write_manifest(out: Path, manifest: dict) -> None:
    plotting.atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str))
