"""Training loop for the rotation-gated RBM and its RBM / O-RBM baselines."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ImageDataset
from .rbm import GAUSSIAN, CDStats, NumericalError, ThetaRBM, cd_gradient, hidden_given_visible
from .rotation import NEAREST, SupportSet, adjoint_rows, build_support_set, rotate_rows

log = logging.getLogger(__name__)

MODEL_KINDS = ("theta", "rbm", "orbm")
MOMENTUM_RULES = ("literal", "classical")
INIT_MODES = ("rotated", "independent-random")


@dataclass
class TrainConfig:
    n_hidden: int = 100
    eta: float = 0.01
    alpha: float = 0.9
    k: int = 1
    epochs: int = 50
    batch_size: int = 100
    sparsity_target: float | None = None
    sparsity_weight: float = 1.0
    seed: int = 0
    init_mode: str = "rotated"
    init_std: float = 0.01
    model_kind: str = "theta"
    unit_type: str = GAUSSIAN
    momentum_rule: str = "classical"
    # optional linear momentum ramp from alpha_start to alpha
    alpha_start: float | None = None
    alpha_ramp_epochs: int = 0
    sample_visible: bool = False

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.sparsity_target is not None and not 0.0 <= self.sparsity_target <= 1.0:
            raise ValueError("sparsity target must lie in [0, 1]")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}")
        if self.momentum_rule not in MOMENTUM_RULES:
            raise ValueError(f"momentum_rule must be one of {MOMENTUM_RULES}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")

    def momentum(self, epoch: int) -> float:
        if self.alpha_start is None or self.alpha_ramp_epochs <= 0:
            return self.alpha
        frac = min(epoch / self.alpha_ramp_epochs, 1.0)
        return self.alpha_start + frac * (self.alpha - self.alpha_start)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainerState:
    model: ThetaRBM
    vel_W: np.ndarray
    vel_b: np.ndarray
    vel_c: np.ndarray
    epoch: int = 0
    step: int = 0
    running_activation: np.ndarray = None

    @classmethod
    def fresh(cls, model: ThetaRBM) -> "TrainerState":
        return cls(model, np.zeros_like(model.W), np.zeros_like(model.b), np.zeros_like(model.c),
                   running_activation=np.zeros(model.n_hidden))


def model_support(cfg: TrainConfig, support: SupportSet) -> SupportSet:
    """Support set the model itself gates on: baselines have a single slice."""
    if cfg.model_kind == "theta":
        return support
    return build_support_set([0.0], support.side, support.mode)


def init_model(cfg: TrainConfig, support: SupportSet, n_hidden: int, n_visible: int,
               rng: np.random.Generator | None = None) -> ThetaRBM:
    """Random filters with zero biases.

    ``rotated`` draws one ``H x V`` matrix and stores its rotation by each
    support angle as the corresponding slice; ``independent-random`` draws
    every slice separately.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    S = support.size
    if cfg.init_mode == "rotated":
        base = rng.normal(0.0, cfg.init_std, size=(n_hidden, n_visible))
        W = np.stack([rotate_rows(base, phi, support) for phi in support.angles])
    else:
        W = rng.normal(0.0, cfg.init_std, size=(S, n_hidden, n_visible))
    return ThetaRBM(W, np.zeros(n_hidden), np.zeros(n_visible), cfg.unit_type,
                    support.side, support.angles, support.mode)


def share_gradients(dW: np.ndarray, slices, support: SupportSet) -> np.ndarray:
    """Spread each realized slice's gradient to every slice, rotated by the angle gap.

    Contributions are summed in ascending order of the realized slice so the
    result is reproducible bit for bit. In nearest-neighbour mode the
    interpolated rotations are not orthogonal and direct sharing is unstable,
    so gradients are first pulled back onto slice 0 with the transposed
    rotation and then pushed out again; for permutation tables both routes
    give the same numbers.
    """
    S = dW.shape[0]
    if S != support.size:
        raise ValueError(f"gradient has {S} slices, support set has {support.size}")
    slices = sorted(int(s) for s in slices)
    if S == 1:
        return dW.copy()
    out = np.zeros_like(dW)
    if support.mode == NEAREST:
        ref = np.zeros_like(dW[0])
        for src in slices:
            ref += dW[src] if src == 0 else adjoint_rows(dW[src], support.difference(src, 0), support)
        out[0] = ref
        for dst in range(1, S):
            out[dst] = rotate_rows(ref, support.difference(dst, 0), support)
        return out
    for src in slices:
        for dst in range(S):
            if dst == src:
                out[dst] += dW[src]
            else:
                out[dst] += rotate_rows(dW[src], support.difference(dst, src), support)
    return out


def lemma_residual(W: np.ndarray, support: SupportSet) -> float:
    """Largest ``|W[t] - R(W[s])|`` over all slice pairs."""
    worst = 0.0
    for s in range(W.shape[0]):
        for t in range(W.shape[0]):
            if s != t:
                diff = W[t] - rotate_rows(W[s], support.difference(t, s), support)
                worst = max(worst, float(np.max(np.abs(diff))))
    return worst


def update_step(state: TrainerState, images: np.ndarray, r_index, cfg: TrainConfig,
                support: SupportSet, rng, alpha: float | None = None,
                stats: CDStats | None = None) -> CDStats:
    """One CD minibatch update, applied to ``state`` in place.

    Both rules add ``eta * grad + alpha * vel``. The literal rule keeps the raw
    gradient as ``vel``; the classical rule keeps the whole step.
    ``stats`` lets a caller inject precomputed CD statistics.
    """
    m = state.model
    alpha = cfg.alpha if alpha is None else alpha
    # overflow shows up as inf/nan and is reported below as a NumericalError
    with np.errstate(over="ignore", invalid="ignore"):
        if stats is None:
            stats = cd_gradient(m, images, r_index, cfg.k, rng, cfg.sample_visible)
        gW = share_gradients(stats.dW, stats.slices, support)
        gb = stats.db.copy()
        gc = stats.dc
        if cfg.sparsity_target is not None:
            gb += cfg.sparsity_weight * (cfg.sparsity_target - stats.hidden_mean)
        dW = cfg.eta * gW + alpha * state.vel_W
        db = cfg.eta * gb + alpha * state.vel_b
        dc = cfg.eta * gc + alpha * state.vel_c
    # literal: remember the raw gradient; classical: remember the whole step
    new_vel = (gW, gb, gc) if cfg.momentum_rule == "literal" else (dW, db, dc)
    if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db)) and np.all(np.isfinite(dc))):
        raise NumericalError(f"non-finite update at step {state.step} (learning rate too large?)")
    m.W += dW
    m.b += db
    m.c += dc
    state.vel_W, state.vel_b, state.vel_c = new_vel
    state.step += 1
    state.running_activation = 0.9 * state.running_activation + 0.1 * stats.hidden_mean
    return stats


def model_inputs(kind: str, ds: ImageDataset, support: SupportSet):
    """Images and slice indices fed to a model of the given kind.

    θ-RBM gates on each image's orientation; RBM uses slice 0 throughout;
    O-RBM first rotates every image back to the canonical orientation.
    """
    if kind == "theta":
        if not ds.has_orientation and len(ds):
            raise ValueError("θ-RBM needs assigned orientations")
        return ds.images, ds.orientation_index
    zeros = np.zeros(len(ds), dtype=np.int64)
    if kind == "rbm":
        return ds.images, zeros
    if kind == "orbm":
        if not ds.has_orientation and len(ds):
            raise ValueError("O-RBM needs assigned orientations")
        aligned = np.empty_like(ds.images)
        for s in np.unique(ds.orientation_index):
            rows = ds.orientation_index == s
            aligned[rows] = rotate_rows(ds.images[rows], -support.angles[s], support)
        return aligned, zeros
    raise ValueError(f"unknown model kind {kind!r}")


def encode(m: ThetaRBM, kind: str, images: np.ndarray, r_index, support: SupportSet) -> np.ndarray:
    """Hidden probabilities of ``images`` whose orientations are ``r_index``.

    ``support`` is the full orientation support set, even for the
    single-slice baselines (O-RBM needs it to undo each image's rotation).
    """
    r = np.broadcast_to(np.asarray(r_index, dtype=np.int64), (len(images),))
    ds = ImageDataset(images, np.zeros(len(images), dtype=np.int64), support.side, r)
    x, slices = model_inputs(kind, ds, support)
    return hidden_given_visible(m, x, slices)


@dataclass
class TrainResult:
    model: ThetaRBM
    metrics: list = field(default_factory=list)
    state: TrainerState | None = None


def train(cfg: TrainConfig, train_ds: ImageDataset, support: SupportSet,
          on_epoch=None, on_step=None) -> TrainResult:
    """Train a model of kind ``cfg.model_kind`` on ``train_ds``.

    ``on_epoch(epoch, model, row)`` runs after every epoch (checkpointing);
    ``on_step(state)`` after every minibatch update.
    """
    images, r = model_inputs(cfg.model_kind, train_ds, support)
    msupport = model_support(cfg, support)
    rng = np.random.default_rng(cfg.seed)
    model = init_model(cfg, msupport, cfg.n_hidden, train_ds.n_pixels, rng)
    state = TrainerState.fresh(model)
    metrics = []
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        alpha = cfg.momentum(epoch)
        recon, act, batches = 0.0, 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            stats = update_step(state, images[idx], r[idx], cfg, msupport, rng, alpha)
            recon += stats.recon_error
            act += float(stats.hidden_mean.mean())
            batches += 1
            if on_step is not None:
                on_step(state)
        state.epoch = epoch + 1
        row = {
            "epoch": epoch + 1,
            "recon_error": recon / max(batches, 1),
            "mean_activation": act / max(batches, 1),
            "lemma_residual": lemma_residual(model.W, msupport),
        }
        metrics.append(row)
        log.info("epoch %d recon %.5f act %.4f residual %.3g", row["epoch"],
                 row["recon_error"], row["mean_activation"], row["lemma_residual"])
        if on_epoch is not None:
            on_epoch(epoch + 1, model, row)
    return TrainResult(model, metrics, state)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(cfg.to_json())


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))
