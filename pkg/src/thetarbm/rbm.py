"""Gated RBM with a one-hot rotation layer: conditionals, energies and CD statistics.

The weight tensor is stored slice-major, ``W[s]`` being the ``H x V`` filter
matrix for support angle ``s`` (each row a flattened image-shaped filter).
Because the rotation layer is one-hot, the bias terms of the three-way energy
reduce to ordinary unsliced biases ``b`` (hidden) and ``c`` (visible).
A plain RBM is the ``S = 1`` case.
"""

from __future__ import annotations

import io
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

BERNOULLI = "bernoulli"
GAUSSIAN = "gaussian"
UNIT_TYPES = (BERNOULLI, GAUSSIAN)

MAX_ENUMERATION_UNITS = 20

_MAGIC = b"THRBM\0"
_VERSION = 1


class NumericalError(FloatingPointError):
    """Non-finite values appeared in model parameters or updates."""


@dataclass
class ThetaRBM:
    W: np.ndarray  # (S, H, V)
    b: np.ndarray  # (H,)
    c: np.ndarray  # (V,)
    unit_type: str = GAUSSIAN
    side: int = 0
    angles: tuple = (0.0,)
    rotation_mode: str = "exact"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim == 2:
            self.W = self.W[None]
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        s, h, v = self.W.shape
        if self.unit_type not in UNIT_TYPES:
            raise ValueError(f"unknown unit type {self.unit_type!r}")
        if self.b.shape != (h,) or self.c.shape != (v,):
            raise ValueError("bias shapes do not match the weight tensor")
        if len(self.angles) != s:
            raise ValueError(f"{len(self.angles)} angles for {s} slices")
        if self.side and self.side * self.side != v:
            raise ValueError(f"side {self.side} does not match {v} visible units")
        self.angles = tuple(float(a) for a in self.angles)

    @property
    def n_hidden(self) -> int:
        return self.W.shape[1]

    @property
    def n_visible(self) -> int:
        return self.W.shape[2]

    @property
    def n_slices(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "ThetaRBM":
        return ThetaRBM(self.W.copy(), self.b.copy(), self.c.copy(), self.unit_type,
                        self.side, self.angles, self.rotation_mode)

    def check_finite(self, what: str = "model") -> None:
        for name in ("W", "b", "c"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"{what}: non-finite entries in {name}")

    def to_bytes(self) -> bytes:
        s, h, v = self.W.shape
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<IIIII", _VERSION, h, v, s, self.side))
        buf.write(struct.pack("<BB", UNIT_TYPES.index(self.unit_type),
                              0 if self.rotation_mode == "exact" else 1))
        buf.write(np.asarray(self.angles, dtype="<f8").tobytes())
        for arr in (self.W, self.b, self.c):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ThetaRBM":
        if not data.startswith(_MAGIC):
            raise ValueError("not a model checkpoint")
        off = len(_MAGIC)
        version, h, v, s, side = struct.unpack_from("<IIIII", data, off)
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off += 20
        unit, mode = struct.unpack_from("<BB", data, off)
        off += 2

        def take(count, shape):
            nonlocal off
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            return arr.astype(np.float64)

        angles = take(s, (s,))
        W = take(s * h * v, (s, h, v))
        b = take(h, (h,))
        c = take(v, (v,))
        if off != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return cls(W, b, c, UNIT_TYPES[unit], side, tuple(angles), "exact" if mode == 0 else "nn")

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ThetaRBM":
        return cls.from_bytes(Path(path).read_bytes())


def zeros_model(n_hidden: int, n_visible: int, n_slices: int = 1, unit_type: str = BERNOULLI,
                side: int = 0, angles=None) -> ThetaRBM:
    angles = tuple(range(n_slices)) if angles is None else angles
    return ThetaRBM(np.zeros((n_slices, n_hidden, n_visible)), np.zeros(n_hidden),
                    np.zeros(n_visible), unit_type, side, angles)


def _slices(r_index, n: int, n_slices: int) -> np.ndarray:
    r = np.broadcast_to(np.asarray(r_index, dtype=np.int64), (n,))
    if n and (r.min() < 0 or r.max() >= n_slices):
        raise IndexError(f"slice index out of range 0..{n_slices - 1}")
    return r


def _by_slice(r: np.ndarray):
    """Yield ``(slice, row_indices)`` in ascending slice order."""
    for s in np.unique(r):
        yield int(s), np.flatnonzero(r == s)


def hidden_input(m: ThetaRBM, v: np.ndarray, r_index) -> np.ndarray:
    """Pre-sigmoid hidden activations ``b + W[r] v`` for one or many visibles."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    v2 = np.atleast_2d(v)
    r = _slices(r_index, len(v2), m.n_slices)
    out = np.empty((len(v2), m.n_hidden))
    for s, rows in _by_slice(r):
        out[rows] = v2[rows] @ m.W[s].T + m.b
    return out[0] if single else out


def hidden_given_visible(m: ThetaRBM, v: np.ndarray, r_index) -> np.ndarray:
    """``p(h_j = 1 | v, r)``; identical for Bernoulli and unit-variance Gaussian visibles."""
    return expit(hidden_input(m, v, r_index))


def visible_given_hidden(m: ThetaRBM, h: np.ndarray, r_index) -> np.ndarray:
    """Bernoulli: ``p(v_k = 1 | h, r)``. Gaussian: the conditional mean."""
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    h2 = np.atleast_2d(h)
    r = _slices(r_index, len(h2), m.n_slices)
    out = np.empty((len(h2), m.n_visible))
    for s, rows in _by_slice(r):
        out[rows] = h2[rows] @ m.W[s] + m.c
    if m.unit_type == BERNOULLI:
        out = expit(out)
    return out[0] if single else out


def sample_visible(m: ThetaRBM, h: np.ndarray, r_index, rng: np.random.Generator) -> np.ndarray:
    mean = visible_given_hidden(m, h, r_index)
    if m.unit_type == BERNOULLI:
        return (rng.random(mean.shape) < mean).astype(np.float64)
    return mean + rng.standard_normal(mean.shape)


def energy(m: ThetaRBM, v: np.ndarray, h: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Three-way energy evaluated through the full tensor with rotation vector ``r``.

    ``r`` may be any length-S vector (one-hot for valid states); batched
    ``v``/``h``/``r`` are supported along the leading axis.
    """
    v = np.atleast_2d(v)
    h = np.atleast_2d(h)
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    inter = np.einsum("ns,shv,nv,nh->n", r, m.W, v, h)
    bias = r.sum(axis=1) * (h @ m.b + v @ m.c)
    e = -inter - bias
    if m.unit_type == GAUSSIAN:
        # unit-variance Gaussian visibles: c.v becomes ||v - c||^2 / 2
        e = e + r.sum(axis=1) * (0.5 * np.sum((v - m.c) ** 2, axis=1) + v @ m.c)
    return e


def free_energy(m: ThetaRBM, v: np.ndarray, r_index) -> np.ndarray:
    """``-log sum_h exp(-E(v, h, r))`` with ``r`` one-hot at ``r_index``."""
    v = np.asarray(v, dtype=np.float64)
    x = hidden_input(m, v, r_index)
    softplus = -log_expit(-x)
    if m.unit_type == GAUSSIAN:
        vis = 0.5 * np.sum((v - m.c) ** 2, axis=-1)
    else:
        vis = -(v @ m.c)
    return vis - softplus.sum(axis=-1)


@dataclass
class JointTable:
    """Exact Boltzmann distribution over all binary ``(v, h)`` for one slice."""

    visible_states: np.ndarray  # (2**V, V)
    hidden_states: np.ndarray  # (2**H, H)
    prob: np.ndarray  # (2**V, 2**H)

    def p_hidden_given_visible(self) -> np.ndarray:
        """``p(h_j = 1 | v)`` for every visible state, shape ``(2**V, H)``."""
        cond = self.prob / self.prob.sum(axis=1, keepdims=True)
        return cond @ self.hidden_states

    def p_visible_given_hidden(self) -> np.ndarray:
        cond = self.prob / self.prob.sum(axis=0, keepdims=True)
        return cond.T @ self.visible_states

    def marginal_visible(self) -> np.ndarray:
        return self.prob.sum(axis=1)


def _binary_states(n: int) -> np.ndarray:
    return np.array(list(itertools.product((0.0, 1.0), repeat=n))).reshape(2 ** n, n)


def enumerate_oracle(m: ThetaRBM, r_index: int) -> JointTable:
    """Brute-force joint distribution; only for tiny Bernoulli models."""
    if m.unit_type != BERNOULLI:
        raise ValueError("enumeration needs binary visible units")
    if m.n_hidden + m.n_visible > MAX_ENUMERATION_UNITS:
        raise ValueError(f"H + V = {m.n_hidden + m.n_visible} exceeds {MAX_ENUMERATION_UNITS}")
    if not 0 <= r_index < m.n_slices:
        raise IndexError("slice index out of range")
    vs = _binary_states(m.n_visible)
    hs = _binary_states(m.n_hidden)
    r = np.zeros(m.n_slices)
    r[r_index] = 1.0
    # -E for every (v, h) pair, computed from the tensor contraction with r
    W_eff = np.einsum("s,shv->hv", r, m.W)
    neg_e = vs @ W_eff.T @ hs.T + (hs @ m.b)[None, :] + (vs @ m.c)[:, None]
    neg_e -= neg_e.max()
    p = np.exp(neg_e)
    return JointTable(vs, hs, p / p.sum())


@dataclass
class CDStats:
    """Raw CD statistics for one minibatch.

    ``dW`` has nonzero content only in the slices listed in ``slices``.
    """

    dW: np.ndarray
    db: np.ndarray
    dc: np.ndarray
    slices: tuple
    hidden_mean: np.ndarray
    recon_error: float
    extra: dict = field(default_factory=dict)


def cd_gradient(m: ThetaRBM, v0: np.ndarray, r_index, k: int, rng,
                sample_visible_units: bool = False) -> CDStats:
    """CD-k statistics, each item's chain running inside its own slice.

    Hidden probabilities feed both the positive and the negative statistics;
    sampled hidden states only drive the chain. Visible reconstructions use the
    conditional mean unless ``sample_visible_units`` is set. Random numbers are
    drawn for the whole batch in item order, so grouping by slice does not
    change the stream.
    """
    if k < 1:
        raise ValueError("CD needs k >= 1")
    v0 = np.atleast_2d(np.asarray(v0, dtype=np.float64))
    n = len(v0)
    if n == 0:
        raise ValueError("empty batch")
    r = _slices(r_index, n, m.n_slices)
    ph0 = hidden_given_visible(m, v0, r)
    ph = ph0
    vk = v0
    for _ in range(k):
        h = (rng.random(ph.shape) < ph).astype(np.float64)
        if sample_visible_units:
            vk = sample_visible(m, h, r, rng)
        else:
            vk = visible_given_hidden(m, h, r)
        ph = hidden_given_visible(m, vk, r)
    dW = np.zeros_like(m.W)
    present = []
    for s, rows in _by_slice(r):
        dW[s] = (ph0[rows].T @ v0[rows] - ph[rows].T @ vk[rows]) / n
        present.append(s)
    db = (ph0 - ph).mean(axis=0)
    dc = (v0 - vk).mean(axis=0)
    recon = float(np.mean((v0 - visible_given_hidden(m, ph0, r)) ** 2))
    return CDStats(dW, db, dc, tuple(present), ph0.mean(axis=0), recon)
