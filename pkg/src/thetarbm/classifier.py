"""One-vs-rest RBF-kernel SVM trained with SMO, on hidden-unit features."""

from __future__ import annotations

import io
import logging
import struct
import warnings
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ImageDataset
from .rbm import ThetaRBM
from .rotation import SupportSet
from .trainer import encode

log = logging.getLogger(__name__)

_FEAT_MAGIC = b"THFEAT\0"
_TAU = 1e-12


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class FeatureMatrix:
    rows: np.ndarray  # (N, H)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.rows) != len(self.labels):
            raise ValueError(f"{len(self.rows)} feature rows but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def to_bytes(self) -> bytes:
        n, h = self.rows.shape
        buf = io.BytesIO()
        buf.write(_FEAT_MAGIC)
        buf.write(struct.pack("<IQQ", 1, n, h))
        buf.write(np.ascontiguousarray(self.rows, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureMatrix":
        if not data.startswith(_FEAT_MAGIC):
            raise ValueError("not a feature file")
        off = len(_FEAT_MAGIC)
        version, n, h = struct.unpack_from("<IQQ", data, off)
        if version != 1:
            raise ValueError(f"unsupported feature file version {version}")
        off += 20
        if len(data) != off + 8 * n * h + 8 * n:
            raise ValueError("feature file size does not match its header")
        rows = np.frombuffer(data, "<f8", n * h, off).reshape(n, h).astype(np.float64)
        labels = np.frombuffer(data, "<i8", n, off + 8 * n * h).astype(np.int64)
        return cls(rows, labels)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        return cls.from_bytes(Path(path).read_bytes())


def extract_features(m: ThetaRBM, ds: ImageDataset, support: SupportSet,
                     kind: str = "theta") -> FeatureMatrix:
    """Hidden probabilities of every image at its own orientation slice."""
    if ds.n_pixels != m.n_visible:
        raise ValueError(f"images have {ds.n_pixels} pixels, model expects {m.n_visible}")
    r = ds.orientation_index if ds.has_orientation else np.zeros(len(ds), dtype=np.int64)
    return FeatureMatrix(encode(m, kind, ds.images, r, support), ds.labels)


def kernel_gamma(sigma: float | None = None, gamma: float | None = None) -> float:
    """RBF coefficient in ``exp(-gamma |a - b|^2)``; a width ``sigma`` maps to ``1 / (2 sigma^2)``."""
    if (sigma is None) == (gamma is None):
        raise ValueError("give exactly one of sigma or gamma")
    if gamma is not None:
        if gamma <= 0:
            raise ValueError("kernel gamma must be positive")
        return float(gamma)
    if sigma <= 0:
        raise ValueError("kernel sigma must be positive")
    return 1.0 / (2.0 * sigma * sigma)


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


class KernelCache:
    """Kernel rows computed on demand, least recently used rows evicted first."""

    def __init__(self, x: np.ndarray, gamma: float, max_rows: int | None = None):
        self.x = x
        self.gamma = gamma
        self.sq = (x * x).sum(1)
        self.max_rows = len(x) if max_rows is None else max(2, max_rows)
        self.rows: OrderedDict[int, np.ndarray] = OrderedDict()
        self.misses = 0

    def row(self, i: int) -> np.ndarray:
        r = self.rows.get(i)
        if r is not None:
            self.rows.move_to_end(i)
            return r
        self.misses += 1
        d = self.sq[i] + self.sq - 2.0 * (self.x @ self.x[i])
        r = np.exp(-self.gamma * np.maximum(d, 0.0))
        r[i] = 1.0
        self.rows[i] = r
        if len(self.rows) > self.max_rows:
            self.rows.popitem(last=False)
        return r


@dataclass
class BinarySvm:
    """Dual solution of one two-class machine: ``f(x) = sum coef_i k(sv_i, x) + bias``."""

    alpha: np.ndarray  # dual variables for every training point
    y: np.ndarray  # +-1 targets
    bias: float
    converged: bool
    iterations: int

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.alpha > 0)

    @property
    def dual_coef(self) -> np.ndarray:
        return (self.alpha * self.y)[self.support]


def smo(x: np.ndarray, y: np.ndarray, C: float, gamma: float, tol: float = 1e-3,
        max_iter: int | None = None, cache_rows: int | None = None) -> BinarySvm:
    """Solve the C-SVM dual with maximal-violating-pair SMO and second-order pair choice.

    Stops when the largest KKT gap ``m(a) - M(a)`` drops below ``tol``.
    """
    y = np.where(np.asarray(y) > 0, 1.0, -1.0)
    n = len(y)
    if max_iter is None:
        max_iter = max(10_000_000, 100 * n)
    cache = KernelCache(x, gamma, cache_rows)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - e'a, Q_ij = y_i y_j K_ij
    qd = np.ones(n)  # RBF diagonal
    it = 0
    converged = False
    while it < max_iter:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        score = -y * grad
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.argmax(np.where(up, score, -np.inf)))
        gmax = score[i]
        gmin = np.min(np.where(low, score, np.inf))
        if gmax - gmin < tol:
            converged = True
            break
        ki = cache.row(i)
        cand = low & (score < gmax)
        bdiff = gmax - score
        quad = np.maximum(qd[i] + qd - 2.0 * ki, _TAU)
        obj = np.where(cand, -(bdiff * bdiff) / quad, np.inf)
        j = int(np.argmin(obj))
        kj = cache.row(j)
        yi, yj = y[i], y[j]
        old_ai, old_aj = alpha[i], alpha[j]
        q = max(qd[i] + qd[j] - 2.0 * ki[j], _TAU)
        if yi != yj:
            delta = (-grad[i] - grad[j]) / q
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            elif alpha[j] > C:
                alpha[j] = C
                alpha[i] = C + diff
        else:
            delta = (grad[i] - grad[j]) / q
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            elif alpha[j] < 0:
                alpha[j] = 0.0
                alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = total
        dai = alpha[i] - old_ai
        daj = alpha[j] - old_aj
        grad += y * (yi * dai * ki + yj * daj * kj)
        it += 1
    if not converged:
        warnings.warn(f"SMO stopped after {max_iter} iterations without converging",
                      ConvergenceWarning, stacklevel=2)
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(np.mean(yg[free]))
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        ub = np.min(yg[low]) if low.any() else np.inf
        lb = np.max(yg[up]) if up.any() else -np.inf
        if not np.isfinite(ub):
            ub = lb
        if not np.isfinite(lb):
            lb = ub
        rho = float((ub + lb) / 2.0)
    return BinarySvm(alpha, y, -rho, converged, it)


@dataclass
class SvmModel:
    """One binary machine per class; the class with the largest decision value wins."""

    classes: np.ndarray
    machines: list
    support_vectors: np.ndarray  # union of support vectors, (M, H)
    coef: np.ndarray  # (n_classes, M) dual coefficients alpha_i y_i
    bias: np.ndarray  # (n_classes,)
    gamma: float
    C: float
    extra: dict = field(default_factory=dict)

    def decision_function(self, f: FeatureMatrix | np.ndarray) -> np.ndarray:
        x = f.rows if isinstance(f, FeatureMatrix) else np.atleast_2d(f)
        if x.shape[1] != self.support_vectors.shape[1]:
            raise ValueError(f"features have {x.shape[1]} columns, model expects "
                             f"{self.support_vectors.shape[1]}")
        k = rbf_kernel(x, self.support_vectors, self.gamma)
        return k @ self.coef.T + self.bias

    def save(self, path) -> None:
        np.savez(path, classes=self.classes, sv=self.support_vectors, coef=self.coef,
                 bias=self.bias, gamma=self.gamma, C=self.C)

    @classmethod
    def load(cls, path) -> "SvmModel":
        with np.load(path) as z:
            return cls(z["classes"], [], z["sv"], z["coef"], z["bias"], float(z["gamma"]), float(z["C"]))


def svm_train(f: FeatureMatrix, C: float = 10.0, gamma_kernel: float = 0.02, tol: float = 1e-3,
              max_iter: int | None = None, cache_rows: int | None = None,
              threads: int = 1) -> SvmModel:
    """Train one-vs-rest machines with RBF kernel ``exp(-gamma_kernel |a-b|^2)``."""
    if C <= 0:
        raise ValueError("C must be positive")
    classes = np.unique(f.labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    x = f.rows

    def fit(c):
        return smo(x, np.where(f.labels == c, 1.0, -1.0), C, gamma_kernel, tol, max_iter, cache_rows)

    targets = classes if len(classes) > 2 else classes[1:]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            machines = list(pool.map(fit, targets))
    else:
        machines = [fit(c) for c in targets]
    used = np.flatnonzero(np.any([mc.alpha > 0 for mc in machines], axis=0))
    coef = np.array([(mc.alpha * mc.y)[used] for mc in machines])
    bias = np.array([mc.bias for mc in machines])
    if len(classes) == 2:
        # a single machine separates class 1 (+) from class 0 (-)
        coef = np.vstack([-coef, coef])
        bias = np.array([-bias[0], bias[0]])
    model = SvmModel(classes, machines, x[used], coef, bias, gamma_kernel, C)
    model.extra["iterations"] = [mc.iterations for mc in machines]
    model.extra["converged"] = all(mc.converged for mc in machines)
    return model


def svm_predict(m: SvmModel, f: FeatureMatrix) -> tuple[np.ndarray, float]:
    """Predicted labels and error rate against ``f.labels``; ties go to the lowest class."""
    scores = m.decision_function(f)
    pred = m.classes[np.argmax(scores, axis=1)]
    err = float(np.mean(pred != f.labels)) if len(f) else 0.0
    return pred, err


def kkt_violation(x: np.ndarray, machine: BinarySvm, C: float, gamma: float) -> float:
    """Largest violation of the box-constrained KKT conditions in margin units."""
    f = rbf_kernel(x, x, gamma) @ (machine.alpha * machine.y) + machine.bias
    yf = machine.y * f
    a = machine.alpha
    at_zero = a <= 0
    at_c = a >= C
    free = ~at_zero & ~at_c
    viol = np.zeros(len(a))
    viol[at_zero] = np.maximum(0.0, 1.0 - yf[at_zero])
    viol[free] = np.abs(yf[free] - 1.0)
    viol[at_c] = np.maximum(0.0, yf[at_c] - 1.0)
    return float(viol.max()) if len(viol) else 0.0
