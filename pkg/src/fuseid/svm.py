"""Soft-margin SVM trained with SMO, combined one-vs-one for multiclass.

The binary solver works on the standard dual

    min_a  1/2 a^T Q a - sum(a)    s.t.  y^T a = 0,  0 <= a_i <= C,

with Q_ij = y_i y_j K(x_i, x_j), picking the maximal violating pair each step.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SVM_MAGIC = b"FUSESVM1"
STD_FLOOR = 1e-8
FULL_GRAM_LIMIT = 4096
TAU = 1e-12


class SvmFormatError(ValueError):
    pass


class ClassCoverageError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "poly"
    degree: int = 3
    gamma: float | None = None  # None -> 1 / feature_dim at training time
    coef0: float = 0.0

    def validate(self) -> None:
        if self.kind not in ("poly", "linear"):
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def resolve(self, feature_dim: int) -> "KernelSpec":
        if self.gamma is None:
            return replace(self, gamma=1.0 / feature_dim)
        return self


def kernel_matrix(k: KernelSpec, X, Y) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"kernel inputs differ in dimension: {X.shape[1]} vs {Y.shape[1]}")
    dots = X @ Y.T
    if k.kind == "linear":
        return dots
    gamma = 1.0 / X.shape[1] if k.gamma is None else k.gamma
    return (gamma * dots + k.coef0) ** k.degree


def kernel_eval(k: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"kernel inputs differ in dimension: {x.shape} vs {y.shape}")
    return float(kernel_matrix(k, x[None, :], y[None, :])[0, 0])


@dataclass
class BinarySvm:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i for each support vector
    bias: float
    kernel: KernelSpec
    classes: tuple = (0, 1)  # positive decision -> classes[0]
    regularization: float = 1.0
    support_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    alpha: np.ndarray | None = None  # full dual vector over the training set
    converged: bool = True
    n_iter: int = 0

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if len(self.dual_coef) == 0:
            return np.full(len(X), self.bias)
        return kernel_matrix(self.kernel, X, self.support_vectors) @ self.dual_coef + self.bias

    def predict(self, X) -> np.ndarray:
        """+1 / -1 labels."""
        return np.where(self.decision_function(X) > 0, 1, -1)


class _Gram:
    """Kernel columns: a full matrix for small problems, computed rows otherwise."""

    def __init__(self, k: KernelSpec, X: np.ndarray):
        self.k, self.X = k, X
        self.full = kernel_matrix(k, X, X) if len(X) <= FULL_GRAM_LIMIT else None
        if self.full is not None:
            self.diag = np.diag(self.full).copy()
        else:
            self.diag = np.array([kernel_eval(k, x, x) for x in X])

    def column(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[:, i]
        return kernel_matrix(self.k, self.X, self.X[i:i + 1])[:, 0]


def dual_objective(alpha, y, K) -> float:
    """sum(a) - 1/2 sum_ij a_i a_j y_i y_j K_ij (the maximisation form)."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def train_binary(features, labels, kernel: KernelSpec | None = None, regularization: float = 1.0,
                 tol: float = 1e-3, max_passes: int = 10_000) -> BinarySvm:
    """Train a binary SVM on labels in {+1, -1}.

    Stops when the maximal KKT violation drops to ``tol`` or after
    ``max_passes * n`` pair updates; in the latter case ``converged`` is False.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(X) != len(y):
        raise ValueError("features and labels differ in length")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("binary labels must be +1 or -1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ClassCoverageError("binary SVM needs both classes present")
    if regularization <= 0:
        raise ValueError("regularization must be positive")
    kernel = (kernel or KernelSpec()).resolve(X.shape[1])
    kernel.validate()
    C = float(regularization)
    n = len(y)
    gram = _Gram(kernel, X)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # Q alpha - e
    converged = False
    max_iter = max_passes * n
    it = 0
    while it < max_iter:
        yg = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.flatnonzero(up)[np.argmax(yg[up])])
        j = int(np.flatnonzero(low)[np.argmin(yg[low])])
        gap = yg[i] - yg[j]
        if gap <= tol:
            converged = True
            break
        Ki, Kj = gram.column(i), gram.column(j)
        curv = max(gram.diag[i] + gram.diag[j] - 2.0 * Ki[j], TAU)
        d = gap / curv
        d = min(d, C - alpha[i] if y[i] > 0 else alpha[i])
        d = min(d, alpha[j] if y[j] > 0 else C - alpha[j])
        alpha[i] += y[i] * d
        alpha[j] -= y[j] * d
        for t in (i, j):
            if alpha[t] < C * 1e-12:
                alpha[t] = 0.0
            elif alpha[t] > C * (1 - 1e-12):
                alpha[t] = C
        grad += d * y * (Ki - Kj)
        it += 1
    if not converged:
        log.warning("SMO hit the iteration cap (%d) before reaching tol=%g", max_iter, tol)

    rho = _rho(alpha, y, grad, C)
    sv = np.flatnonzero(alpha > 0)
    return BinarySvm(X[sv].copy(), alpha[sv] * y[sv], -rho, kernel, (0, 1), C, sv,
                     alpha, converged, it)


def _rho(alpha, y, grad, C) -> float:
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(yg[free].mean())
    ub, lb = np.inf, -np.inf
    for a, yt, v in zip(alpha, y, yg):
        if (yt > 0 and a >= C) or (yt < 0 and a <= 0):
            lb = max(lb, v)
        else:
            ub = min(ub, v)
    if not np.isfinite(ub):
        ub = lb
    if not np.isfinite(lb):
        lb = ub
    return float((ub + lb) / 2)


def normalize_features(features, stats: tuple | None = None):
    """Per-dimension z-score. Returns (normalized, (mean, scale))."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if stats is None:
        if len(X) == 0:
            raise ValueError("cannot compute normalization statistics from an empty set")
        mean = X.mean(axis=0)
        scale = np.maximum(X.std(axis=0), STD_FLOOR)
    else:
        mean, scale = stats
        if mean.shape[0] != X.shape[1]:
            raise ValueError(f"normalization stats have dim {mean.shape[0]}, features {X.shape[1]}")
    return (X - mean) / scale, (mean, scale)


@dataclass
class SvmModel:
    machines: list
    num_classes: int
    mean: np.ndarray
    scale: np.ndarray
    kernel: KernelSpec
    regularization: float = 1.0
    sv_pool: np.ndarray | None = None  # unique support vectors (normalized space)
    pool_indices: list = field(default_factory=list)  # per machine rows into sv_pool

    @property
    def feature_dim(self) -> int:
        return self.mean.shape[0]

    def decision_values(self, features) -> np.ndarray:
        """(n_samples, n_machines) decision values on raw (unnormalized) features."""
        Xn, _ = normalize_features(features, (self.mean, self.scale))
        if self.sv_pool is None:
            return np.stack([m.decision_function(Xn) for m in self.machines], axis=1)
        Kp = kernel_matrix(self.kernel, Xn, self.sv_pool)
        out = np.empty((len(Xn), len(self.machines)))
        for c, (m, idx) in enumerate(zip(self.machines, self.pool_indices)):
            out[:, c] = Kp[:, idx] @ m.dual_coef + m.bias
        return out


def train_multiclass(features, labels, kernel: KernelSpec | None = None,
                     regularization: float = 1.0, num_classes: int | None = None,
                     tol: float = 1e-3, max_passes: int = 10_000) -> SvmModel:
    """One binary machine per class pair (i < j), each on that pair's samples only."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if len(X) != len(labels):
        raise ValueError("features and labels differ in length")
    C = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    if C < 2:
        raise ClassCoverageError("need at least 2 classes")
    if labels.min() < 0 or labels.max() >= C:
        raise ClassCoverageError("label out of range")
    counts = np.bincount(labels, minlength=C)
    if np.any(counts == 0):
        raise ClassCoverageError(f"classes without samples: {np.flatnonzero(counts == 0)[:10].tolist()}")
    Xn, (mean, scale) = normalize_features(X)
    kernel = (kernel or KernelSpec()).resolve(X.shape[1])
    kernel.validate()

    members = [np.flatnonzero(labels == c) for c in range(C)]
    machines, global_sv = [], []
    for i in range(C):
        for j in range(i + 1, C):
            idx = np.concatenate([members[i], members[j]])
            y = np.where(labels[idx] == i, 1.0, -1.0)
            m = train_binary(Xn[idx], y, kernel, regularization, tol, max_passes)
            m.classes = (i, j)
            m.alpha = None
            global_sv.append(idx[m.support_indices])
            m.support_indices = idx[m.support_indices]
            machines.append(m)
    pool_rows = np.unique(np.concatenate(global_sv)) if global_sv else np.zeros(0, np.int64)
    lookup = {r: k for k, r in enumerate(pool_rows)}
    pool_indices = [np.array([lookup[r] for r in g], dtype=np.int64) for g in global_sv]
    return SvmModel(machines, C, mean, scale, kernel, float(regularization),
                    Xn[pool_rows].copy(), pool_indices)


def vote(decisions: np.ndarray, pairs, num_classes: int) -> np.ndarray:
    """Majority vote over pairwise decisions.

    Ties go to the tied class with the largest summed |decision| over the
    machines it won, then to the lowest class index.
    """
    decisions = np.atleast_2d(decisions)
    n = len(decisions)
    votes = np.zeros((n, num_classes), dtype=np.int64)
    strength = np.zeros((n, num_classes))
    rows = np.arange(n)
    for c, (i, j) in enumerate(pairs):
        d = decisions[:, c]
        winner = np.where(d > 0, i, j)
        votes[rows, winner] += 1
        strength[rows, winner] += np.abs(d)
    out = np.empty(n, dtype=np.int64)
    for r in range(n):
        tied = np.flatnonzero(votes[r] == votes[r].max())
        out[r] = tied[np.argmax(strength[r, tied])] if len(tied) > 1 else tied[0]
    return out


def predict(model: SvmModel, features):
    """Class index for one feature vector, or an array of indices for a matrix."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.shape[-1] != model.feature_dim:
        raise ValueError(f"feature dim {arr.shape[-1]} does not match model dim {model.feature_dim}")
    pred = vote(model.decision_values(arr), [m.classes for m in model.machines], model.num_classes)
    return int(pred[0]) if arr.ndim == 1 else pred


def encode_svm(model: SvmModel) -> bytes:
    if model.sv_pool is None:
        raise ValueError("only pooled models (from train_multiclass) can be serialized")
    k = model.kernel
    header = json.dumps({
        "num_classes": model.num_classes,
        "feature_dim": model.feature_dim,
        "kernel": {"kind": k.kind, "degree": k.degree, "gamma": k.gamma, "coef0": k.coef0},
        "regularization": model.regularization,
        "pool_size": int(len(model.sv_pool)),
        "normalization": "zscore",
        "machines": [{"classes": list(m.classes), "n_sv": int(len(idx)),
                      "converged": bool(m.converged), "n_iter": int(m.n_iter)}
                     for m, idx in zip(model.machines, model.pool_indices)],
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [SVM_MAGIC, struct.pack("<I", len(header)), header,
             model.mean.astype("<f8").tobytes(), model.scale.astype("<f8").tobytes(),
             np.ascontiguousarray(model.sv_pool, dtype="<f8").tobytes()]
    for m, idx in zip(model.machines, model.pool_indices):
        parts.append(idx.astype("<i4").tobytes())
        parts.append(np.asarray(m.dual_coef, dtype="<f8").tobytes())
        parts.append(struct.pack("<d", m.bias))
    return b"".join(parts)


def save_svm(model: SvmModel, path) -> None:
    Path(path).write_bytes(encode_svm(model))


def decode_svm(buf: bytes) -> SvmModel:
    if buf[:len(SVM_MAGIC)] != SVM_MAGIC:
        raise SvmFormatError("not a FUSESVM1 file")
    pos = len(SVM_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise SvmFormatError("truncated SVM file")
        out = buf[pos:pos + n]
        pos += n
        return out

    (hlen,) = struct.unpack("<I", take(4))
    try:
        h = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SvmFormatError(f"bad SVM header: {exc}") from None
    d, P = h["feature_dim"], h["pool_size"]
    kernel = KernelSpec(**h["kernel"])
    mean = np.frombuffer(take(8 * d), "<f8").astype(np.float64)
    scale = np.frombuffer(take(8 * d), "<f8").astype(np.float64)
    pool = np.frombuffer(take(8 * d * P), "<f8").astype(np.float64).reshape(P, d)
    machines, pool_indices = [], []
    for meta in h["machines"]:
        k = meta["n_sv"]
        idx = np.frombuffer(take(4 * k), "<i4").astype(np.int64)
        coef = np.frombuffer(take(8 * k), "<f8").astype(np.float64)
        (bias,) = struct.unpack("<d", take(8))
        if np.any(idx >= P):
            raise SvmFormatError("support vector index out of range")
        machines.append(BinarySvm(pool[idx], coef, bias, kernel, tuple(meta["classes"]),
                                  h["regularization"], converged=meta["converged"],
                                  n_iter=meta["n_iter"]))
        pool_indices.append(idx)
    if pos != len(buf):
        raise SvmFormatError(f"{len(buf) - pos} trailing bytes in SVM file")
    return SvmModel(machines, h["num_classes"], mean, scale, kernel, h["regularization"],
                    pool, pool_indices)


def load_svm(path) -> SvmModel:
    return decode_svm(Path(path).read_bytes())
