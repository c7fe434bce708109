"""Soft-margin kernel SVM solved with simplified SMO.

Labels are +1 / -1; in this package Healthy maps to +1 and PD to -1, and a
decision value of exactly 0 is predicted as +1.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import HEALTHY

log = logging.getLogger(__name__)

LINEAR = "linear"
RBF = "rbf"


@dataclass(frozen=True)
class KernelSpec:
    name: str = RBF
    gamma: float | None = None  # rbf only; None -> 1 / (dims * var(X)) at fit time

    def __post_init__(self):
        if self.name not in (LINEAR, RBF):
            raise ValueError(f"unknown kernel {self.name!r}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("rbf gamma must be > 0")


@dataclass(frozen=True)
class SvmConfig:
    C: float = 1.0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    tolerance: float = 1e-3
    max_passes: int = 10       # consecutive sweeps without progress before giving up
    max_sweeps: int = 10_000

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be > 0")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_passes < 1 or self.max_sweeps < 1:
            raise ValueError("max_passes and max_sweeps must be >= 1")


@dataclass(frozen=True, eq=False)
class SvmModel:
    support_vectors: np.ndarray
    alphas: np.ndarray
    sv_labels: np.ndarray
    bias: float
    kernel: KernelSpec        # gamma always resolved
    C: float
    converged: bool = True
    objective_trace: tuple = ()
    support_index: np.ndarray | None = None   # training rows of the SVs; not serialized

    @property
    def n_features(self) -> int:
        return self.support_vectors.shape[1]


def _as_vec(u):
    return np.asarray(u, dtype=np.float64).ravel()


def kernel_eval(spec: KernelSpec, u, v) -> float:
    u, v = _as_vec(u), _as_vec(v)
    if u.shape != v.shape:
        raise ValueError(f"vector lengths differ: {u.size} vs {v.size}")
    if spec.name == LINEAR:
        return float(u @ v)
    if spec.gamma is None:
        raise ValueError("rbf kernel needs a resolved gamma")
    d = u - v
    return float(np.exp(-spec.gamma * (d @ d)))


def kernel_matrix(spec: KernelSpec, A, B) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if spec.name == LINEAR:
        return A @ B.T
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    return np.exp(-spec.gamma * np.maximum(sq, 0.0))


def resolve_kernel(spec: KernelSpec, X) -> KernelSpec:
    if spec.name == LINEAR or spec.gamma is not None:
        return spec
    X = np.asarray(X, dtype=np.float64)
    var = X.var()
    gamma = 1.0 / (X.shape[1] * var) if var > 0 else 1.0
    return KernelSpec(RBF, float(gamma))


def labels_to_signs(labels) -> np.ndarray:
    """Healthy -> +1, PD -> -1."""
    return np.where(np.asarray(labels) == HEALTHY, 1.0, -1.0)


def dual_objective(alpha, y, K) -> float:
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def kkt_violations(alpha, y, f, C, tol) -> np.ndarray:
    """Boolean mask of points breaking the KKT conditions by more than ``tol``."""
    m = y * f
    lower = alpha <= 0
    upper = alpha >= C
    free = ~lower & ~upper
    return (lower & (m < 1 - tol)) | (upper & (m > 1 + tol)) | (free & (np.abs(m - 1) > tol))


def _bias_from(alpha, y, f_nob, C):
    # average over free vectors, else the midpoint of the feasible interval
    free = (alpha > 0) & (alpha < C)
    if np.any(free):
        return float(np.mean(y[free] - f_nob[free]))
    r = y - f_nob
    lo_mask = ((alpha <= 0) & (y > 0)) | ((alpha >= C) & (y < 0))   # b >= r
    hi_mask = ((alpha <= 0) & (y < 0)) | ((alpha >= C) & (y > 0))   # b <= r
    lo = r[lo_mask].max() if np.any(lo_mask) else -np.inf
    hi = r[hi_mask].min() if np.any(hi_mask) else np.inf
    if np.isfinite(lo) and np.isfinite(hi):
        return float(0.5 * (lo + hi))
    return float(lo if np.isfinite(lo) else hi)


def smo_train(X, y, config: SvmConfig | None = None, seed: int = 0) -> SvmModel:
    """Train on rows of ``X`` with ``y`` in {-1, +1}.

    First index: sweep over all KKT violators. Second index: the partner
    with the largest error gap, falling back to a seeded random permutation
    and taking the first partner that makes progress. After a sweep
    with no progress the KKT conditions are checked with the bias re-fitted
    from the free vectors; the model is flagged non-converged if
    ``max_passes`` idle sweeps (or ``max_sweeps`` in total) pass without
    certifying them.
    """
    config = config or SvmConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be samples x dims with one label per row")
    if not np.isin(y, (-1.0, 1.0)).all():
        raise ValueError("labels must be -1 or +1")
    if np.unique(y).size < 2:
        raise ValueError("SVM training needs both classes")
    n = X.shape[0]
    C, tol = config.C, config.tolerance
    kernel = resolve_kernel(config.kernel, X)
    K = kernel_matrix(kernel, X, X)
    rng = np.random.default_rng(seed)

    alpha = np.zeros(n)
    b = 0.0
    f_nob = np.zeros(n)   # sum_j alpha_j y_j K(x_j, x_i)
    objective = [0.0]
    idle = 0
    converged = False
    sweeps = 0
    eps = 1e-12
    snap_tol = 1e-10 * C
    def snap(a):
        if a < snap_tol:
            return 0.0
        if a > C - snap_tol:
            return C
        return a

    def take_step(i, j):
        nonlocal b
        E_i = f_nob[i] + b - y[i]
        E_j = f_nob[j] + b - y[j]
        a_i, a_j = alpha[i], alpha[j]
        if y[i] != y[j]:
            L, H = max(0.0, a_j - a_i), min(C, C + a_j - a_i)
        else:
            L, H = max(0.0, a_i + a_j - C), min(C, a_i + a_j)
        if H - L < eps:
            return False
        eta = 2.0 * K[i, j] - K[i, i] - K[j, j]
        if eta >= 0:
            return False
        new_j = min(H, max(L, a_j - y[j] * (E_i - E_j) / eta))
        if abs(new_j - a_j) < eps * (new_j + a_j + eps):
            return False
        new_i = min(C, max(0.0, a_i + y[i] * y[j] * (a_j - new_j)))
        # land exactly on the box when within rounding of it
        new_i = snap(new_i)
        new_j = snap(new_j)
        d_i, d_j = new_i - a_i, new_j - a_j
        b1 = b - E_i - y[i] * d_i * K[i, i] - y[j] * d_j * K[i, j]
        b2 = b - E_j - y[i] * d_i * K[i, j] - y[j] * d_j * K[j, j]
        if 0 < new_i < C:
            b = b1
        elif 0 < new_j < C:
            b = b2
        else:
            b = 0.5 * (b1 + b2)
        alpha[i], alpha[j] = new_i, new_j
        f_nob[:] += y[i] * d_i * K[:, i] + y[j] * d_j * K[:, j]
        return True

    while sweeps < config.max_sweeps:
        sweeps += 1
        changed = 0
        for i in range(n):
            r_i = (f_nob[i] + b - y[i]) * y[i]
            if not ((r_i < -tol and alpha[i] < C) or (r_i > tol and alpha[i] > 0)):
                continue
            # largest |E_i - E_j| first, then every other partner in seeded random order
            E = f_nob + b - y
            best = int(np.argmax(np.abs(E - E[i])))
            if best != i and take_step(i, best):
                changed += 1
                continue
            for j in rng.permutation(n):
                if j != i and j != best and take_step(i, int(j)):
                    changed += 1
                    break
        objective.append(dual_objective(alpha, y, K))
        if changed:
            idle = 0
            continue
        b_check = _bias_from(alpha, y, f_nob, C)
        if not kkt_violations(alpha, y, f_nob + b_check, C, tol).any():
            converged = True
            break
        b = b_check
        idle += 1
        if idle >= config.max_passes:
            break

    f_nob = K @ (alpha * y)
    b = _bias_from(alpha, y, f_nob, C)
    if not converged:
        log.warning("SMO stopped after %d sweeps without certifying KKT at tol=%g", sweeps, tol)
    sv = alpha > 0
    return SvmModel(
        support_vectors=X[sv].copy(),
        alphas=alpha[sv].copy(),
        sv_labels=y[sv].copy(),
        bias=b,
        kernel=kernel,
        C=C,
        converged=converged,
        objective_trace=tuple(objective),
        support_index=np.flatnonzero(sv),
    )


def decision_values(model: SvmModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if model.alphas.size == 0:
        raise ValueError("model has no support vectors")
    if X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {X.shape[1]}")
    K = kernel_matrix(model.kernel, X, model.support_vectors)
    return K @ (model.alphas * model.sv_labels) + model.bias


def decision_value(model: SvmModel, x) -> float:
    return float(decision_values(model, _as_vec(x)[None, :])[0])


def predict(model: SvmModel, x) -> int:
    return 1 if decision_value(model, x) >= 0 else -1


def predict_many(model: SvmModel, X) -> np.ndarray:
    return np.where(decision_values(model, X) >= 0, 1, -1)


def model_to_dict(model: SvmModel) -> dict:
    # float.hex keeps the round trip bit-exact
    hexes = lambda a: [float(v).hex() for v in np.ravel(a)]
    return {
        "kernel": {"name": model.kernel.name,
                   "gamma": None if model.kernel.gamma is None else float(model.kernel.gamma).hex()},
        "C": float(model.C).hex(),
        "bias": float(model.bias).hex(),
        "converged": model.converged,
        "shape": list(model.support_vectors.shape),
        "support_vectors": hexes(model.support_vectors),
        "alphas": hexes(model.alphas),
        "sv_labels": hexes(model.sv_labels),
    }


def model_from_dict(d: dict) -> SvmModel:
    unhex = lambda xs: np.array([float.fromhex(v) for v in xs], dtype=np.float64)
    gamma = d["kernel"]["gamma"]
    return SvmModel(
        support_vectors=unhex(d["support_vectors"]).reshape(d["shape"]),
        alphas=unhex(d["alphas"]),
        sv_labels=unhex(d["sv_labels"]),
        bias=float.fromhex(d["bias"]),
        kernel=KernelSpec(d["kernel"]["name"], None if gamma is None else float.fromhex(gamma)),
        C=float.fromhex(d["C"]),
        converged=bool(d["converged"]),
    )


def save_model(model: SvmModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> SvmModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
