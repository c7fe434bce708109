"""RFRE preprocessing: abundance threshold, importance-driven RFE, min-max scaling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import mannwhitneyu

from .dataset import HEALTHY, PD, AbundanceTable
from .forest import ForestParams, feature_importance, fit_forest

log = logging.getLogger(__name__)

RANDOM_FOREST = "random_forest"
LOGISTIC_REGRESSION = "logistic_regression"
SCORERS = (RANDOM_FOREST, LOGISTIC_REGRESSION)


@dataclass(frozen=True)
class RfreConfig:
    tau: float = 0.00005
    target_features: int = 40
    rfe_step: int = 1
    scorer: str = RANDOM_FOREST
    prefilter: bool = False
    prefilter_alpha: float = 0.05
    recursive: bool = True   # False: one importance fit, keep the top-k
    normalize: bool = True
    forest: ForestParams = field(default_factory=ForestParams)

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.target_features < 1:
            raise ValueError("target_features must be >= 1")
        if self.rfe_step < 1:
            raise ValueError("rfe_step must be >= 1")
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}")
        if not 0.0 < self.prefilter_alpha < 1.0:
            raise ValueError("prefilter_alpha must lie in (0, 1)")


@dataclass(frozen=True)
class MinMaxScaler:
    minimum: np.ndarray
    maximum: np.ndarray

    @property
    def width(self) -> int:
        return self.minimum.shape[0]


@dataclass
class SelectionReport:
    selected_taxa: list          # [(taxon name, score)] by descending score
    eliminated_trace: list       # one dict per RFE iteration
    scaler: MinMaxScaler | None = None
    selected_index: list = field(default_factory=list)  # columns of the scored matrix
    kept_after_threshold: int = 0
    warnings: list = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.selected_taxa]

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.selected_taxa], dtype=np.float64)


@dataclass
class PreprocessedDataset:
    features: np.ndarray
    labels: np.ndarray
    report: SelectionReport


def total_abundance(table: AbundanceTable) -> np.ndarray:
    return table.counts.sum(axis=0).astype(np.float64)


def bio_threshold_filter(table: AbundanceTable, tau: float) -> tuple[AbundanceTable, np.ndarray]:
    """Keep taxa whose total abundance is strictly above ``tau`` times the largest total."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    keep = threshold_keep(total_abundance(table), tau)
    return table.select_taxa(keep), keep


def threshold_keep(totals, tau: float) -> np.ndarray:
    totals = np.asarray(totals, dtype=np.float64)
    top = totals.max(initial=0.0)
    if top <= 0:
        raise ValueError("every taxon has zero total abundance; nothing survives the threshold")
    return np.flatnonzero(totals > tau * top)


def rank_sum_prefilter(table: AbundanceTable, alpha: float) -> np.ndarray:
    """Indices of taxa that differ between classes (two-sided Mann-Whitney U, p < alpha)."""
    X = table.counts.astype(np.float64)
    pd_rows = X[table.labels == PD]
    h_rows = X[table.labels == HEALTHY]
    keep = []
    for j in range(X.shape[1]):
        a, b = pd_rows[:, j], h_rows[:, j]
        if np.ptp(np.concatenate([a, b])) == 0:
            continue
        if mannwhitneyu(a, b, alternative="two-sided").pvalue < alpha:
            keep.append(j)
    return np.asarray(keep, dtype=np.intp)


def _logistic_importance(X, y, l2=1.0, lr=0.5, n_iter=500):
    X = np.asarray(X, dtype=np.float64)
    sd = X.std(axis=0)
    live = sd > 0
    Z = np.zeros_like(X)
    Z[:, live] = (X[:, live] - X[:, live].mean(axis=0)) / sd[live]
    n = X.shape[0]
    t = (np.asarray(y) == PD).astype(np.float64)
    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(n_iter):
        p = 1.0 / (1.0 + np.exp(-(Z @ w + b)))
        r = p - t
        w -= lr * (Z.T @ r / n + l2 * w / n)
        b -= lr * r.mean()
    return np.abs(w)


def rank_importance(X, y, scorer: str = RANDOM_FOREST, seed: int = 0,
                    forest: ForestParams | None = None) -> np.ndarray:
    """Non-negative importances summing to 1, one per column of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if np.unique(y).size < 2:
        raise ValueError("importance ranking needs both classes")
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("X must have at least one feature column")
    if np.all(np.ptp(X, axis=0) == 0):
        raise ValueError("degenerate X: every feature is constant")
    if scorer == RANDOM_FOREST:
        scores = feature_importance(fit_forest(X, y, forest, seed))
    elif scorer == LOGISTIC_REGRESSION:
        scores = _logistic_importance(X, y)
    else:
        raise ValueError(f"unknown scorer {scorer!r}")
    total = scores.sum()
    return scores / total if total > 0 else scores


Scorer = Callable[..., np.ndarray]


def _builtin_scorer(config: RfreConfig) -> Scorer:
    def score(X, y, seed, columns):
        return rank_importance(X, y, config.scorer, seed, config.forest)
    return score


def rfe_select(X, y, config: RfreConfig, seed: int = 0, names=None,
               scorer: Scorer | None = None) -> SelectionReport:
    """Recursive feature elimination down to ``config.target_features`` columns.

    ``scorer(X_sub, y, seed, columns)`` returns one score per column of
    ``X_sub``; ``columns`` holds the original indices of those columns. The
    lowest ``rfe_step`` scores are dropped per round (ties: lowest index
    first). Reported scores come from a final fit on the survivors. With
    ``config.recursive`` off a single fit picks the top-k directly.
    """
    X = np.asarray(X, dtype=np.float64)
    n_features = X.shape[1]
    names = list(names) if names is not None else [str(j) for j in range(n_features)]
    if config.target_features > n_features:
        raise ValueError(
            f"target_features={config.target_features} exceeds available features {n_features}"
        )
    scorer = scorer or _builtin_scorer(config)
    alive = np.arange(n_features)
    trace = []
    iteration = 0
    while alive.size > config.target_features:
        scores = np.asarray(scorer(X[:, alive], y, seed, alive.copy()), dtype=np.float64)
        excess = alive.size - config.target_features
        n_drop = excess if not config.recursive else min(config.rfe_step, excess)
        order = np.lexsort((alive, scores))  # ascending score, then ascending index
        drop = np.sort(order[:n_drop])
        trace.append({
            "iteration": iteration,
            "n_before": int(alive.size),
            "removed": [(int(alive[d]), names[alive[d]], float(scores[d])) for d in drop],
        })
        alive = np.delete(alive, drop)
        iteration += 1

    final = np.asarray(scorer(X[:, alive], y, seed, alive.copy()), dtype=np.float64)
    order = np.lexsort((alive, -final))
    selected = [(names[alive[o]], float(final[o])) for o in order]
    return SelectionReport(selected, trace, selected_index=[int(alive[o]) for o in order])


def minmax_fit(X_train) -> MinMaxScaler:
    X = np.asarray(X_train, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("minmax_fit needs a non-empty 2-D matrix")
    return MinMaxScaler(X.min(axis=0), X.max(axis=0))


def minmax_apply(scaler: MinMaxScaler, X) -> np.ndarray:
    """Scale with the stored training range; constant columns map to 0, no clipping."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != scaler.width:
        raise ValueError(f"expected {scaler.width} columns, got shape {X.shape}")
    span = scaler.maximum - scaler.minimum
    out = np.zeros_like(X)
    live = span > 0
    out[:, live] = (X[:, live] - scaler.minimum[live]) / span[live]
    return out


def run_rfre(table: AbundanceTable, config: RfreConfig, seed: int = 0) -> PreprocessedDataset:
    """Prefilter (optional), threshold, select, scale; labels are carried through untouched."""
    if np.unique(table.labels).size < 2:
        raise ValueError("run_rfre needs both classes present")
    work = table
    warnings = []
    if config.prefilter:
        keep = rank_sum_prefilter(work, config.prefilter_alpha)
        if keep.size == 0:
            raise ValueError(f"no taxon passes the rank-sum prefilter at alpha={config.prefilter_alpha}")
        work = work.select_taxa(keep)
    work, _ = bio_threshold_filter(work, config.tau)

    target = config.target_features
    if work.n_taxa < target:
        msg = (f"only {work.n_taxa} taxa survive filtering; "
               f"target_features lowered from {target} to {work.n_taxa}")
        log.warning(msg)
        warnings.append(msg)
        target = work.n_taxa
    cfg = config if target == config.target_features else replace(config, target_features=target)

    X = work.counts.astype(np.float64)
    report = rfe_select(X, work.labels, cfg, seed, names=work.taxon_names)
    report.kept_after_threshold = work.n_taxa
    report.warnings = warnings
    X_sel = X[:, report.selected_index]
    report.scaler = minmax_fit(X_sel)
    features = minmax_apply(report.scaler, X_sel) if config.normalize else X_sel
    return PreprocessedDataset(features, table.labels.copy(), report)


def apply_selection(report: SelectionReport, table: AbundanceTable, normalize: bool = True) -> np.ndarray:
    """Project another table (e.g. a test fold) onto the selected taxa, in report order."""
    position = {name: j for j, name in enumerate(table.taxon_names)}
    missing = [n for n in report.names if n not in position]
    if missing:
        raise ValueError(f"table lacks selected taxa: {missing[:5]}")
    X = table.counts[:, [position[n] for n in report.names]].astype(np.float64)
    return minmax_apply(report.scaler, X) if normalize else X

