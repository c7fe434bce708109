"""Cross-validation of the full pipeline, the six-row ablation, and the sweeps.

Every fold draws its randomness from ``(master seed, fold index)`` alone, so
rows of an ablation or sweep see identical folds and identical per-fold seeds,
and folds can run in any order or in parallel without changing results.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import HEALTHY, PD, AbundanceTable, DataError
from .metrics import MetricsReport, evaluate, kfold_split, mean_and_std
from .neural import NetworkConfig, embed, train_extractor
from .rfre import LOGISTIC_REGRESSION, RfreConfig, apply_selection, minmax_fit, run_rfre
from .svm import SvmConfig, decision_values, labels_to_signs, smo_train

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")
DEFAULT_TAUS = (0.001, 0.0005, 0.0001, 0.00005, 0.00001)
DEFAULT_FEATURE_COUNTS = (20, 25, 30, 35, 40, 45)


@dataclass(frozen=True)
class CvSettings:
    k: int = 10
    stratified: bool = True
    global_selection: bool = False      # fit feature selection once on the whole table
    positive_class: int = HEALTHY
    head_only: bool = False       # score with the network head instead of the SVM

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.positive_class not in (HEALTHY, PD):
            raise ValueError("positive_class must be 0 (Healthy) or 1 (PD)")


@dataclass(frozen=True)
class PipelineConfig:
    rfre: RfreConfig = field(default_factory=RfreConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    cv: CvSettings = field(default_factory=CvSettings)


class FoldFailure(RuntimeError):
    def __init__(self, fold: int, cause: BaseException):
        super().__init__(f"fold {fold} failed: {type(cause).__name__}: {cause}")
        self.fold = fold
        self.cause = cause


@dataclass
class FoldResult:
    fold: int
    train_index: np.ndarray
    test_index: np.ndarray
    metrics: MetricsReport
    labels: np.ndarray
    predictions: np.ndarray
    scores: np.ndarray            # oriented so larger means the positive class
    selected_taxa: list
    svm_converged: bool | None
    warnings: list = field(default_factory=list)


@dataclass
class CvSummary:
    folds: list
    means: dict
    stds: dict
    config: PipelineConfig
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)


def fold_seeds(seed: int, fold: int) -> tuple[int, int, int]:
    """(selection, network, svm) seeds for one fold."""
    state = np.random.SeedSequence([seed, fold]).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def make_folds(table: AbundanceTable, settings: CvSettings, seed: int) -> list[np.ndarray]:
    fold_seed = int(np.random.SeedSequence([seed]).generate_state(1)[0])
    return kfold_split(table.n_samples, settings.k, table.labels, fold_seed, settings.stratified)


def _global_selection(table, config: PipelineConfig, seed: int):
    sel_seed = int(np.random.SeedSequence([seed, 2**31]).generate_state(1)[0])
    return run_rfre(table, config.rfre, sel_seed)


def _run_fold(table, config: PipelineConfig, seed, fold, train_idx, test_idx, global_prep=None):
    sel_seed, net_seed, svm_seed = fold_seeds(seed, fold)
    train = table.select_samples(train_idx)
    test = table.select_samples(test_idx)
    if global_prep is None:
        prep = run_rfre(train, config.rfre, sel_seed)
        X_train = prep.features
        X_test = apply_selection(prep.report, test, config.rfre.normalize)
    else:
        prep = global_prep
        X_train = prep.features[train_idx]
        X_test = prep.features[test_idx]
    report = prep.report

    net_cfg = replace(config.network, seq_len=X_train.shape[1])
    trained = train_extractor(X_train, train.labels, net_cfg, net_seed)
    emb_test, _, logit_test = embed(X_test, trained.params, net_cfg)
    positive = config.cv.positive_class
    if config.cv.head_only:
        converged = None
        pd_score = logit_test
        predictions = np.where(logit_test > 0, PD, HEALTHY)
    else:
        emb_train, _, _ = embed(X_train, trained.params, net_cfg)
        model = smo_train(emb_train, labels_to_signs(train.labels), config.svm, svm_seed)
        converged = model.converged
        dv = decision_values(model, emb_test)       # > 0 leans Healthy
        pd_score = -dv
        predictions = np.where(dv >= 0, HEALTHY, PD)
    scores = pd_score if positive == PD else -pd_score
    metrics = evaluate(test.labels, predictions, scores, positive)
    return FoldResult(
        fold=fold,
        train_index=np.asarray(train_idx),
        test_index=np.asarray(test_idx),
        metrics=metrics,
        labels=test.labels.copy(),
        predictions=predictions.astype(np.int8),
        scores=np.asarray(scores, dtype=np.float64),
        selected_taxa=list(report.selected_taxa),
        svm_converged=converged,
        warnings=list(report.warnings),
    )


def summarize(folds: list, config: PipelineConfig, seed: int) -> CvSummary:
    means, stds = {}, {}
    for name in METRIC_NAMES:
        means[name], stds[name] = mean_and_std([getattr(f.metrics, name) for f in folds])
    return CvSummary(folds, means, stds, config, seed)


def run_cv(table: AbundanceTable, config: PipelineConfig, seed: int, threads: int = 1,
           folds: list | None = None) -> CvSummary:
    """k-fold CV of selection -> extractor -> SVM (or head) with per-fold metrics.

    ``threads`` only changes how many folds run at once; results are identical.
    """
    if np.unique(table.labels).size < 2:
        raise DataError("cross-validation needs both classes in the table")
    folds = folds if folds is not None else make_folds(table, config.cv, seed)
    global_prep = _global_selection(table, config, seed) if config.cv.global_selection else None

    def work(f):
        test_idx = folds[f]
        train_idx = np.setdiff1d(np.arange(table.n_samples), test_idx)
        try:
            return _run_fold(table, config, seed, f, train_idx, test_idx, global_prep)
        except Exception as exc:  # surface which fold broke
            raise FoldFailure(f, exc) from exc

    if threads <= 1:
        results = [work(f) for f in range(len(folds))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(len(folds))))
    return summarize(results, config, seed)


def check_leakage(table: AbundanceTable, summary: CvSummary) -> None:
    """Assert each fold's scaler matches a refit on that fold's training rows only.

    Raises AssertionError on mismatch; a no-op under global selection where selection is
    global by design.
    """
    if summary.config.cv.global_selection:
        return
    for fr in summary.folds:
        names = [n for n, _ in fr.selected_taxa]
        assert not set(fr.train_index) & set(fr.test_index), f"fold {fr.fold}: train/test overlap"
        train = table.select_samples(fr.train_index)
        position = {n: j for j, n in enumerate(train.taxon_names)}
        expected = minmax_fit(train.counts[:, [position[n] for n in names]].astype(np.float64))
        prep = run_rfre(train, summary.config.rfre, fold_seeds(summary.seed, fr.fold)[0])
        assert prep.report.names == names, f"fold {fr.fold}: selection depends on held-out rows"
        assert np.array_equal(prep.report.scaler.minimum, expected.minimum), f"fold {fr.fold}: scaler min"
        assert np.array_equal(prep.report.scaler.maximum, expected.maximum), f"fold {fr.fold}: scaler max"


ABLATION_ROWS = (
    (1, "Omit normalization step"),
    (2, "Remove SVM module (network head scores)"),
    (3, "Remove attention mechanism"),
    (4, "Remove RFE loop (single importance fit, top-k)"),
    (5, "Replace RF importance with logistic regression"),
    (6, "Baseline model"),
)


def ablation_plan(baseline: PipelineConfig) -> list[tuple[int, str, PipelineConfig]]:
    r, n, c = baseline.rfre, baseline.network, baseline.cv
    configs = [
        replace(baseline, rfre=replace(r, normalize=False)),
        replace(baseline, cv=replace(c, head_only=True)),
        replace(baseline, network=replace(n, attention=False)),
        replace(baseline, rfre=replace(r, recursive=False)),
        replace(baseline, rfre=replace(r, scorer=LOGISTIC_REGRESSION)),
        baseline,
    ]
    return [(num, desc, cfg) for (num, desc), cfg in zip(ABLATION_ROWS, configs)]


def run_ablation(table, baseline: PipelineConfig, seed: int, threads: int = 1) -> list[tuple[int, str, CvSummary]]:
    folds = make_folds(table, baseline.cv, seed)
    return [(num, desc, run_cv(table, cfg, seed, threads, folds))
            for num, desc, cfg in ablation_plan(baseline)]


def run_threshold_sweep(table, config: PipelineConfig, taus=DEFAULT_TAUS, seed: int = 0,
                        threads: int = 1) -> list[tuple[float, CvSummary]]:
    folds = make_folds(table, config.cv, seed)
    out = []
    for tau in taus:
        cfg = replace(config, rfre=replace(config.rfre, tau=float(tau)))
        out.append((float(tau), run_cv(table, cfg, seed, threads, folds)))
    return out


def run_feature_sweep(table, config: PipelineConfig, counts=DEFAULT_FEATURE_COUNTS, seed: int = 0,
                      threads: int = 1) -> list[tuple[int, CvSummary]]:
    """One CV per feature count; counts above the surviving taxa are lowered with a warning."""
    folds = make_folds(table, config.cv, seed)
    out = []
    for count in counts:
        cfg = replace(config, rfre=replace(config.rfre, target_features=int(count)))
        out.append((int(count), run_cv(table, cfg, seed, threads, folds)))
    return out
