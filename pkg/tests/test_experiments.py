from dataclasses import replace

import numpy as np
import pytest

from bdpm.dataset import HEALTHY, PD, DataError
from bdpm.experiments import (
    ABLATION_ROWS, DEFAULT_FEATURE_COUNTS, DEFAULT_TAUS, FoldFailure, ablation_plan, check_leakage,
    fold_seeds, run_ablation, run_cv, run_feature_sweep, run_threshold_sweep,
)
from bdpm.rfre import LOGISTIC_REGRESSION, total_abundance
from conftest import fast_pipeline


def cv_fingerprint(summary):
    return [(f.fold, f.test_index.tolist(), f.predictions.tolist(), f.scores.tolist(),
             f.selected_taxa) for f in summary.folds], summary.means, summary.stds


@pytest.fixture(scope="module")
def small_cv(small_planted):
    return run_cv(small_planted, fast_pipeline(k=5, target=10), seed=2)


def test_cv_structure(small_cv, small_planted):
    s = small_cv
    assert s.k == 5
    joined = np.concatenate([f.test_index for f in s.folds])
    assert np.array_equal(np.sort(joined), np.arange(small_planted.n_samples))
    for f in s.folds:
        assert not set(f.train_index) & set(f.test_index)
        assert len(f.selected_taxa) == 10
        assert f.svm_converged is not None
        cm = f.metrics.confusion
        assert cm.total == len(f.test_index)
        assert f.metrics.accuracy == (cm.TP + cm.TN) / cm.total
    for name, mean in s.means.items():
        vals = [getattr(f.metrics, name) for f in s.folds]
        assert min(vals) <= mean <= max(vals)


@pytest.mark.slow
def test_cv_learns_planted_signal(planted):
    s = run_cv(planted, fast_pipeline(k=5), seed=1)
    assert s.means["accuracy"] >= 0.9
    assert s.means["auc"] >= 0.9


def test_cv_deterministic_and_thread_independent(small_planted, small_cv):
    cfg = fast_pipeline(k=5, target=10)
    assert cv_fingerprint(run_cv(small_planted, cfg, seed=2)) == cv_fingerprint(small_cv)
    assert cv_fingerprint(run_cv(small_planted, cfg, seed=2, threads=3)) == cv_fingerprint(small_cv)


def test_no_leakage(small_planted, small_cv):
    check_leakage(small_planted, small_cv)


def test_leakage_check_catches_tampering(small_planted, small_cv):
    tampered = replace(small_cv, folds=list(small_cv.folds))
    fr = tampered.folds[0]
    tampered.folds[0] = replace(fr, selected_taxa=list(reversed(fr.selected_taxa)))
    with pytest.raises(AssertionError):
        check_leakage(small_planted, tampered)


def test_global_selection_selects_once(small_planted):
    cfg = fast_pipeline(k=4, target=10)
    cfg = replace(cfg, cv=replace(cfg.cv, global_selection=True))
    s = run_cv(small_planted, cfg, seed=0)
    assert all(f.selected_taxa == s.folds[0].selected_taxa for f in s.folds)


def test_head_only_scoring(small_planted):
    cfg = fast_pipeline(k=4, target=10)
    s = run_cv(small_planted, replace(cfg, cv=replace(cfg.cv, head_only=True)), seed=0)
    for f in s.folds:
        assert f.svm_converged is None
        # positive class Healthy: score is the negated PD logit, predict PD when it is negative
        assert np.array_equal(f.predictions, np.where(f.scores < 0, PD, HEALTHY))


def test_positive_class_swaps_counts(small_planted, small_cv):
    cfg = fast_pipeline(k=5, target=10)
    pd_pos = run_cv(small_planted, replace(cfg, cv=replace(cfg.cv, positive_class=PD)), seed=2)
    for a, b in zip(small_cv.folds, pd_pos.folds):
        assert a.metrics.confusion.swapped() == b.metrics.confusion
        assert np.array_equal(a.scores, -b.scores)
        if not np.isnan(a.metrics.auc):
            assert abs(a.metrics.auc - b.metrics.auc) < 1e-12
    assert small_cv.means["accuracy"] == pd_pos.means["accuracy"]


def test_fold_seeds_distinct():
    seeds = {fold_seeds(7, f) for f in range(10)}
    assert len(seeds) == 10
    assert fold_seeds(7, 3) == fold_seeds(7, 3)


def test_failed_fold_reports_index(small_planted, monkeypatch):
    import bdpm.experiments as ex
    real = ex.train_extractor

    def flaky(X, y, config, seed):
        if seed == fold_seeds(0, 2)[1]:
            raise RuntimeError("boom")
        return real(X, y, config, seed)

    monkeypatch.setattr(ex, "train_extractor", flaky)
    with pytest.raises(FoldFailure) as info:
        run_cv(small_planted, fast_pipeline(k=4, target=5), seed=0)
    assert info.value.fold == 2 and "boom" in str(info.value)


def test_single_class_table_rejected(small_planted):
    one = small_planted.select_samples(np.flatnonzero(small_planted.labels == PD))
    with pytest.raises(DataError):
        run_cv(one, fast_pipeline(), seed=0)


def test_ablation_plan_shape():
    base = fast_pipeline()
    plan = ablation_plan(base)
    assert [num for num, _, _ in plan] == [1, 2, 3, 4, 5, 6]
    assert [desc for _, desc, _ in plan] == [d for _, d in ABLATION_ROWS]
    assert plan[5][2] == base
    cfgs = [cfg for _, _, cfg in plan]
    assert cfgs[0].rfre.normalize is False
    assert cfgs[1].cv.head_only is True
    assert cfgs[2].network.attention is False
    assert cfgs[3].rfre.recursive is False
    assert cfgs[4].rfre.scorer == LOGISTIC_REGRESSION
    for cfg in cfgs[:5]:
        changed = [name for name in ("rfre", "network", "svm", "cv") if getattr(cfg, name) != getattr(base, name)]
        assert len(changed) == 1


@pytest.fixture(scope="module")
def small_ablation(small_planted):
    return run_ablation(small_planted, fast_pipeline(k=4, target=10), seed=1)


def test_ablation_rows_share_folds(small_ablation):
    assert len(small_ablation) == 6
    first = [f.test_index.tolist() for f in small_ablation[0][2].folds]
    for _, _, s in small_ablation:
        assert [f.test_index.tolist() for f in s.folds] == first


def test_ablation_baseline_row_matches_plain_cv(small_planted, small_ablation):
    plain = run_cv(small_planted, fast_pipeline(k=4, target=10), seed=1)
    assert cv_fingerprint(plain) == cv_fingerprint(small_ablation[5][2])


def test_threshold_sweep_shape(small_planted):
    taus = (0.0,) + DEFAULT_TAUS[:2]
    rows = run_threshold_sweep(small_planted, fast_pipeline(k=4, target=10), taus, seed=3)
    assert [tau for tau, _ in rows] == list(taus)
    first = [f.test_index.tolist() for f in rows[0][1].folds]
    for _, s in rows:
        assert [f.test_index.tolist() for f in s.folds] == first
        assert s.k == 4


def test_sweep_defaults():
    assert DEFAULT_TAUS == (0.001, 0.0005, 0.0001, 0.00005, 0.00001)
    assert DEFAULT_FEATURE_COUNTS == (20, 25, 30, 35, 40, 45)


def test_feature_count_equal_to_survivors_uses_every_taxon(small_planted):
    survivors = int(np.sum(total_abundance(small_planted) > 0))
    cfg = fast_pipeline(k=4)
    cfg = replace(cfg, rfre=replace(cfg.rfre, tau=0.0))
    rows = run_feature_sweep(small_planted, cfg, (survivors,), seed=0)
    for f in rows[0][1].folds:
        names = {n for n, _ in f.selected_taxa}
        train_totals = small_planted.counts[f.train_index].sum(axis=0)
        assert names == {small_planted.taxon_names[j] for j in np.flatnonzero(train_totals > 0)}


@pytest.mark.slow
def test_overfiltering_degrades_accuracy(planted):
    totals = total_abundance(planted)
    planted_idx = [planted.taxon_names.index(n) for n in planted.meta["informative"]]
    tau_kill = 1.01 * float(totals[planted_idx].max() / totals.max())
    rows = run_threshold_sweep(planted, fast_pipeline(k=5, target=20), (0.00005, tau_kill), seed=1)
    (_, best), (_, killed) = rows
    assert killed.means["accuracy"] < best.means["accuracy"]
    assert killed.means["accuracy"] < 0.75


@pytest.mark.slow
def test_truncating_features_loses_signal(planted):
    rows = run_feature_sweep(planted, fast_pipeline(k=5), (5, 20), seed=1)
    (_, five), (_, twenty) = rows
    assert twenty.means["accuracy"] >= five.means["accuracy"]
