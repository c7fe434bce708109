"""Tab-separated report tables, ROC point files and run manifests.

Every table starts with one ``# config <json>`` comment line holding the
resolved run configuration, followed by a header row. Metric columns use four
fixed decimals; raw scores use 17 significant digits so reruns compare
byte-for-byte.
"""
from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path

import numpy as np

from .dataset import LABEL_NAMES

METRIC_HEADER = ("Mean Acc", "Precision", "Recall", "F1 Score")
FOLD_HEADER = ("fold", "n_test", "TP", "TN", "FP", "FN",
               "accuracy", "precision", "recall", "f1", "auc", "degenerate", "svm_converged")


def fmt(x, digits: int = 4) -> str:
    if x is None:
        return "NA"
    x = float(x)
    if np.isnan(x):
        return "NaN"
    return f"{x:.{digits}f}"


def fmt_exact(x) -> str:
    return f"{float(x):.17g}"


def write_table(path, header, rows, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if config is not None:
        lines.append("# config " + json.dumps(config, sort_keys=True, separators=(",", ":")))
    lines.append("\t".join(header))
    lines.extend("\t".join(str(c) for c in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _metric_cells(means: dict) -> list[str]:
    return [fmt(means[k]) for k in ("accuracy", "precision", "recall", "f1")]


def selection_rows(report) -> list:
    return [(name, fmt(score)) for name, score in report.selected_taxa]


def write_selection(path, report, config=None) -> Path:
    return write_table(path, ("Species Name", "Score"), selection_rows(report), config)


def write_elimination_trace(path, report, config=None) -> Path:
    rows = []
    for step in report.eliminated_trace:
        for index, name, score in step["removed"]:
            rows.append((step["iteration"], step["n_before"], index, name, fmt_exact(score)))
    return write_table(path, ("iteration", "n_before", "column", "taxon", "score"), rows, config)


def write_features(path, sample_ids, names, X, labels, config=None) -> Path:
    rows = [(sid, *[fmt_exact(v) for v in row], LABEL_NAMES[int(lab)])
            for sid, row, lab in zip(sample_ids, X, labels)]
    return write_table(path, ("sample_id", *names, "label"), rows, config)


def write_roc(path, roc) -> Path:
    return write_table(path, ("fpr", "tpr"), [(fmt_exact(f), fmt_exact(t)) for f, t in roc])


def fold_metric_row(fr) -> tuple:
    m, cm = fr.metrics, fr.metrics.confusion
    conv = "NA" if fr.svm_converged is None else str(bool(fr.svm_converged)).lower()
    return (fr.fold, len(fr.test_index), cm.TP, cm.TN, cm.FP, cm.FN,
            fmt(m.accuracy), fmt(m.precision), fmt(m.recall), fmt(m.f1), fmt(m.auc),
            str(m.degenerate).lower(), conv)


def write_fold_predictions(path, fr, sample_ids, config=None) -> Path:
    rows = [(sample_ids[i], LABEL_NAMES[int(lab)], LABEL_NAMES[int(pred)], fmt_exact(score))
            for i, lab, pred, score in zip(fr.test_index, fr.labels, fr.predictions, fr.scores)]
    return write_table(path, ("sample_id", "label", "prediction", "score"), rows, config)


def write_cv_outputs(out_dir, summary, sample_ids, config: dict, model_name: str = "BDPM") -> list[Path]:
    """Model summary, per-fold metrics, per-fold predictions, selections and ROC points."""
    out = Path(out_dir)
    written = [
        write_table(out / "summary.tsv", ("Model", *METRIC_HEADER, "AUC"),
                    [(model_name, *_metric_cells(summary.means), fmt(summary.means["auc"]))], config),
        write_table(out / "summary_std.tsv", ("Model", *METRIC_HEADER, "AUC"),
                    [(model_name, *_metric_cells(summary.stds), fmt(summary.stds["auc"]))], config),
        write_table(out / "fold_metrics.tsv", FOLD_HEADER,
                    [fold_metric_row(fr) for fr in summary.folds], config),
    ]
    sel_rows = [(fr.fold, rank + 1, name, fmt(score))
                for fr in summary.folds for rank, (name, score) in enumerate(fr.selected_taxa)]
    written.append(write_table(out / "fold_selections.tsv", ("fold", "rank", "taxon", "score"), sel_rows, config))
    for fr in summary.folds:
        written.append(write_fold_predictions(out / "folds" / f"fold_{fr.fold:02d}.tsv", fr, sample_ids, config))
        if fr.metrics.roc:
            written.append(write_roc(out / "roc" / f"roc_fold_{fr.fold:02d}.tsv", fr.metrics.roc))
    return written


def _long_fold_rows(key, summary):
    return [(key, *fold_metric_row(fr)) for fr in summary.folds]


def write_ablation(out_dir, rows, config: dict) -> list[Path]:
    """``rows`` is ``[(number, description, CvSummary)]`` in plan order."""
    out = Path(out_dir)
    plan = write_table(out / "ablation_plan.tsv", ("No.", "Experimental Description"),
                       [(num, desc) for num, desc, _ in rows], config)
    table = write_table(out / "ablation.tsv", ("No.", *METRIC_HEADER),
                        [(num, *_metric_cells(s.means)) for num, _, s in rows], config)
    folds = write_table(out / "ablation_folds.tsv", ("No.", *FOLD_HEADER),
                        [r for num, _, s in rows for r in _long_fold_rows(num, s)], config)
    return [plan, table, folds]


def tau_percent(tau: float) -> str:
    return f"{100.0 * tau:.3f}%"


def write_threshold_sweep(out_dir, rows, config: dict) -> list[Path]:
    out = Path(out_dir)
    table = write_table(out / "threshold_sweep.tsv", ("Bio-threshold", *METRIC_HEADER),
                        [(tau_percent(tau), *_metric_cells(s.means)) for tau, s in rows], config)
    folds = write_table(out / "threshold_sweep_folds.tsv", ("tau", *FOLD_HEADER),
                        [r for tau, s in rows for r in _long_fold_rows(fmt_exact(tau), s)], config)
    return [table, folds]


def write_feature_sweep(out_dir, rows, config: dict) -> list[Path]:
    out = Path(out_dir)
    table = write_table(out / "feature_sweep.tsv", ("Num Features", *METRIC_HEADER),
                        [(count, *_metric_cells(s.means)) for count, s in rows], config)
    folds = write_table(out / "feature_sweep_folds.tsv", ("count", *FOLD_HEADER),
                        [r for count, s in rows for r in _long_fold_rows(count, s)], config)
    return [table, folds]


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import numba
    import scipy

    from . import __version__
    return {
        "bdpm": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def write_manifest(out_dir, command: str, config: dict, files) -> Path:
    out = Path(out_dir)
    entries = {str(Path(f).relative_to(out)): sha256(f) for f in files}
    manifest = {
        "command": command,
        "config": config,
        "versions": versions(),
        "outputs": dict(sorted(entries.items())),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
