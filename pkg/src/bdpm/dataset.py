"""Abundance tables: loading, validation, count conversion and synthetic cohorts.

Tables are held in samples x taxa orientation. Labels live next to the count
matrix, never inside it, and are encoded as ``HEALTHY = 0`` / ``PD = 1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEALTHY = 0
PD = 1
LABEL_NAMES = {HEALTHY: "Healthy", PD: "PD"}
_LABEL_CODES = {"healthy": HEALTHY, "pd": PD}
LABEL_KEY = "label"

TAXA_AS_ROWS = "taxa-as-rows"
TAXA_AS_COLUMNS = "taxa-as-columns"
ORIENTATIONS = (TAXA_AS_ROWS, TAXA_AS_COLUMNS)


class DataError(ValueError):
    """Raised for malformed or inconsistent abundance data."""


@dataclass(frozen=True, eq=False)
class AbundanceTable:
    sample_ids: tuple[str, ...]
    taxon_names: tuple[str, ...]
    counts: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        labels = np.array(self.labels, dtype=np.int8, copy=True)
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))
        object.__setattr__(self, "taxon_names", tuple(str(t) for t in self.taxon_names))
        if counts.ndim != 2:
            raise DataError(f"counts must be 2-D, got shape {counts.shape}")
        n, m = counts.shape
        if n != len(self.sample_ids):
            raise DataError(f"{n} count rows but {len(self.sample_ids)} sample ids")
        if m != len(self.taxon_names):
            raise DataError(f"{m} count columns but {len(self.taxon_names)} taxon names")
        if labels.shape != (n,):
            raise DataError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} samples")
        if counts.size and counts.min() < 0:
            raise DataError("counts must be non-negative")
        if not np.isin(labels, (HEALTHY, PD)).all():
            raise DataError("labels must be HEALTHY (0) or PD (1)")
        seen = set()
        for name in self.taxon_names:
            if name in seen:
                raise DataError(f"duplicate taxon name {name!r}")
            seen.add(name)
        counts.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.counts.shape[0]

    @property
    def n_taxa(self) -> int:
        return self.counts.shape[1]

    def __eq__(self, other):
        if not isinstance(other, AbundanceTable):
            return NotImplemented
        return (
            self.sample_ids == other.sample_ids
            and self.taxon_names == other.taxon_names
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    def select_taxa(self, indices) -> "AbundanceTable":
        indices = np.asarray(indices, dtype=np.intp)
        return AbundanceTable(
            self.sample_ids,
            tuple(self.taxon_names[i] for i in indices),
            self.counts[:, indices],
            self.labels,
            dict(self.meta),
        )

    def select_samples(self, indices) -> "AbundanceTable":
        indices = np.asarray(indices, dtype=np.intp)
        return AbundanceTable(
            tuple(self.sample_ids[i] for i in indices),
            self.taxon_names,
            self.counts[indices],
            self.labels[indices],
            dict(self.meta),
        )


@dataclass(frozen=True)
class SyntheticSpec:
    n_per_class: int = 39
    n_taxa: int = 200
    n_informative: int = 15
    effect_size: float = 2.0
    sparsity: float = 0.3
    read_depth: int = 100_000

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.n_taxa < 1:
            raise ValueError("n_taxa must be >= 1")
        if not 0 <= self.n_informative <= self.n_taxa:
            raise ValueError("n_informative must lie in [0, n_taxa]")
        if not self.effect_size >= 0:
            raise ValueError("effect_size must be >= 0")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError("sparsity must lie in [0, 1]")
        if self.read_depth < 1:
            raise ValueError("read_depth must be >= 1")


def parse_label(value: str) -> int:
    try:
        return _LABEL_CODES[value.strip().lower()]
    except KeyError:
        raise DataError(f"label {value!r} is not one of PD/Healthy") from None


def _delimiter_for(path: Path) -> str:
    return "," if path.suffix.lower() == ".csv" else "\t"


def _parse_count(text: str, row: int, col: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"malformed numeric cell {text!r} at row {row}, column {col}") from None
    if not math.isfinite(value) or value < 0:
        raise DataError(f"cell {text!r} at row {row}, column {col} is not a non-negative number")
    if value != int(value):
        raise DataError(
            f"cell {text!r} at row {row}, column {col} is not an integer count; "
            "convert relative abundances with relative_to_counts first"
        )
    return int(value)


def load_abundance_table(path, orientation: str = TAXA_AS_COLUMNS) -> AbundanceTable:
    """Read a delimited abundance file into samples x taxa orientation.

    ``.csv`` files are comma separated, anything else is read as tab separated.
    With ``taxa-as-columns`` the header holds taxon names and one column is
    named ``label``; with ``taxa-as-rows`` the header holds sample ids and one
    row is named ``label``. The first column always carries row names.
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh, delimiter=_delimiter_for(path)) if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    width = len(header)
    for lineno, row in enumerate(body, start=2):
        if len(row) != width:
            raise DataError(f"{path}: ragged row {lineno} has {len(row)} fields, expected {width}")

    if orientation == TAXA_AS_COLUMNS:
        columns = [h.strip() for h in header[1:]]
        label_cols = [j for j, h in enumerate(columns) if h.lower() == LABEL_KEY]
        if len(label_cols) != 1:
            raise DataError(f"{path}: expected exactly one '{LABEL_KEY}' column")
        lc = label_cols[0]
        taxa = [h for j, h in enumerate(columns) if j != lc]
        samples = [r[0].strip() for r in body]
        labels = [parse_label(r[1 + lc]) for r in body]
        counts = [
            [_parse_count(r[1 + j], i + 2, j + 2) for j in range(len(columns)) if j != lc]
            for i, r in enumerate(body)
        ]
    else:
        samples = [h.strip() for h in header[1:]]
        names = [r[0].strip() for r in body]
        label_rows = [i for i, n in enumerate(names) if n.lower() == LABEL_KEY]
        if len(label_rows) != 1:
            raise DataError(f"{path}: expected exactly one '{LABEL_KEY}' row")
        lr = label_rows[0]
        labels = [parse_label(v) for v in body[lr][1:]]
        taxa = [n for i, n in enumerate(names) if i != lr]
        by_taxon = [
            [_parse_count(r[1 + j], i + 2, j + 2) for j in range(len(samples))]
            for i, r in enumerate(body)
            if i != lr
        ]
        counts = np.array(by_taxon, dtype=np.int64).reshape(len(taxa), len(samples)).T

    counts = np.array(counts, dtype=np.int64).reshape(len(samples), len(taxa))
    return AbundanceTable(tuple(samples), tuple(taxa), counts, np.array(labels, dtype=np.int8))


def write_abundance_table(table: AbundanceTable, path, orientation: str = TAXA_AS_COLUMNS) -> None:
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}")
    path = Path(path)
    labels = [LABEL_NAMES[int(v)] for v in table.labels]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=_delimiter_for(path), lineterminator="\n")
        if orientation == TAXA_AS_COLUMNS:
            writer.writerow(["sample_id", *table.taxon_names, LABEL_KEY])
            for sid, row, lab in zip(table.sample_ids, table.counts, labels):
                writer.writerow([sid, *(int(v) for v in row), lab])
        else:
            writer.writerow(["taxon", *table.sample_ids])
            for name, col in zip(table.taxon_names, table.counts.T):
                writer.writerow([name, *(int(v) for v in col)])
            writer.writerow([LABEL_KEY, *labels])


def relative_to_counts(rel, reads_per_sample) -> np.ndarray:
    """Scale relative abundances by per-sample read depth.

    Rounds half away from zero, so ``0.5`` reads become ``1``.
    """
    rel = np.asarray(rel, dtype=np.float64)
    reads = np.asarray(reads_per_sample)
    if rel.ndim != 2:
        raise ValueError("rel must be a samples x taxa matrix")
    if reads.shape != (rel.shape[0],):
        raise ValueError("need one read count per sample (row)")
    if not np.all(np.isfinite(rel)) or rel.min(initial=0.0) < 0 or rel.max(initial=0.0) > 1:
        raise ValueError("relative abundances must lie in [0, 1]")
    if np.any(reads <= 0) or np.any(reads != np.round(reads)):
        raise ValueError("read counts must be positive integers")
    scaled = rel * reads.astype(np.float64)[:, None]
    # all entries are non-negative, so floor(x + 0.5) is half-away-from-zero
    return np.floor(scaled + 0.5).astype(np.int64)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> AbundanceTable:
    """Planted-signal cohort with log-normal, sparse taxon abundances.

    The names of the informative taxa are kept in ``table.meta["informative"]``.
    """
    rng = np.random.default_rng(seed)
    n = 2 * spec.n_per_class
    labels = np.repeat(np.array([PD, HEALTHY], dtype=np.int8), spec.n_per_class)

    baseline = rng.normal(0.0, 1.5, size=spec.n_taxa)
    informative = np.sort(rng.choice(spec.n_taxa, size=spec.n_informative, replace=False))
    # PD sits effect_size/2 above the baseline on every informative taxon, Healthy below
    class_sign = np.where(labels == PD, 1.0, -1.0)

    log_abund = baseline[None, :] + rng.normal(0.0, 1.0, size=(n, spec.n_taxa))
    log_abund[:, informative] += 0.5 * spec.effect_size * class_sign[:, None]
    abund = np.exp(log_abund)
    abund[rng.random((n, spec.n_taxa)) < spec.sparsity] = 0.0

    totals = abund.sum(axis=1)
    empty = totals == 0
    if np.any(empty):
        # keep every sample non-empty so relative abundances are defined
        j = rng.integers(spec.n_taxa, size=int(empty.sum()))
        abund[np.flatnonzero(empty), j] = 1.0
        totals = abund.sum(axis=1)
    rel = abund / totals[:, None]
    reads = np.maximum(rng.poisson(spec.read_depth, size=n), 1)
    counts = relative_to_counts(np.clip(rel, 0.0, 1.0), reads)

    width = len(str(spec.n_taxa - 1))
    taxa = tuple(f"taxon_{j:0{width}d}" for j in range(spec.n_taxa))
    sample_width = len(str(n - 1))
    samples = tuple(f"S{i:0{sample_width}d}" for i in range(n))
    meta = {"informative": [taxa[j] for j in informative], "seed": seed}
    return AbundanceTable(samples, taxa, counts, labels, meta)


def rescale_taxa(table: AbundanceTable, indices, factor: int) -> AbundanceTable:
    """Multiply selected taxa by an integer factor (scale-skew fixtures)."""
    counts = table.counts.copy()
    counts[:, np.asarray(indices, dtype=np.intp)] *= int(factor)
    return AbundanceTable(table.sample_ids, table.taxon_names, counts, table.labels, dict(table.meta))
