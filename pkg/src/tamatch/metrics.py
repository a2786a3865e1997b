"""Evaluation statistics: error rates, per-class accuracy, utilization, KL traces,
seed aggregation and Friedman ranks."""

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from . import simplex
from .errors import EmptyBatch, EmptyInput, LabelOutOfRange, MalformedTable


def utilization_ratio(pb):
    """Fraction of the batch whose mask is non-zero."""
    masks = np.asarray(pb.masks if hasattr(pb, "masks") else pb)
    if masks.size == 0:
        raise EmptyBatch("utilization of an empty batch")
    return float(np.count_nonzero(masks)) / masks.size


def per_class_accuracy(preds, truths, n_classes):
    """Accuracy within each true class; classes absent from ``truths`` are NaN."""
    preds = np.asarray(preds)
    truths = np.asarray(truths)
    if preds.shape != truths.shape:
        raise ValueError(f"{preds.shape} predictions vs {truths.shape} labels")
    for arr in (preds, truths):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    correct = np.bincount(truths[preds == truths], minlength=n_classes).astype(np.float64)
    totals = np.bincount(truths, minlength=n_classes).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, correct / totals, np.nan)


def error_rate(preds, truths):
    """Test error in percent."""
    preds = np.asarray(preds)
    truths = np.asarray(truths)
    if truths.size == 0:
        raise EmptyInput("error rate of an empty set")
    if preds.shape != truths.shape:
        raise ValueError(f"{preds.shape} predictions vs {truths.shape} labels")
    return 100.0 * (1.0 - np.count_nonzero(preds == truths) / truths.size)


class SeedStats(NamedTuple):
    mean: float
    std: float
    single: bool  # std is a placeholder 0 when only one value was given


def seed_aggregate(values):
    """Mean and sample standard deviation (n - 1) across seeds."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("no values to aggregate")
    if v.size == 1:
        return SeedStats(float(v[0]), 0.0, True)
    return SeedStats(float(np.mean(v)), float(np.std(v, ddof=1)), False)


def kl_to_truth(p_model, p_truth):
    """KL(p_model || p_truth) in nats."""
    return simplex.kl_divergence(p_model, p_truth)


@dataclass
class ErrorTable:
    methods: list
    tasks: list
    error: np.ndarray  # methods x tasks, percent

    def __post_init__(self):
        self.error = np.asarray(self.error, dtype=np.float64)
        if self.error.shape != (len(self.methods), len(self.tasks)):
            raise MalformedTable(f"error matrix {self.error.shape} does not match "
                                 f"{len(self.methods)} methods x {len(self.tasks)} tasks")
        if not np.all(np.isfinite(self.error)):
            raise MalformedTable("missing or non-finite cell")
        if np.any((self.error < 0) | (self.error > 100)):
            raise MalformedTable("error rates must lie in [0, 100]")
        if len(set(self.methods)) != len(self.methods):
            raise MalformedTable("duplicate method name")

    @classmethod
    def read(cls, path):
        """Delimited text: header row ``method,<task>...``, then one row per method."""
        try:
            with open(path, newline="") as fh:
                rows = [r for r in csv.reader(fh) if r]
        except (OSError, UnicodeDecodeError) as exc:
            raise MalformedTable(f"cannot read {path}: {exc}") from exc
        if len(rows) < 2:
            raise MalformedTable("table needs a header and at least one method row")
        header = [c.strip() for c in rows[0]]
        if len(header) < 2 or header[0].lower() != "method" or any(not t for t in header[1:]):
            raise MalformedTable(f"bad header {rows[0]!r}; expected 'method,<task>,...'")
        methods, cells = [], []
        for r in rows[1:]:
            if len(r) != len(header):
                raise MalformedTable(f"row {r!r} has {len(r)} cells, header has {len(header)}")
            methods.append(r[0].strip())
            try:
                cells.append([float(c) for c in r[1:]])
            except ValueError as exc:
                raise MalformedTable(f"non-numeric cell in row {r!r}") from exc
        return cls(methods, header[1:], np.array(cells))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method"] + list(self.tasks))
            for m, row in zip(self.methods, self.error):
                w.writerow([m] + [repr(float(x)) for x in row])


def friedman_rank(table):
    """Mean rank of each method across tasks; rank 1 is the lowest error, ties averaged."""
    if len(table.methods) < 2 or len(table.tasks) < 1:
        raise MalformedTable("ranking needs at least 2 methods and 1 task")
    ranks = np.column_stack([rankdata(table.error[:, j], method="average")
                             for j in range(len(table.tasks))])
    return dict(zip(table.methods, ranks.mean(axis=1).tolist()))


def rank_summary(table):
    """Rows of (method, mean_rank, mean_error) sorted by mean rank, stable on ties."""
    ranks = friedman_rank(table)
    mean_err = table.error.mean(axis=1)
    rows = [(m, ranks[m], float(e)) for m, e in zip(table.methods, mean_err)]
    return sorted(rows, key=lambda r: r[1])


def time_average(values):
    v = np.asarray(values, dtype=np.float64)
    return float(np.mean(v)) if v.size else math.nan
