"""Test modes, confusion matrices, one-vs-rest rates, Dice and report tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DatasetTooSmall,
    DimensionMismatch,
    LengthMismatch,
    UnknownClass,
    ValidationError,
)
from .features import Dataset
from .imaging import LabelMask


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with truth on rows and predictions on columns."""

    counts: np.ndarray  # (K, K) int64
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassRates:
    accuracy: float
    tp_rate: float
    tn_rate: float
    fp_rate: float
    fn_rate: float


@dataclass(frozen=True)
class ClassMetrics:
    class_names: tuple[str, ...]
    per_class: dict[str, ClassRates]
    overall_accuracy: float
    dice: dict[str, float] | None = None


@dataclass(frozen=True)
class CrossValidationResult:
    pooled_confusion: ConfusionMatrix
    pooled_metrics: ClassMetrics
    fold_metrics: tuple[ClassMetrics, ...]
    mean_metrics: ClassMetrics


def _as_indices(labels, class_names: Sequence[str]) -> np.ndarray:
    index = {name: i for i, name in enumerate(class_names)}
    out = np.empty(len(labels), dtype=np.intp)
    for i, lab in enumerate(labels):
        if isinstance(lab, str):
            if lab not in index:
                raise UnknownClass(f"label {lab!r} not in {tuple(class_names)}")
            out[i] = index[lab]
        else:
            j = int(lab)
            if not 0 <= j < len(class_names):
                raise UnknownClass(f"class index {j} out of range for {len(class_names)} classes")
            out[i] = j
    return out


def confusion_and_rates(truth, predicted, classes: Sequence[str]) -> tuple[ConfusionMatrix, ClassMetrics]:
    """Confusion counts plus one-vs-rest rates per class.

    Complementary rates are computed as exact complements (fn = 1 - tp,
    fp = 1 - tn) so each pair sums to exactly 1. A class with an empty
    denominator reports NaN rather than a silent zero.
    """
    if len(truth) != len(predicted):
        raise LengthMismatch(f"{len(truth)} truth labels vs {len(predicted)} predictions")
    k = len(classes)
    t = _as_indices(truth, classes)
    p = _as_indices(predicted, classes)
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k).astype(np.int64)
    n = counts.sum()

    per_class: dict[str, ClassRates] = {}
    for i, name in enumerate(classes):
        tp = int(counts[i, i])
        fn = int(counts[i].sum() - tp)
        fp = int(counts[:, i].sum() - tp)
        tn = int(n - tp - fn - fp)
        tp_rate = tp / (tp + fn) if tp + fn > 0 else math.nan
        tn_rate = tn / (tn + fp) if tn + fp > 0 else math.nan
        accuracy = (tp + tn) / n if n > 0 else math.nan
        per_class[name] = ClassRates(
            accuracy=accuracy,
            tp_rate=tp_rate,
            tn_rate=tn_rate,
            fp_rate=1.0 - tn_rate,
            fn_rate=1.0 - tp_rate,
        )
    overall = float(np.trace(counts) / n) if n > 0 else math.nan
    matrix = ConfusionMatrix(counts=counts, class_names=tuple(classes))
    return matrix, ClassMetrics(class_names=tuple(classes), per_class=per_class,
                                overall_accuracy=overall)


def percentage_split(dataset: Dataset, fraction: float = 0.66, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle; the first ceil(fraction*N) rows train, the rest test."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    if n < 2:
        raise DatasetTooSmall(f"need at least 2 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.ceil(fraction * n))
    return dataset.take(perm[:n_train]), dataset.take(perm[n_train:])


def _fold_slices(n: int, k: int) -> list[np.ndarray]:
    base, extra = divmod(n, k)
    sizes = [base + 1] * extra + [base] * (k - extra)
    bounds = np.cumsum([0] + sizes)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(k)]


def cross_validate(dataset: Dataset, k: int = 10, seed: int = 0,
                   trainer: Callable[[Dataset], Callable[[np.ndarray], np.ndarray]] = None,
                   stratified: bool = False) -> CrossValidationResult:
    """k-fold cross validation of a trainer.

    ``trainer`` maps a training Dataset to a predictor (feature matrix ->
    class indices). Every row is evaluated exactly once; the pooled confusion
    matrix over all folds is the primary result and the per-fold mean is kept
    alongside. Stratified assignment deals each class round-robin into folds.
    """
    if trainer is None:
        raise ValidationError("cross_validate needs a trainer")
    if k < 2:
        raise ValidationError(f"need k >= 2 folds, got {k}")
    n = len(dataset)
    if n < k:
        raise DatasetTooSmall(f"cannot make {k} folds from {n} rows")
    rng = np.random.default_rng(seed)
    if stratified:
        order = []
        perm = rng.permutation(n)
        for c in range(len(dataset.class_values)):
            order.extend(int(i) for i in perm if dataset.y[i] == c)
        fold_of = np.empty(n, dtype=np.intp)
        for pos, row in enumerate(order):
            fold_of[row] = pos % k
        folds = [np.nonzero(fold_of == f)[0] for f in range(k)]
    else:
        perm = rng.permutation(n)
        folds = [perm[a:b] for a, b in _fold_slices(n, k)]

    all_truth = []
    all_pred = []
    fold_metrics = []
    for fold in folds:
        test_mask = np.zeros(n, dtype=bool)
        test_mask[fold] = True
        train = dataset.take(np.nonzero(~test_mask)[0])
        test = dataset.take(fold)
        predictor = trainer(train)
        pred = np.asarray(predictor(test.X), dtype=np.intp)
        all_truth.append(test.y)
        all_pred.append(pred)
        _, metrics = confusion_and_rates(test.y, pred, dataset.class_values)
        fold_metrics.append(metrics)

    pooled_confusion, pooled_metrics = confusion_and_rates(
        np.concatenate(all_truth), np.concatenate(all_pred), dataset.class_values
    )
    return CrossValidationResult(
        pooled_confusion=pooled_confusion,
        pooled_metrics=pooled_metrics,
        fold_metrics=tuple(fold_metrics),
        mean_metrics=_mean_metrics(fold_metrics),
    )


def _mean_metrics(fold_metrics: Sequence[ClassMetrics]) -> ClassMetrics:
    """Field-wise mean over folds, ignoring NaN entries from degenerate folds."""
    names = fold_metrics[0].class_names
    per_class = {}
    with np.errstate(invalid="ignore"):
        for name in names:
            rates = [m.per_class[name] for m in fold_metrics]
            per_class[name] = ClassRates(
                accuracy=float(np.nanmean([r.accuracy for r in rates])),
                tp_rate=float(np.nanmean([r.tp_rate for r in rates])),
                tn_rate=float(np.nanmean([r.tn_rate for r in rates])),
                fp_rate=float(np.nanmean([r.fp_rate for r in rates])),
                fn_rate=float(np.nanmean([r.fn_rate for r in rates])),
            )
        overall = float(np.nanmean([m.overall_accuracy for m in fold_metrics]))
    return ClassMetrics(class_names=names, per_class=per_class, overall_accuracy=overall)


def dice(mask_a, mask_b, cls) -> float:
    """Dice overlap 2|A&B| / (|A| + |B|) of one class; 1.0 when both are empty."""
    a = mask_a.labels if isinstance(mask_a, LabelMask) else np.asarray(mask_a)
    b = mask_b.labels if isinstance(mask_b, LabelMask) else np.asarray(mask_b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    in_a = a == cls
    in_b = b == cls
    denom = int(in_a.sum()) + int(in_b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((in_a & in_b).sum()) / denom


def dice_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 1.0


def _fmt_pct(v: float) -> str:
    return "-" if math.isnan(v) else f"{100.0 * v:.1f}%"


_RATE_COLUMNS = ("accuracy", "tp_rate", "tn_rate", "fp_rate", "fn_rate")
_TEXT_HEADERS = ("Tissue", "Accuracy", "TP Rate", "TN Rate", "FP Rate", "FN Rate")


def report(metrics: ClassMetrics, fmt: str = "text") -> str:
    """Per-tissue rate table, as aligned text (percentages, one decimal) or CSV.

    The CSV carries full-precision fractions so it reparses to the exact
    metric values; dice appears as an extra column when present.
    """
    has_dice = metrics.dice is not None
    if fmt == "csv":
        header = "tissue," + ",".join(_RATE_COLUMNS) + (",dice" if has_dice else "")
        lines = [header]
        for name in metrics.class_names:
            r = metrics.per_class[name]
            cells = [name] + [repr(getattr(r, col)) for col in _RATE_COLUMNS]
            if has_dice:
                cells.append(repr(metrics.dice.get(name, math.nan)))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"
    if fmt != "text":
        raise ValidationError(f"unknown report format {fmt!r}")

    headers = _TEXT_HEADERS + (("Dice",) if has_dice else ())
    rows = []
    for name in metrics.class_names:
        r = metrics.per_class[name]
        row = [name] + [_fmt_pct(getattr(r, col)) for col in _RATE_COLUMNS]
        if has_dice:
            row.append(_fmt_pct(metrics.dice.get(name, math.nan)))
        rows.append(row)
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    if not math.isnan(metrics.overall_accuracy):
        lines.append(f"overall accuracy: {_fmt_pct(metrics.overall_accuracy)}")
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> ClassMetrics:
    """Reparse a CSV report into ClassMetrics (used for round-trip checks)."""
    lines = [ln for ln in text.splitlines() if ln]
    header = lines[0].split(",")
    has_dice = header[-1] == "dice"
    names = []
    per_class = {}
    dice_map: dict[str, float] = {}
    for ln in lines[1:]:
        cells = ln.split(",")
        name = cells[0]
        names.append(name)
        values = [float(c) for c in cells[1:]]
        per_class[name] = ClassRates(*values[:5])
        if has_dice:
            dice_map[name] = values[5]
    return ClassMetrics(class_names=tuple(names), per_class=per_class,
                        overall_accuracy=math.nan, dice=dice_map if has_dice else None)
