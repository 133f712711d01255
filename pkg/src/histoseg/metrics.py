"""Segmentation scoring: confusion matrices, DSC/IoU, Welch's t-test.

Per-class Dice (DSC) and intersection-over-union are computed from a
confusion matrix; the empty-class convention scores 1.0 when a class is
absent from both prediction and truth. Set-level scores aggregate
class -> image mean -> set mean, unweighted by image size.

The Welch test computes its two-sided p-value from scratch via the
regularized incomplete beta function (modified Lentz continued
fraction).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericalError

Array = np.ndarray


# ---------------------------------------------------------------------------
# Confusion matrices and per-class scores
# ---------------------------------------------------------------------------

def confusion_matrix(pred: Array, truth: Array, class_count: int) -> Array:
    """Pixel counts indexed by (truth row, prediction column)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(
            f"prediction shape {pred.shape} does not match truth {truth.shape}"
        )
    if pred.size == 0:
        raise ContractError("cannot score empty maps")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if not np.issubdtype(arr.dtype, np.integer):
            raise ContractError(f"{name} must be integers, got dtype {arr.dtype}")
        lo, hi = int(arr.min()), int(arr.max())
        if lo < 0 or hi >= class_count:
            raise ContractError(
                f"{name} values must lie in [0, {class_count - 1}], got "
                f"range [{lo}, {hi}]"
            )
    idx = truth.astype(np.int64).ravel() * class_count + pred.astype(np.int64).ravel()
    counts = np.bincount(idx, minlength=class_count * class_count)
    return counts.reshape(class_count, class_count)


def _tp_fp_fn(cm: Array) -> tuple[Array, Array, Array]:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ContractError(f"confusion matrix must be square, got shape {cm.shape}")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0).astype(np.float64) - tp
    fn = cm.sum(axis=1).astype(np.float64) - tp
    return tp, fp, fn


def dsc_from_confusion(cm: Array) -> Array:
    """Per-class Dice 2*TP / (2*TP + FP + FN); absent classes score 1."""
    tp, fp, fn = _tp_fp_fn(cm)
    denom = 2 * tp + fp + fn
    return np.where(denom == 0, 1.0, 2 * tp / np.where(denom == 0, 1.0, denom))


def iou_from_confusion(cm: Array) -> Array:
    """Per-class intersection-over-union TP / (TP + FP + FN); absent -> 1."""
    tp, fp, fn = _tp_fp_fn(cm)
    denom = tp + fp + fn
    return np.where(denom == 0, 1.0, tp / np.where(denom == 0, 1.0, denom))


@dataclass(frozen=True)
class ScoreTable:
    """Per-image, per-class DSC and IoU plus their aggregations."""

    per_image_dsc: Array
    per_image_iou: Array

    def __post_init__(self) -> None:
        d = np.asarray(self.per_image_dsc, dtype=np.float64)
        i = np.asarray(self.per_image_iou, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] < 1:
            raise ContractError(
                f"per-image scores must be (n_images, n_classes), got {d.shape}"
            )
        if d.shape != i.shape:
            raise ContractError("DSC and IoU tables must have equal shape")
        object.__setattr__(self, "per_image_dsc", d)
        object.__setattr__(self, "per_image_iou", i)

    @property
    def image_dsc(self) -> Array:
        """Mean DSC over classes, one value per image."""
        return self.per_image_dsc.mean(axis=1)

    @property
    def image_iou(self) -> Array:
        return self.per_image_iou.mean(axis=1)

    @property
    def class_dsc(self) -> Array:
        """Mean per-class DSC over images."""
        return self.per_image_dsc.mean(axis=0)

    @property
    def class_iou(self) -> Array:
        return self.per_image_iou.mean(axis=0)

    @property
    def mean_dsc(self) -> float:
        """Set score: class mean -> image mean -> set mean, unweighted."""
        return float(self.image_dsc.mean())

    @property
    def mean_iou(self) -> float:
        return float(self.image_iou.mean())


def score_predictions(preds, truths, class_count: int) -> ScoreTable:
    """Score a list of predicted label maps against matching truths."""
    if len(preds) != len(truths) or len(preds) == 0:
        raise ContractError(
            f"need equal nonzero map counts, got {len(preds)} predictions "
            f"and {len(truths)} truths"
        )
    dsc_rows = []
    iou_rows = []
    for pred, truth in zip(preds, truths):
        cm = confusion_matrix(pred, truth, class_count)
        dsc_rows.append(dsc_from_confusion(cm))
        iou_rows.append(iou_from_confusion(cm))
    return ScoreTable(np.asarray(dsc_rows), np.asarray(iou_rows))


def write_score_csv(path, rows, class_names) -> None:
    """Write one CSV line per (method, ScoreTable) pair.

    Columns: method, mean DSC, per-class DSC, mean IoU, per-class IoU.
    """
    class_names = list(class_names)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = (["method", "mean_dsc"]
                  + [f"dsc_{n}" for n in class_names]
                  + ["mean_iou"]
                  + [f"iou_{n}" for n in class_names])
        writer.writerow(header)
        for method, table in rows:
            if table.per_image_dsc.shape[1] != len(class_names):
                raise ContractError(
                    f"table for {method!r} has {table.per_image_dsc.shape[1]} "
                    f"classes but {len(class_names)} names were given"
                )
            writer.writerow([method, repr(table.mean_dsc)]
                            + [repr(float(v)) for v in table.class_dsc]
                            + [repr(table.mean_iou)]
                            + [repr(float(v)) for v in table.class_iou])


def class_area_fractions(labels: Array, class_count: int) -> Array:
    """Fraction of pixels per class id in one label map."""
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size == 0:
        raise ContractError("cannot take area fractions of an empty map")
    if int(labels.min()) < 0 or int(labels.max()) >= class_count:
        raise ContractError(
            f"label values must lie in [0, {class_count - 1}]"
        )
    counts = np.bincount(labels.ravel(), minlength=class_count)
    return counts.astype(np.float64) / labels.size


# ---------------------------------------------------------------------------
# Welch's t-test
# ---------------------------------------------------------------------------

_BETACF_MAX_ITER = 300
_BETACF_EPS = 3e-16
_BETACF_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETACF_FPMIN:
        d = _BETACF_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise NumericalError(
        f"incomplete beta continued fraction did not converge for "
        f"a={a}, b={b}, x={x}"
    )


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ContractError(f"shape parameters must be positive, got a={a}, b={b}")
    if not (0.0 <= x <= 1.0):
        raise ContractError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with df degrees of freedom."""
    if df <= 0:
        raise ContractError(f"degrees of freedom must be positive, got {df}")
    if not math.isfinite(t):
        raise ContractError(f"t statistic must be finite, got {t}")
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


@dataclass(frozen=True)
class WelchResult:
    """Welch's unequal-variance t-test summary."""

    t: float
    df: float
    p_value: float
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int


def welch_ttest(a, b) -> WelchResult:
    """Two-sided Welch's t-test with Satterthwaite degrees of freedom.

    Uses sample (ddof=1) variances. Raises when either sample has fewer
    than two values or both samples are constant (zero standard error).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ContractError(
            f"each sample needs at least 2 values, got {a.size} and {b.size}"
        )
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ContractError("samples must be finite")
    na, nb = a.size, b.size
    ma, mb = float(a.mean()), float(b.mean())
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    se2 = va / na + vb / nb
    if se2 == 0.0:
        raise ContractError(
            "both samples are constant; the t statistic is undefined"
        )
    t = (ma - mb) / math.sqrt(se2)
    df = se2 * se2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = student_t_two_sided_p(t, df)
    return WelchResult(t=t, df=df, p_value=p, mean_a=ma, mean_b=mb, n_a=na, n_b=nb)
