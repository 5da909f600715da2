"""Evaluation measures: accuracy, macro-F1, EER, NLL, ECE, Fréchet distance.

All operations take explicit arrays and are pure; reports serialize to
a flat JSON object with the stable key set
{accuracy, macro_f1, eer, nll, ece, frechet}.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, NumericalError, ShapeError, ValidationError
from .linalg import MeanCov, psd_sqrt

NLL_PROB_FLOOR = 1e-12

REPORT_KEYS = ("accuracy", "macro_f1", "eer", "nll", "ece", "frechet")


@dataclass
class PredictionBatch:
    """Row-stochastic class probabilities with aligned true class indices."""

    probs: np.ndarray
    true_idx: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.true_idx = np.asarray(self.true_idx, dtype=np.int64)
        if self.probs.ndim != 2:
            raise ShapeError(f"probs must be 2-d, got shape {self.probs.shape}")
        if self.true_idx.shape != (self.probs.shape[0],):
            raise ShapeError("true_idx must have one entry per probability row")
        if not np.all(np.isfinite(self.probs)):
            raise ValidationError("probabilities contain non-finite values")
        if np.any(self.probs < 0.0) or np.any(self.probs > 1.0):
            raise ValidationError("probabilities must lie in [0, 1]")
        row_sums = self.probs.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-9):
            raise ValidationError("probability rows must sum to 1 within 1e-9")
        if self.probs.shape[0] and (
            self.true_idx.min() < 0 or self.true_idx.max() >= self.probs.shape[1]
        ):
            raise ValidationError("true class index out of range")

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class EceConfig:
    """Equal-width calibration binning on (0, 1]; left-open, right-closed."""

    m_bins: int = 10

    def __post_init__(self):
        if self.m_bins < 1:
            raise ValidationError("m_bins must be at least 1")


@dataclass
class MetricReport:
    """One row of evaluation results; fields a scenario cannot compute
    (e.g. the in-domain EER) stay None."""

    accuracy: float | None
    macro_f1: float | None
    nll: float | None
    ece: float | None
    eer: float | None = None
    frechet: float | None = None

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "eer": self.eer,
            "nll": self.nll,
            "ece": self.ece,
            "frechet": self.frechet,
        }


def _require_rows(batch: PredictionBatch) -> None:
    if batch.n < 1:
        raise DegenerateInputError("metric requires at least one prediction row")


def accuracy(batch: PredictionBatch) -> float:
    """Fraction of rows whose argmax matches the true class.

    Ties in the argmax resolve to the lowest class index.
    """
    _require_rows(batch)
    preds = np.argmax(batch.probs, axis=1)
    return float(np.mean(preds == batch.true_idx))


def macro_f1(batch: PredictionBatch) -> float:
    """Unweighted mean of the per-class F1 scores.

    Classes absent from both the predictions and the truths are excluded
    from the mean so vacuous classes cannot inflate the score.
    """
    _require_rows(batch)
    preds = np.argmax(batch.probs, axis=1)
    truths = batch.true_idx
    k = batch.n_classes
    f1s = []
    for c in range(k):
        tp = int(np.sum((preds == c) & (truths == c)))
        fp = int(np.sum((preds == c) & (truths != c)))
        fn = int(np.sum((preds != c) & (truths == c)))
        if tp + fp + fn == 0:
            continue
        f1s.append(2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(f1s))


def _operating_points(scores: np.ndarray, is_target: np.ndarray):
    """FAR/FRR at every distinct threshold (accept iff score >= threshold).

    Returns (far, frr) arrays covering each distinct score ascending plus
    one reject-all sentinel point.
    """
    n_target = int(is_target.sum())
    n_nontarget = int((~is_target).sum())
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    sorted_target = is_target[order]
    uniq, first_idx = np.unique(sorted_scores, return_index=True)
    # Counts of targets/non-targets strictly below each distinct threshold.
    tgt_cum = np.concatenate([[0], np.cumsum(sorted_target)])
    non_cum = np.concatenate([[0], np.cumsum(~sorted_target)])
    tgt_below = tgt_cum[first_idx]
    non_below = non_cum[first_idx]
    frr = tgt_below / n_target
    far = (n_nontarget - non_below) / n_nontarget
    frr = np.concatenate([frr, [1.0]])
    far = np.concatenate([far, [0.0]])
    return far, frr


def eer(scores, is_target) -> float:
    """Equal error rate of a detection score (targets expected high).

    Sweeps every distinct score as an accept-if-greater-or-equal
    threshold and linearly interpolates between the two adjacent
    operating points where FAR and FRR cross.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    if scores.ndim != 1 or scores.shape != is_target.shape:
        raise ShapeError("scores and is_target must be aligned 1-d arrays")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores contain non-finite values")
    if not (is_target.any() and (~is_target).any()):
        raise DegenerateInputError("EER needs at least one target and one non-target")
    far, frr = _operating_points(scores, is_target)
    diff = far - frr
    # diff starts at +1 (accept everything) and ends at -1 (reject everything).
    j = int(np.argmax(diff <= 0.0))
    d0, d1 = diff[j - 1], diff[j]
    t = d0 / (d0 - d1) if d0 != d1 else 0.0
    return float(frr[j - 1] + t * (frr[j] - frr[j - 1]))


def nll(batch: PredictionBatch) -> float:
    """Mean negative log-likelihood of the true class, in nats.

    Probabilities are floored at 1e-12 before the log.
    """
    _require_rows(batch)
    p_true = batch.probs[np.arange(batch.n), batch.true_idx]
    return float(np.mean(-np.log(np.maximum(p_true, NLL_PROB_FLOOR))))


def _bin_index(confidences: np.ndarray, m_bins: int) -> np.ndarray:
    """0-based bin of each confidence under left-open right-closed binning.

    Uses the same float boundary values m/M that define the bins, so a
    confidence exactly on a boundary lands in the lower (right-closed)
    bin; confidence exactly 0 falls into bin 0.
    """
    boundaries = np.arange(1, m_bins) / m_bins
    return np.searchsorted(boundaries, confidences, side="left")


def ece(batch: PredictionBatch, cfg: EceConfig | None = None) -> float:
    """Expected calibration error over M equal-width confidence bins.

    Confidence is the max row probability and correctness is an argmax
    match; each non-empty bin contributes |bin accuracy - bin mean
    confidence| weighted by its share of the rows.
    """
    _require_rows(batch)
    cfg = cfg or EceConfig()
    conf = batch.probs.max(axis=1)
    correct = (np.argmax(batch.probs, axis=1) == batch.true_idx).astype(np.float64)
    bins = _bin_index(conf, cfg.m_bins)
    total = 0.0
    for m in range(cfg.m_bins):
        mask = bins == m
        count = int(mask.sum())
        if count == 0:
            continue
        acc_m = float(correct[mask].mean())
        conf_m = float(conf[mask].mean())
        total += (count / batch.n) * abs(acc_m - conf_m)
    return float(total)


def frechet_distance(a: MeanCov, b: MeanCov) -> float:
    """Fréchet distance between two Gaussians given by their moments.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the
    matrix square root evaluated in the symmetric congruence form
    sqrt(sqrt(S_a) S_b sqrt(S_a)), which has the same trace.
    """
    if a.dim != b.dim:
        raise ShapeError(f"moment dimensions differ: {a.dim} vs {b.dim}")
    mean_term = float(np.sum((a.mean - b.mean) ** 2))
    root_a = psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = (inner + inner.T) / 2.0
    cross = psd_sqrt(inner)
    value = mean_term + float(np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    if value < -1e-8:
        raise NumericalError(f"Fréchet distance evaluated to {value:.3e} < -1e-8")
    return max(value, 0.0)


def report_to_json(report: MetricReport) -> str:
    return json.dumps(report.as_dict(), sort_keys=True)
