"""Verification metrics: EER, minimum detection cost and DET operating points."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .exceptions import MetricError


@dataclass(frozen=True)
class ScoreRecord:
    enroll: str
    test: str
    score: float
    label: bool  # True for target trials


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise MetricError(f"p_target must lie in (0, 1), got {self.p_target}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise MetricError("costs must be positive")


@dataclass
class DetCurve:
    thresholds: np.ndarray  # midpoints between distinct scores, with -inf/+inf ends
    fa: np.ndarray  # non-increasing along the thresholds
    miss: np.ndarray  # non-decreasing

    @property
    def fa_probit(self):
        return norm.ppf(self.fa)

    @property
    def miss_probit(self):
        return norm.ppf(self.miss)

    def to_text(self):
        rows = zip(self.fa, self.miss, self.fa_probit, self.miss_probit)
        return "".join(f"{a:.6f} {b:.6f} {c:.6f} {d:.6f}\n" for a, b, c, d in rows)


def _label_value(label):
    if isinstance(label, str):
        if label not in ("target", "nontarget"):
            raise MetricError(f"unknown trial label {label!r}")
        return label == "target"
    return bool(label)


def split_scores(scores, labels=None):
    """Return (target_scores, nontarget_scores) from arrays or ScoreRecords."""
    if labels is None:
        recs = list(scores)
        scores = [r.score if hasattr(r, "score") else r[2] for r in recs]
        labels = [r.label if hasattr(r, "label") else r[3] for r in recs]
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.array([_label_value(v) for v in labels], dtype=bool)
    if scores.shape != is_target.shape:
        raise MetricError(f"{scores.size} scores but {is_target.size} labels")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    tar, non = scores[is_target], scores[~is_target]
    if tar.size == 0 or non.size == 0:
        raise MetricError("need at least one target and one nontarget trial")
    return tar, non


def det_points(scores, labels=None):
    """Operating points of the rule "accept if score > threshold" over every distinct threshold."""
    tar, non = split_scores(scores, labels)
    tar, non = np.sort(tar), np.sort(non)
    values = np.unique(np.concatenate([tar, non]))
    # Thresholds sit just below each distinct value, then above the largest.
    # Counting against the values themselves keeps this exact even when two
    # adjacent floats have no representable midpoint.
    miss = np.append(np.searchsorted(tar, values, "left"), tar.size) / tar.size
    fa = np.append(non.size - np.searchsorted(non, values, "left"), 0) / non.size
    thresholds = np.concatenate([[-np.inf], (values[:-1] + values[1:]) / 2.0, [np.inf]])
    return DetCurve(thresholds, fa, miss)


def _eer_from_curve(curve):
    d = curve.fa - curve.miss  # starts >= 0 (fa=1, miss=0), ends <= 0
    k = int(np.argmax(d <= 0))
    if d[k] == 0 or k == 0:
        return float(curve.fa[k])
    alpha = d[k - 1] / (d[k - 1] - d[k])
    return float(curve.fa[k - 1] + alpha * (curve.fa[k] - curve.fa[k - 1]))


def compute_eer(scores, labels=None):
    """Equal error rate, interpolating linearly where FA and miss rates cross between points."""
    return _eer_from_curve(det_points(scores, labels))


def compute_min_dcf(scores, labels=None, params=None, **kwargs):
    """Minimum detection cost; ``kwargs`` build a :class:`DcfParams` when ``params`` is None."""
    params = params or DcfParams(**kwargs)
    curve = det_points(scores, labels)
    p = params.p_target
    cost = params.c_miss * p * curve.miss + params.c_fa * (1.0 - p) * curve.fa
    best = float(np.min(cost))
    if params.normalize:
        best /= min(params.c_miss * p, params.c_fa * (1.0 - p))
    return best


def summarize(scores, labels=None):
    """EER (as a fraction) with normalized minDCF at p_target 0.01 and 0.001."""
    return {
        "eer": compute_eer(scores, labels),
        "min_dcf_0.01": compute_min_dcf(scores, labels, p_target=0.01),
        "min_dcf_0.001": compute_min_dcf(scores, labels, p_target=0.001),
    }


def format_summary(summary):
    return f"{100 * summary['eer']:.2f} {summary['min_dcf_0.01']:.4f} {summary['min_dcf_0.001']:.4f}"
