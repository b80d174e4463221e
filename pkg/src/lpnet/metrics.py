"""Target-level and pixel-level evaluation of confidence maps.

A detection is a true positive when it overlaps a ground-truth target and
the centroids are within ``max_distance`` pixels.  Matching is one-to-one,
greedy by centroid distance.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .detect import Detection, ThresholdSpec, adaptive_threshold, connected_components
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class MatchRule:
    max_distance: float = 4.0
    require_overlap: bool = True

    def __post_init__(self):
        if self.max_distance < 0:
            raise ConfigError(f"max_distance must be >= 0, got {self.max_distance}")


@dataclass
class MatchResult:
    true: list       # (detection index, gt index) pairs
    false: list      # unmatched detection indices
    missed: list     # unmatched gt indices

    @property
    def counts(self):
        return len(self.true), len(self.false), len(self.missed)


def default_thresholds(n: int = 255) -> np.ndarray:
    return np.arange(1, n + 1) / (n + 1)


def _check_thresholds(thresholds):
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ConfigError("threshold list must be a non-empty 1-D sequence")
    if np.any(np.diff(t) <= 0) or t[0] <= 0 or t[-1] >= 1:
        raise ConfigError("thresholds must be strictly increasing inside (0, 1)")
    return t


def match_targets(detections: list[Detection], gts: list[Detection],
                  rule: MatchRule = MatchRule()) -> MatchResult:
    candidates = []
    gt_sets = [set(map(tuple, g.pixels.tolist())) for g in gts] if rule.require_overlap else None
    for i, d in enumerate(detections):
        dpix = set(map(tuple, d.pixels.tolist())) if rule.require_overlap else None
        for j, g in enumerate(gts):
            dist = float(np.hypot(d.centroid[0] - g.centroid[0], d.centroid[1] - g.centroid[1]))
            if dist > rule.max_distance:
                continue
            if rule.require_overlap and dpix.isdisjoint(gt_sets[j]):
                continue
            candidates.append((dist, i, j))
    candidates.sort()
    used_d, used_g, true = set(), set(), []
    for _, i, j in candidates:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
        true.append((i, j))
    false = [i for i in range(len(detections)) if i not in used_d]
    missed = [j for j in range(len(gts)) if j not in used_g]
    return MatchResult(true=sorted(true), false=false, missed=missed)


def pd_fa(pairs, rule: MatchRule = MatchRule()):
    """``pairs`` is a sequence of ``(detections, gt_components)`` per image."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("pd_fa needs at least one image")
    tp = fp = n_gt = 0
    for dets, gts in pairs:
        t, f, _ = match_targets(dets, gts, rule).counts
        tp, fp, n_gt = tp + t, fp + f, n_gt + len(gts)
    if n_gt == 0:
        raise DataError("probability of detection is undefined with zero real targets")
    return tp / n_gt, fp / len(pairs)


def f1_score(precision, recall):
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


@dataclass
class PdFaCurve:
    fa: np.ndarray
    pd: np.ndarray
    thresholds: np.ndarray

    def envelope(self):
        """Points merged per Fa (max Pd) with Pd made non-decreasing in Fa."""
        if self.fa.size == 0:
            raise DataError("empty Pd-Fa curve")
        fas = np.unique(self.fa)
        pds = np.array([self.pd[self.fa == f].max() for f in fas])
        return fas, np.maximum.accumulate(pds)


@dataclass
class TargetSweep:
    """Per-threshold target-level counts over an image set."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_det: np.ndarray
    n_gt: int
    n_images: int

    def curve(self) -> PdFaCurve:
        if self.n_gt == 0:
            raise DataError("probability of detection is undefined with zero real targets")
        fa = self.fp / self.n_images
        pd = self.tp / self.n_gt
        order = np.lexsort((-pd, fa))
        return PdFaCurve(fa=fa[order], pd=pd[order], thresholds=self.thresholds[order])


def _gt_components(gts):
    return [connected_components(g) for g in gts]


def target_sweep(confidences, gts, thresholds=None, rule: MatchRule = MatchRule()) -> TargetSweep:
    thresholds = _check_thresholds(default_thresholds() if thresholds is None else thresholds)
    confidences = [np.asarray(c, dtype=np.float64) for c in confidences]
    gt_comps = _gt_components(gts)
    tp = np.zeros(len(thresholds), dtype=np.int64)
    fp = np.zeros_like(tp)
    n_det = np.zeros_like(tp)
    for conf, comps in zip(confidences, gt_comps):
        top = conf.max()
        for k, t in enumerate(thresholds):
            if t > top:
                break
            dets = connected_components(conf >= t)
            a, b, _ = match_targets(dets, comps, rule).counts
            tp[k] += a
            fp[k] += b
            n_det[k] += len(dets)
    return TargetSweep(thresholds, tp, fp, n_det, sum(len(c) for c in gt_comps), len(confidences))


def sweep_curve(confidences, gts, thresholds=None, rule: MatchRule = MatchRule()) -> PdFaCurve:
    """Pd-Fa points from segmenting every map at each fixed threshold."""
    return target_sweep(confidences, gts, thresholds, rule).curve()


def pd_at_fa(curve: PdFaCurve, fa_target: float = 0.2):
    """Pd interpolated at ``fa_target``; ``None`` when no point reaches Fa <= target."""
    fas, pds = curve.envelope()
    below = np.flatnonzero(fas <= fa_target)
    if below.size == 0:
        return None
    i = below[-1]
    if fas[i] == fa_target or i == fas.size - 1:
        return float(pds[i])
    f0, f1, p0, p1 = fas[i], fas[i + 1], pds[i], pds[i + 1]
    return float(p0 + (p1 - p0) * (fa_target - f0) / (f1 - f0))


def auc(curve: PdFaCurve, fa_max: float = 2.0) -> float:
    """Trapezoidal area under Pd(Fa) on [0, fa_max], divided by fa_max.

    The curve is anchored at (0, 0) when it has no Fa = 0 point (a threshold
    above every confidence always yields no detections) and held at its last
    Pd beyond the largest achieved Fa.
    """
    if fa_max <= 0:
        raise ConfigError(f"fa_max must be positive, got {fa_max}")
    fas, pds = curve.envelope()
    if fas[0] > 0:
        fas, pds = np.r_[0.0, fas], np.r_[0.0, pds]
    inside = fas <= fa_max
    xs, ys = list(fas[inside]), list(pds[inside])
    if fas[-1] > fa_max:
        j = np.flatnonzero(~inside)[0]
        f0, f1, p0, p1 = fas[j - 1], fas[j], pds[j - 1], pds[j]
        xs.append(fa_max)
        ys.append(p0 + (p1 - p0) * (fa_max - f0) / (f1 - f0))
    elif xs[-1] < fa_max:
        xs.append(fa_max)
        ys.append(ys[-1])
    return float(np.trapezoid(ys, xs) / fa_max)


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    threshold: float


def best_target_f1(sweep: TargetSweep) -> PRF:
    best = PRF(0.0, 0.0, 0.0, float(sweep.thresholds[0]))
    for k, t in enumerate(sweep.thresholds):
        p = sweep.tp[k] / sweep.n_det[k] if sweep.n_det[k] else 0.0
        r = sweep.tp[k] / sweep.n_gt if sweep.n_gt else 0.0
        f = f1_score(p, r)
        if f > best.f1:
            best = PRF(float(p), float(r), float(f), float(t))
    return best


def pixel_counts(confidences, gts, thresholds):
    """(tp, fp, fn) arrays over thresholds, pixels pooled across images."""
    conf = np.concatenate([np.asarray(c, dtype=np.float64).ravel() for c in confidences])
    gt = np.concatenate([np.asarray(g, dtype=bool).ravel() for g in gts])
    pos = np.sort(conf[gt])
    neg = np.sort(conf[~gt])
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    return tp, fp, pos.size - tp


def best_pixel_f1(confidences, gts, thresholds=None) -> PRF:
    thresholds = _check_thresholds(default_thresholds() if thresholds is None else thresholds)
    tp, fp, fn = pixel_counts(confidences, gts, thresholds)
    best = PRF(0.0, 0.0, 0.0, float(thresholds[0]))
    for k, t in enumerate(thresholds):
        p = tp[k] / (tp[k] + fp[k]) if tp[k] + fp[k] else 0.0
        r = tp[k] / (tp[k] + fn[k]) if tp[k] + fn[k] else 0.0
        f = f1_score(p, r)
        if f > best.f1:
            best = PRF(float(p), float(r), float(f), float(t))
    return best


def best_f1(confidences, gts, level="pixel", thresholds=None, rule: MatchRule = MatchRule()):
    """Best-over-threshold ``(precision, recall, F1, threshold)`` at either level."""
    if level == "pixel":
        r = best_pixel_f1(confidences, gts, thresholds)
    elif level == "target":
        r = best_target_f1(target_sweep(confidences, gts, thresholds, rule))
    else:
        raise ConfigError(f"level must be 'pixel' or 'target', got {level!r}")
    return r.precision, r.recall, r.f1, r.threshold


@dataclass
class MetricsReport:
    pd_at_fa: float | None
    auc: float
    target: PRF
    pixel: PRF
    curve: PdFaCurve = field(repr=False)
    adaptive: dict = field(default_factory=dict)
    fa_target: float = 0.2
    fa_max: float = 2.0

    def to_dict(self):
        return {
            "pd_at_fa": self.pd_at_fa, "fa_target": self.fa_target,
            "auc": self.auc, "fa_max": self.fa_max,
            "target": asdict(self.target), "pixel": asdict(self.pixel),
            "adaptive": self.adaptive,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def curve_text(self) -> str:
        fas, pds = self.curve.envelope()
        lines = ["# fa_per_image\tpd"] + [f"{f:.6g}\t{p:.6g}" for f, p in zip(fas, pds)]
        return "\n".join(lines) + "\n"


def evaluate(confidences, gts, thresholds=None, rule: MatchRule = MatchRule(),
             threshold_spec: ThresholdSpec | None = None, fa_target=0.2, fa_max=2.0):
    """Full protocol: Pd at Fa, AUC, best target-level and pixel-level P/R/F1."""
    confidences = [np.asarray(c, dtype=np.float64) for c in confidences]
    gts = [np.asarray(g, dtype=bool) for g in gts]
    if len(confidences) != len(gts) or not gts:
        raise DataError("need one ground-truth mask per confidence map, at least one image")
    thresholds = _check_thresholds(default_thresholds() if thresholds is None else thresholds)
    sweep = target_sweep(confidences, gts, thresholds, rule)
    curve = sweep.curve()
    report = MetricsReport(pd_at_fa=pd_at_fa(curve, fa_target), auc=auc(curve, fa_max),
                           target=best_target_f1(sweep),
                           pixel=best_pixel_f1(confidences, gts, thresholds),
                           curve=curve, fa_target=fa_target, fa_max=fa_max)
    if threshold_spec is not None:
        report.adaptive = adaptive_operating_point(confidences, gts, threshold_spec, rule)
    return report


def adaptive_operating_point(confidences, gts, spec: ThresholdSpec, rule: MatchRule = MatchRule()):
    """Target and pixel metrics at the per-image adaptive threshold."""
    pairs, tp_px, fp_px, fn_px = [], 0, 0, 0
    for conf, gt in zip(confidences, gts):
        _, mask = adaptive_threshold(conf, spec)
        pairs.append((connected_components(mask), connected_components(gt)))
        tp_px += int(np.sum(mask & gt))
        fp_px += int(np.sum(mask & ~gt))
        fn_px += int(np.sum(~mask & gt))
    tp = sum(len(match_targets(d, g, rule).true) for d, g in pairs)
    n_det = sum(len(d) for d, _ in pairs)
    n_gt = sum(len(g) for _, g in pairs)
    pd, fa = pd_fa(pairs, rule) if n_gt else (0.0, 0.0)
    tp_prec = tp / n_det if n_det else 0.0
    px_prec = tp_px / (tp_px + fp_px) if tp_px + fp_px else 0.0
    px_rec = tp_px / (tp_px + fn_px) if tp_px + fn_px else 0.0
    return {"pd": pd, "fa": fa, "target_f1": f1_score(tp_prec, pd),
            "pixel_precision": px_prec, "pixel_recall": px_rec,
            "pixel_f1": f1_score(px_prec, px_rec)}
