"""One-pass evaluation: overlap and centre-error curves, attribute slices, and
a Gaussian distance between day and night feature statistics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .synth import ATTRIBUTES, BoundingBox

log = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.arange(21) / 20.0  # 0, 0.05, ..., 1
NORM_THRESHOLDS = np.arange(21) / 40.0  # 0, 0.025, ..., 0.5
PRECISION_PX = 20.0


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def cle(a: BoundingBox, b: BoundingBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def normalized_error(pred: BoundingBox, gt: BoundingBox) -> float:
    if gt.w <= 0 or gt.h <= 0:
        raise ValueError("ground-truth box has zero size")
    (px, py), (gx, gy) = pred.center, gt.center
    return math.hypot((px - gx) / gt.w, (py - gy) / gt.h)


def success_curve(ious: Sequence[float]) -> np.ndarray:
    v = np.asarray(ious, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no frames")
    return (v[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)


def success_auc(ious: Sequence[float]) -> float:
    return float(success_curve(ious).mean())


def precision_at(cles: Sequence[float], threshold: float = PRECISION_PX) -> float:
    v = np.asarray(cles, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no frames")
    return float((v <= threshold).mean())


def norm_precision_curve(pred_boxes: Sequence[BoundingBox], gt_boxes: Sequence[BoundingBox]) -> np.ndarray:
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"{len(pred_boxes)} predictions vs {len(gt_boxes)} ground-truth boxes")
    if not gt_boxes:
        raise ValueError("no frames")
    err = np.array([normalized_error(p, g) for p, g in zip(pred_boxes, gt_boxes)])
    return (err[None, :] <= NORM_THRESHOLDS[:, None]).mean(axis=1)


def norm_precision_auc(pred_boxes: Sequence[BoundingBox], gt_boxes: Sequence[BoundingBox]) -> float:
    return float(norm_precision_curve(pred_boxes, gt_boxes).mean())


def _channel_means(feats) -> np.ndarray:
    arr = np.stack([np.asarray(f.detach().cpu() if hasattr(f, "detach") else f, dtype=np.float64)
                    for f in feats])
    return arr.reshape(arr.shape[0], arr.shape[1], -1).mean(axis=2)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)) for PSD covariances."""
    diff = mu1 - mu2
    r1 = _psd_sqrt(sigma1)
    inner = r1 @ sigma2 @ r1
    ev = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_covmean = np.sqrt(np.clip(ev, 0, None)).sum()
    d = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_covmean)
    return max(d, 0.0)


def discrepancy(day_feats, night_feats) -> float:
    """Frechet distance between Gaussians fitted to per-map channel means."""
    if len(day_feats) < 2 or len(night_feats) < 2:
        raise ValueError("need at least two feature maps per domain")
    a, b = _channel_means(day_feats), _channel_means(night_feats)
    return frechet_distance(a.mean(0), np.atleast_2d(np.cov(a, rowvar=False)),
                            b.mean(0), np.atleast_2d(np.cov(b, rowvar=False)))


def percent_delta(old: float, new: float) -> float:
    if old <= 0:
        raise ValueError(f"baseline must be positive, got {old}")
    return round(100.0 * (new - old) / old, 1)


@dataclass
class MetricReport:
    success_auc: float
    precision_at_20: float
    norm_precision_auc: float
    sequences: int
    frames: int
    per_attribute: dict[str, "MetricReport"] = field(default_factory=dict)
    success_curve: list[float] = field(default_factory=list, repr=False)
    norm_precision_curve: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_attribute"] = {k: v.to_dict() for k, v in self.per_attribute.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [("overall", self)] + sorted(self.per_attribute.items())
        lines = [f"{'slice':<10}{'seqs':>6}{'frames':>8}{'succ':>8}{'prec@20':>9}{'nprec':>8}"]
        for name, r in rows:
            lines.append(f"{name:<10}{r.sequences:>6}{r.frames:>8}{r.success_auc:>8.3f}"
                         f"{r.precision_at_20:>9.3f}{r.norm_precision_auc:>8.3f}")
        return "\n".join(lines)

    def curves_csv(self) -> str:
        lines = ["kind,threshold,value"]
        lines += [f"success,{t:g},{v:.6f}" for t, v in zip(SUCCESS_THRESHOLDS, self.success_curve)]
        lines += [f"norm_precision,{t:g},{v:.6f}"
                  for t, v in zip(NORM_THRESHOLDS, self.norm_precision_curve)]
        return "\n".join(lines) + "\n"


def metric_report(pred_boxes: Sequence[BoundingBox], gt_boxes: Sequence[BoundingBox],
                  sequences: int = 1) -> MetricReport:
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"{len(pred_boxes)} predictions vs {len(gt_boxes)} ground-truth boxes")
    ious = [iou(p, g) for p, g in zip(pred_boxes, gt_boxes)]
    cles = [cle(p, g) for p, g in zip(pred_boxes, gt_boxes)]
    sc = success_curve(ious)
    nc = norm_precision_curve(pred_boxes, gt_boxes)
    return MetricReport(float(sc.mean()), precision_at(cles), float(nc.mean()), sequences,
                        len(gt_boxes), success_curve=sc.tolist(), norm_precision_curve=nc.tolist())


def attribute_report(results: Mapping[str, tuple[Sequence[BoundingBox], Sequence[BoundingBox]]],
                     tags: Mapping[str, Sequence[str]]) -> MetricReport:
    """Overall metrics plus one sub-report per attribute.

    ``results`` maps sequence name to (predicted boxes, ground-truth boxes);
    attribute slices pool the frames of every sequence carrying the tag.
    """
    def pooled(names):
        preds, gts = [], []
        for n in names:
            p, g = results[n]
            if len(p) != len(g):
                raise ValueError(f"{n}: {len(p)} predictions vs {len(g)} ground-truth boxes")
            preds.extend(p)
            gts.extend(g)
        return metric_report(preds, gts, sequences=len(names))

    names = sorted(results)
    overall = pooled(names)
    by_tag: dict[str, list[str]] = {}
    for n in names:
        for tag in tags.get(n, ()):
            if tag not in ATTRIBUTES:
                log.warning("sequence %s: unknown attribute %r", n, tag)
            by_tag.setdefault(tag, []).append(n)
    overall.per_attribute = {tag: pooled(seqs) for tag, seqs in sorted(by_tag.items())}
    return overall
