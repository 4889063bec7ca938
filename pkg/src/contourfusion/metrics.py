"""Pixel- and object-level evaluation: IoU, contour-band IoU and instance matching."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import DimensionError, as_mask, signed_distance


def _pair(a, b):
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    a, b = _pair(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def contour_band(ref, eps_d: float) -> np.ndarray:
    """Pixels whose distance to the contour of ``ref`` is at most ``eps_d``."""
    r = as_mask(ref)
    if r.all() or not r.any():
        raise ValueError("reference mask has no contour")
    return np.abs(signed_distance(r, np.inf)) <= eps_d


def weighted_iou(pred, ref, eps_d: float = 3.0) -> float:
    """IoU restricted to an ``eps_d``-wide band around the reference contour.

    Not symmetric: the band is always taken from ``ref``.
    """
    p, r = _pair(pred, ref)
    band = contour_band(r, eps_d)
    union = np.count_nonzero((p | r) & band)
    return np.count_nonzero(p & r & band) / union


@dataclass
class MatchReport:
    precision: float
    recall: float
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    iou_min: float = 0.7


def iou_matrix(preds, gts) -> np.ndarray:
    m = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            m[i, j] = iou(p, g)
    return m


def match_instances(preds, gts, iou_min: float = 0.7) -> MatchReport:
    """Greedy one-to-one matching in descending IoU order.

    Ties are broken by the lower (pred, gt) index pair. Precision with no
    predictions is 1 only when there is also no ground truth (likewise for
    recall); otherwise an empty denominator gives 0.
    """
    preds = [as_mask(p) for p in preds]
    gts = [as_mask(g) for g in gts]
    mat = iou_matrix(preds, gts)
    cands = [(-mat[i, j], i, j) for i in range(len(preds)) for j in range(len(gts))
             if mat[i, j] >= iou_min and mat[i, j] > 0]
    cands.sort()
    used_p, used_g = set(), set()
    matches = []
    for neg, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matches.append((i, j, -neg))
    if not preds and not gts:
        return MatchReport(1.0, 1.0, [], iou_min)
    precision = len(matches) / len(preds) if preds else 0.0
    recall = len(matches) / len(gts) if gts else 0.0
    return MatchReport(precision, recall, matches, iou_min)
