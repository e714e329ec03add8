"""Hungarian-matched unsupervised evaluation: confusion accumulation,
optimal cluster-to-class matching, mIoU / pixel accuracy, discovery stats."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class ConfusionMatrix:
    n_pred: int
    n_gt: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_pred, self.n_gt), dtype=np.int64)
        elif self.counts.shape != (self.n_pred, self.n_gt):
            raise ValueError("counts shape disagrees with n_pred/n_gt")

    def add(self, delta: np.ndarray) -> None:
        self.counts += delta

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class EvalReport:
    matching: dict[int, int]        # prediction cluster -> gt class
    per_class_iou: np.ndarray       # indexed by gt class
    miou: float
    pixel_accuracy: float
    discovered: list[int]           # gt classes with IoU >= 0.20
    have_cluster: list[int]         # gt classes with IoU > 0


def confusion_delta(
    pred: np.ndarray,
    gt: np.ndarray,
    n_pred: int,
    n_gt: int,
    ignore_index: int = 255,
) -> np.ndarray:
    """Per-image confusion increment; ignore_index pixels are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} vs gt {gt.shape} dimension mismatch")
    keep = gt != ignore_index
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= n_pred):
        raise ValueError(f"prediction labels outside [0, {n_pred})")
    if g.size and (g.min() < 0 or g.max() >= n_gt):
        raise ValueError(f"gt labels outside [0, {n_gt})")
    return np.bincount(p * n_gt + g, minlength=n_pred * n_gt).reshape(n_pred, n_gt)


def hungarian_match(score: np.ndarray) -> list[int]:
    """Total-score-maximizing assignment of a square matrix.

    Returns perm with perm[row] = column.  Among all optimal assignments the
    lexicographically smallest permutation is returned, so ties resolve
    deterministically.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise ValueError(f"score matrix must be square, got {score.shape}")
    if not np.isfinite(score).all():
        raise ValueError("score matrix contains non-finite entries")
    n = score.shape[0]
    rows, cols = linear_sum_assignment(score, maximize=True)
    best = float(score[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))

    perm: list[int] = []
    free_cols = list(range(n))
    prefix = 0.0
    for i in range(n):
        for ci, c in enumerate(free_cols):
            rest_rows = np.arange(i + 1, n)
            rest_cols = np.array(free_cols[:ci] + free_cols[ci + 1:], dtype=np.int64)
            if rest_rows.size:
                sub = score[np.ix_(rest_rows, rest_cols)]
                rr, cc = linear_sum_assignment(sub, maximize=True)
                rest = float(sub[rr, cc].sum())
            else:
                rest = 0.0
            if prefix + score[i, c] + rest >= best - tol:
                perm.append(c)
                prefix += score[i, c]
                free_cols.pop(ci)
                break
    return perm


def match_clusters(
    conf: ConfusionMatrix,
    objective: str = "intersection",
    pin_background: bool = True,
) -> dict[int, int]:
    """Hungarian matching of prediction clusters to gt classes.

    objective "intersection" maximizes shared pixel counts (the standard
    protocol); "iou" maximizes per-pair IoU.  With pin_background the
    pipeline's structurally-known background cluster 0 is pre-matched to gt
    class 0 and only foreground clusters enter the matching.
    """
    counts = conf.counts.astype(np.float64)
    if objective == "iou":
        row = counts.sum(axis=1, keepdims=True)
        col = counts.sum(axis=0, keepdims=True)
        denom = row + col - counts
        score = np.where(denom > 0, counts / np.maximum(denom, 1), 0.0)
    elif objective == "intersection":
        score = counts
    else:
        raise ValueError(f"unknown matching objective {objective!r}")

    if pin_background:
        if conf.n_pred < 2 or conf.n_gt < 2:
            return {0: 0}
        sub = score[1:, 1:]
        side = max(sub.shape)
        padded = np.zeros((side, side))
        padded[:sub.shape[0], :sub.shape[1]] = sub
        perm = hungarian_match(padded)
        matching = {0: 0}
        for p, g in enumerate(perm):
            if p < sub.shape[0] and g < sub.shape[1]:
                matching[p + 1] = g + 1
        return matching

    side = max(score.shape)
    padded = np.zeros((side, side))
    padded[:score.shape[0], :score.shape[1]] = score
    perm = hungarian_match(padded)
    return {
        p: g for p, g in enumerate(perm)
        if p < conf.n_pred and g < conf.n_gt
    }


def compute_metrics(conf: ConfusionMatrix, matching: dict[int, int]) -> EvalReport:
    """IoU per gt class under the matching, unweighted mIoU, pixel accuracy."""
    counts = conf.counts
    if conf.total == 0:
        raise ValueError("empty confusion matrix")
    row_sum = counts.sum(axis=1)
    col_sum = counts.sum(axis=0)
    pred_of_gt = {g: p for p, g in matching.items()}
    iou = np.zeros(conf.n_gt, dtype=np.float64)
    correct = 0
    for g in range(conf.n_gt):
        p = pred_of_gt.get(g)
        if p is None:
            continue
        tp = counts[p, g]
        denom = row_sum[p] + col_sum[g] - tp
        iou[g] = tp / denom if denom > 0 else 0.0
        correct += int(tp)
    return EvalReport(
        matching=dict(sorted(matching.items())),
        per_class_iou=iou,
        miou=float(iou.mean()),
        pixel_accuracy=correct / conf.total,
        discovered=[g for g in range(conf.n_gt) if iou[g] >= 0.20],
        have_cluster=[g for g in range(conf.n_gt) if iou[g] > 0.0],
    )


def coco_report(report: EvalReport, discovered_threshold: float = 0.20) -> dict:
    """Discovery summary over {IoU >= threshold} and {IoU > 0} subsets."""
    iou = report.per_class_iou
    disc = iou[iou >= discovered_threshold]
    have = iou[iou > 0.0]
    return {
        "all_miou": float(iou.mean()),
        "discovered": {
            "number": int(disc.size),
            "miou": float(disc.mean()) if disc.size else 0.0,
        },
        "have_cluster": {
            "number": int(have.size),
            "miou": float(have.mean()) if have.size else 0.0,
        },
    }
