"""Cluster-to-class matching and IoU scoring.

Novel clusters carry arbitrary ids, so scoring first pools a cluster-vs-
ground-truth contingency table over all evaluated scenes, solves the
assignment problem that maximizes total overlap, relabels clusters by the
matched class, and only then computes per-class IoU.  Known classes are
scored directly from the classifier predictions on base points.  Every
aggregate here is deterministic given its inputs; anything run-dependent
(wall time, log lines) stays out of these documents.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import UsageError
from .scenes import PointScene, base_points, novel_points


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

@dataclass
class AssignmentResult:
    """Injective row-to-column map minimizing the summed cost."""

    pairs: list[tuple[int, int]]
    total_cost: float

    def as_map(self) -> dict[int, int]:
        return dict(self.pairs)


def hungarian_match(cost) -> AssignmentResult:
    """Minimum-cost injective matching of rows to columns.

    Rectangular inputs are padded to square with a constant larger than
    any achievable total, so padding never displaces a real assignment;
    pairs touching a padded row or column are dropped from the result.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise UsageError("cost must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(c)):
        raise UsageError("cost entries must be finite")
    n, m = c.shape
    side = max(n, m)
    pad_value = float(np.abs(c).sum()) + 1.0
    padded = np.full((side, side), pad_value)
    padded[:n, :m] = c
    rows, cols = linear_sum_assignment(padded)
    pairs = [(int(r), int(k)) for r, k in zip(rows, cols) if r < n and k < m]
    total = float(sum(c[r, k] for r, k in pairs))
    return AssignmentResult(pairs=pairs, total_cost=total)


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def iou(pred, gt) -> float:
    """Intersection over union of two index sets.

    Two empty sets count as a perfect score; one empty side scores zero.
    """
    ps, gs = set(pred), set(gt)
    if not ps and not gs:
        return 1.0
    if not ps or not gs:
        return 0.0
    return len(ps & gs) / len(ps | gs)


def _mask_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    inter = int(np.sum(pred_mask & gt_mask))
    union = int(np.sum(pred_mask | gt_mask))
    if union == 0:
        return 1.0
    return inter / union


# ---------------------------------------------------------------------------
# full evaluation
# ---------------------------------------------------------------------------

@dataclass
class ClassScore:
    split: str
    class_name: str
    group: str  # "known" | "novel"
    iou: float


@dataclass
class IoUReport:
    scores: list[ClassScore] = field(default_factory=list)
    miou_known: float = 0.0
    miou_novel: float = 0.0
    miou_all: float = 0.0
    cluster_to_class: dict[int, int] = field(default_factory=dict)


def evaluate(scenes: list[PointScene], base_preds: list[np.ndarray],
             novel_cluster_ids: list[np.ndarray], num_base: int,
             num_novel: int) -> IoUReport:
    """Score predictions over a list of scenes.

    ``base_preds[s]`` holds a predicted base class per base point of scene
    s (in scene order); ``novel_cluster_ids[s]`` a cluster id per novel
    point.  Novel clusters are pooled across scenes into one contingency
    table, matched to ground-truth novel classes by maximum overlap, and
    relabeled before IoU; the result is therefore invariant to any
    renaming of cluster ids.
    """
    if not (len(scenes) == len(base_preds) == len(novel_cluster_ids)):
        raise UsageError("one prediction array per scene is required")
    if not scenes:
        raise UsageError("cannot evaluate an empty scene list")
    split = scenes[0].split if all(s.split == scenes[0].split
                                   for s in scenes) else "mixed"
    gt_base_all, pred_base_all = [], []
    gt_novel_all, cluster_all = [], []
    for scene, bp, nc in zip(scenes, base_preds, novel_cluster_ids):
        _, gt_b, _ = base_points(scene)
        _, gt_n = novel_points(scene)
        bp = np.asarray(bp, dtype=np.int64).reshape(-1)
        nc = np.asarray(nc, dtype=np.int64).reshape(-1)
        if bp.shape != gt_b.shape or nc.shape != gt_n.shape:
            raise UsageError("prediction lengths disagree with the scene")
        gt_base_all.append(gt_b)
        pred_base_all.append(bp)
        gt_novel_all.append(gt_n)
        cluster_all.append(nc)
    gt_base = np.concatenate(gt_base_all)
    pred_base = np.concatenate(pred_base_all)
    gt_novel = np.concatenate(gt_novel_all)
    clusters = np.concatenate(cluster_all)
    if clusters.size and (clusters.min() < 0):
        raise UsageError("cluster ids must be nonnegative")

    n_clusters = int(clusters.max()) + 1 if clusters.size else num_novel
    overlap = np.zeros((n_clusters, num_novel))
    for c, g in zip(clusters, gt_novel):
        overlap[c, g] += 1.0
    match = hungarian_match(-overlap)
    cluster_to_class = match.as_map()
    relabeled = np.array([cluster_to_class.get(int(c), -1) for c in clusters],
                         dtype=np.int64)

    scores: list[ClassScore] = []
    for b in range(num_base):
        scores.append(ClassScore(split=split, class_name=f"base-{b}",
                                 group="known",
                                 iou=_mask_iou(pred_base == b, gt_base == b)))
    for g in range(num_novel):
        scores.append(ClassScore(split=split, class_name=f"novel-{g}",
                                 group="novel",
                                 iou=_mask_iou(relabeled == g, gt_novel == g)))
    known = [s.iou for s in scores if s.group == "known"]
    novel = [s.iou for s in scores if s.group == "novel"]
    return IoUReport(scores=scores,
                     miou_known=float(np.mean(known)),
                     miou_novel=float(np.mean(novel)),
                     miou_all=float(np.mean(known + novel)),
                     cluster_to_class=cluster_to_class)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

CSV_FIELDS = ["split", "class", "iou", "group"]


def metrics_csv_text(report: IoUReport) -> str:
    """Deterministic CSV: one row per class, fixed column order."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for s in report.scores:
        writer.writerow({"split": s.split, "class": s.class_name,
                         "iou": f"{s.iou:.10f}", "group": s.group})
    return buf.getvalue()


def write_metrics_csv(path, report: IoUReport) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv_text(report))


def summary_doc(report: IoUReport, seed: int, config_hash: str) -> dict:
    return {
        "miou_known": round(report.miou_known, 10),
        "miou_novel": round(report.miou_novel, 10),
        "miou_all": round(report.miou_all, 10),
        "seed": int(seed),
        "config_hash": config_hash,
    }
