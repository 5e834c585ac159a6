"""Recall@1, precision-recall sweeps and loop extraction against ground-truth poses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .formats import atomic_write_text
from .geometry import Trajectory


@dataclass(frozen=True)
class EvalConfig:
    distance_threshold: float = 3.0
    pr_thresholds: int = 200
    loop_window: int = 50

    def __post_init__(self):
        if not self.distance_threshold > 0:
            raise ValueError("distance_threshold must be positive")
        if self.pr_thresholds < 1:
            raise ValueError("pr_thresholds must be >= 1")
        if self.loop_window < 0:
            raise ValueError("loop_window must be >= 0")


@dataclass
class PRPoint:
    precision: float
    recall: float
    threshold: float


@dataclass
class Metrics:
    recall_at_1: float  # percent
    max_f1: float
    pr_points: list[PRPoint] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        return [("recall_at_1", self.recall_at_1), ("max_f1", self.max_f1)]


def _xy(p) -> np.ndarray:
    if isinstance(p, Trajectory):
        return p.xy
    return np.asarray(p, dtype=float).reshape(-1, 2)


def planar_distances(query_xy, db_xy) -> np.ndarray:
    q, d = _xy(query_xy), _xy(db_xy)
    diff = q[:, None, :] - d[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def ground_truth_matrix(query_poses, db_poses, d: float = 3.0) -> np.ndarray:
    """Boolean (Q, N): entry (i, j) is True when the poses are within ``d`` metres."""
    return planar_distances(query_poses, db_poses) <= d


def top1_correct(top1_index, query_poses, db_poses, d: float = 3.0) -> np.ndarray:
    q, db = _xy(query_poses), _xy(db_poses)
    idx = np.asarray(top1_index, dtype=np.int64).reshape(-1)
    if len(idx) != len(q):
        raise ValueError(f"expected one result per query ({len(q)}), got {len(idx)}")
    diff = q - db[idx]
    return np.sqrt(np.sum(diff * diff, axis=1)) <= d


def recall_at_1(top1_index, query_poses, db_poses, d: float = 3.0) -> float:
    """Percentage of queries whose top-1 database entry lies within ``d`` metres."""
    ok = top1_correct(top1_index, query_poses, db_poses, d)
    if len(ok) == 0:
        raise ValueError("recall@1 needs at least one query")
    return 100.0 * np.count_nonzero(ok) / len(ok)


def pr_curve(top1_distance, correct, has_match, cfg: EvalConfig = EvalConfig()):
    """Sweep a threshold over the observed top-1 distances; a query is predicted a match when its distance <= tau.

    Returns (points, max_f1).  Precision is 1 when nothing is predicted; recall
    is TP over the number of queries that have any true match.
    """
    dist = np.asarray(top1_distance, dtype=float).reshape(-1)
    correct = np.asarray(correct, dtype=bool).reshape(-1)
    has_match = np.asarray(has_match, dtype=bool).reshape(-1)
    if not len(dist) == len(correct) == len(has_match):
        raise ValueError("distance, correct and has_match must have one entry per query")
    if len(dist) == 0:
        raise ValueError("PR curve needs at least one query")
    positives = np.count_nonzero(has_match)
    taus = np.linspace(dist.min(), dist.max(), cfg.pr_thresholds)
    points, best = [], 0.0
    for tau in taus:
        pred = dist <= tau
        tp = np.count_nonzero(pred & correct)
        fp = np.count_nonzero(pred & ~correct)
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / positives if positives else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        best = max(best, f1)
        points.append(PRPoint(float(precision), float(recall), float(tau)))
    return points, float(best)


def f1_score(p: PRPoint) -> float:
    s = p.precision + p.recall
    return 2 * p.precision * p.recall / s if s > 0 else 0.0


def evaluate(top1_index, top1_distance, query_poses, db_poses, cfg: EvalConfig = EvalConfig()) -> Metrics:
    correct = top1_correct(top1_index, query_poses, db_poses, cfg.distance_threshold)
    has_match = ground_truth_matrix(query_poses, db_poses, cfg.distance_threshold).any(axis=1)
    points, best = pr_curve(top1_distance, correct, has_match, cfg)
    r1 = 100.0 * np.count_nonzero(correct) / len(correct)
    return Metrics(float(r1), best, points)


def detect_loops(sim, threshold: float, window: int = 50) -> list[tuple[int, int]]:
    """Pairs (i, j) with j <= i - window and similarity >= threshold, ordered by i then j."""
    s = np.asarray(getattr(sim, "values", sim), dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"loop detection needs a square matrix, got {s.shape}")
    if window < 0:
        raise ValueError("window must be >= 0")
    i, j = np.nonzero(s >= threshold)
    keep = j <= i - window
    return [(int(a), int(b)) for a, b in zip(i[keep], j[keep])]


def write_metrics_csv(path, metrics: Metrics, extra: dict | None = None):
    rows = metrics.rows() + list((extra or {}).items())
    atomic_write_text(path, "metric,value\n" + "".join(f"{k},{float(v)!r}\n" for k, v in rows))


def write_pr_csv(path, points: list[PRPoint]):
    body = "".join(f"{float(p.threshold)!r},{float(p.precision)!r},{float(p.recall)!r}\n" for p in points)
    atomic_write_text(path, "threshold,precision,recall\n" + body)
