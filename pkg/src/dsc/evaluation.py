"""Precision-recall analysis, F1max / Extended Precision, and robustness runs."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .features import extract_frame_features
from .network import DscNetwork, describe
from .pointcloud import TWO_PI, PointCloud, occlude_sector, rotate_z
from .segmentation import GridConfig
from .training import PairIndex


class DegenerateLabelsError(ValueError):
    """Metrics need at least one positive and one negative pair."""


@dataclass
class LabeledPairScores:
    queries: np.ndarray
    candidates: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        self.queries = np.asarray(self.queries, dtype=np.int64)
        self.candidates = np.asarray(self.candidates, dtype=np.int64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @classmethod
    def from_scores(cls, scores, labels) -> "LabeledPairScores":
        n = len(scores)
        return cls(np.zeros(n), np.arange(n), scores, labels)


class PrPoint(NamedTuple):
    tau: float
    precision: float
    recall: float


def pr_curve(scores: LabeledPairScores) -> list[PrPoint]:
    """One point per distinct score ``tau`` (predict positive iff score >= tau), tau descending."""
    s, y = scores.scores, scores.labels
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise DegenerateLabelsError("need at least one positive and one negative pair")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    predicted = np.arange(1, s.size + 1)
    # last occurrence of each distinct score closes that threshold
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp, predicted = tp[last], predicted[last]
    precision = tp / predicted
    recall = tp / n_pos
    return [PrPoint(float(t), float(p), float(r)) for t, p, r in zip(s_sorted[last], precision, recall)]


def f1_max(curve: Sequence[PrPoint]) -> float:
    if not curve:
        raise ValueError("empty PR curve")
    best = 0.0
    for _, p, r in curve:
        if p + r > 0:
            best = max(best, 2.0 * p * r / (p + r))
    return best


def extended_precision(curve: Sequence[PrPoint]) -> float:
    """Mean of the precision at the smallest non-zero recall and the best recall at full precision."""
    if not curve:
        raise ValueError("empty PR curve")
    recalls = [r for _, _, r in curve if r > 0]
    if not recalls:
        return 0.0
    r_min = min(recalls)
    p_r0 = max(p for _, p, r in curve if r == r_min)
    r_p100 = max((r for _, p, r in curve if p == 1.0), default=0.0) if p_r0 >= 1.0 else 0.0
    return (p_r0 + r_p100) / 2.0


@dataclass
class EvalReport:
    curve: list[PrPoint]
    f1_max: float
    extended_precision: float
    n_positive: int
    n_negative: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "f1_max": self.f1_max,
            "extended_precision": self.extended_precision,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
            "metadata": self.metadata,
            "curve": [p._asdict() for p in self.curve],
        }

    def write_json(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def write_curve_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "precision", "recall"])
            for p in self.curve:
                w.writerow([repr(p.tau), repr(p.precision), repr(p.recall)])


def report_from_scores(scores: LabeledPairScores, metadata: dict | None = None) -> EvalReport:
    curve = pr_curve(scores)
    n_pos = int(scores.labels.sum())
    return EvalReport(curve, f1_max(curve), extended_precision(curve), n_pos, scores.labels.size - n_pos, metadata or {})


def _pair_array(lists: Mapping[int, np.ndarray], ids: Sequence[int]) -> np.ndarray:
    chunks = []
    for i in sorted(ids):
        others = lists[i]
        others = others[others > i]
        if others.size:
            chunks.append(np.column_stack([np.full(others.size, i, dtype=np.int64), np.sort(others)]))
    return np.vstack(chunks) if chunks else np.empty((0, 2), dtype=np.int64)


def sample_pairs(pairs: PairIndex, np_multiplier: int = 100, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """All positive pairs plus ``np_multiplier * Np`` negative pairs drawn without replacement.

    When fewer negatives exist than requested, all of them are used.
    """
    pos = _pair_array(pairs.positives, pairs.frame_ids)
    neg = _pair_array(pairs.negatives, pairs.frame_ids)
    want = np_multiplier * len(pos)
    if want < len(neg):
        rng = np.random.default_rng(seed)
        neg = neg[np.sort(rng.choice(len(neg), size=want, replace=False))]
    return pos, neg


def evaluate_sequence(
    descriptors: Mapping[int, np.ndarray],
    pairs: PairIndex,
    np_multiplier: int = 100,
    seed: int = 0,
    metadata: dict | None = None,
) -> EvalReport:
    """Score the positive list and sampled negatives by negative descriptor distance."""
    pos, neg = sample_pairs(pairs, np_multiplier, seed)
    both = np.vstack([pos, neg])
    needed = np.unique(both)
    missing = [int(f) for f in needed if int(f) not in descriptors]
    if missing:
        raise KeyError(f"missing descriptors for frames {missing[:10]}")
    lookup = {int(f): n for n, f in enumerate(needed)}
    mat = np.stack([np.asarray(descriptors[int(f)], dtype=np.float64) for f in needed])
    a = mat[[lookup[int(f)] for f in both[:, 0]]]
    b = mat[[lookup[int(f)] for f in both[:, 1]]]
    scores = -np.sqrt(((a - b) ** 2).sum(axis=1))
    labels = np.r_[np.ones(len(pos), bool), np.zeros(len(neg), bool)]
    meta = {"np_multiplier": np_multiplier, "seed": seed, **(metadata or {})}
    return report_from_scores(LabeledPairScores(both[:, 0], both[:, 1], scores, labels), meta)


def describe_clouds(
    clouds: Sequence[PointCloud], net: DscNetwork, grid: GridConfig | None = None, min_points: int = 5
) -> dict[int, np.ndarray]:
    grid = grid or GridConfig()
    return {c.frame_id: describe(extract_frame_features(c, grid, min_points), net) for c in clouds}


def perturb_clouds(
    clouds: Sequence[PointCloud],
    perturbation: str,
    seed: int,
    max_angle: float = TWO_PI,
    extent: float = np.pi / 6,
) -> list[PointCloud]:
    """Seeded per-cloud z-rotation (uniform in ``[0, max_angle)``) or sector occlusion."""
    rng = np.random.default_rng(seed)
    out = []
    for c in clouds:
        if perturbation == "rotation":
            out.append(rotate_z(c, float(rng.uniform(0.0, max_angle)) if max_angle > 0 else 0.0))
        elif perturbation == "occlusion":
            out.append(occlude_sector(c, float(rng.uniform(0.0, TWO_PI)), extent))
        else:
            raise ValueError(f"unknown perturbation {perturbation!r}")
    return out


def robustness_eval(
    clouds: Sequence[PointCloud],
    pairs: PairIndex,
    net: DscNetwork,
    perturbation: str,
    seed: int = 0,
    grid: GridConfig | None = None,
    min_points: int = 5,
    np_multiplier: int = 100,
    max_angle: float = TWO_PI,
    extent: float = np.pi / 6,
    pair_seed: int = 0,
) -> EvalReport:
    """Perturb every cloud, re-describe it and evaluate.

    ``seed`` drives the perturbations; ``pair_seed`` drives negative-pair
    sampling and should match the unperturbed run being compared against.
    """
    perturbed = perturb_clouds(clouds, perturbation, seed, max_angle=max_angle, extent=extent)
    descs = describe_clouds(perturbed, net, grid, min_points)
    meta = {"perturbation": perturbation, "perturbation_seed": seed}
    if perturbation == "rotation":
        meta["max_angle"] = max_angle
    else:
        meta["extent"] = extent
    return evaluate_sequence(descs, pairs, np_multiplier, pair_seed, meta)
