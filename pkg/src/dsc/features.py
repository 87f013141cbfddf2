"""Per-segment centroids and covariance eigenvalues."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud
from .segmentation import GridConfig, segment_cloud

EIG_CLAMP = 1e-9


class UnusableFrameError(ValueError):
    """A frame produced no segment with enough points."""


@dataclass(frozen=True)
class SegmentFeature:
    centroid: np.ndarray
    eigvals: np.ndarray
    index: tuple[int, int]
    point_count: int


@dataclass
class FrameFeatures:
    """Network input for one frame: ``t`` centroids and eigenvalue triples.

    Rows of ``centroids`` and ``eigvals`` are ordered by ``(ring, sector)``.
    """

    frame_id: int
    centroids: np.ndarray
    eigvals: np.ndarray
    indices: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return self.centroids.shape[0]

    @classmethod
    def from_segments(cls, frame_id: int, feats: list[SegmentFeature]) -> "FrameFeatures":
        return cls(
            frame_id,
            np.array([f.centroid for f in feats], dtype=np.float64).reshape(-1, 3),
            np.array([f.eigvals for f in feats], dtype=np.float64).reshape(-1, 3),
            np.array([f.index for f in feats], dtype=np.int64).reshape(-1, 2),
            np.array([f.point_count for f in feats], dtype=np.int64),
        )

    def segments(self) -> list[SegmentFeature]:
        return [
            SegmentFeature(self.centroids[n], self.eigvals[n], tuple(map(int, self.indices[n])), int(self.counts[n]))
            for n in range(len(self))
        ]

    def permuted(self, perm: np.ndarray) -> "FrameFeatures":
        return FrameFeatures(
            self.frame_id, self.centroids[perm], self.eigvals[perm], self.indices[perm], self.counts[perm]
        )


def sorted_eigvals(cov: np.ndarray) -> np.ndarray:
    """Descending spectrum of one or many symmetric 3x3 matrices, tiny negatives clamped to 0."""
    w = np.linalg.eigvalsh(cov)[..., ::-1]
    return np.where((w < 0) & (w >= -EIG_CLAMP * np.maximum(1.0, np.abs(w[..., :1]))), 0.0, w)


def segment_feature(points, index: tuple[int, int] = (1, 1)) -> SegmentFeature:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("segment has no points")
    centroid = pts.mean(axis=0)
    diff = pts - centroid
    cov = diff.T @ diff / pts.shape[0]
    return SegmentFeature(centroid, sorted_eigvals(cov), tuple(index), pts.shape[0])


def extract_frame_features(
    cloud: PointCloud,
    cfg: GridConfig | None = None,
    min_points: int = 5,
    trace_normalize: bool = False,
) -> FrameFeatures:
    """Segment ``cloud`` and summarize every segment with at least ``min_points`` points.

    Raises:
        UnusableFrameError: when no segment qualifies.
    """
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    cfg = cfg or GridConfig()
    segset = segment_cloud(cloud, cfg)
    keys = sorted((k for k, idx in segset.segments.items() if idx.size >= min_points), key=lambda k: (k[1], k[0]))
    if not keys:
        raise UnusableFrameError(f"frame {cloud.frame_id}: no segment with >= {min_points} points")

    counts = np.array([segset.segments[k].size for k in keys], dtype=np.int64)
    order = np.concatenate([segset.segments[k] for k in keys])
    pts = cloud.points[order]
    owner = np.repeat(np.arange(len(keys)), counts)

    centroids = np.stack([np.bincount(owner, pts[:, a], len(keys)) for a in range(3)], axis=1) / counts[:, None]
    diff = pts - centroids[owner]
    cov = np.einsum("na,nb->nab", diff, diff)
    cov = np.stack([np.bincount(owner, cov[:, a, b], len(keys)) for a in range(3) for b in range(3)], axis=1)
    cov = cov.reshape(-1, 3, 3) / counts[:, None, None]
    eig = sorted_eigvals(cov)
    if trace_normalize:
        tr = eig.sum(axis=1, keepdims=True)
        eig = np.divide(eig, tr, out=np.zeros_like(eig), where=tr > 0)
    return FrameFeatures(cloud.frame_id, centroids, eig, np.array(keys, dtype=np.int64), counts)


def features_to_json(frame: FrameFeatures) -> dict:
    return {
        "frame_id": frame.frame_id,
        "segments": [
            {
                "sector": int(frame.indices[n, 0]),
                "ring": int(frame.indices[n, 1]),
                "centroid": frame.centroids[n].tolist(),
                "eigvals": frame.eigvals[n].tolist(),
                "count": int(frame.counts[n]),
            }
            for n in range(len(frame))
        ],
    }
