"""Egocentric polar-grid segmentation.

The horizontal plane around the sensor is cut into ``n_sectors`` azimuthal
wedges and ``n_rings`` radial bands of width ``max_range / n_rings``. Bins
are half-open ``[lower, upper)``; the outermost ring is closed at
``max_range`` and points beyond it are discarded. Indices are 1-based
``(sector i, ring j)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import TWO_PI, PointCloud, azimuth


@dataclass(frozen=True)
class GridConfig:
    n_sectors: int = 60
    n_rings: int = 20
    max_range: float = 60.0

    def __post_init__(self) -> None:
        if self.n_sectors < 1 or self.n_rings < 1:
            raise ValueError("grid needs at least one sector and one ring")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")

    @property
    def ring_width(self) -> float:
        return self.max_range / self.n_rings

    @property
    def sector_width(self) -> float:
        return TWO_PI / self.n_sectors


@dataclass
class SegmentSet:
    """Point indices grouped by ``(sector, ring)``; only non-empty segments are stored."""

    segments: dict[tuple[int, int], np.ndarray]
    n_discarded: int
    n_points: int

    def __len__(self) -> int:
        return len(self.segments)

    def sizes(self) -> dict[tuple[int, int], int]:
        return {key: int(idx.size) for key, idx in self.segments.items()}


def _half_open_bin(value: np.ndarray, width: float, n_bins: int) -> np.ndarray:
    # floor() guess corrected against the literal interval test (j-1)*w <= v < j*w
    j = np.floor(value / width).astype(np.int64) + 1
    j = np.where(value < (j - 1) * width, j - 1, j)
    j = np.where(value >= j * width, j + 1, j)
    return np.clip(j, 1, n_bins)


def assign_indices(points: np.ndarray, cfg: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized segment assignment.

    Returns:
        ``(sector, ring)`` int arrays; both are 0 for discarded points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rho = np.hypot(pts[:, 0], pts[:, 1])
    theta = azimuth(pts)
    ring = _half_open_bin(rho, cfg.ring_width, cfg.n_rings)
    sector = _half_open_bin(theta, cfg.sector_width, cfg.n_sectors)
    keep = rho <= cfg.max_range
    return np.where(keep, sector, 0), np.where(keep, ring, 0)


def assign_segment(p, cfg: GridConfig) -> tuple[int, int] | None:
    """Segment index ``(i, j)`` of a single point, or ``None`` if out of range."""
    sector, ring = assign_indices(np.asarray(p, dtype=np.float64).reshape(1, 3), cfg)
    if ring[0] == 0:
        return None
    return int(sector[0]), int(ring[0])


def segment_cloud(cloud: PointCloud, cfg: GridConfig) -> SegmentSet:
    sector, ring = assign_indices(cloud.points, cfg)
    valid = np.flatnonzero(ring > 0)
    segments: dict[tuple[int, int], np.ndarray] = {}
    if valid.size:
        keys = (ring[valid] - 1) * cfg.n_sectors + (sector[valid] - 1)
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        members = valid[order]
        starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
        ends = np.r_[starts[1:], sorted_keys.size]
        n_s = cfg.n_sectors
        for key, a, b in zip(sorted_keys[starts].tolist(), starts.tolist(), ends.tolist()):
            segments[(key % n_s + 1, key // n_s + 1)] = members[a:b]
    return SegmentSet(segments, n_discarded=len(cloud) - int(valid.size), n_points=len(cloud))


def summarize(segset: SegmentSet) -> dict:
    """JSON-ready summary used by the ``segment`` command."""
    return {
        "n_points": segset.n_points,
        "n_segments": len(segset),
        "n_discarded": segset.n_discarded,
        "segments": [
            {"sector": i, "ring": j, "size": int(idx.size)}
            for (i, j), idx in sorted(segset.segments.items(), key=lambda kv: (kv[0][1], kv[0][0]))
        ],
    }
