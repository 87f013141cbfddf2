"""Deterministic synthetic place-recognition benchmark.

Each place is a fixed layout of anisotropic Gaussian blobs around the
sensor. A *visit* re-samples the blobs with a fresh seed, applies a random
z-rotation and a random 30 degree occlusion, and adds point jitter. Visits
of the same place share a pose within 1 m of the place anchor; anchors are
100 m apart, and visits are at least 60 s apart in time.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import NetworkConfig
from .pointcloud import TWO_PI, PointCloud, PoseStamped, derive_seed, occlude_sector, rotate_z, save_kitti_bin, synth_scene, write_poses_and_times
from .training import TrainConfig

PLACE_SPACING = 100.0
VISIT_DT = 60.0


@dataclass(frozen=True)
class ToyConfig:
    n_places: int = 20
    n_visits: int = 10
    n_blobs: int = 28
    min_range: float = 4.0
    max_range: float = 50.0
    points_per_blob: tuple[int, int] = (40, 120)
    blob_std: tuple[float, float] = (0.08, 1.2)
    jitter: float = 0.03
    occlusion: float = np.pi / 6
    rotate: bool = True
    seed: int = 7


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def place_layout(place: int, cfg: ToyConfig) -> list[tuple[np.ndarray, np.ndarray, int]]:
    rng = np.random.default_rng(derive_seed(cfg.seed, f"place-{place}"))
    blobs = []
    for _ in range(cfg.n_blobs):
        rho = rng.uniform(cfg.min_range, cfg.max_range)
        phi = rng.uniform(0.0, TWO_PI)
        center = np.array([rho * np.cos(phi), rho * np.sin(phi), rng.uniform(-1.0, 3.0)])
        rot = _random_rotation(rng)
        std = rng.uniform(*cfg.blob_std, size=3)
        cov = rot @ np.diag(std**2) @ rot.T
        cov = 0.5 * (cov + cov.T)
        blobs.append((center, cov, int(rng.integers(cfg.points_per_blob[0], cfg.points_per_blob[1] + 1))))
    return blobs


def visit(place: int, copy: int, cfg: ToyConfig, frame_id: int = 0, timestamp: float = 0.0) -> PointCloud:
    """One augmented observation of ``place``; ``copy`` selects the augmentation seed."""
    seed = derive_seed(cfg.seed, f"visit-{place}-{copy}")
    rng = np.random.default_rng(derive_seed(cfg.seed, f"augment-{place}-{copy}"))
    cloud = synth_scene(place_layout(place, cfg), seed, frame_id=frame_id, timestamp=timestamp)
    if cfg.jitter > 0:
        cloud = cloud.with_points(cloud.points + rng.normal(0.0, cfg.jitter, size=cloud.points.shape))
    if cfg.rotate:
        cloud = rotate_z(cloud, float(rng.uniform(0.0, TWO_PI)))
    if cfg.occlusion > 0:
        cloud = occlude_sector(cloud, float(rng.uniform(0.0, TWO_PI)), cfg.occlusion)
    return cloud


def visit_pose(place: int, copy: int, cfg: ToyConfig, timestamp: float) -> PoseStamped:
    rng = np.random.default_rng(derive_seed(cfg.seed, f"pose-{place}-{copy}"))
    offset = rng.uniform(-0.5, 0.5, size=3) * np.array([1.0, 1.0, 0.0])
    return PoseStamped(np.eye(3), np.array([place * PLACE_SPACING, 0.0, 0.0]) + offset, timestamp)


@dataclass
class ToySequence:
    clouds: list[PointCloud]
    poses: list[PoseStamped]
    places: np.ndarray


def make_sequence(cfg: ToyConfig, copies: range | None = None) -> ToySequence:
    """Frames ordered visit-major; frame ids are consecutive from 0."""
    copies = range(cfg.n_visits) if copies is None else copies
    clouds, poses, places = [], [], []
    fid = 0
    for c in copies:
        for p in range(cfg.n_places):
            stamp = (c * cfg.n_places + p) * VISIT_DT
            clouds.append(visit(p, c, cfg, frame_id=fid, timestamp=stamp))
            poses.append(visit_pose(p, c, cfg, stamp))
            places.append(p)
            fid += 1
    return ToySequence(clouds, poses, np.array(places, dtype=np.int64))


def write_sequence(seq: ToySequence, out_dir: str | os.PathLike) -> Path:
    """Write ``seq`` in KITTI odometry layout: ``velodyne/NNNNNN.bin``, ``poses.txt``, ``times.txt``."""
    out = Path(out_dir)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    for c in seq.clouds:
        save_kitti_bin(c, out / "velodyne" / f"{c.frame_id:06d}.bin")
    write_poses_and_times(seq.poses, out / "poses.txt", out / "times.txt")
    return out


def toy_network() -> NetworkConfig:
    """Reduced network used for desk-scale training on the toy benchmark."""
    return NetworkConfig(k=8, eu_layers=((32, 32), (64,)), eig_layers=((32, 32), (64,)), n_clusters=16)


def toy_train_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(network=toy_network(), m=6, epochs=40, lr=3e-3, seed=seed)
