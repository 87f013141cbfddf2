"""Pair mining, lazy quadruplet loss and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import FrameFeatures
from .graph import KnnGraph, knn
from .network import DscNetwork, NetworkConfig, backward_many, forward, init_network, kink_signature
from .pointcloud import PoseStamped

log = logging.getLogger(__name__)


class NoQuadrupletsError(ValueError):
    """The dataset cannot produce a single valid training quadruplet."""


# ----------------------------------------------------------------------------
# Pairs
# ----------------------------------------------------------------------------


@dataclass
class PairIndex:
    """Positive/negative frame ids per frame, derived from ground-truth poses."""

    frame_ids: list[int]
    positives: dict[int, np.ndarray]
    negatives: dict[int, np.ndarray]
    pos_th: float = 3.0
    neg_th: float = 20.0
    time_excl: float = 30.0

    def positive_pairs(self) -> list[tuple[int, int]]:
        return [(i, int(j)) for i in self.frame_ids for j in self.positives[i] if i < j]

    def negative_pairs(self) -> list[tuple[int, int]]:
        return [(i, int(j)) for i in self.frame_ids for j in self.negatives[i] if i < j]

    def relabeled(self, mapping: Mapping[int, int]) -> "PairIndex":
        remap = np.vectorize(mapping.__getitem__, otypes=[np.int64])
        return PairIndex(
            [mapping[i] for i in self.frame_ids],
            {mapping[i]: np.sort(remap(v)) if v.size else v for i, v in self.positives.items()},
            {mapping[i]: np.sort(remap(v)) if v.size else v for i, v in self.negatives.items()},
            self.pos_th,
            self.neg_th,
            self.time_excl,
        )


def build_pair_index(
    poses: Sequence[PoseStamped],
    pos_th: float = 3.0,
    neg_th: float = 20.0,
    time_excl: float = 30.0,
    frame_ids: Sequence[int] | None = None,
    chunk: int = 1024,
) -> PairIndex:
    """Label every ordered frame pair by translation distance and time offset.

    Positive: ``d < pos_th`` and ``|dt| >= time_excl``. Negative: ``d > neg_th``.
    """
    if len(poses) == 0:
        raise ValueError("no poses given")
    ids = list(range(len(poses))) if frame_ids is None else [int(i) for i in frame_ids]
    if len(ids) != len(poses) or len(set(ids)) != len(ids):
        raise ValueError("frame_ids must be unique and match the pose count")
    id_arr = np.asarray(ids, dtype=np.int64)
    xyz = np.stack([p.translation for p in poses])
    stamps = np.array([p.timestamp for p in poses], dtype=np.float64)
    positives, negatives = {}, {}
    for lo in range(0, len(ids), chunk):
        hi = min(lo + chunk, len(ids))
        diff = xyz[lo:hi, None, :] - xyz[None, :, :]
        dist = np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))
        dt = np.abs(stamps[lo:hi, None] - stamps[None, :])
        pos = (dist < pos_th) & (dt >= time_excl)
        neg = dist > neg_th
        for r in range(hi - lo):
            pos[r, lo + r] = False
            positives[ids[lo + r]] = id_arr[pos[r]]
            negatives[ids[lo + r]] = id_arr[neg[r]]
    return PairIndex(ids, positives, negatives, pos_th, neg_th, time_excl)


# ----------------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.2
    m: int = 18

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("margins must be non-negative")
        if self.m < 1:
            raise ValueError("m must be >= 1")


def _dist(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = a - b
    d = np.linalg.norm(diff, axis=-1)
    unit = np.divide(diff, d[..., None], out=np.zeros_like(diff), where=d[..., None] > 0)
    return d, unit


@dataclass
class LossResult:
    loss: float
    grad_query: np.ndarray
    grad_pos: np.ndarray
    grad_negs: np.ndarray
    grad_star: np.ndarray
    hardest: tuple[int, int]
    active: tuple[bool, bool]


def quadruplet_loss_grad(f_q, f_pos, f_negs, f_star, cfg: LossConfig) -> LossResult:
    """Lazy quadruplet loss with its gradient w.r.t. every descriptor.

    The hardest term of each max is selected by lowest index on ties; hinges
    and zero distances take subgradient 0.
    """
    f_q, f_pos, f_star = (np.asarray(v, dtype=np.float64) for v in (f_q, f_pos, f_star))
    f_negs = np.atleast_2d(np.asarray(f_negs, dtype=np.float64))
    dim = f_q.shape[-1]
    if f_pos.shape != (dim,) or f_star.shape != (dim,) or f_negs.shape[1] != dim:
        raise ValueError("descriptor dimensions do not match")
    d_pos, u_pos = _dist(f_q, f_pos)
    d_neg, u_neg = _dist(f_q[None, :], f_negs)
    d_star, u_star = _dist(f_star[None, :], f_negs)
    h1 = cfg.alpha + d_pos - d_neg
    h2 = cfg.beta + d_pos - d_star
    j, k = int(np.argmax(h1)), int(np.argmax(h2))
    on1, on2 = bool(h1[j] > 0), bool(h2[k] > 0)
    g_q = np.zeros(dim)
    g_pos = np.zeros(dim)
    g_negs = np.zeros_like(f_negs)
    g_star = np.zeros(dim)
    n_on = int(on1) + int(on2)
    if n_on:
        g_q += n_on * u_pos
        g_pos -= n_on * u_pos
    if on1:
        g_q -= u_neg[j]
        g_negs[j] += u_neg[j]
    if on2:
        g_star -= u_star[k]
        g_negs[k] += u_star[k]
    loss = max(h1[j], 0.0) + max(h2[k], 0.0)
    return LossResult(float(loss), g_q, g_pos, g_negs, g_star, (j, k), (on1, on2))


def lazy_quadruplet_loss(f_q, f_pos, f_negs, f_star, cfg: LossConfig) -> float:
    return quadruplet_loss_grad(f_q, f_pos, f_negs, f_star, cfg).loss


# ----------------------------------------------------------------------------
# Gradients through the network
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadrupletBatch:
    query: int
    positive: int
    negatives: tuple[int, ...]
    neg_star: int

    def __post_init__(self) -> None:
        ids = (self.query, self.positive, *self.negatives, self.neg_star)
        if len(set(ids)) != len(ids):
            raise ValueError(f"quadruplet ids must be distinct: {ids}")

    def frame_ids(self) -> list[int]:
        return [self.query, self.positive, *self.negatives, self.neg_star]


@dataclass
class BatchGradient:
    loss: float
    grads: dict[str, np.ndarray]
    signature: tuple = field(repr=False, default=())


class GraphCache(dict):
    """Per-frame (centroid, eigenvalue) kNN graphs; graphs are static per frame."""

    def __init__(self, frames: Mapping[int, FrameFeatures], k: int) -> None:
        super().__init__()
        self.frames, self.k = frames, k

    def __missing__(self, fid: int) -> tuple[KnnGraph, KnnGraph]:
        f = self.frames[fid]
        self[fid] = out = (knn(f.centroids, self.k), knn(f.eigvals, self.k))
        return out


def batch_loss(batch: QuadrupletBatch, net: DscNetwork, cfg: LossConfig, frames: Mapping[int, FrameFeatures]) -> float:
    return gradients(batch, net, cfg, frames, need_grads=False).loss


def gradients(
    batch: QuadrupletBatch,
    net: DscNetwork,
    cfg: LossConfig,
    frames: Mapping[int, FrameFeatures],
    graphs: Mapping[int, tuple[KnnGraph, KnnGraph]] | None = None,
    need_grads: bool = True,
    signature: bool = False,
) -> BatchGradient:
    """Loss of one quadruplet and its exact gradient w.r.t. every network parameter.

    With ``signature=True`` the result also records every ReLU mask, max-pool
    winner and hinge selection, so callers can tell whether two parameter
    settings sit on the same linear piece.
    """
    graphs = graphs if graphs is not None else GraphCache(frames, net.config.k)
    ids = batch.frame_ids()
    descs, caches = [], []
    for fid in ids:
        d, c = forward(frames[fid], net, graphs[fid])
        descs.append(d)
        caches.append(c)
    m = len(batch.negatives)
    res = quadruplet_loss_grad(descs[0], descs[1], np.stack(descs[2 : 2 + m]), descs[-1], cfg)
    if not np.isfinite(res.loss):
        raise FloatingPointError("non-finite loss")
    sig = (res.hardest, res.active, *(kink_signature(c) for c in caches)) if signature else ()
    grads = {name: np.zeros_like(v) for name, v in net.params.items()}
    if need_grads:
        per_frame = [res.grad_query, res.grad_pos, *res.grad_negs, res.grad_star]
        backward_many([(g, c) for g, c in zip(per_frame, caches) if np.any(g)], net, grads)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
    return BatchGradient(res.loss, grads, sig)


# ----------------------------------------------------------------------------
# Optimizer and loop
# ----------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        step = self.lr / c1
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            tmp = g * (1.0 - self.beta1)
            m *= self.beta1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.beta2
            v *= self.beta2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= 1.0 / np.sqrt(c2)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= step
            params[name] -= tmp


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    alpha: float = 0.5
    beta: float = 0.2
    m: int = 18
    epochs: int = 10
    lr: float = 1e-3
    seed: int = 0

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.alpha, self.beta, self.m)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        net = NetworkConfig.from_dict(d.pop("network", {}))
        known = {"alpha", "beta", "m", "epochs", "lr", "seed"}
        return cls(network=net, **{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainResult:
    net: DscNetwork
    epoch_losses: list[float]


def sample_quadruplet(
    query: int, pairs: PairIndex, m: int, rng: np.random.Generator, max_tries: int = 20
) -> QuadrupletBatch | None:
    """Draw one positive, up to ``m`` negatives and a cross-query ``neg*`` for ``query``."""
    pos_list, neg_list = pairs.positives[query], pairs.negatives[query]
    if pos_list.size == 0 or neg_list.size == 0:
        return None
    pos = int(rng.choice(pos_list))
    negs = rng.choice(neg_list, size=min(m, neg_list.size), replace=False)
    taken = {query, pos, *map(int, negs)}
    others = [f for f in pairs.frame_ids if f != query and pairs.negatives[f].size]
    for _ in range(max_tries):
        if not others:
            break
        other = others[int(rng.integers(len(others)))]
        cand = np.setdiff1d(pairs.negatives[other], np.fromiter(taken, dtype=np.int64))
        cand = np.setdiff1d(cand, pos_list)
        if cand.size:
            star = int(rng.choice(cand))
            return QuadrupletBatch(query, pos, tuple(int(n) for n in negs), star)
    return None


def train(
    frames: Mapping[int, FrameFeatures],
    pairs: PairIndex,
    cfg: TrainConfig,
    net: DscNetwork | None = None,
    seed: int | None = None,
) -> TrainResult:
    """Adam on single-quadruplet batches, queries shuffled each epoch.

    Raises:
        NoQuadrupletsError: if no frame yields a valid quadruplet.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    net = net.copy() if net is not None else init_network(cfg.network, seed)
    queries = [f for f in pairs.frame_ids if f in frames and pairs.positives[f].size and pairs.negatives[f].size]
    if not _any_quadruplet(queries, pairs, cfg.m, seed):
        raise NoQuadrupletsError("dataset yields no valid quadruplet")
    graphs = GraphCache(frames, net.config.k)
    opt = Adam(net.params, lr=cfg.lr)
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        total, n = 0.0, 0
        for q in rng.permutation(np.asarray(queries, dtype=np.int64)):
            batch = sample_quadruplet(int(q), pairs, cfg.m, rng)
            if batch is None:
                continue
            bg = gradients(batch, net, cfg.loss, frames, graphs)
            total += bg.loss
            n += 1
            if bg.loss > 0:
                opt.step(net.params, bg.grads)
        losses.append(total / max(n, 1))
        log.info("epoch %d mean loss %.6f", epoch + 1, losses[-1])
    return TrainResult(net, losses)


def _any_quadruplet(queries, pairs: PairIndex, m: int, seed: int) -> bool:
    rng = np.random.default_rng(seed)
    return any(sample_quadruplet(q, pairs, m, rng) is not None for q in queries)


def write_loss_csv(losses: Sequence[float], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])
