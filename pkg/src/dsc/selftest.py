"""Quick oracle checks runnable from an installed package (``dsc selftest``).

Each check compares a vectorized routine with a slow, independent
reference on a few random instances.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np

from .evaluation import LabeledPairScores, extended_precision, f1_max, pr_curve
from .features import FrameFeatures, segment_feature
from .graph import knn
from .network import NetworkConfig, describe, init_network
from .pointcloud import PointCloud
from .retrieval import KDTree
from .segmentation import GridConfig, segment_cloud
from .training import LossConfig, QuadrupletBatch, gradients


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def _segmentation(rng: np.random.Generator) -> str:
    cfg = GridConfig()
    pts = rng.uniform(-70, 70, size=(3000, 3))
    segs = segment_cloud(PointCloud(pts), cfg)
    owner = {int(n): key for key, idx in segs.segments.items() for n in idx}
    for n, (x, y, _) in enumerate(pts):
        rho = math.hypot(x, y)
        theta = math.atan2(y, x) % (2 * math.pi)
        if rho > cfg.max_range:
            want = None
        else:
            ring = min(int(rho // cfg.ring_width) + 1, cfg.n_rings)
            sector = min(int(theta // cfg.sector_width) + 1, cfg.n_sectors)
            want = (sector, ring)
        if owner.get(n) != want:
            raise AssertionError(f"point {n}: got {owner.get(n)}, expected {want}")
    return f"{len(pts)} points, {len(segs)} segments"


def _closed_form_eigvals(m: np.ndarray) -> np.ndarray:
    p1 = m[0, 1] ** 2 + m[0, 2] ** 2 + m[1, 2] ** 2
    q = float(np.trace(m)) / 3.0
    if p1 == 0:
        return np.sort(np.diag(m))[::-1]
    p = math.sqrt(((m[0, 0] - q) ** 2 + (m[1, 1] - q) ** 2 + (m[2, 2] - q) ** 2 + 2 * p1) / 6.0)
    r = float(np.clip(np.linalg.det((m - q * np.eye(3)) / p) / 2.0, -1.0, 1.0))
    phi = math.acos(r) / 3.0
    e1 = q + 2 * p * math.cos(phi)
    e3 = q + 2 * p * math.cos(phi + 2 * math.pi / 3)
    return np.array([e1, 3 * q - e1 - e3, e3])


def _eigenvalues(rng: np.random.Generator) -> str:
    for _ in range(200):
        pts = rng.normal(size=(30, 3)) * rng.uniform(0.05, 3, size=3)
        cov = np.cov(pts.T, bias=True)
        got, want = segment_feature(pts).eigvals, _closed_form_eigvals(cov)
        if np.max(np.abs(got - want)) > 1e-9 * max(1.0, np.trace(cov)):
            raise AssertionError(f"eigvals {got} vs {want}")
    return "200 covariances"


def _knn(rng: np.random.Generator) -> str:
    for _ in range(20):
        feats = rng.integers(-3, 4, size=(40, 3)).astype(float)
        got = knn(feats, 5).neighbors
        for i in range(40):
            order = sorted((float(((feats[j] - feats[i]) ** 2).sum()), j) for j in range(40) if j != i)
            if got[i].tolist() != [j for _, j in order[:5]]:
                raise AssertionError(f"node {i}")
    return "20 graphs with ties"


def _random_frame(rng: np.random.Generator, t: int, fid: int = 0) -> FrameFeatures:
    eig = np.sort(rng.uniform(0, 2, size=(t, 3)), axis=1)[:, ::-1]
    idx = np.column_stack([np.arange(t) + 1, np.ones(t, int)])
    return FrameFeatures(fid, rng.uniform(-20, 20, size=(t, 3)), eig, idx, np.full(t, 8))


def _descriptor(rng: np.random.Generator) -> str:
    net = init_network(NetworkConfig(k=3, eu_layers=((6,), (5,)), eig_layers=((4,),), n_clusters=3), seed=1)
    for _ in range(20):
        frame = _random_frame(rng, 15)
        d = describe(frame, net)
        if abs(np.linalg.norm(d) - 1) > 1e-6 or d.shape != (256,):
            raise AssertionError("descriptor is not a 256-d unit vector")
        if np.max(np.abs(describe(frame.permuted(rng.permutation(15)), net) - d)) > 1e-9:
            raise AssertionError("descriptor depends on segment order")
    return "20 frames"


def _gradients(rng: np.random.Generator) -> str:
    cfg = NetworkConfig(k=3, eu_layers=((5,),), eig_layers=((4,),), n_clusters=2, out_dim=5)
    net = init_network(cfg, seed=int(rng.integers(1 << 30)))
    frames = {i: _random_frame(rng, 8, i) for i in range(5)}
    batch, loss = QuadrupletBatch(0, 1, (2, 3), 4), LossConfig(1.5, 1.0, 2)
    bg = gradients(batch, net, loss, frames, signature=True)
    eps, worst = 1e-5, 0.0
    for name, arr in net.params.items():
        flat, g = arr.reshape(-1), bg.grads[name].reshape(-1)
        for n in range(flat.size):
            old = flat[n]
            flat[n] = old + eps
            up = gradients(batch, net, loss, frames, need_grads=False, signature=True)
            flat[n] = old - eps
            down = gradients(batch, net, loss, frames, need_grads=False, signature=True)
            flat[n] = old
            if up.signature == bg.signature == down.signature:
                num = (up.loss - down.loss) / (2 * eps)
                worst = max(worst, abs(num - g[n]) / max(1e-3, abs(num), abs(g[n])))
    if worst > 1e-4:
        raise AssertionError(f"max relative error {worst:.2e}")
    return f"max relative error {worst:.1e}"


def _retrieval(rng: np.random.Generator) -> str:
    data = rng.normal(size=(3000, 32))
    data /= np.linalg.norm(data, axis=1, keepdims=True)
    tree = KDTree(data, leaf_size=64)
    for q in data[:50] + rng.normal(scale=0.1, size=(50, 32)):
        d = np.sqrt(((data - q) ** 2).sum(axis=1))
        want = np.lexsort((np.arange(len(d)), d))[:5]
        if tree.query(q, 5)[1].tolist() != want.tolist():
            raise AssertionError("tree disagrees with linear scan")
    return "50 queries"


def _metrics(rng: np.random.Generator) -> str:
    for _ in range(300):
        n = int(rng.integers(2, 13))
        s = rng.integers(0, 5, size=n).astype(float)
        y = rng.random(n) < 0.5
        if y.all() or not y.any():
            continue
        pts = []
        for tau in np.unique(s):
            pred = s >= tau
            tp = int((pred & y).sum())
            pts.append((tp / pred.sum(), tp / y.sum()))
        f1 = max((2 * p * r / (p + r) if p + r else 0.0) for p, r in pts)
        curve = pr_curve(LabeledPairScores.from_scores(s, y))
        if f1_max(curve) != f1:
            raise AssertionError(f"f1 {f1_max(curve)} vs {f1}")
        r0 = min(r for _, r in pts if r > 0)
        p0 = max(p for p, r in pts if r == r0)
        ep = (p0 + (max((r for p, r in pts if p == 1.0), default=0.0) if p0 == 1.0 else 0.0)) / 2
        if extended_precision(curve) != ep:
            raise AssertionError(f"ep {extended_precision(curve)} vs {ep}")
    return "300 score sets"


CHECKS: dict[str, Callable[[np.random.Generator], str]] = {
    "segmentation": _segmentation,
    "eigenvalues": _eigenvalues,
    "knn": _knn,
    "descriptor": _descriptor,
    "gradients": _gradients,
    "retrieval": _retrieval,
    "metrics": _metrics,
}


def run_selftest(seed: int = 0) -> list[CheckResult]:
    out = []
    for n, (name, fn) in enumerate(CHECKS.items()):
        try:
            out.append(CheckResult(name, True, fn(np.random.default_rng([seed, n]))))
        except AssertionError as exc:
            out.append(CheckResult(name, False, str(exc)))
    return out
