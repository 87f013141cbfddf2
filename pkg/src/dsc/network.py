"""Dual-branch graph network that turns segment features into a global descriptor.

Forward pipeline for one frame with ``t`` segments::

    centroids (t,3) --kNN--> [edge MLP + neighbor max] x L --\
                                                              concat (t,D) -> NetVLAD -> FC -> L2
    eigvals   (t,3) --kNN--> [edge MLP + neighbor max] x L --/

Every stage has a matching ``*_backward`` so the descriptor can be
differentiated without an autograd framework. Arrays are float64.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .features import FrameFeatures
from .graph import KnnGraph, edge_features, knn

NORM_EPS = 1e-12
NET_MAGIC = b"DSCNET1"


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN/Inf or a zero-norm descriptor."""


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters.

    ``eu_layers`` / ``eig_layers`` hold one tuple of MLP widths per graph
    layer of the centroid and eigenvalue branches.
    """

    k: int = 10
    eu_layers: tuple[tuple[int, ...], ...] = ((64, 64), (128,))
    eig_layers: tuple[tuple[int, ...], ...] = ((64, 64), (128,))
    n_clusters: int = 32
    out_dim: int = 256
    in_dim: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "eu_layers", tuple(tuple(int(w) for w in l) for l in self.eu_layers))
        object.__setattr__(self, "eig_layers", tuple(tuple(int(w) for w in l) for l in self.eig_layers))
        for name, layers in (("eu_layers", self.eu_layers), ("eig_layers", self.eig_layers)):
            if not layers or any(not widths for widths in layers):
                raise ValueError(f"{name} needs at least one graph layer with at least one MLP layer")
            if any(w < 1 for widths in layers for w in widths):
                raise ValueError(f"{name} widths must be positive")
        if self.k < 1 or self.n_clusters < 1 or self.out_dim < 1 or self.in_dim < 1:
            raise ValueError("k, n_clusters, out_dim and in_dim must be positive")

    @property
    def node_dim(self) -> int:
        return self.eu_layers[-1][-1] + self.eig_layers[-1][-1]

    @property
    def vlad_dim(self) -> int:
        return self.node_dim * self.n_clusters

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "eu_layers": [list(l) for l in self.eu_layers],
            "eig_layers": [list(l) for l in self.eig_layers],
            "n_clusters": self.n_clusters,
            "out_dim": self.out_dim,
            "in_dim": self.in_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        fields = {"k", "eu_layers", "eig_layers", "n_clusters", "out_dim", "in_dim"}
        return cls(**{key: val for key, val in d.items() if key in fields})

    def param_shapes(self) -> Iterator[tuple[str, tuple[int, ...], int]]:
        """Yield ``(name, shape, fan_in)`` in declaration order."""
        for branch, layers in (("eu", self.eu_layers), ("eig", self.eig_layers)):
            d = self.in_dim
            for li, widths in enumerate(layers):
                fan = 2 * d
                for mi, w in enumerate(widths):
                    yield f"{branch}.{li}.{mi}.W", (fan, w), fan
                    yield f"{branch}.{li}.{mi}.b", (w,), fan
                    fan = w
                d = widths[-1]
        D, K = self.node_dim, self.n_clusters
        yield "vlad.centers", (K, D), D
        yield "vlad.W", (K, D), D
        yield "vlad.b", (K,), D
        yield "fc.W", (self.out_dim, D * K), D * K
        yield "fc.b", (self.out_dim,), D * K


@dataclass
class DscNetwork:
    config: NetworkConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def branch(self, name: str) -> list[list[tuple[np.ndarray, np.ndarray]]]:
        layers = self.config.eu_layers if name == "eu" else self.config.eig_layers
        return [
            [(self.params[f"{name}.{li}.{mi}.W"], self.params[f"{name}.{li}.{mi}.b"]) for mi in range(len(widths))]
            for li, widths in enumerate(layers)
        ]

    def copy(self) -> "DscNetwork":
        return DscNetwork(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def describe(self, frame: FrameFeatures) -> np.ndarray:
        return describe(frame, self)


def init_network(cfg: NetworkConfig | None = None, seed: int = 0) -> DscNetwork:
    """Uniform ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` initialization, deterministic per seed."""
    cfg = cfg or NetworkConfig()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan in cfg.param_shapes():
        bound = 1.0 / np.sqrt(fan)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return DscNetwork(cfg, params)


# ----------------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------------


@dataclass
class GnnCache:
    neighbors: np.ndarray
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    edge_out: np.ndarray
    in_dim: int
    _argmax: np.ndarray | None = None

    @property
    def argmax(self) -> np.ndarray:
        """Winning neighbor per output channel; the lowest position wins ties."""
        if self._argmax is None:
            self._argmax = np.argmax(self.edge_out, axis=1)
        return self._argmax


def gnn_layer(node_feats: np.ndarray, graph: KnnGraph, mlp) -> tuple[np.ndarray, GnnCache]:
    """Shared edge MLP (ReLU after every layer) followed by a max over each node's neighbors."""
    h = np.asarray(node_feats, dtype=np.float64)
    t, d = h.shape
    k = graph.k
    if mlp[0][0].shape[0] != 2 * d:
        raise ValueError(f"MLP expects input dim {mlp[0][0].shape[0]}, edge features have {2 * d}")
    x = edge_features(h, graph).reshape(t * k, 2 * d)
    inputs, preacts = [], []
    for W, b in mlp:
        inputs.append(x)
        z = x @ W + b
        preacts.append(z)
        x = np.maximum(z, 0.0)
    x = x.reshape(t, k, -1)
    return x.max(axis=1), GnnCache(graph.neighbors, inputs, preacts, x, d)


def gnn_layer_backward(grad_out: np.ndarray, cache: GnnCache, mlp, input_grad: bool = True):
    """Returns ``(grad_node_feats, [(gW, gb), ...])``; the first item is ``None`` unless ``input_grad``."""
    t, k = cache.neighbors.shape
    d = cache.in_dim
    g = np.zeros((t, k, grad_out.shape[1]))
    np.put_along_axis(g, cache.argmax[:, None, :], grad_out[:, None, :], axis=1)
    g = g.reshape(t * k, -1)
    grads = []
    for n, ((W, _), x, z) in enumerate(zip(reversed(mlp), reversed(cache.inputs), reversed(cache.preacts))):
        gz = g * (z > 0.0)
        grads.append((x.T @ gz, gz.sum(axis=0)))
        if n < len(mlp) - 1 or input_grad:
            g = gz @ W.T
    grads.reverse()
    if not input_grad:
        return None, grads
    g = g.reshape(t, k, 2 * d)
    rel, ab = g[..., :d], g[..., d:]
    gh = np.zeros((t, d))
    np.add.at(gh, cache.neighbors.ravel(), (rel + ab).reshape(-1, d))
    gh -= rel.sum(axis=1)
    return gh, grads


def _safe_normalize(v: np.ndarray, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    denom = np.maximum(norm, NORM_EPS)
    return v / denom, denom


def _safe_normalize_backward(grad: np.ndarray, unit: np.ndarray, denom: np.ndarray, axis: int = -1) -> np.ndarray:
    live = denom > NORM_EPS
    proj = np.sum(grad * unit, axis=axis, keepdims=True)
    return np.where(live, (grad - unit * proj) / denom, grad / denom)


@dataclass
class VladCache:
    x: np.ndarray
    assign: np.ndarray
    unit: np.ndarray
    denom: np.ndarray


def netvlad(node_feats: np.ndarray, centers: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Soft-assigned residual aggregation with intra-normalization.

    Returns the flattened ``(K * D,)`` vector (cluster-major) and a cache.
    """
    x = np.asarray(node_feats, dtype=np.float64)
    logits = x @ W.T + b
    logits -= logits.max(axis=1, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=1, keepdims=True)
    vlad = a.T @ x - a.sum(axis=0)[:, None] * centers
    unit, denom = _safe_normalize(vlad, axis=1)
    return unit.ravel(), VladCache(x, a, unit, denom)


def netvlad_backward(grad_out: np.ndarray, cache: VladCache, centers: np.ndarray, W: np.ndarray):
    """Returns ``(grad_x, grad_centers, grad_W, grad_b)``."""
    K, D = centers.shape
    gv = _safe_normalize_backward(grad_out.reshape(K, D), cache.unit, cache.denom, axis=1)
    a, x = cache.assign, cache.x
    gx = a @ gv
    g_centers = -a.sum(axis=0)[:, None] * gv
    ga = x @ gv.T - np.sum(gv * centers, axis=1)[None, :]
    gl = a * (ga - np.sum(ga * a, axis=1, keepdims=True))
    gx += gl @ W
    return gx, g_centers, gl.T @ x, gl.sum(axis=0)


# ----------------------------------------------------------------------------
# Full descriptor
# ----------------------------------------------------------------------------


@dataclass
class ForwardCache:
    branches: dict[str, list[GnnCache]]
    split: int
    vlad: VladCache
    vlad_out: np.ndarray
    unit: np.ndarray
    denom: np.ndarray


def _run_branch(feats: np.ndarray, graph: KnnGraph, layers) -> tuple[np.ndarray, list[GnnCache]]:
    h, caches = feats, []
    for mlp in layers:
        h, c = gnn_layer(h, graph, mlp)
        caches.append(c)
    return h, caches


def forward(frame: FrameFeatures, net: DscNetwork, graphs: tuple[KnnGraph, KnnGraph] | None = None):
    """Descriptor of ``frame`` plus the cache needed by :func:`backward`."""
    cfg = net.config
    if graphs is None:
        graphs = (knn(frame.centroids, cfg.k), knn(frame.eigvals, cfg.k))
    h_eu, c_eu = _run_branch(frame.centroids, graphs[0], net.branch("eu"))
    h_eig, c_eig = _run_branch(frame.eigvals, graphs[1], net.branch("eig"))
    fmap = np.concatenate([h_eu, h_eig], axis=1)
    p = net.params
    v, vcache = netvlad(fmap, p["vlad.centers"], p["vlad.W"], p["vlad.b"])
    y = p["fc.W"] @ v + p["fc.b"]
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("non-finite activation in forward pass")
    desc, denom = _safe_normalize(y)
    if denom[0] <= NORM_EPS:
        raise NonFiniteError("descriptor has zero norm before normalization")
    cache = ForwardCache({"eu": c_eu, "eig": c_eig}, h_eu.shape[1], vcache, v, desc, denom)
    return desc, cache


def describe(frame: FrameFeatures, net: DscNetwork) -> np.ndarray:
    """Unit-norm global descriptor of one frame."""
    return forward(frame, net)[0]


def backward(grad_desc: np.ndarray, cache: ForwardCache, net: DscNetwork, grads: dict | None = None) -> dict:
    """Accumulate d(loss)/d(param) into ``grads`` given d(loss)/d(descriptor)."""
    return backward_many([(grad_desc, cache)], net, grads)


def backward_many(items, net: DscNetwork, grads: dict | None = None) -> dict:
    """:func:`backward` over several ``(grad_desc, cache)`` frames, one GEMM for the FC weight."""
    if grads is None:
        grads = {name: np.zeros_like(v) for name, v in net.params.items()}
    if not items:
        return grads
    gys = np.stack([_safe_normalize_backward(g, c.unit, c.denom) for g, c in items])
    grads["fc.W"] += gys.T @ np.stack([c.vlad_out for _, c in items])
    grads["fc.b"] += gys.sum(axis=0)
    gvs = gys @ net.params["fc.W"]
    for gv, (_, cache) in zip(gvs, items):
        _backward_body(gv, cache, net, grads)
    return grads


def _backward_body(gv: np.ndarray, cache: ForwardCache, net: DscNetwork, grads: dict) -> None:
    p = net.params
    gx, gc, gW, gb = netvlad_backward(gv, cache.vlad, p["vlad.centers"], p["vlad.W"])
    grads["vlad.centers"] += gc
    grads["vlad.W"] += gW
    grads["vlad.b"] += gb
    for name, g in (("eu", gx[:, : cache.split]), ("eig", gx[:, cache.split :])):
        layers = net.branch(name)
        for li in reversed(range(len(layers))):
            g, layer_grads = gnn_layer_backward(g, cache.branches[name][li], layers[li], input_grad=li > 0)
            for mi, (gW, gb) in enumerate(layer_grads):
                grads[f"{name}.{li}.{mi}.W"] += gW
                grads[f"{name}.{li}.{mi}.b"] += gb


def kink_signature(cache: ForwardCache) -> tuple:
    """Hashable record of every piecewise-linear branch taken in a forward pass."""
    parts = []
    for name in ("eu", "eig"):
        for c in cache.branches[name]:
            parts.extend((z > 0).tobytes() for z in c.preacts)
            parts.append(c.argmax.tobytes())
    parts.append((cache.vlad.denom > NORM_EPS).tobytes())
    return tuple(parts)


# ----------------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------------


def _pack_layers(layers) -> bytes:
    out = struct.pack("<I", len(layers))
    for widths in layers:
        out += struct.pack(f"<I{len(widths)}I", len(widths), *widths)
    return out


def save_network(net: DscNetwork, path: str | os.PathLike) -> None:
    cfg = net.config
    blob = bytearray(NET_MAGIC)
    blob += struct.pack("<5I", cfg.in_dim, cfg.k, cfg.n_clusters, cfg.node_dim, cfg.out_dim)
    blob += _pack_layers(cfg.eu_layers) + _pack_layers(cfg.eig_layers)
    for name, shape, _ in cfg.param_shapes():
        arr = net.params[name]
        if arr.shape != shape:
            raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
        blob += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("network file is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals if n > 1 else vals[0]

    def layers(self) -> tuple[tuple[int, ...], ...]:
        out = []
        for _ in range(self.u32()):
            n = self.u32()
            out.append(struct.unpack(f"<{n}I", self.take(4 * n)))
        return tuple(out)


def load_network(path: str | os.PathLike) -> DscNetwork:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(NET_MAGIC)) != NET_MAGIC:
        raise ValueError(f"{path}: not a DSCNET1 network file")
    in_dim, k, n_clusters, node_dim, out_dim = r.u32(5)
    eu = r.layers()
    eig = r.layers()
    cfg = NetworkConfig(k=k, eu_layers=eu, eig_layers=eig, n_clusters=n_clusters, out_dim=out_dim, in_dim=in_dim)
    if cfg.node_dim != node_dim:
        raise ValueError(f"{path}: inconsistent node dimension")
    params = {}
    for name, shape, _ in cfg.param_shapes():
        n = int(np.prod(shape))
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return DscNetwork(cfg, params)
