"""Descriptor database with exact nearest-neighbor search.

The index is a bucket KD-tree: median splits on the widest axis down to
leaves of ``leaf_size`` points. Leaves are scanned with a vectorized
dot-product distance, and the surviving candidates are re-ranked with the
direct ``sum((x - q)**2)`` form so results match a linear scan exactly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DB_MAGIC = b"DSCDB1"
DB_VERSION = 1
DESCRIPTOR_DIM = 256
_HEADER = struct.Struct("<HQI")
# absolute slack on squared distances, covers dot-product rounding
_SLACK = 1e-9


class DatabaseError(ValueError):
    pass


class DatabaseFormatError(DatabaseError):
    pass


@dataclass
class _Node:
    dim: int = -1
    split: float = 0.0
    left: int = -1
    right: int = -1
    start: int = 0
    stop: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.dim < 0


class KDTree:
    """Exact k-NN over the rows of ``data``; ties are resolved by row index."""

    def __init__(self, data: np.ndarray, leaf_size: int = 1024) -> None:
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        n = self.data.shape[0]
        self.leaf_size = max(1, int(leaf_size))
        self.order = np.arange(n)
        self.nodes: list[_Node] = []
        self._build(0, n)
        self.sorted_data = self.data[self.order]
        self.sq_norms = np.einsum("ij,ij->i", self.sorted_data, self.sorted_data)

    def _build(self, start: int, stop: int) -> int:
        node_id = len(self.nodes)
        node = _Node(start=start, stop=stop)
        self.nodes.append(node)
        if stop - start <= self.leaf_size:
            return node_id
        idx = self.order[start:stop]
        pts = self.data[idx]
        spread = pts.max(axis=0) - pts.min(axis=0)
        dim = int(np.argmax(spread))
        if spread[dim] == 0:
            return node_id
        mid = (stop - start) // 2
        part = np.argpartition(pts[:, dim], mid)
        self.order[start:stop] = idx[part]
        node.dim = dim
        node.split = float(self.data[self.order[start + mid], dim])
        node.left = self._build(start, start + mid)
        node.right = self._build(start + mid, stop)
        return node_id

    def query(self, q: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(distances, row_indices)`` of the ``k`` nearest rows, ascending."""
        q = np.asarray(q, dtype=np.float64)
        qq = float(q @ q)
        kth = np.inf
        top = np.empty(0)
        cand: list[np.ndarray] = []
        stack = [(0, 0.0)]
        while stack:
            node_id, bound = stack.pop()
            if bound > kth + _SLACK:
                continue
            node = self.nodes[node_id]
            if node.is_leaf:
                sl = slice(node.start, node.stop)
                d2 = self.sq_norms[sl] - 2.0 * (self.sorted_data[sl] @ q) + qq
                keep = np.flatnonzero(d2 <= kth + _SLACK)
                if keep.size:
                    cand.append(keep + node.start)
                    top = np.concatenate([top, d2[keep]])
                    if top.size >= k:
                        top = np.partition(top, k - 1)[:k]
                        kth = float(top[k - 1])
                continue
            gap = q[node.dim] - node.split
            near, far = (node.left, node.right) if gap < 0 else (node.right, node.left)
            stack.append((far, max(bound, gap * gap)))
            stack.append((near, bound))
        pos = np.concatenate(cand)
        rows = self.order[pos]
        diff = self.data[rows] - q
        dist = np.sqrt((diff * diff).sum(axis=1))
        best = np.lexsort((rows, dist))[:k]
        return dist[best], rows[best]


class DescriptorDb:
    """Append-then-build store of ``(sequence_id, frame_id, descriptor)`` entries.

    Descriptors are held as float32; the index is built once and the
    database is read-only afterwards.
    """

    def __init__(self, dim: int = DESCRIPTOR_DIM) -> None:
        self.dim = dim
        self._keys: list[tuple[int, int]] = []
        self._key_set: set[tuple[int, int]] = set()
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None
        self._tree: KDTree | None = None

    def __len__(self) -> int:
        return len(self._keys)

    @property
    def built(self) -> bool:
        return self._tree is not None

    @property
    def keys(self) -> list[tuple[int, int]]:
        return list(self._keys)

    @property
    def descriptors(self) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix
        return np.array(self._rows, dtype=np.float32).reshape(-1, self.dim)

    def insert(self, sequence_id: int, frame_id: int, descriptor: np.ndarray) -> None:
        if self.built:
            raise DatabaseError("cannot insert after the index has been built")
        key = (int(sequence_id), int(frame_id))
        if key in self._key_set:
            raise DatabaseError(f"duplicate entry {key}")
        d = np.asarray(descriptor, dtype=np.float32).reshape(-1)
        if d.size != self.dim:
            raise DatabaseError(f"descriptor has dim {d.size}, expected {self.dim}")
        if not np.all(np.isfinite(d)) or abs(float(np.linalg.norm(d.astype(np.float64))) - 1.0) > 1e-5:
            raise DatabaseError("descriptor must be finite and unit-norm")
        self._keys.append(key)
        self._key_set.add(key)
        self._rows.append(d)

    def build_index(self, leaf_size: int = 1024) -> None:
        if self.built:
            return
        if not self._keys:
            raise DatabaseError("cannot build an index over an empty database")
        self._matrix = self.descriptors
        self._matrix.setflags(write=False)
        self._tree = KDTree(self._matrix.astype(np.float64), leaf_size=leaf_size)

    def query(self, q: np.ndarray, top_k: int = 1) -> list[tuple[int, int, float]]:
        """Exact ``top_k`` entries nearest to ``q`` as ``(sequence_id, frame_id, distance)``."""
        if self._tree is None:
            raise DatabaseError("index not built; call build_index() first")
        if not 1 <= top_k <= len(self):
            raise DatabaseError(f"top_k must lie in [1, {len(self)}], got {top_k}")
        # round to the stored precision so a stored descriptor finds itself at distance 0
        q = np.asarray(q, dtype=np.float32).astype(np.float64).reshape(-1)
        if q.size != self.dim:
            raise DatabaseError(f"query has dim {q.size}, expected {self.dim}")
        dist, rows = self._tree.query(q, top_k)
        return [(*self._keys[r], float(d)) for r, d in zip(rows, dist)]

    def save(self, path: str | os.PathLike) -> None:
        mat = self.descriptors
        rec = np.dtype([("seq", "<u4"), ("frame", "<u8"), ("desc", "<f4", (self.dim,))])
        body = np.empty(len(self), dtype=rec)
        if len(self):
            body["seq"] = [k[0] for k in self._keys]
            body["frame"] = [k[1] for k in self._keys]
            body["desc"] = mat
        Path(path).write_bytes(DB_MAGIC + _HEADER.pack(DB_VERSION, len(self), self.dim) + body.tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike, build: bool = True) -> "DescriptorDb":
        raw = Path(path).read_bytes()
        if raw[: len(DB_MAGIC)] != DB_MAGIC:
            raise DatabaseFormatError(f"{path}: bad magic bytes")
        head = raw[len(DB_MAGIC) : len(DB_MAGIC) + _HEADER.size]
        if len(head) < _HEADER.size:
            raise DatabaseFormatError(f"{path}: truncated header")
        version, count, dim = _HEADER.unpack(head)
        if version != DB_VERSION:
            raise DatabaseFormatError(f"{path}: unsupported version {version}")
        rec = np.dtype([("seq", "<u4"), ("frame", "<u8"), ("desc", "<f4", (dim,))])
        payload = raw[len(DB_MAGIC) + _HEADER.size :]
        if len(payload) != count * rec.itemsize:
            raise DatabaseFormatError(
                f"{path}: header declares {count} entries but payload holds {len(payload) / rec.itemsize:g}"
            )
        body = np.frombuffer(payload, dtype=rec)
        db = cls(dim=dim)
        for seq, frame, desc in zip(body["seq"], body["frame"], body["desc"]):
            key = (int(seq), int(frame))
            if key in db._key_set:
                raise DatabaseFormatError(f"{path}: duplicate entry {key}")
            db._keys.append(key)
            db._key_set.add(key)
            db._rows.append(np.array(desc, dtype=np.float32))
        if build and len(db):
            db.build_index()
        return db
