"""Nearest-neighbour indices over 3D points.

``KdTree3`` is a static index; ``IncrementalMapIndex`` accepts batches of new
points and keeps answering exactly what a static tree over the union would.
Both break distance ties by ascending payload id so results are reproducible.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree


def _sorted_pairs(dist: np.ndarray, ids: np.ndarray) -> List[Tuple[int, float]]:
    order = np.lexsort((ids, dist))
    return [(int(ids[i]), float(dist[i])) for i in order]


def _merge_knn(d_a, i_a, d_b, i_b, k):
    """Merge two (m, k) knn answers into one, ordered by (distance, id)."""
    d = np.concatenate([d_a, d_b], axis=1)
    i = np.concatenate([i_a, i_b], axis=1)
    order = np.lexsort((i, d), axis=1)[:, :k]
    return np.take_along_axis(d, order, axis=1), np.take_along_axis(i, order, axis=1)


class KdTree3:
    """Balanced static kd-tree over 3-vectors with integer payload ids."""

    def __init__(self, points, ids: Optional[Sequence[int]] = None):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        if ids is None:
            ids = np.arange(self.points.shape[0])
        self.ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if self.ids.shape[0] != self.points.shape[0]:
            raise ValueError("ids and points differ in length")
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return self.points.shape[0]

    def knn(self, query, k: int) -> List[Tuple[int, float]]:
        if k < 1:
            raise ValueError("k must be at least 1")
        dist, ids = self.knn_batch(np.asarray(query, dtype=float).reshape(1, 3), k)
        valid = np.isfinite(dist[0])
        return _sorted_pairs(dist[0][valid], ids[0][valid])

    def knn_batch(self, queries, k: int):
        """Distances and ids, each shaped (m, k); missing slots are (inf, -1)."""
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        m = queries.shape[0]
        if self._tree is None:
            return np.full((m, k), np.inf), np.full((m, k), -1, dtype=np.int64)
        # spare neighbours let ties at the k-th distance resolve by id; rows
        # whose tie group runs past the spares fall back to a ball query
        kk = min(k + 4, len(self))
        dist, idx = self._tree.query(queries, k=kk)
        dist = dist.reshape(m, kk)
        idx = idx.reshape(m, kk)
        ids = np.where(idx < len(self), self.ids[np.minimum(idx, len(self) - 1)], -1)
        if kk > k:
            for row in np.flatnonzero(dist[:, k - 1] == dist[:, -1]):
                dist[row], ids[row] = self._resolve_ties(queries[row], dist[row, k - 1], kk)
        order = np.lexsort((ids, dist), axis=1)
        dist = np.take_along_axis(dist, order, axis=1)[:, :k]
        ids = np.take_along_axis(ids, order, axis=1)[:, :k]
        if dist.shape[1] < k:
            pad = k - dist.shape[1]
            dist = np.hstack([dist, np.full((m, pad), np.inf)])
            ids = np.hstack([ids, np.full((m, pad), -1, dtype=np.int64)])
        return dist, ids

    def _resolve_ties(self, q, kth: float, width: int):
        """The ``width`` best (distance, id) pairs, searching every point tied at ``kth``."""
        idx = np.asarray(self._tree.query_ball_point(q, kth * (1 + 1e-12) + 1e-12), dtype=np.int64)
        d = np.sqrt(np.sum((self.points[idx] - q) ** 2, axis=1))
        ids = self.ids[idx]
        order = np.lexsort((ids, d))[:width]
        return d[order], ids[order]

    def radius(self, query, r: float) -> List[Tuple[int, float]]:
        if self._tree is None:
            return []
        q = np.asarray(query, dtype=float).reshape(3)
        idx = np.asarray(self._tree.query_ball_point(q, r), dtype=np.int64)
        if idx.size == 0:
            return []
        d = np.linalg.norm(self.points[idx] - q, axis=1)
        return _sorted_pairs(d, self.ids[idx])


def knn(index, query, k: int) -> List[Tuple[int, float]]:
    """k nearest (id, distance) pairs, ascending; empty index gives []."""
    return index.knn(query, k)


class IncrementalMapIndex:
    """Bucketed dynamic index: a rebuilt base tree plus a tree of recent inserts.

    Every insertion lands in the recent bucket; after ``rebuild_every``
    insertions both buckets are merged into a fresh base tree. Ids are
    assigned sequentially in insertion order.
    """

    def __init__(self, rebuild_every: int = 100):
        if rebuild_every < 1:
            raise ValueError("rebuild_every must be at least 1")
        self.rebuild_every = rebuild_every
        self._base = KdTree3(np.zeros((0, 3)))
        self._recent_chunks: List[np.ndarray] = []
        self._recent: Optional[KdTree3] = None
        self._inserts_since_rebuild = 0
        self._count = 0
        self._all: Optional[np.ndarray] = None
        self.rebuilds = 0

    def __len__(self) -> int:
        return self._count

    @property
    def points(self) -> np.ndarray:
        if self._all is None:
            self._all = np.vstack([self._base.points] + self._recent_chunks)
        return self._all

    def insert(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        ids = np.arange(self._count, self._count + len(pts))
        self._count += len(pts)
        self._recent_chunks.append(pts)
        self._recent = None
        self._all = None
        self._inserts_since_rebuild += 1
        if self._inserts_since_rebuild >= self.rebuild_every:
            self.rebuild()
        return ids

    def rebuild(self) -> None:
        pts = self.points
        self._base = KdTree3(pts, np.arange(len(pts)))
        self._recent_chunks = []
        self._recent = None
        self._inserts_since_rebuild = 0
        self.rebuilds += 1

    def _recent_tree(self) -> Optional[KdTree3]:
        if not self._recent_chunks:
            return None
        if self._recent is None:
            pts = np.vstack(self._recent_chunks)
            start = len(self._base)
            self._recent = KdTree3(pts, np.arange(start, start + len(pts)))
        return self._recent

    def knn_batch(self, queries, k: int):
        d, i = self._base.knn_batch(queries, k)
        recent = self._recent_tree()
        if recent is not None:
            d2, i2 = recent.knn_batch(queries, k)
            d, i = _merge_knn(d, i, d2, i2, k)
        return d, i

    def knn(self, query, k: int) -> List[Tuple[int, float]]:
        if k < 1:
            raise ValueError("k must be at least 1")
        d, i = self.knn_batch(np.asarray(query, dtype=float).reshape(1, 3), k)
        valid = np.isfinite(d[0])
        return _sorted_pairs(d[0][valid], i[0][valid])

    def point(self, ids) -> np.ndarray:
        return self.points[np.asarray(ids)]

    def neighbors(self, queries, k: int):
        """Neighbour coordinates (m, k, 3) and distances (m, k) for a batch."""
        d, i = self.knn_batch(queries, k)
        pts = self.points
        safe = np.where(i >= 0, i, 0)
        return pts[safe], d
