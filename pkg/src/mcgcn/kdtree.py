"""Small 2-d tree for k-nearest and fixed-radius neighbour queries.

Distances are exact Euclidean on float64 coordinates. Nearest-neighbour ties
are resolved toward the lower point index, so results match a brute-force
sort on ``(distance, index)`` exactly.
"""

from __future__ import annotations

import heapq
import math

import numpy as np


class _Node:
    __slots__ = ("index", "axis", "left", "right")

    def __init__(self, index, axis, left, right):
        self.index = index
        self.axis = axis
        self.left = left
        self.right = right


class KDTree:
    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"expected an (n, 2) coordinate array, got shape {pts.shape}")
        self.points = pts
        self._xy = [(float(x), float(y)) for x, y in pts]
        self.root = self._build(list(range(len(pts))), 0)

    def __len__(self):
        return len(self._xy)

    def _build(self, idx, depth):
        if not idx:
            return None
        axis = depth % 2
        idx.sort(key=lambda i: (self._xy[i][axis], i))
        mid = len(idx) // 2
        return _Node(idx[mid], axis, self._build(idx[:mid], depth + 1), self._build(idx[mid + 1 :], depth + 1))

    def _dist(self, i, q):
        dx = self._xy[i][0] - q[0]
        dy = self._xy[i][1] - q[1]
        return math.sqrt(dx * dx + dy * dy)

    def query_knn(self, i, k):
        """Indices of the ``k`` nearest other points to point ``i``, nearest first."""
        if k <= 0:
            return []
        q = self._xy[i]
        # max-heap on (dist, index) via negation
        heap: list[tuple[float, int]] = []

        def visit(node):
            if node is None:
                return
            j = node.index
            if j != i:
                d = self._dist(j, q)
                if len(heap) < k:
                    heapq.heappush(heap, (-d, -j))
                elif (d, j) < (-heap[0][0], -heap[0][1]):
                    heapq.heapreplace(heap, (-d, -j))
            diff = q[node.axis] - self._xy[j][node.axis]
            near, far = (node.left, node.right) if diff < 0 else (node.right, node.left)
            visit(near)
            if len(heap) < k or abs(diff) <= -heap[0][0]:
                visit(far)

        visit(self.root)
        return [j for _, j in sorted((-d, -j) for d, j in heap)]

    def query_radius(self, i, r):
        """Indices ``j != i`` with distance to point ``i`` at most ``r``, ascending."""
        q = self._xy[i]
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node is None:
                continue
            j = node.index
            if j != i and self._dist(j, q) <= r:
                out.append(j)
            diff = q[node.axis] - self._xy[j][node.axis]
            if diff <= r:
                stack.append(node.left)
            if -diff <= r:
                stack.append(node.right)
        return sorted(out)
