"""Spatial graphs over annotated calcification clusters.

A cluster becomes a graph whose nodes carry a patch descriptor concatenated
with the node's normalised image coordinates, and whose directed edges carry
the relative Cartesian offset between their endpoints. Two topologies are
supported: k-nearest-neighbour and fixed radius. Both are computed on
normalised coordinates.

Edge ``(u, v)`` means ``v`` is a neighbour of ``u``. During message passing
node ``u`` aggregates over the nodes it points to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from mcgcn.kdtree import KDTree

PATCH_SIZE = 32
TOPOLOGIES = ("knn", "radius")


class ClusterError(ValueError):
    pass


@dataclass
class AnnotatedCluster:
    """Image-plane point set with per-point patches and labels."""

    image_extent: tuple[float, float]
    points: np.ndarray
    patches: np.ndarray
    node_labels: np.ndarray
    graph_label: int
    id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.patches = np.asarray(self.patches, dtype=np.float64)
        self.node_labels = np.asarray(self.node_labels, dtype=np.int64)
        self.graph_label = int(self.graph_label)
        self.image_extent = (float(self.image_extent[0]), float(self.image_extent[1]))

    @property
    def n(self) -> int:
        return len(self.points)

    def validate(self) -> None:
        w, h = self.image_extent
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ClusterError(f"points must be (n, 2), got {self.points.shape}")
        if self.n < 3:
            raise ClusterError(f"a cluster needs at least 3 points, got {self.n}")
        x, y = self.points[:, 0], self.points[:, 1]
        if np.any(x < 0) or np.any(x > w) or np.any(y < 0) or np.any(y > h):
            raise ClusterError("point outside image extent")
        if self.patches.ndim != 3 or self.patches.shape[0] != self.n or self.patches.shape[1] != self.patches.shape[2]:
            raise ClusterError(f"patches must be (n, M, M), got {self.patches.shape}")
        if self.node_labels.shape != (self.n,):
            raise ClusterError("one node label per point required")


@dataclass
class SpatialGraph:
    node_features: np.ndarray
    edges: np.ndarray
    edge_features: np.ndarray
    node_labels: np.ndarray
    graph_label: int
    topology_kind: str
    id: str = ""

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64).reshape(len(self.node_features), -1)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.edge_features = np.asarray(self.edge_features, dtype=np.float64).reshape(-1, 2)
        self.node_labels = np.asarray(self.node_labels, dtype=np.int64)
        self.graph_label = int(self.graph_label)
        if self.topology_kind not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology_kind!r}")

    @property
    def n(self) -> int:
        return len(self.node_features)

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "topology_kind": self.topology_kind,
                "n": self.n,
                "node_features": self.node_features.tolist(),
                "edges": self.edges.tolist(),
                "edge_features": self.edge_features.tolist(),
                "node_labels": self.node_labels.tolist(),
                "graph_label": self.graph_label,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "SpatialGraph":
        d = json.loads(line)
        g = cls(
            node_features=np.asarray(d["node_features"], dtype=np.float64).reshape(d["n"], -1),
            edges=d["edges"],
            edge_features=d["edge_features"],
            node_labels=d["node_labels"],
            graph_label=d["graph_label"],
            topology_kind=d["topology_kind"],
            id=d["id"],
        )
        if g.n != d["n"]:
            raise ValueError(f"graph {g.id}: n={d['n']} but {g.n} feature rows")
        return g


# ---------------------------------------------------------------------------
# patch descriptors


@dataclass(frozen=True)
class PatchDescriptor:
    name: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray] = field(compare=False)

    def __call__(self, patch) -> np.ndarray:
        out = np.asarray(self.fn(np.asarray(patch, dtype=np.float64)), dtype=np.float64).reshape(-1)
        if out.shape != (self.dim,):
            raise ValueError(f"descriptor {self.name} returned {out.shape[0]} values, expected {self.dim}")
        return out


def orientation_histogram(patch: np.ndarray, bins: int = 4) -> np.ndarray:
    """Gradient-magnitude weighted histogram of edge orientation modulo pi.

    Normalised to unit mass; all zeros for a flat patch.
    """
    gy, gx = np.gradient(patch)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    idx = np.minimum((theta / (np.pi / bins)).astype(np.int64), bins - 1)
    hist = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=bins)
    total = hist.sum()
    return hist / total if total > 0 else np.zeros(bins)


def mean_gradient_magnitude(patch: np.ndarray) -> float:
    gy, gx = np.gradient(np.asarray(patch, dtype=np.float64))
    return float(np.hypot(gx, gy).mean())


def patch_statistics(patch: np.ndarray) -> np.ndarray:
    """Ten handcrafted statistics of a square intensity patch.

    mean, std, min, max, 4-bin orientation histogram, centre intensity and
    the least-squares slope of intensity against radius (per half-patch).
    """
    m = patch.shape[0]
    c = (m - 1) / 2.0
    lo, hi = int(np.floor(c)), int(np.ceil(c))
    centre = patch[lo : hi + 1, lo : hi + 1].mean()
    yy, xx = np.mgrid[0:m, 0:m]
    rad = np.hypot(yy - c, xx - c).ravel() / (m / 2.0)
    vals = patch.ravel()
    rc = rad - rad.mean()
    slope = float((rc * (vals - vals.mean())).sum() / (rc * rc).sum())
    return np.concatenate(
        [
            [patch.mean(), patch.std(), patch.min(), patch.max()],
            orientation_histogram(patch),
            [centre, slope],
        ]
    )


DEFAULT_DESCRIPTOR = PatchDescriptor("patch_stats10", 10, patch_statistics)


# ---------------------------------------------------------------------------
# construction


def normalize_coordinates(points, image_extent) -> np.ndarray:
    """Map pixel coordinates to the unit square by dividing by (width, height)."""
    w, h = float(image_extent[0]), float(image_extent[1])
    if w <= 0 or h <= 0:
        raise ValueError(f"image extent must have positive area, got {image_extent}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts / np.array([w, h])


def build_knn_graph(points, k: int, symmetrize: bool = False) -> np.ndarray:
    """Directed edges from each point to its ``min(k, n-1)`` nearest points.

    Returned as an (E, 2) int array sorted by (src, dst). With ``symmetrize``
    the reverse of every edge is added.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("cannot build a graph over zero points")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    tree = KDTree(pts)
    kk = min(k, len(pts) - 1)
    edges = {(u, v) for u in range(len(pts)) for v in tree.query_knn(u, kk)}
    if symmetrize:
        edges |= {(v, u) for u, v in edges}
    return _edge_array(edges)


def build_radius_graph(points, r: float) -> np.ndarray:
    """Directed edges between every pair of distinct points at distance <= r."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("cannot build a graph over zero points")
    if not r >= 0:
        raise ValueError(f"radius must be nonnegative, got {r}")
    if r == 0:
        return _edge_array(())
    tree = KDTree(pts)
    edges = {(u, v) for u in range(len(pts)) for v in tree.query_radius(u, r)}
    # identical coordinates are at distance 0 but never linked
    edges = {(u, v) for u, v in edges if not np.array_equal(pts[u], pts[v])}
    return _edge_array(edges)


def _edge_array(edges: Iterable[tuple[int, int]]) -> np.ndarray:
    return np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)


def compute_edge_features(edges, coords) -> np.ndarray:
    """Row for edge (u, v) is coords[v] - coords[u]."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    c = np.asarray(coords, dtype=np.float64)
    if e.size and (e.min() < 0 or e.max() >= len(c)):
        raise IndexError("edge endpoint out of range")
    return c[e[:, 1]] - c[e[:, 0]]


def assemble_graph(
    cluster: AnnotatedCluster,
    topology_kind: str,
    descriptor: PatchDescriptor = DEFAULT_DESCRIPTOR,
    k: int = 5,
    r: float = 0.15,
    symmetrize: bool = False,
) -> SpatialGraph:
    cluster.validate()
    coords = normalize_coordinates(cluster.points, cluster.image_extent)
    if topology_kind == "knn":
        edges = build_knn_graph(coords, k, symmetrize=symmetrize)
    elif topology_kind == "radius":
        edges = build_radius_graph(coords, r)
    else:
        raise ValueError(f"unknown topology {topology_kind!r}")
    desc = np.stack([descriptor(p) for p in cluster.patches])
    return SpatialGraph(
        node_features=np.concatenate([desc, coords], axis=1),
        edges=edges,
        edge_features=compute_edge_features(edges, coords),
        node_labels=cluster.node_labels.copy(),
        graph_label=cluster.graph_label,
        topology_kind=topology_kind,
        id=cluster.id,
    )


def assemble_pair(cluster, descriptor=DEFAULT_DESCRIPTOR, k=5, r=0.15, symmetrize=False):
    """Both topologies for one cluster, sharing node features."""
    knn = assemble_graph(cluster, "knn", descriptor, k=k, symmetrize=symmetrize)
    coords = knn.node_features[:, -2:]
    edges = build_radius_graph(coords, r)
    rad = SpatialGraph(
        node_features=knn.node_features,
        edges=edges,
        edge_features=compute_edge_features(edges, coords),
        node_labels=knn.node_labels,
        graph_label=knn.graph_label,
        topology_kind="radius",
        id=knn.id,
    )
    return knn, rad


# ---------------------------------------------------------------------------
# JSON-lines datasets


def write_graphs(path, graphs: Iterable[SpatialGraph]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(g.to_json())
            fh.write("\n")


def iter_graphs(path) -> Iterator[SpatialGraph]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield SpatialGraph.from_json(line)


def read_graph_pairs(path) -> dict[str, dict[str, SpatialGraph]]:
    """Group a graphs file by cluster id: ``{id: {topology_kind: graph}}``."""
    out: dict[str, dict[str, SpatialGraph]] = {}
    for g in iter_graphs(path):
        out.setdefault(g.id, {})[g.topology_kind] = g
    return out
