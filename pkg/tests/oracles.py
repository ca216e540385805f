"""Independent brute-force oracles."""

import math

import numpy as np


def brute_knn_edges(points, k):
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    kk = min(k, n - 1)
    edges = set()
    for u in range(n):
        cand = []
        for v in range(n):
            if v == u:
                continue
            dx = float(pts[v, 0]) - float(pts[u, 0])
            dy = float(pts[v, 1]) - float(pts[u, 1])
            cand.append((math.sqrt(dx * dx + dy * dy), v))
        cand.sort()
        edges |= {(u, v) for _, v in cand[:kk]}
    return edges


def brute_radius_edges(points, r):
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    edges = set()
    for u in range(n):
        for v in range(n):
            if u == v:
                continue
            dx = float(pts[v, 0]) - float(pts[u, 0])
            dy = float(pts[v, 1]) - float(pts[u, 1])
            d = math.sqrt(dx * dx + dy * dy)
            if 0 < d <= r:
                edges.add((u, v))
    return edges


def pair_count_auc(scores, labels, k):
    """Macro one-vs-rest AUC by counting every positive/negative pair."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    per = []
    for c in range(k):
        pos = scores[labels == c, c]
        neg = scores[labels != c, c]
        if len(pos) == 0 or len(neg) == 0:
            continue
        wins = 0.0
        for p in pos:
            for q in neg:
                if p > q:
                    wins += 1.0
                elif p == q:
                    wins += 0.5
        per.append(wins / (len(pos) * len(neg)))
    return float(np.sum(per) / len(per)), per


def mean_nn_distance(pts):
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return float(d.min(axis=1).mean())


def line_fit_residual(pts):
    """RMS orthogonal distance to the total-least-squares line."""
    c = pts - pts.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    return float(sv[-1] / np.sqrt(len(pts)))


def hull_area(pts):
    from scipy.spatial import ConvexHull

    return float(ConvexHull(pts).volume)


def wedge_score(pts):
    """Correlation of distance from the principal axis with depth from the chest wall (x = 0)."""
    c = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    off = np.abs(c @ vt[1])
    x = pts[:, 0]
    if off.std() == 0 or x.std() == 0:
        return 0.0
    return float(np.corrcoef(off, x)[0, 1])


def geometry_features(pts, breast_area):
    return [mean_nn_distance(pts), hull_area(pts) / breast_area, line_fit_residual(pts), wedge_score(pts)]
