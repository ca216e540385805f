"""Seeded synthetic calcification clusters.

Geometry: the breast is a half-ellipse whose straight edge (chest wall) lies
on the left image border. Five distribution archetypes place points inside
it; four morphology archetypes paint the per-point patches. Every constant
lives in :class:`GeneratorConfig` so tests can pin it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from mcgcn.graphs import PATCH_SIZE, AnnotatedCluster


class DistributionArchetype(enum.IntEnum):
    diffuse = 0
    regional = 1
    grouped = 2
    linear = 3
    segmental = 4


class MorphologyArchetype(enum.IntEnum):
    coarse_heterogeneous = 0
    fine_pleomorphic = 1
    amorphous = 2
    fine_linear = 3


@dataclass
class GeneratorConfig:
    seed: int = 7
    clusters_per_class: int = 5
    n_min: int = 20
    n_max: int = 60
    image_extent: tuple = (512.0, 512.0)
    patch_size: int = PATCH_SIZE
    breast_semi_x: float = 0.9
    breast_semi_y: float = 0.45
    regional_area_fraction: float = 0.25
    grouped_sigma: float = 0.03
    linear_jitter: float = 0.01
    linear_length: tuple = (0.25, 0.5)
    wedge_opening_deg: tuple = (15.0, 30.0)
    wedge_depth: tuple = (0.15, 0.85)
    contamination: float = 0.10
    morphology_coupling: float = 0.0
    outlier_fraction: float = 0.0
    background_level: float = 0.2
    background_noise: float = 0.04
    intensity_scale: float = 1.0
    class_counts: dict | None = None
    train_fraction: float = 0.8

    def __post_init__(self):
        self.image_extent = tuple(float(v) for v in self.image_extent)
        self.linear_length = tuple(self.linear_length)
        self.wedge_opening_deg = tuple(self.wedge_opening_deg)
        self.wedge_depth = tuple(self.wedge_depth)

    def validate(self) -> None:
        checks = [
            ("clusters_per_class", self.clusters_per_class >= 1, ">= 1"),
            ("n_min", self.n_min >= 3, ">= 3"),
            ("n_max", self.n_max >= self.n_min, ">= n_min"),
            ("image_extent", min(self.image_extent) > 0, "> 0"),
            ("patch_size", self.patch_size >= 4, ">= 4"),
            ("contamination", 0 <= self.contamination < 0.5, "in [0, 0.5)"),
            ("morphology_coupling", 0 <= self.morphology_coupling <= 1, "in [0, 1]"),
            ("outlier_fraction", 0 <= self.outlier_fraction < 0.5, "in [0, 0.5)"),
            ("train_fraction", 0 < self.train_fraction < 1, "in (0, 1)"),
            ("grouped_sigma", self.grouped_sigma > 0, "> 0"),
            ("linear_jitter", self.linear_jitter >= 0, ">= 0"),
            ("regional_area_fraction", 0 < self.regional_area_fraction <= 1, "in (0, 1]"),
        ]
        for name, ok, bound in checks:
            if not ok:
                raise ValueError(f"generator.{name} must be {bound}, got {getattr(self, name)!r}")
        if self.class_counts is not None:
            for key, v in self.class_counts.items():
                if key not in DistributionArchetype.__members__ or int(v) < 1:
                    raise ValueError(f"generator.class_counts[{key!r}] must name a distribution with count >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("image_extent", "linear_length", "wedge_opening_deg", "wedge_depth"):
            d[k] = list(d[k])
        return d


# ---------------------------------------------------------------------------
# point patterns, in normalised [0, 1]^2 coordinates


def _in_breast(p, cfg: GeneratorConfig):
    x, y = p[..., 0], p[..., 1]
    return (x >= 0) & (x <= 1) & (y >= 0) & (y <= 1) & ((x / cfg.breast_semi_x) ** 2 + ((y - 0.5) / cfg.breast_semi_y) ** 2 <= 1)


def _uniform_in_breast(rng, n, cfg):
    out = []
    while len(out) < n:
        cand = np.column_stack([rng.uniform(0, cfg.breast_semi_x, 4 * n), rng.uniform(0.5 - cfg.breast_semi_y, 0.5 + cfg.breast_semi_y, 4 * n)])
        out.extend(cand[_in_breast(cand, cfg)])
    return np.array(out[:n])


def _rejection(rng, n, cfg, draw):
    pts = []
    while len(pts) < n:
        cand = draw(n)
        pts.extend(cand[_in_breast(cand, cfg)])
    return np.array(pts[:n])


def sample_point_pattern(archetype, n: int, rng: np.random.Generator, cfg: GeneratorConfig | None = None) -> np.ndarray:
    """``n`` points in normalised coordinates following a distribution archetype."""
    cfg = cfg or GeneratorConfig()
    if n < 3:
        raise ValueError(f"a cluster needs at least 3 points, got {n}")
    kind = DistributionArchetype(archetype)
    if kind is DistributionArchetype.diffuse:
        return _uniform_in_breast(rng, n, cfg)
    if kind is DistributionArchetype.regional:
        area = 0.5 * math.pi * cfg.breast_semi_x * cfg.breast_semi_y
        rad = math.sqrt(cfg.regional_area_fraction * area / math.pi)
        centre = _uniform_in_breast(rng, 1, cfg)[0]

        def draw(m):
            ang = rng.uniform(0, 2 * math.pi, m)
            rr = rad * np.sqrt(rng.uniform(0, 1, m))
            return centre + np.column_stack([rr * np.cos(ang), rr * np.sin(ang)])

        return _rejection(rng, n, cfg, draw)
    if kind is DistributionArchetype.grouped:
        centre = _uniform_in_breast(rng, 1, cfg)[0]
        return _rejection(rng, n, cfg, lambda m: centre + rng.normal(0, cfg.grouped_sigma, size=(m, 2)))
    if kind is DistributionArchetype.linear:
        while True:
            length = rng.uniform(*cfg.linear_length)
            ang = rng.uniform(0, math.pi)
            mid = _uniform_in_breast(rng, 1, cfg)[0]
            d = np.array([math.cos(ang), math.sin(ang)])
            ends = np.array([mid - d * length / 2, mid + d * length / 2])
            if _in_breast(ends, cfg).all():
                break
        nrm = np.array([-d[1], d[0]])

        def draw(m):
            t = rng.uniform(-length / 2, length / 2, m)
            return mid + np.outer(t, d) + np.outer(rng.normal(0, cfg.linear_jitter, m), nrm)

        return _rejection(rng, n, cfg, draw)
    # segmental: wedge with apex on the chest wall, opening toward the curved boundary
    apex = np.array([0.0, rng.uniform(0.5 - 0.6 * cfg.breast_semi_y, 0.5 + 0.6 * cfg.breast_semi_y)])
    opening = math.radians(rng.uniform(*cfg.wedge_opening_deg))
    axis = rng.uniform(-math.pi / 4, math.pi / 4)
    reach = cfg.breast_semi_x

    def draw(m):
        t = rng.uniform(cfg.wedge_depth[0], cfg.wedge_depth[1], m) * reach
        phi = axis + rng.uniform(-opening / 2, opening / 2, m)
        return apex + np.column_stack([t * np.cos(phi), t * np.sin(phi)])

    return _rejection(rng, n, cfg, draw)


# ---------------------------------------------------------------------------
# patches


def _gauss(yy, xx, cy, cx, sy, sx=None, theta=0.0):
    sx = sy if sx is None else sx
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))


def sample_patch(archetype, rng: np.random.Generator, cfg: GeneratorConfig | None = None) -> np.ndarray:
    cfg = cfg or GeneratorConfig()
    m = cfg.patch_size
    kind = MorphologyArchetype(archetype)
    yy, xx = np.mgrid[0:m, 0:m].astype(np.float64)
    c = (m - 1) / 2.0
    sig = np.zeros((m, m))
    if kind is MorphologyArchetype.coarse_heterogeneous:
        for _ in range(rng.integers(3, 6)):
            off = rng.normal(0, 2.5, 2)
            sig += rng.uniform(0.4, 0.8) * _gauss(yy, xx, c + off[0], c + off[1], rng.uniform(2.5, 4.5), rng.uniform(2.5, 4.5), rng.uniform(0, math.pi))
    elif kind is MorphologyArchetype.fine_pleomorphic:
        for _ in range(rng.integers(2, 5)):
            off = rng.uniform(-6, 6, 2)
            sig += rng.uniform(0.3, 1.0) * _gauss(yy, xx, c + off[0], c + off[1], rng.uniform(0.6, 1.4), rng.uniform(0.6, 1.4), rng.uniform(0, math.pi))
    elif kind is MorphologyArchetype.amorphous:
        sig += rng.uniform(0.15, 0.3) * _gauss(yy, xx, c + rng.normal(0, 1), c + rng.normal(0, 1), rng.uniform(6, 9))
    else:
        theta = rng.uniform(0, math.pi)
        sig += rng.uniform(0.6, 0.9) * _gauss(yy, xx, c, c, rng.uniform(0.7, 1.0), rng.uniform(9, 13), theta)
    noise = rng.normal(0, cfg.background_noise, (m, m))
    return cfg.background_level + cfg.intensity_scale * sig + noise


def sample_patches(archetype, points, rng, cfg=None, labels=None) -> np.ndarray:
    """One patch per point; per-point ``labels`` override ``archetype`` when given."""
    n = len(points)
    kinds = [archetype] * n if labels is None else list(labels)
    return np.stack([sample_patch(k, rng, cfg) for k in kinds])


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SplitManifest:
    train_ids: list
    test_ids: list
    seed: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"train_ids": self.train_ids, "test_ids": self.test_ids, "seed": self.seed, "config": self.config}


# morphology most often seen with each distribution; used only when
# ``morphology_coupling`` > 0 to make the two tasks share signal
PAIRED_MORPHOLOGY = {
    DistributionArchetype.diffuse: MorphologyArchetype.amorphous,
    DistributionArchetype.regional: MorphologyArchetype.coarse_heterogeneous,
    DistributionArchetype.grouped: MorphologyArchetype.fine_pleomorphic,
    DistributionArchetype.linear: MorphologyArchetype.fine_linear,
    DistributionArchetype.segmental: MorphologyArchetype.fine_linear,
}


def cluster_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_cluster(cfg: GeneratorConfig, index: int, dist, morph) -> AnnotatedCluster:
    rng = cluster_rng(cfg.seed, index)
    if cfg.morphology_coupling > 0 and rng.uniform() < cfg.morphology_coupling:
        morph = PAIRED_MORPHOLOGY[DistributionArchetype(dist)]
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    pts = sample_point_pattern(dist, n, rng, cfg)
    n_out = int(round(cfg.outlier_fraction * n))
    if n_out:
        # isolated calcifications scattered over the breast, away from the pattern
        pts[rng.choice(n, n_out, replace=False)] = _uniform_in_breast(rng, n_out, cfg)
    labels = np.full(n, int(morph), dtype=np.int64)
    n_bad = int(round(cfg.contamination * n))
    if n_bad:
        other = int(rng.choice([k for k in range(len(MorphologyArchetype)) if k != int(morph)]))
        fringe = np.argsort(-np.linalg.norm(pts - pts.mean(axis=0), axis=1), kind="stable")[:n_bad]
        labels[fringe] = other
    patches = sample_patches(morph, pts, rng, cfg, labels=labels)
    w, h = cfg.image_extent
    pixels = np.clip(pts, 0.0, 1.0) * np.array([w, h])
    return AnnotatedCluster((w, h), pixels, patches, labels, int(dist), id=f"c{index:05d}")


def _grid(cfg: GeneratorConfig):
    cells = []
    for d in DistributionArchetype:
        per = cfg.clusters_per_class
        if cfg.class_counts is not None:
            per = int(cfg.class_counts.get(d.name, per))
        for mo in MorphologyArchetype:
            cells.extend([(d, mo)] * per)
    return cells


def generate_dataset(cfg: GeneratorConfig):
    """All clusters for the archetype grid plus a stratified train/test split."""
    cfg.validate()
    cells = _grid(cfg)
    clusters = [generate_cluster(cfg, i, d, mo) for i, (d, mo) in enumerate(cells)]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5B117]))
    train, test = [], []
    for d in DistributionArchetype:
        ids = [c.id for c in clusters if c.graph_label == int(d)]
        order = rng.permutation(len(ids))
        n_train = int(round(cfg.train_fraction * len(ids)))
        train.extend(ids[i] for i in order[:n_train])
        test.extend(ids[i] for i in order[n_train:])
    manifest = SplitManifest(sorted(train), sorted(test), cfg.seed, cfg.to_dict())
    return clusters, manifest
