import math

import numpy as np
import pytest

from mcgcn import datasynth as ds
from mcgcn import graphs
from oracles import geometry_features, line_fit_residual, mean_nn_distance

D = ds.DistributionArchetype
M = ds.MorphologyArchetype
CFG = ds.GeneratorConfig()


def test_rejects_too_few_points():
    with pytest.raises(ValueError):
        ds.sample_point_pattern(D.grouped, 2, np.random.default_rng(0))


@pytest.mark.parametrize("kind", list(D))
def test_points_inside_breast(kind):
    for seed in range(5):
        pts = ds.sample_point_pattern(kind, 40, np.random.default_rng(seed))
        assert pts.shape == (40, 2)
        assert np.all((pts >= 0) & (pts <= 1))
        assert np.all((pts[:, 0] / CFG.breast_semi_x) ** 2 + ((pts[:, 1] - 0.5) / CFG.breast_semi_y) ** 2 <= 1 + 1e-12)


def test_grouped_radius_spread():
    pts = ds.sample_point_pattern(D.grouped, 50, np.random.default_rng(7))
    radii = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
    assert radii.std(ddof=1) < 0.06


@pytest.mark.parametrize("n", [3, 10, 40, 200])
def test_linear_residual(n):
    for seed in range(10):
        assert line_fit_residual(ds.sample_point_pattern(D.linear, n, np.random.default_rng(seed))) < 0.02


def test_diffuse_sparser_than_grouped():
    diffuse = [mean_nn_distance(ds.sample_point_pattern(D.diffuse, 100, np.random.default_rng(s))) for s in range(20)]
    grouped = [mean_nn_distance(ds.sample_point_pattern(D.grouped, 100, np.random.default_rng(s))) for s in range(20)]
    assert np.mean(diffuse) > np.mean(grouped)
    assert min(diffuse) > max(grouped)


def test_regional_covers_quarter_of_breast():
    area = 0.5 * math.pi * CFG.breast_semi_x * CFG.breast_semi_y
    from scipy.spatial import ConvexHull

    fr = [ConvexHull(ds.sample_point_pattern(D.regional, 400, np.random.default_rng(s))).volume / area for s in range(10)]
    assert 0.1 < np.mean(fr) <= 0.25 + 1e-9


def test_segmental_apex_on_chest_wall():
    for seed in range(10):
        pts = ds.sample_point_pattern(D.segmental, 60, np.random.default_rng(seed))
        # the wedge starts at least wedge_depth[0] * semi-axis from the wall
        assert pts[:, 0].min() > 0.5 * CFG.wedge_depth[0] * CFG.breast_semi_x * math.cos(math.pi / 4 + math.radians(15))


def _patches(kind, seeds=20, n=8, cfg=CFG):
    return [ds.sample_patch(kind, np.random.default_rng(s * 100 + i), cfg) for s in range(seeds) for i in range(n)]


def test_amorphous_smoother_than_fine_linear():
    amorphous = np.mean([graphs.mean_gradient_magnitude(p) for p in _patches(M.amorphous)])
    linear = np.mean([graphs.mean_gradient_magnitude(p) for p in _patches(M.fine_linear)])
    assert amorphous < linear


def test_fine_linear_orientation_dominant():
    mass = [graphs.orientation_histogram(p).max() for p in _patches(M.fine_linear)]
    # streaks straddling a bin edge split their mass, so the statistic is a mean
    assert np.mean(mass) > 0.4
    others = [graphs.orientation_histogram(p).max() for p in _patches(M.amorphous)]
    assert np.mean(mass) > np.mean(others)


def test_background_only_patch_is_noise_baseline():
    cfg = ds.GeneratorConfig(intensity_scale=0.0)
    for kind in M:
        p = ds.sample_patch(kind, np.random.default_rng(int(kind)), cfg)
        f = graphs.patch_statistics(p)
        assert f[0] == pytest.approx(cfg.background_level, abs=0.01)
        assert f[1] == pytest.approx(cfg.background_noise, rel=0.1)
        assert abs(f[9]) < 0.05


def test_patch_descriptors_separate_morphologies():
    means = np.array([np.mean([graphs.patch_statistics(p) for p in _patches(k, seeds=5)], axis=0) for k in M])
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(means[i] - means[j]).max() > 0.05


def test_default_dataset_counts():
    clusters, manifest = ds.generate_dataset(ds.GeneratorConfig())
    assert len(clusters) == 100
    assert len(manifest.train_ids) == 80 and len(manifest.test_ids) == 20
    by_id = {c.id: c for c in clusters}
    for d in D:
        assert sum(by_id[i].graph_label == d for i in manifest.train_ids) == 16
        assert sum(by_id[i].graph_label == d for i in manifest.test_ids) == 4
    cells = {(c.graph_label, int(np.bincount(c.node_labels).argmax())) for c in clusters}
    assert len(cells) == 20
    for c in clusters:
        c.validate()
        assert len(c.points) >= 3


def test_zero_clusters_per_class_rejected():
    with pytest.raises(ValueError, match="clusters_per_class"):
        ds.generate_dataset(ds.GeneratorConfig(clusters_per_class=0))


def test_class_counts_imbalance():
    clusters, _ = ds.generate_dataset(ds.GeneratorConfig(clusters_per_class=1, class_counts={"grouped": 3}))
    assert sum(c.graph_label == D.grouped for c in clusters) == 12
    assert len(clusters) == 4 * 4 + 12


def test_deterministic_bytes(tmp_path):
    a, ma = ds.generate_dataset(ds.GeneratorConfig(clusters_per_class=1))
    b, mb = ds.generate_dataset(ds.GeneratorConfig(clusters_per_class=1))
    assert ma.to_dict() == mb.to_dict()
    for x, y in zip(a, b):
        assert x.id == y.id and np.array_equal(x.points, y.points) and np.array_equal(x.patches, y.patches)
        assert np.array_equal(x.node_labels, y.node_labels)
    other, _ = ds.generate_dataset(ds.GeneratorConfig(clusters_per_class=1, seed=8))
    assert not np.array_equal(a[0].points, other[0].points)


def test_cluster_streams_independent_of_order():
    cfg = ds.GeneratorConfig()
    c = ds.generate_cluster(cfg, 17, D.linear, M.amorphous)
    again = ds.generate_cluster(cfg, 17, D.linear, M.amorphous)
    assert np.array_equal(c.patches, again.patches)


def test_contamination_majority_and_fringe():
    fractions = []
    for seed in range(20):
        clusters, _ = ds.generate_dataset(ds.GeneratorConfig(seed=seed, clusters_per_class=1))
        for c in clusters:
            counts = np.bincount(c.node_labels, minlength=4)
            major = counts.argmax()
            fractions.append(counts[major] / len(c.node_labels))
            assert len(np.flatnonzero(counts)) <= 2
            minority = c.node_labels != major
            if minority.any():
                dist = np.linalg.norm(c.points - c.points.mean(axis=0), axis=1)
                assert dist[minority].min() >= dist[~minority].max()
    assert np.mean(fractions) == pytest.approx(0.9, abs=0.01)


def _features(clusters, cfg):
    area = 0.5 * math.pi * cfg.breast_semi_x * cfg.breast_semi_y
    X = np.array([geometry_features(c.points / np.array(c.image_extent), area) for c in clusters])
    # scale features span orders of magnitude between archetypes
    X[:, :3] = np.log(X[:, :3])
    y = np.array([c.graph_label for c in clusters])
    return X, y


def test_separability_by_simple_geometry():
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    cfg = ds.GeneratorConfig()
    clusters, manifest = ds.generate_dataset(cfg)
    by_id = {c.id: c for c in clusters}
    Xtr, ytr = _features([by_id[i] for i in manifest.train_ids], cfg)
    Xte, yte = _features([by_id[i] for i in manifest.test_ids], cfg)
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000)).fit(Xtr, ytr)
    # larger held-out set from another seed for a less noisy estimate
    extra, _ = ds.generate_dataset(ds.GeneratorConfig(seed=1234))
    Xex, yex = _features(extra, cfg)
    assert clf.score(Xte, yte) > 0.7
    assert clf.score(Xex, yex) > 0.7


def test_coupling_zero_matches_default_stream():
    a, _ = ds.generate_dataset(ds.GeneratorConfig(clusters_per_class=1))
    b, _ = ds.generate_dataset(ds.GeneratorConfig(clusters_per_class=1, morphology_coupling=0.0, outlier_fraction=0.0))
    for x, y in zip(a, b):
        assert np.array_equal(x.points, y.points) and np.array_equal(x.patches, y.patches)


def test_full_coupling_pairs_morphology():
    clusters, _ = ds.generate_dataset(ds.GeneratorConfig(clusters_per_class=1, morphology_coupling=1.0))
    for c in clusters:
        major = int(np.bincount(c.node_labels).argmax())
        assert major == ds.PAIRED_MORPHOLOGY[D(c.graph_label)]


def test_outliers_sit_away_from_grouped_pattern():
    cfg = ds.GeneratorConfig(clusters_per_class=1, outlier_fraction=0.2, contamination=0.0)
    clusters, _ = ds.generate_dataset(cfg)
    far = []
    for c in clusters:
        if c.graph_label != D.grouped:
            continue
        p = c.points / np.array(c.image_extent)
        d = np.linalg.norm(p - np.median(p, axis=0), axis=1)
        far.append(np.mean(d > 4 * cfg.grouped_sigma))
    # a uniform draw rarely lands inside the tight group
    assert 0.12 <= np.mean(far) <= 0.2


@pytest.mark.parametrize("bad", [{"morphology_coupling": 1.5}, {"outlier_fraction": 0.5}])
def test_engineering_options_validated(bad):
    with pytest.raises(ValueError):
        ds.GeneratorConfig(**bad).validate()
