from collections import OrderedDict

import numpy as np
import pytest

from mcgcn import autodiff as ad
from mcgcn import graphs, kernels
from mcgcn import message_passing as mp
from gradcheck import numeric_grad, rel_error

EPS = 1e-7


def _t(x):
    return ad.constant(np.asarray(x, dtype=np.float64))


def _random_items(seed, n_graphs=2, n_range=(5, 9), k=3, r=0.35):
    rng = np.random.default_rng(seed)
    items = []
    for g in range(n_graphs):
        n = int(rng.integers(*n_range))
        pts = rng.uniform(0, 100, size=(n, 2))
        c = graphs.AnnotatedCluster((100, 100), pts, rng.normal(size=(n, 32, 32)), rng.integers(0, 4, n), rng.integers(0, 5), id=f"g{g}")
        knn, rad = graphs.assemble_pair(c, k=k, r=r)
        items.append({"knn": knn, "radius": rad})
    return items


# -- messages ---------------------------------------------------------------


def test_messages_hand_case():
    m = mp.construct_messages(_t([[1.0, -2.0]]), [0], _t([[0.5, 0.5]]), 1e-7)
    np.testing.assert_array_equal(m.data, [[1.5 + 1e-7, 1e-7]])


def test_messages_without_edge_features():
    m = mp.construct_messages(_t([[-3.0, -3.0]]), [0], None, EPS)
    np.testing.assert_array_equal(m.data, [[EPS, EPS]])


def test_messages_cancel():
    h = np.array([[0.7, -1.2, 3.0]])
    m = mp.construct_messages(_t(h), [0], _t(-h), EPS)
    np.testing.assert_array_equal(m.data, [[EPS] * 3])


def test_messages_strictly_positive():
    rng = np.random.default_rng(0)
    m = mp.construct_messages(_t(rng.normal(size=(6, 5))), rng.integers(0, 6, 20), _t(rng.normal(size=(20, 5))), EPS)
    assert np.all(m.data >= EPS)


# -- aggregation ------------------------------------------------------------


def test_aggregate_singleton_is_identity():
    m = np.array([[0.3, 2.5, 1e-7]])
    out = mp.softmax_aggregate(_t(m), [0], 1, 1.0)
    np.testing.assert_array_equal(out.data, m)


def test_aggregate_beta_zero_is_mean():
    out = mp.softmax_aggregate(_t([[1.0, 0.0], [3.0, 2.0]]), [0, 0], 1, 0.0)
    np.testing.assert_allclose(out.data, [[2.0, 1.0]], rtol=0, atol=1e-12)


def test_aggregate_large_beta_is_max():
    out = mp.softmax_aggregate(_t([[1.0, 0.0], [3.0, 2.0]]), [0, 0], 1, 1e4)
    np.testing.assert_allclose(out.data, [[3.0, 2.0]], rtol=0, atol=1e-6)


def test_aggregate_isolated_node_gets_zero():
    out = mp.softmax_aggregate(_t([[1.0, 2.0]]), [1], 3, 1.0)
    np.testing.assert_array_equal(out.data[[0, 2]], np.zeros((2, 2)))


@pytest.mark.parametrize("seed", range(10))
def test_softmax_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(40, 6)) * 3
    seg = rng.integers(0, 7, size=40)
    _, w = kernels.segment_softmax_forward(vals, seg, 7, float(rng.uniform(0, 5)))
    sums = np.zeros((7, 6))
    np.add.at(sums, seg, w)
    present = np.unique(seg)
    np.testing.assert_allclose(sums[present], 1.0, rtol=0, atol=1e-12)


def test_beta_monotone_towards_max():
    m = _t([[0.2, 1.0], [1.4, 0.1]])
    prev = None
    for beta in [0.0, 0.5, 1, 2, 5, 10, 50, 200]:
        out = mp.softmax_aggregate(m, [0, 0], 1, beta).data[0]
        if prev is not None:
            assert np.all(np.abs(out - [1.4, 1.0]) <= np.abs(prev - [1.4, 1.0]) + 1e-15)
        prev = out


# -- MsgNorm ----------------------------------------------------------------


def _mlp_params(rng, d):
    return {
        "b.mlp1.weight": _t(rng.normal(size=(d, 2 * d))),
        "b.mlp1.bias": _t(rng.normal(size=2 * d)),
        "b.mlp2.weight": _t(rng.normal(size=(2 * d, d))),
        "b.mlp2.bias": _t(rng.normal(size=d)),
    }


def test_msgnorm_s_zero_is_mlp_of_h():
    rng = np.random.default_rng(1)
    p = _mlp_params(rng, 4)
    h, m = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(3, 4)))
    upd = lambda z: mp.mlp(z, p, "b")
    out = mp.msg_norm_update(h, m, _t([[0.0]]), upd)
    assert np.array_equal(out.data, upd(h).data)


def test_msgnorm_message_equal_to_h_doubles():
    rng = np.random.default_rng(2)
    p = _mlp_params(rng, 4)
    h = rng.normal(size=(3, 4))
    upd = lambda z: mp.mlp(z, p, "b")
    out = mp.msg_norm_update(_t(h), _t(h), _t([[1.0]]), upd)
    np.testing.assert_allclose(out.data, upd(_t(2 * h)).data, rtol=1e-13, atol=1e-13)


def test_msgnorm_zero_h_gives_mlp_of_zero():
    rng = np.random.default_rng(3)
    p = _mlp_params(rng, 4)
    upd = lambda z: mp.mlp(z, p, "b")
    out = mp.msg_norm_update(_t(np.zeros((2, 4))), _t(rng.normal(size=(2, 4))), _t([[1.0]]), upd)
    assert np.array_equal(out.data, upd(_t(np.zeros((2, 4)))).data)


def test_msgnorm_guard_on_zero_message():
    rng = np.random.default_rng(4)
    p = _mlp_params(rng, 4)
    h = rng.normal(size=(2, 4))
    upd = lambda z: mp.mlp(z, p, "b")
    with ad.Tape() as tape:
        hv = ad.variable(h)
        mv = ad.variable(np.zeros((2, 4)))
        sv = ad.variable([[1.0]])
        out = mp.msg_norm_update(hv, mv, sv, upd)
        loss = ad.sum(out)
    assert np.array_equal(out.data, upd(_t(h)).data)
    grads = ad.backward(tape, loss)
    for g in grads.values():
        assert np.all(np.isfinite(g))


# -- blocks -----------------------------------------------------------------


def _cfg(**kw):
    base = dict(in_dim=12, hidden=6, depth=2)
    base.update(kw)
    return mp.ModelConfig(**base)


def test_gcn_block_residual_identity():
    cfg = _cfg(depth=1)
    params = mp.init_params(cfg, 0)
    for name in list(params):
        if ".block0.mlp" in name:
            params[name] = ad.variable(np.zeros(params[name].shape))
    params["knn.block0.s"] = ad.variable([[0.0]])
    b = mp.make_batch(_random_items(0, 1))
    h = ad.constant(np.random.default_rng(0).normal(size=(b.num_nodes, 6)))
    out = mp.gcn_block(h, b.streams["knn"], params, "knn", 0, cfg)
    assert np.array_equal(out.data, h.data)


def test_gcn_block_isolated_node():
    cfg = _cfg(depth=1)
    params = mp.init_params(cfg, 1)
    sg = mp.StreamGraph(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2)), 1)
    h = ad.constant(np.random.default_rng(1).normal(size=(1, 6)))
    out = mp.gcn_block(h, sg, params, "knn", 0, cfg)
    x = ad.relu(ad.layer_norm(h, params["knn.block0.ln.gain"], params["knn.block0.ln.bias"]))
    want = h.data + mp.mlp(x, params, "knn.block0").data
    np.testing.assert_array_equal(out.data, want)


def test_two_layers_equal_manual_composition():
    cfg = _cfg(depth=2)
    params = mp.init_params(cfg, 2)
    items = _random_items(10, 1, n_range=(10, 11))
    b = mp.make_batch(items)
    x = ad.constant(b.node_features)
    stacked = mp.stream_forward(x, b.streams["radius"], params, "radius", cfg)
    h = ad.linear(x, params["radius.in.weight"], params["radius.in.bias"])
    h = mp.gcn_block(h, b.streams["radius"], params, "radius", 0, cfg)
    h = mp.gcn_block(h, b.streams["radius"], params, "radius", 1, cfg)
    assert np.array_equal(stacked.data, h.data)


# -- full forward ------------------------------------------------------------


def test_forward_shapes_and_depth_zero():
    items = _random_items(3, 3)
    b = mp.make_batch(items)
    for depth in (0, 2):
        cfg = _cfg(depth=depth)
        out = mp.forward(cfg, mp.init_params(cfg, 0), b)
        assert out.node_logits.shape == (b.num_nodes, 4)
        assert out.graph_logits.shape == (3, 5)
        assert out.node_embedding.shape == (b.num_nodes, 6)


def test_identical_streams_give_identical_embeddings():
    items = _random_items(4, 2)
    for it in items:
        it["radius"] = graphs.SpatialGraph(
            it["knn"].node_features, it["knn"].edges, it["knn"].edge_features,
            it["knn"].node_labels, it["knn"].graph_label, "radius", it["knn"].id,
        )
    cfg = _cfg(shared_streams=True)
    out = mp.forward(cfg, mp.init_params(cfg, 5), mp.make_batch(items))
    np.testing.assert_array_equal(out.stream_embeddings["knn"].data, out.stream_embeddings["radius"].data)


def test_forward_pair_rejects_node_mismatch():
    a = _random_items(5, 1, n_range=(6, 7))[0]
    b = _random_items(6, 1, n_range=(8, 9))[0]
    cfg = _cfg()
    with pytest.raises(ValueError, match="node"):
        mp.forward_pair(cfg, mp.init_params(cfg, 0), a["knn"], b["radius"])


def _permute_graph(g, perm):
    """Relabel node i as perm[i]."""
    inv = np.argsort(perm)
    edges = perm[g.edges]
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return graphs.SpatialGraph(
        g.node_features[inv], edges[order], g.edge_features[order], g.node_labels[inv], g.graph_label, g.topology_kind, g.id
    )


@pytest.mark.parametrize("seed", range(3))
def test_permutation_equivariance(seed):
    item = _random_items(100 + seed, 1, n_range=(12, 16))[0]
    n = item["knn"].n
    perm = np.random.default_rng(seed).permutation(n)
    cfg = _cfg(depth=3)
    params = mp.init_params(cfg, seed)
    out = mp.forward_pair(cfg, params, item["knn"], item["radius"])
    pout = mp.forward_pair(cfg, params, _permute_graph(item["knn"], perm), _permute_graph(item["radius"], perm))
    np.testing.assert_allclose(pout.node_logits.data[perm], out.node_logits.data, rtol=0, atol=1e-9)
    assert np.abs(pout.graph_logits.data - out.graph_logits.data).max() < 1e-9


# -- end-to-end gradients ------------------------------------------------------


def _loss_fn(cfg, batch):
    def loss(params):
        out = mp.forward(cfg, params, batch)
        lm = ad.cross_entropy(out.node_logits, batch.node_labels)
        ld = ad.cross_entropy(out.graph_logits, batch.graph_labels)
        return ad.add(ad.scalar_mul(lm, 0.7), ad.scalar_mul(ld, 1.3))

    return loss


def end_to_end_gradient_errors(seed, depth=2, hidden=4, beta=1.5):
    """Relative error per trainable parameter group; the fixed input standardisation is held constant."""
    cfg = mp.ModelConfig(in_dim=12, hidden=hidden, depth=depth, beta=beta)
    base = mp.init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    batch = mp.make_batch(_random_items(seed, 1, n_range=(8, 9)))
    mp.fit_standardization(base, batch.node_features, batch.streams["knn"].edge_features)
    fixed = OrderedDict((k, v) for k, v in base.items() if not mp.trainable(cfg, k))
    # move s and the norm gains off their init so every path is exercised
    arrays = OrderedDict((k, v.data + 0.1 * rng.normal(size=v.shape)) for k, v in base.items() if k not in fixed)
    loss = _loss_fn(cfg, batch)
    with ad.Tape() as tape:
        params = OrderedDict((k, ad.variable(v, name=k)) for k, v in arrays.items())
        value = loss(OrderedDict(params, **fixed))
    got = ad.backward(tape, value)
    names = list(arrays)

    def f(*arrs):
        return float(loss(OrderedDict(((k, ad.constant(a)) for k, a in zip(names, arrs)), **fixed)).data)

    want = numeric_grad(f, [arrays[k] for k in names])
    return {k: rel_error(got[params[k]], w) for k, w in zip(names, want)}


def test_end_to_end_gradients_single_seed():
    errs = end_to_end_gradient_errors(0)
    assert max(errs.values()) < 1e-4, sorted(errs.items(), key=lambda kv: -kv[1])[:3]
