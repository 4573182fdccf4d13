import numpy as np
import pytest
import scipy.sparse as sp
from oracles import reference_score

from mtnn import autodiff as ad
from mtnn.autodiff import Tensor, grad_check
from mtnn.errors import ConfigError
from mtnn.mergetree import MergeTree, build_join_tree, persistence_matrix, persistence_pairs, simplify
from mtnn.model import (
    ModelConfig,
    TreeData,
    attention_pool,
    attention_weights,
    batch_trees,
    detached,
    encode,
    forward_pair,
    forward_pairs,
    gcn_layer,
    gin_layer,
    global_context_plain,
    init_params,
    mlp_head,
    node_histogram,
    ntn,
    predict,
    topo_context,
    topological_weights,
)
from mtnn.scalarfield import EnsembleSpec, ScalarField, gen_gauss2d


def field1d(values, fid="f"):
    return ScalarField((len(values),), np.asarray(values, dtype=np.float64), fid)


def path_adj(n):
    r = np.arange(n - 1)
    A = sp.coo_matrix((np.ones(2 * (n - 1)), (np.r_[r, r + 1], np.r_[r + 1, r])), shape=(n, n))
    return A.tocsr()


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


@pytest.fixture(scope="module")
def trees():
    fields = gen_gauss2d(EnsembleSpec("gauss2d", 30, (24, 24), seed=11, run_length=6))
    return [simplify(build_join_tree(f), 0.03) for f in fields]


ALL_CONFIGS = [
    ModelConfig(encoder=e, attention=a) for e in ("gin", "gcn") for a in ("topological", "plain")
]


# --------------------------------------------------------------------------
# config and parameters


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(encoder="gat")
    with pytest.raises(ConfigError):
        ModelConfig(layer_dims=(64, 32))
    with pytest.raises(ConfigError):
        ModelConfig(mlp_dims=(20, 8, 1))
    c = ModelConfig(encoder="gcn", attention="plain")
    assert ModelConfig.from_dict(c.to_dict()) == c


def test_init_shapes_and_determinism():
    cfg = ModelConfig()
    a, b, c = init_params(cfg, 0), init_params(cfg, 0), init_params(cfg, 1)
    assert a["gin0.W1"].shape == (1, 64) and a["gin2.W2"].shape == (16, 16)
    assert a["ntn.W"].shape == (16, 16, 16) and a["ntn.V"].shape == (16, 32)
    assert a["mlp0.W"].shape == (32, 16) and a["mlp2.W"].shape == (8, 1)
    assert all(a[k].data[0] == 0 for k in a if k.endswith(".eps"))
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)
    limit = np.sqrt(6 / (64 + 32))
    assert np.abs(a["gin1.W1"].data).max() <= limit
    g = init_params(ModelConfig(encoder="gcn"), 0)
    assert g["gcn0.W"].shape == (1, 64) and "gin0.W1" not in g


# --------------------------------------------------------------------------
# encoder layers


def test_gcn_isolated_node_identity():
    h = T([[1.0, 2.0, 0.5]])
    A = sp.csr_matrix((1, 1))
    A_norm = sp.identity(1, format="csr") + A
    out = gcn_layer(h, A_norm, T(np.eye(3)), T(np.zeros(3)))
    assert out.data.tolist() == h.data.tolist()


def test_gcn_three_node_path_hand():
    # degrees with self loops: 2, 3, 2
    batch = batch_trees([TreeData(3, np.array([[1.0], [2.0], [4.0]]), np.array([[0, 1], [1, 2]]), np.ones(3) / 3, False)])
    out = gcn_layer(T(batch.x), batch.gcn_adj, T([[1.0]]), T([0.0])).data.ravel()
    expected = [
        1 / 2 + 2 / np.sqrt(6),
        1 / np.sqrt(6) + 2 / 3 + 4 / np.sqrt(6),
        2 / np.sqrt(6) + 4 / 2,
    ]
    np.testing.assert_allclose(out, expected, rtol=1e-14)


def test_gcn_two_node_symmetry():
    batch = batch_trees([TreeData(2, np.array([[0.3], [0.3]]), np.array([[0, 1]]), np.ones(2) / 2, False)])
    out = gcn_layer(T(batch.x), batch.gcn_adj, T([[1.0]]), T([0.0])).data
    assert out[0, 0] == out[1, 0]


def test_gin_isolated_node_identity():
    h = T([[0.5, 2.0]])
    I = T(np.eye(2))
    z = T(np.zeros(2))
    out = gin_layer(h, sp.csr_matrix((1, 1)), T([0.0]), I, z, I, z)
    assert out.data.tolist() == h.data.tolist()


def test_gin_star_hand():
    # centre 0 with leaves 1, 2, 3; eps = 0.5; MLP: x -> relu(2x - 1) * 3 + 1
    A = sp.csr_matrix(([1.0] * 6, ([0, 0, 0, 1, 2, 3], [1, 2, 3, 0, 0, 0])), shape=(4, 4))
    h = T([[1.0], [2.0], [0.0], [-1.0]])
    out = gin_layer(h, A, T([0.5]), T([[2.0]]), T([-1.0]), T([[3.0]]), T([1.0])).data.ravel()
    agg = [1.5 * 1 + (2 + 0 - 1), 1.5 * 2 + 1, 0 + 1, -1.5 + 1]
    expected = [max(2 * a - 1, 0) * 3 + 1 for a in agg]
    assert out.tolist() == expected


def test_gin_permutation_equivariance():
    rng = np.random.default_rng(0)
    A = path_adj(5)
    h = rng.normal(size=(5, 3))
    W1, b1, W2, b2 = (T(rng.normal(size=s)) for s in [(3, 4), (4,), (4, 2), (2,)])
    out = gin_layer(T(h), A, T([0.2]), W1, b1, W2, b2).data
    perm = rng.permutation(5)
    Pm = sp.csr_matrix(np.eye(5)[perm])
    out_p = gin_layer(T(h[perm]), (Pm @ A @ Pm.T).tocsr(), T([0.2]), W1, b1, W2, b2).data
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-14)


def test_encoders_share_output_shape(trees):
    batch = batch_trees([TreeData.from_tree(t) for t in trees[:4]])
    for enc in ("gin", "gcn"):
        cfg = ModelConfig(encoder=enc)
        H = encode(detached(init_params(cfg, 0)), cfg, batch)
        assert H.shape == (batch.x.shape[0], 16)


# --------------------------------------------------------------------------
# context and attention


def test_plain_context_cases():
    H = T([[1.0, 2.0], [3.0, -2.0], [2.0, 3.0]])
    assert not global_context_plain(H, T(np.zeros((2, 2)))).data.any()
    single = T([[0.3, -0.4]])
    np.testing.assert_allclose(global_context_plain(single, T(np.eye(2))).data, np.tanh([[0.3, -0.4]]))
    np.testing.assert_allclose(global_context_plain(H, T(np.eye(2))).data, np.tanh([[2.0, 1.0]]))


def test_topo_context_hand_and_fallback():
    t = build_join_tree(field1d([0, 2, 1, 3]))
    E = np.zeros((4, 4))
    w = topological_weights(t)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    H = T(np.arange(8.0).reshape(4, 2) / 10)
    Ehat = persistence_matrix(t)
    expected = np.tanh((w[:, None] * H.data).sum(0, keepdims=True) / 4)
    np.testing.assert_allclose(topo_context(H, T(np.eye(2)), Ehat).data, expected, rtol=1e-14)
    np.testing.assert_array_equal(
        topo_context(H, T(np.eye(2)), E).data, global_context_plain(H, T(np.eye(2))).data
    )


def test_topological_weights_two_node_and_star():
    assert topological_weights(build_join_tree(field1d([0, 1]))).tolist() == [0.5, 0.5]
    # symmetric star: three equal-depth minima joining at one saddle
    t = MergeTree([0, 1, 2, 3, 4], [0, 0, 0, 0.5, 1], ["minimum"] * 3 + ["saddle", "root"], [3, 3, 3, 4, -1], [], "s")
    t.pairs = persistence_pairs(t)
    w = topological_weights(t)
    assert w[1] == w[2]  # both non-global leaves carry edge + pair entries
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_topological_weights_sum_to_one(trees):
    for t in trees:
        if t.n > 1:
            assert abs(topological_weights(t).sum() - 1.0) < 1e-12


def test_attention_pool_cases():
    H = T([[1.0, 2.0], [-1.0, 0.5]])
    _, Hs, att = attention_pool(H, T([[0.0, 0.0]]))
    np.testing.assert_allclose(Hs.data, 0.5 * H.data.sum(0, keepdims=True))
    assert att.data.ravel().tolist() == [0.5, 0.5]
    c = np.array([[0.3, -0.2]])
    nodes, Hs, att = attention_pool(H, T(c))
    s = 1 / (1 + np.exp(-(H.data @ c.T)))
    np.testing.assert_allclose(nodes.data, s * H.data, rtol=1e-14)
    np.testing.assert_allclose(Hs.data, (s * H.data).sum(0, keepdims=True), rtol=1e-14)
    _, _, att = attention_pool(T([[2.0, 3.0]]), T([[3.0, -2.0]]))
    assert att.item() == 0.5  # orthogonal to the context


# --------------------------------------------------------------------------
# NTN, histogram, head


def test_ntn_cases():
    h1, h2 = T([[1.0, 2.0]]), T([[3.0, -1.0]])
    zeros = ntn(h1, h2, T(np.zeros((3, 2, 2))), T(np.zeros((3, 4))), T(np.zeros(3)))
    assert not zeros.data.any()
    ident = ntn(h1, h2, T(np.stack([np.eye(2)] * 2)), T(np.zeros((2, 4))), T(np.zeros(2)))
    assert ident.data.tolist() == [[1.0, 1.0]]
    W = T([[[1.0, 0.0], [2.0, 1.0]]])
    V = T([[0.5, 0.0, 0.0, -1.0]])
    # bilinear 1*3 + 2*(3 + -1*1)... = h1 W h2 = [1,2] [[1,0],[2,1]] [3,-1] = [5,2].[3,-1] = 13
    out = ntn(h1, h2, W, V, T([-0.5]))
    assert out.data.tolist() == [[13 + 0.5 + 1 - 0.5]]


def test_histogram_zero_embeddings_bin_8():
    hist = node_histogram(np.zeros((3, 4)), np.zeros((2, 4)), 16)
    assert hist[8] == 1.0 and hist.sum() == 1.0


def test_histogram_padding_and_rule():
    H1 = np.array([[10.0], [-10.0]])
    H2 = np.array([[10.0]])
    hist = node_histogram(H1, H2, 4)
    # entries: sig(100)->last bin, sig(-100)->bin 0, padded column -> 0.5 -> bin 2
    assert hist.tolist() == [0.25, 0.0, 0.5, 0.25]
    rng = np.random.default_rng(3)
    for _ in range(10):
        h = node_histogram(rng.normal(size=(5, 3)), rng.normal(size=(2, 3)), 16)
        assert h.sum() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        node_histogram(H1, H2, 0)


def test_mlp_head_cases():
    cfg = ModelConfig()
    p = init_params(cfg, 0)
    zero = {k: Tensor(np.zeros(v.shape)) for k, v in p.items()}
    assert mlp_head(T(np.ones((1, 32))), zero, 3).item() == 0.5
    rng = np.random.default_rng(0)
    out = mlp_head(T(rng.normal(size=(50, 32)) * 10), detached(p), 3).data
    assert np.all((out > 0) & (out < 1))
    # reduced 2-2-1 head by hand
    small = {
        "mlp0.W": T([[1.0, -1.0], [0.5, 2.0]]),
        "mlp0.b": T([0.0, -1.0]),
        "mlp1.W": T([[2.0], [1.0]]),
        "mlp1.b": T([0.25]),
    }
    x = np.array([[1.0, 1.0]])
    hid = np.maximum(x @ small["mlp0.W"].data + small["mlp0.b"].data, 0)
    z = hid @ small["mlp1.W"].data + 0.25
    assert mlp_head(T(x), small, 2).item() == pytest.approx(1 / (1 + np.exp(-z[0, 0])), rel=1e-15)


# --------------------------------------------------------------------------
# end to end


@pytest.mark.parametrize("cfg", ALL_CONFIGS, ids=lambda c: f"{c.encoder}-{c.attention}")
def test_forward_matches_reference(cfg, trees):
    p = init_params(cfg, 4)
    for a, b in [(0, 1), (5, 17), (3, 3), (29, 8)]:
        assert forward_pair(trees[a], trees[b], p, cfg) == pytest.approx(
            reference_score(trees[a], trees[b], p, cfg), abs=1e-12
        )


def test_forward_hand_four_node_trees():
    cfg = ModelConfig()
    p = init_params(cfg, 0)
    t1 = build_join_tree(field1d([0, 2, 1, 3]))
    t2 = build_join_tree(field1d([0.5, 2, 0, 1.2, 3]))
    s = forward_pair(t1, t2, p, cfg)
    assert 0 < s < 1
    assert s == pytest.approx(reference_score(t1, t2, p, cfg), abs=1e-12)


def test_batched_scores_match_single_pairs(trees):
    cfg = ModelConfig()
    p = init_params(cfg, 1)
    data = [TreeData.from_tree(t) for t in trees]
    pairs = [(0, 1), (2, 9), (4, 4), (9, 2), (20, 3)]
    batched = predict(p, cfg, data, pairs)
    single = [forward_pair(trees[i], trees[j], p, cfg) for i, j in pairs]
    np.testing.assert_allclose(batched, single, rtol=0, atol=1e-13)
    np.testing.assert_array_equal(predict(p, cfg, data, pairs, workers=2), batched)


def test_identical_trees_score_in_range(trees):
    cfg = ModelConfig()
    s = forward_pair(trees[0], trees[0], init_params(cfg, 2), cfg)
    assert 0 < s < 1


@pytest.mark.parametrize("cfg", ALL_CONFIGS, ids=lambda c: f"{c.encoder}-{c.attention}")
def test_permutation_invariance(cfg, trees):
    rng = np.random.default_rng(7)
    p = init_params(cfg, 3)
    for _ in range(6):
        i, j = rng.choice(len(trees), 2, replace=False)
        base = forward_pair(trees[i], trees[j], p, cfg)
        t1 = trees[i].permuted(rng.permutation(trees[i].n))
        t2 = trees[j].permuted(rng.permutation(trees[j].n))
        assert abs(forward_pair(t1, t2, p, cfg) - base) < 1e-9


def test_single_node_tree_is_accepted():
    cfg = ModelConfig()
    one = build_join_tree(field1d([2, 2, 2]))
    two = build_join_tree(field1d([0, 1]))
    s = forward_pair(one, two, init_params(cfg, 0), cfg)
    assert 0 < s < 1
    att, w = attention_weights(init_params(cfg, 0), cfg, one)
    assert att.shape == (1,)


def test_histogram_is_stop_gradient(trees):
    cfg = ModelConfig()
    data = [TreeData.from_tree(t) for t in trees[:6]]
    pairs = [(0, 1), (2, 3), (4, 5)]
    target = Tensor(np.array([[0.2], [0.7], [0.4]]))

    def grads(zero_hist_weights):
        p = init_params(cfg, 5)
        if zero_hist_weights:
            # remove the histogram's contribution to the joint vector
            p["mlp0.W"].data[cfg.ntn_k :] = 0.0
        fwd = forward_pairs(p, cfg, data, pairs)
        ad.mean(ad.square(fwd.scores - target)).backward()
        return p, fwd

    p0, f0 = grads(False)
    p1, f1 = grads(True)
    # scores differ, yet the histogram itself never feeds a gradient back
    assert not np.array_equal(f0.scores.data, f1.scores.data)
    assert isinstance(f0.hist, np.ndarray)
    enc = [k for k in p0 if k.startswith("gin")]
    assert all(p0[k].grad is not None for k in enc)
    # with the d_tree path cut instead, encoder gradients vanish entirely
    p2 = init_params(cfg, 5)
    p2["mlp0.W"].data[: cfg.ntn_k] = 0.0
    fwd = forward_pairs(p2, cfg, data, pairs)
    ad.mean(ad.square(fwd.scores - target)).backward()
    assert all(p2[k].grad is None or not p2[k].grad.any() for k in enc)


def test_scores_symmetric_in_pair_order(trees):
    cfg = ModelConfig()
    p = init_params(cfg, 4)
    data = [TreeData.from_tree(t) for t in trees]
    pairs = np.array([(0, 1), (5, 17), (29, 8)])
    a = predict(p, cfg, data, pairs)
    assert a.tobytes() == predict(p, cfg, data, pairs[:, ::-1]).tobytes()
    assert forward_pair(trees[3], trees[9], p, cfg) == forward_pair(trees[9], trees[3], p, cfg)


@pytest.mark.parametrize("enc,att", [(e, a) for e in ("gin", "gcn") for a in ("topological", "plain")])
def test_full_model_grad_check(enc, att):
    # narrow layers keep this fast; the full-width check runs in the acceptance suite
    cfg = ModelConfig(enc, att, layer_dims=(8, 6, 4), ntn_k=4, bins=4, mlp_dims=(8, 4, 1))
    t1 = build_join_tree(field1d([0, 2, 1, 3]))
    t2 = build_join_tree(field1d([0.5, 2, 0, 1.2, 3]))
    data = [TreeData.from_tree(t1), TreeData.from_tree(t2)]
    pairs = [(0, 1), (1, 0), (0, 0)]
    target = Tensor(np.array([[0.3], [0.3], [0.0]]))
    p = init_params(cfg, 0)

    def loss():
        fwd = forward_pairs(p, cfg, data, pairs)
        return ad.mean(ad.square(fwd.scores - target))

    rep = grad_check(loss, list(p.values()), h=1e-5, tol=1e-4)
    assert rep.passed, rep.max_rel_err
    assert rep.checked > 0.9 * sum(v.size for v in p.values())
