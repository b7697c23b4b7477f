import numpy as np
import pytest

from octgen import diffusion as dif
from octgen import generator as G
from octgen import octree as oc
from octgen import tensor as T
from octgen.attention import cross_attention
from octgen.data import LabeledPointCloud
from octgen.parts import PartEncoder


def tiny_parts(seed=0, part_width=5, n_parts=3):
    rng = np.random.default_rng(seed)
    from octgen.parts import PartFeatureSet

    feats = T.tensor(rng.standard_normal((n_parts, part_width)))
    return PartFeatureSet(feats, np.ones(n_parts, bool), "table")


def test_timestep_embed_t0_pattern():
    e = G.timestep_embed(0, 8)
    assert np.array_equal(e, [0, 1, 0, 1, 0, 1, 0, 1])


def test_timestep_embed_injective_at_dim8():
    embs = np.stack([G.timestep_embed(t, 8) for t in range(1, 101)])
    assert len(np.unique(embs, axis=0)) == 100


def test_timestep_embed_constant_norm():
    norms = [np.linalg.norm(G.timestep_embed(t, 16)) for t in range(0, 200, 7)]
    assert np.abs(np.diff(norms)).max() < 1e-9


def test_timestep_embed_odd_dim_rejected():
    with pytest.raises(ValueError):
        G.timestep_embed(3, 7)


def mini_unet(use_cross=True, seed=3):
    return G.CoarseUNet(
        grid=4, in_width=2, width=2, temb_dim=4, part_width=5, d_k=2,
        use_cross=use_cross, init_seed=seed, prefix="mini",
    )


def test_unet_zero_init_output_is_bias_field():
    net = mini_unet()
    rng = np.random.default_rng(0)
    parts = tiny_parts()
    a = net.forward(T.tensor(rng.standard_normal((64, 2))), 3, parts)
    b = net.forward(T.tensor(rng.standard_normal((64, 2))), 3, parts)
    assert np.array_equal(a.data, np.zeros((64, 2)))
    assert np.array_equal(a.data, b.data)


def test_unet_flag_off_equals_zeroed_cross():
    # name-keyed init: the two nets share every non-cross weight exactly
    on = mini_unet(use_cross=True, seed=7)
    off = mini_unet(use_cross=False, seed=7)
    rng = np.random.default_rng(1)
    # give both nets identical non-trivial output heads and res branches
    for net in (on, off):
        net.out_conv[0].set_data(np.random.default_rng(5).standard_normal((27 * 2, 2)) * 0.1)
        for blk in (net.enc0, net.enc1, net.mid, net.mid2, net.dec1, net.dec0):
            blk.c2[0].set_data(np.random.default_rng(6).standard_normal(blk.c2[0].shape) * 0.1)
    x = rng.standard_normal((64, 2))
    parts = tiny_parts()
    got_on = on.forward(T.tensor(x), 2, parts).data
    got_off = off.forward(T.tensor(x), 2, parts).data
    assert np.array_equal(got_on, got_off)
    # and the cross projections being zero means parts do not matter at all
    other = tiny_parts(seed=9)
    assert np.array_equal(on.forward(T.tensor(x), 2, other).data, got_on)


def test_unet_shape_validation():
    net = mini_unet()
    with pytest.raises(ValueError):
        net.forward(T.tensor(np.zeros((10, 2))), 1, None)


def test_unet_grad_check_subset():
    net = mini_unet(seed=11)
    rng = np.random.default_rng(2)
    # non-zero heads so gradients flow everywhere
    net.out_conv[0].set_data(rng.standard_normal((27 * 2, 2)) * 0.2)
    for ap in (net.attn1, net.attn_mid, net.attn_dec1):
        ap.self_p.wo.set_data(rng.standard_normal(ap.self_p.wo.shape) * 0.2)
        ap.cross_p.wo.set_data(rng.standard_normal(ap.cross_p.wo.shape) * 0.2)
    x = T.tensor(rng.standard_normal((64, 2)))
    parts = tiny_parts(seed=4)
    subset = [
        net.in_conv[0], net.out_conv[0], net.out_conv[1],
        net.mid.c1[0], net.mid.temb[0],
        net.attn_mid.cross_p.wk, net.attn_mid.cross_p.wv, net.attn_mid.self_p.wq,
        net.fuse1[0], net.up0[0],
    ]

    def model(inp):
        out = net.forward(inp, 3, parts)
        return (out * out).mean()

    assert T.grad_check(model, subset, input=x) < 1e-4


def small_tree(seed=0, depth=2, n=20):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (n, 3))
    return oc.build_from_points(pts, depth, feature_width=3)


def mini_fine(use_cross=True, seed=5, blocks=2):
    return G.FineGraphNet(
        in_width=3, width=4, blocks=blocks, temb_dim=4, part_width=5, d_k=2,
        use_cross=use_cross, init_seed=seed, prefix="minif",
    )


def test_fine_single_leaf_tree():
    tree = oc.full_octree(0, feature_width=3)
    gops = G.GraphOps(tree)
    net = mini_fine()
    out = net.forward(gops, T.tensor(np.ones((1, 3))), 1, tiny_parts())
    assert out.shape == (1, 3)


def test_fine_matches_loop_oracle():
    tree = small_tree(seed=3)
    gops = G.GraphOps(tree)
    net = mini_fine(use_cross=False, seed=8)
    rng = np.random.default_rng(4)
    net.out_aff[0].set_data(rng.standard_normal((4, 3)) * 0.5)
    x = rng.standard_normal((tree.leaf_count(), 3))
    got = net.forward(gops, T.tensor(x), 5, None).data

    # brute-force reimplementation with explicit neighbor lists
    g = oc.dual_graph(tree)
    nbrs = {i: {i} for i in range(tree.leaf_count())}
    for (a, b), _ in zip(g.edges, g.axes):
        nbrs[a].add(b)
        nbrs[b].add(a)
    temb = G.timestep_embed(5, 4)
    h = x @ net.in_aff[0].data + net.in_aff[1].data
    for k in range(net.blocks):
        agg = np.stack([np.mean([h[j] for j in sorted(nbrs[i])], axis=0) for i in range(len(h))])
        z = agg @ net.block_aff[k][0].data + net.block_aff[k][1].data
        z = z + temb @ net.block_temb[k][0].data + net.block_temb[k][1].data
        h = h + z / (1 + np.exp(-z))
    expected = h @ net.out_aff[0].data + net.out_aff[1].data
    assert np.abs(got - expected).max() < 1e-10


def test_fine_with_cross_matches_module_composition():
    tree = small_tree(seed=5)
    gops = G.GraphOps(tree)
    net = mini_fine(use_cross=True, seed=9, blocks=1)
    rng = np.random.default_rng(6)
    net.block_cross[0].wo.set_data(rng.standard_normal((4, 4)) * 0.3)
    parts = tiny_parts(seed=2)
    x = rng.standard_normal((tree.leaf_count(), 3))
    got = net.forward(gops, T.tensor(x), 2, parts).data

    h = T.tensor(x @ net.in_aff[0].data + net.in_aff[1].data)
    agg = gops.mean_neighbors(h)
    z = T.matmul(agg, net.block_aff[0][0].value) + net.block_aff[0][1].value
    temb = T.tensor(G.timestep_embed(2, 4)[None])
    z = z + (T.matmul(temb, net.block_temb[0][0].value) + net.block_temb[0][1].value)
    h = h + T.silu(z)
    h = cross_attention(h, parts.features, parts.mask, net.block_cross[0])
    expected = h.data @ net.out_aff[0].data + net.out_aff[1].data
    assert np.abs(got - expected).max() < 1e-12


def test_fine_permutation_equivariance():
    tree = small_tree(seed=7)
    n = tree.leaf_count()
    g = oc.dual_graph(tree)
    rng = np.random.default_rng(8)
    perm = rng.permutation(n)
    inv = np.argsort(perm)

    import scipy.sparse as sp

    def ops_from_edges(edges):
        rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
        cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
        deg = np.bincount(rows, minlength=n).astype(float)
        o = G.GraphOps.__new__(G.GraphOps)
        o.n = n
        o.mat = sp.csr_matrix((1.0 / deg[rows], (rows, cols)), shape=(n, n))
        o.mat_t = o.mat.T.tocsr()
        return o

    net = mini_fine(use_cross=True, seed=10)
    rng2 = np.random.default_rng(9)
    net.out_aff[0].set_data(rng2.standard_normal((4, 3)) * 0.4)
    parts = tiny_parts(seed=3)
    x = rng2.standard_normal((n, 3))

    out = net.forward(ops_from_edges(g.edges), T.tensor(x), 3, parts).data
    pedges = inv[g.edges]
    out_p = net.forward(ops_from_edges(pedges), T.tensor(x[perm]), 3, parts).data
    assert np.abs(out_p - out[perm]).max() < 1e-12


def test_fine_grad_check():
    tree = small_tree(seed=11, n=10)
    gops = G.GraphOps(tree)
    net = mini_fine(use_cross=True, seed=12)
    rng = np.random.default_rng(10)
    net.out_aff[0].set_data(rng.standard_normal((4, 3)) * 0.4)
    for k in range(net.blocks):
        net.block_cross[k].wo.set_data(rng.standard_normal((4, 4)) * 0.3)
    parts = tiny_parts(seed=5)
    x = T.tensor(rng.standard_normal((tree.leaf_count(), 3)))

    def model(inp):
        out = net.forward(gops, inp, 4, parts)
        return (out * out).mean()

    assert T.grad_check(model, net.parameters(), input=x) < 1e-4


def make_predictor(bias, width=3):
    p = G.SplitPredictor(in_width=width, init_seed=0, prefix=f"sp{bias}")
    p.w.set_data(np.zeros((width, 1)))
    p.b.set_data(np.array([float(bias)]))
    return p


def test_grow_no_logits_no_change():
    tree = small_tree(seed=13)
    feats = np.random.default_rng(0).standard_normal((tree.leaf_count(), 3))
    out, fo = G.grow(tree, feats, make_predictor(-100.0))
    assert out.same_topology(tree)
    assert np.array_equal(fo, feats)


def test_grow_all_splits_full_depth4_to_5():
    tree = oc.full_octree(4, feature_width=3)
    feats = np.zeros((4096, 3))
    out, fo = G.grow(tree, feats, make_predictor(100.0))
    assert out.leaf_count() == 8 * 4096
    assert out.max_depth == 5
    assert len(fo) == 8 * 4096


def test_grow_at_cap_errors():
    tree = oc.build_from_points(np.array([[0.0, 0.0, 0.0]]), 8, feature_width=3)
    with pytest.raises(ValueError):
        G.grow(tree, tree.leaf_features, make_predictor(100.0))


def test_grow_never_removes_leaves():
    rng = np.random.default_rng(14)
    tree = small_tree(seed=15)
    feats = rng.standard_normal((tree.leaf_count(), 3))
    pred = G.SplitPredictor(in_width=3, init_seed=3, prefix="spr")
    out, _ = G.grow(tree, feats, pred)
    assert out.leaf_count() >= tree.leaf_count()
    old = set(zip(tree.depths.tolist(), tree.mortons.tolist()))
    new = set(zip(out.depths.tolist(), out.mortons.tolist()))
    assert old <= new


def build_tiny_generator(use_cross=True, seed=21, live_heads=False):
    cfg = G.GenerationConfig(depth_start=2, depth_coarse=3, depth_fine=4, restart_step=2)
    schedule = dif.make_schedule(4, 0.05, 0.2)
    coarse = G.CoarseUNet(grid=4, in_width=2, width=2, temb_dim=4, part_width=5, d_k=2,
                          use_cross=use_cross, init_seed=seed, prefix="gc")
    refiner = G.FineGraphNet(in_width=2, width=4, blocks=1, temb_dim=4, part_width=5, d_k=2,
                             use_cross=use_cross, init_seed=seed, prefix="gr")
    fine = G.FineGraphNet(in_width=2, width=4, blocks=1, temb_dim=4, part_width=5, d_k=2,
                          use_cross=use_cross, init_seed=seed, prefix="gf")
    if live_heads:
        # untrained zero heads denoise everything to exactly zero; give the
        # nets some output so trajectories depend on seed
        rng = np.random.default_rng(seed + 1)
        coarse.out_conv[0].set_data(rng.standard_normal(coarse.out_conv[0].shape) * 0.2)
        refiner.out_aff[0].set_data(rng.standard_normal(refiner.out_aff[0].shape) * 0.2)
        fine.out_aff[0].set_data(rng.standard_normal(fine.out_aff[0].shape) * 0.2)
    preds = {d: make_predictor(100.0 if d < 3 else -100.0, width=2) for d in (2, 3)}
    return G.TwoScaleGenerator(coarse, refiner, fine, preds, schedule, cfg)


def test_generate_deterministic_per_seed():
    gen = build_tiny_generator(live_heads=True)
    parts = tiny_parts(seed=1)
    t1, i1 = gen.generate(parts, seed=5)
    t2, i2 = gen.generate(parts, seed=5)
    t3, _ = gen.generate(parts, seed=6)
    assert t1.same_topology(t2)
    assert np.array_equal(t1.leaf_features, t2.leaf_features)
    assert not np.array_equal(t1.leaf_features, t3.leaf_features)


def test_generate_conditioning_identity_with_zeroed_cross():
    gen = build_tiny_generator(use_cross=True, live_heads=True)
    # cross-attention output projections are still zero-init
    a, _ = gen.generate(tiny_parts(seed=1), seed=9)
    b, _ = gen.generate(tiny_parts(seed=2), seed=9)
    assert a.same_topology(b)
    assert np.array_equal(a.leaf_features, b.leaf_features)


def test_generate_depth_contract_with_forced_splits():
    gen = build_tiny_generator()
    for d in (2, 3):
        gen.predictors[d] = make_predictor(100.0, width=2)
    tree, info = gen.generate(tiny_parts(seed=1), seed=11)
    assert info["boundary_depth"] == 3
    assert info["final_depth"] == 4
    assert tree.max_depth == 4


def test_attention_snapshot_shapes():
    gen = build_tiny_generator()
    parts = tiny_parts(seed=1)
    tree, _ = gen.generate(parts, seed=2)
    weights = gen.attention_snapshot(tree, parts)
    assert len(weights) == 1
    assert weights[0].shape == (tree.leaf_count(), 3)
    assert np.abs(weights[0].sum(axis=1) - 1).max() < 1e-9
