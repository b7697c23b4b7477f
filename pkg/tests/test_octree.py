import numpy as np
import pytest

from octgen import octree as oc


def test_morton_origin_is_zero():
    for d in range(0, 9):
        assert int(oc.morton_encode(0, 0, 0, d)) == 0


def test_morton_single_bit_interleave():
    codes = {
        int(oc.morton_encode(1, 0, 0, 1)),
        int(oc.morton_encode(0, 1, 0, 1)),
        int(oc.morton_encode(0, 0, 1, 1)),
    }
    assert codes == {1, 2, 4}


def test_morton_roundtrip_exhaustive_depth2():
    r = np.arange(4, dtype=np.uint64)
    i, j, k = np.meshgrid(r, r, r, indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    codes = oc.morton_encode(i, j, k, 2)
    assert len(np.unique(codes)) == 64
    ii, jj, kk = oc.morton_decode(codes, 2)
    assert np.array_equal(ii, i) and np.array_equal(jj, j) and np.array_equal(kk, k)


def test_morton_zorder_matches_lexicographic_cells():
    # key order equals z-order traversal: sorting codes sorts cells in
    # (i, j, k) bit-interleaved order; spot-check depth 1 sequence
    cells = [(i, j, k) for i in range(2) for j in range(2) for k in range(2)]
    codes = [int(oc.morton_encode(*c, 1)) for c in cells]
    assert codes == list(range(8))


def test_morton_out_of_range():
    with pytest.raises(ValueError):
        oc.morton_encode(2, 0, 0, 1)


def test_full_octree_counts():
    assert oc.full_octree(0).leaf_count() == 1
    t2 = oc.full_octree(2)
    assert t2.leaf_count() == 64
    assert t2.node_count == 73
    t4 = oc.full_octree(4)
    assert t4.leaf_count() == 4096
    for d in range(5):
        assert oc.full_octree(d).node_count == (8 ** (d + 1) - 1) // 7


def test_build_single_point_chain():
    tree = oc.build_from_points(np.array([[0.01, 0.01, 0.01]]), 3)
    # one node per depth along a single path
    assert tree.node_count == 4
    assert tree.leaf_count() == 1
    assert tree.leaf_count(3) == 1


def test_build_empty_cloud_is_error():
    with pytest.raises(ValueError):
        oc.build_from_points(np.zeros((0, 3)), 3)


def test_build_out_of_bounds_point():
    with pytest.raises(ValueError):
        oc.build_from_points(np.array([[1.5, 0.0, 0.0]]), 2)


def test_build_dense_fill_occupies_all_4096():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1.0, 1.0, size=(100_000, 3))
    tree = oc.build_from_points(pts, 4)
    assert tree.leaf_count(4) == 4096


def test_every_point_lands_in_exactly_one_leaf():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1.0, 1.0, size=(500, 3))
    tree = oc.build_from_points(pts, 4)
    leaf_idx, offsets = oc.locate_leaves(tree, pts)
    assert (leaf_idx >= 0).all()
    assert (offsets >= -1.0 - 1e-12).all() and (offsets <= 1.0 + 1e-12).all()


def test_split_all_false_is_identity():
    tree = oc.full_octree(2, feature_width=3)
    out = oc.split(tree, np.zeros(64, dtype=bool))
    assert out.same_topology(tree)
    assert np.array_equal(out.leaf_features, tree.leaf_features)


def test_split_root_copies_features():
    root = oc.full_octree(0, feature_width=2)
    root = root.with_features(np.array([[3.5, -1.0]]))
    out = oc.split(root, np.array([True]))
    assert out.leaf_count() == 8
    assert out.max_depth == 1
    assert np.allclose(out.leaf_features, np.tile([3.5, -1.0], (8, 1)))


def test_split_twice_reaches_full_depth6():
    tree = oc.full_octree(4)
    tree = oc.split(tree, np.ones(tree.leaf_count(), dtype=bool))
    tree = oc.split(tree, np.ones(tree.leaf_count(), dtype=bool))
    assert tree.leaf_count() == 8**6
    assert tree.same_topology(oc.full_octree(6))


def test_split_leaf_count_law_random_masks():
    rng = np.random.default_rng(2)
    for _ in range(20):
        pts = rng.uniform(-1, 1, size=(rng.integers(1, 50), 3))
        tree = oc.build_from_points(pts, int(rng.integers(1, 4)))
        n = tree.leaf_count()
        mask = rng.random(n) < 0.4
        out = oc.split(tree, mask)
        assert out.leaf_count() == n - mask.sum() + 8 * mask.sum()


def test_split_at_depth_cap_errors():
    tree = oc.build_from_points(np.array([[0.0, 0.0, 0.0]]), 8)
    with pytest.raises(ValueError):
        oc.split(tree, np.ones(tree.leaf_count(), dtype=bool))


def test_parent_closure_on_random_builds():
    rng = np.random.default_rng(3)
    for _ in range(50):
        pts = rng.uniform(-1, 1, size=(rng.integers(1, 200), 3))
        tree = oc.build_from_points(pts, int(rng.integers(0, 6)))
        for d, m in zip(tree.depths, tree.mortons):
            if d > 0:
                assert tree._find([int(d) - 1], [int(m) >> 3])[0] >= 0


def brute_force_adjacency(tree):
    """O(n^2) geometric oracle: leaf cells sharing a face with positive area."""
    d, lo, size = tree.leaf_cells()
    n = len(d)
    edges = set()
    for a in range(n):
        for b in range(a + 1, n):
            amin, amax = lo[a], lo[a] + size[a]
            bmin, bmax = lo[b], lo[b] + size[b]
            for axis in range(3):
                o1, o2 = (axis + 1) % 3, (axis + 2) % 3
                touch = abs(amax[axis] - bmin[axis]) < 1e-12 or abs(bmax[axis] - amin[axis]) < 1e-12
                if not touch:
                    continue
                ov1 = min(amax[o1], bmax[o1]) - max(amin[o1], bmin[o1])
                ov2 = min(amax[o2], bmax[o2]) - max(amin[o2], bmin[o2])
                if ov1 > 1e-12 and ov2 > 1e-12:
                    edges.add((a, b, axis))
    return edges


def test_dual_graph_root_only_empty():
    g = oc.dual_graph(oc.full_octree(0))
    assert g.edge_count == 0


def test_dual_graph_full_depth1_has_12_edges():
    g = oc.dual_graph(oc.full_octree(1))
    assert g.edge_count == 12
    got = {(int(a), int(b), int(ax)) for (a, b), ax in zip(g.edges, g.axes)}
    assert got == brute_force_adjacency(oc.full_octree(1))


def test_dual_graph_matches_brute_force_on_random_adaptive_trees():
    rng = np.random.default_rng(4)
    for trial in range(12):
        pts = rng.uniform(-1, 1, size=(rng.integers(2, 40), 3))
        tree = oc.build_from_points(pts, 3)
        # randomly coarsen/extend by splitting a few leaves to create
        # cross-depth adjacency
        mask = rng.random(tree.leaf_count()) < 0.3
        if tree.max_depth >= oc.MAX_DEPTH:
            mask[:] = False
        tree = oc.split(tree, mask)
        g = oc.dual_graph(tree)
        got = {(int(a), int(b), int(ax)) for (a, b), ax in zip(g.edges, g.axes)}
        assert got == brute_force_adjacency(tree), f"trial {trial}"
        # symmetry and no self-edges are implied by the canonical form
        assert (g.edges[:, 0] < g.edges[:, 1]).all()


def test_dual_graph_cross_depth_edges_present():
    tree = oc.full_octree(1)
    mask = np.zeros(8, dtype=bool)
    mask[0] = True
    tree = oc.split(tree, mask)
    g = oc.dual_graph(tree)
    got = {(int(a), int(b), int(ax)) for (a, b), ax in zip(g.edges, g.axes)}
    assert got == brute_force_adjacency(tree)
    # the split corner cell contributes finer-to-coarser edges
    d, _ = tree.leaf_keys()
    fine = set(np.nonzero(d == 2)[0])
    coarse = set(np.nonzero(d == 1)[0])
    cross = [e for e in got if (e[0] in fine) != (e[1] in fine)]
    assert cross and coarse


def test_leaf_count_single_path():
    tree = oc.build_from_points(np.array([[-0.99, -0.99, -0.99]]), 3)
    assert tree.leaf_count(3) == 1
    assert tree.leaf_count(2) == 0


def test_adaptive_tree_sparser_than_full():
    rng = np.random.default_rng(5)
    # points on a plane: a genuinely sparse occupancy pattern
    pts = rng.uniform(-1, 1, size=(5000, 3))
    pts[:, 2] = 0.25
    tree = oc.build_from_points(pts, 6)
    assert tree.leaf_count(6) < 8**6


def test_locate_leaves_far_field_for_pruned_regions():
    tree = oc.build_from_points(np.array([[-0.9, -0.9, -0.9]]), 3)
    leaf_idx, _ = oc.locate_leaves(tree, np.array([[0.9, 0.9, 0.9], [-0.9, -0.9, -0.9]]))
    assert leaf_idx[0] == -1
    assert leaf_idx[1] >= 0


def test_grid_order_roundtrip():
    to_grid, to_morton = oc.full_grid_order(2)
    feats = np.arange(64.0).reshape(64, 1)
    grid = feats[to_grid]
    assert np.array_equal(grid[to_morton], feats)
    # cell (i, j, k) sits at grid row (i*g + j)*g + k
    tree = oc.full_octree(2)
    d, m = tree.leaf_keys()
    i, j, k = oc.morton_decode(m, 2)
    rows = (i.astype(int) * 4 + j.astype(int)) * 4 + k.astype(int)
    assert np.array_equal(grid[rows, 0], feats[:, 0])


def test_octree_serialization_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1, 1, size=(100, 3))
    tree = oc.build_from_points(pts, 4, feature_width=5)
    tree = tree.with_features(rng.standard_normal((tree.leaf_count(), 5)))
    path = tmp_path / "tree.oct"
    oc.save_octree(path, tree)
    loaded = oc.load_octree(path)
    assert loaded.same_topology(tree)
    assert np.array_equal(
        loaded.leaf_features.view(np.uint64), tree.leaf_features.view(np.uint64)
    )
    # save(load(x)) is byte-identical
    path2 = tmp_path / "tree2.oct"
    oc.save_octree(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_octree_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.oct"
    p.write_bytes(b"garbage bytes here")
    with pytest.raises(ValueError):
        oc.load_octree(p)
