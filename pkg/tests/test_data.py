import numpy as np
import pytest

from octgen import data as D
from octgen import sdf as S


def test_sphere_debug_spec_sdf_at_origin():
    spec = S.ShapeSpec("sphere", 3)
    sdf = S.generate_shape(spec)
    r = sdf.parts[0][0].params["radius"]
    assert abs(sdf(np.zeros(3)) - (-r)) < 1e-12


def test_generate_shape_is_pure():
    a = S.generate_shape(S.ShapeSpec("table", 11))
    b = S.generate_shape(S.ShapeSpec("table", 11))
    rng = np.random.default_rng(0)
    p = rng.uniform(-1, 1, size=(200, 3))
    assert np.array_equal(a(p), b(p))
    c = S.generate_shape(S.ShapeSpec("table", 12))
    assert not np.array_equal(a(p), c(p))


def test_part_counts_per_category():
    for cat, expected in (("airplane", 4), ("car", 4), ("chair", 4), ("table", 3)):
        sdf = S.generate_shape(S.ShapeSpec(cat, 0))
        assert sdf.part_count == expected


def test_unknown_category_rejected():
    with pytest.raises(ValueError):
        S.ShapeSpec("boat", 0)


def test_shapes_fit_in_margin():
    rng = np.random.default_rng(1)
    p = rng.uniform(-1, 1, size=(20_000, 3))
    for cat in ("airplane", "car", "chair", "table"):
        for seed in range(3):
            sdf = S.generate_shape(S.ShapeSpec(cat, seed))
            inside = p[sdf(p) < 0]
            if len(inside):
                assert np.abs(inside).max() <= 0.9


def test_point_inside_table_top_labels_top():
    sdf = S.generate_shape(S.ShapeSpec("table", 5))
    top = sdf.parts[0][0]
    assert sdf.part_labels(top.center[None])[0] == 0


def test_sign_flip_bracketed_by_bisection():
    # a ray from the deep inside of the top slab to far outside must cross
    # the surface; bisection pins the crossing and the SDF is ~0 there
    sdf = S.generate_shape(S.ShapeSpec("table", 7))
    a = sdf.parts[0][0].center.copy()
    b = np.array([0.0, 0.99, 0.0])
    fa, fb = sdf(a), sdf(b)
    assert fa < 0 < fb
    for _ in range(60):
        mid = 0.5 * (a + b)
        if sdf(mid) < 0:
            a = mid
        else:
            b = mid
    assert np.linalg.norm(b - a) < 1e-6
    assert abs(sdf(0.5 * (a + b))) < 1e-5


def test_lipschitz_bound_sampled():
    rng = np.random.default_rng(2)
    sdf = S.generate_shape(S.ShapeSpec("chair", 3))
    p = rng.uniform(-1, 1, size=(2000, 3))
    q = p + rng.normal(0, 0.05, size=p.shape)
    q = np.clip(q, -1, 1)
    lip = np.abs(sdf(p) - sdf(q)) / np.maximum(np.linalg.norm(p - q, axis=1), 1e-12)
    assert lip.max() <= 1.0 + 1e-6


def test_sample_surface_sphere_radius():
    sdf = S.generate_shape(S.ShapeSpec("sphere", 1))
    r = sdf.parts[0][0].params["radius"]
    cloud = D.sample_surface(sdf, 500, seed=0)
    radii = np.linalg.norm(cloud.points, axis=1)
    assert np.abs(radii - r).max() < 1e-3


def test_sample_surface_band_and_labels():
    sdf = S.generate_shape(S.ShapeSpec("table", 2))
    cloud = D.sample_surface(sdf, 800, seed=1)
    assert np.abs(sdf(cloud.points)).max() < 1e-3
    assert set(np.unique(cloud.labels)) <= {0, 1, 2}
    assert cloud.part_count == 3


def test_sample_surface_deterministic_and_seed_sensitive():
    sdf = S.generate_shape(S.ShapeSpec("car", 4))
    a = D.sample_surface(sdf, 300, seed=9)
    b = D.sample_surface(sdf, 300, seed=9)
    c = D.sample_surface(sdf, 300, seed=10)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)


def test_two_seeds_matching_label_proportions():
    sdf = S.generate_shape(S.ShapeSpec("table", 6))
    a = D.sample_surface(sdf, 4000, seed=0)
    b = D.sample_surface(sdf, 4000, seed=1)
    pa = np.bincount(a.labels, minlength=3) / len(a)
    pb = np.bincount(b.labels, minlength=3) / len(b)
    assert np.abs(pa - pb).max() < 0.05


def test_fps_identity_when_m_equals_n():
    rng = np.random.default_rng(3)
    cloud = D.LabeledPointCloud(rng.uniform(-1, 1, (10, 3)), np.zeros(10, dtype=int), "sphere")
    out = D.fps_downsample(cloud, 10)
    assert sorted(map(tuple, out.points)) == sorted(map(tuple, cloud.points))


def test_fps_collinear_extremes():
    pts = np.array([[0.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]])
    cloud = D.LabeledPointCloud(pts, np.zeros(3, dtype=int), "sphere")
    out = D.fps_downsample(cloud, 2)
    assert {tuple(p) for p in out.points} == {(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)}


def test_fps_beats_random_subsets_on_min_distance():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1, 1, size=(4096, 3))
    cloud = D.LabeledPointCloud(pts, np.zeros(4096, dtype=int), "sphere")
    sub = D.fps_downsample(cloud, 64)

    def min_pairwise(x):
        d = np.linalg.norm(x[:, None] - x[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        return d.min()

    fps_min = min_pairwise(sub.points)
    for _ in range(100):
        idx = rng.choice(4096, 64, replace=False)
        assert fps_min >= min_pairwise(pts[idx])


def test_fps_permutation_stable():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1, 1, size=(100, 3))
    cloud = D.LabeledPointCloud(pts, np.zeros(100, dtype=int), "sphere")
    a = D.fps_downsample(cloud, 16)
    b = D.fps_downsample(cloud, 16)
    assert np.array_equal(a.points, b.points)


def test_fps_m_too_large():
    cloud = D.LabeledPointCloud(np.zeros((3, 3)), np.zeros(3, dtype=int), "sphere")
    with pytest.raises(D.DataError):
        D.fps_downsample(cloud, 4)


def test_cloud_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    cloud = D.LabeledPointCloud(
        rng.uniform(-1, 1, size=(50, 3)), rng.integers(0, 3, size=50), "table"
    )
    p = tmp_path / "c.xyzl"
    D.save_cloud(p, cloud)
    loaded = D.load_cloud(p)
    assert loaded.category == "table"
    assert np.array_equal(loaded.labels, cloud.labels)
    assert np.abs(loaded.points - cloud.points).max() < 1e-12


def test_cloud_line_format(tmp_path):
    p = tmp_path / "c.xyzl"
    p.write_text("# category table\n0.1 0.2 0.3 1\n")
    loaded = D.load_cloud(p)
    assert np.allclose(loaded.points, [[0.1, 0.2, 0.3]])
    assert loaded.labels[0] == 1


def test_cloud_bad_label_names_line(tmp_path):
    p = tmp_path / "c.xyzl"
    p.write_text("# category table\n0 0 0 0\n0 0 0 9\n")
    with pytest.raises(D.DataError, match="label 9"):
        D.load_cloud(p)


def test_cloud_malformed_line(tmp_path):
    p = tmp_path / "c.xyzl"
    p.write_text("# category table\n0 0 0\n")
    with pytest.raises(D.DataError, match=":2"):
        D.load_cloud(p)


def test_cloud_out_of_range_coordinate(tmp_path):
    p = tmp_path / "c.xyzl"
    p.write_text("# category table\n2.0 0 0 0\n")
    with pytest.raises(D.DataError, match="outside"):
        D.load_cloud(p)


def test_make_corpus_and_manifest(tmp_path):
    manifest = D.make_corpus(tmp_path, "table", 3, base_seed=40, dense_points=2000, cloud_points=64)
    entries = D.read_manifest(manifest)
    assert len(entries) == 3
    for e in entries:
        cloud = D.load_cloud(tmp_path / e.path)
        assert len(cloud) == 64
        assert cloud.category == "table"
    h1 = D.corpus_hash(manifest)
    # regenerating into a second directory is byte-identical
    manifest2 = D.make_corpus(
        tmp_path / "again", "table", 3, base_seed=40, dense_points=2000, cloud_points=64
    )
    assert D.corpus_hash(manifest2) == h1


def test_make_corpus_rejects_empty(tmp_path):
    with pytest.raises(D.DataError):
        D.make_corpus(tmp_path, "table", 0, 0, 100, 10)


def test_majority_leaf_labels():
    from octgen import octree as oc

    pts = np.array([[-0.9, -0.9, -0.9], [-0.85, -0.9, -0.9], [0.9, 0.9, 0.9]])
    labels = np.array([1, 1, 2])
    cloud = D.LabeledPointCloud(pts, labels, "table")
    tree = oc.build_from_points(pts, 2)
    got = D.majority_leaf_labels(tree, cloud)
    assert set(got) <= {-1, 1, 2}
    assert (got >= 0).sum() >= 2
