import numpy as np
import pytest

from octgen import tensor as T
from octgen.data import LabeledPointCloud
from octgen.parts import PartEncoder, encode_parts


def make_cloud(points, labels, category="table"):
    return LabeledPointCloud(np.asarray(points, float), np.asarray(labels, int), category)


def test_constant_part_rows_equal_mlp_of_point():
    enc = PartEncoder(feature_width=6, hidden=8, init_seed=1)
    p = np.array([0.1, -0.2, 0.3])
    cloud = make_cloud([p, p, p, [0.5, 0.5, 0.5]], [1, 1, 1, 0])
    feats = enc.encode(cloud)
    single = T.mlp_forward(T.tensor(p[None]), enc.layers, activation="silu").data[0]
    assert np.allclose(feats.features.data[1], single)


def test_permutation_invariance_exact():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (40, 3))
    labels = rng.integers(0, 3, 40)
    enc = PartEncoder(feature_width=8, hidden=16, init_seed=2)
    a = enc.encode(make_cloud(pts, labels))
    perm = rng.permutation(40)
    b = enc.encode(make_cloud(pts[perm], labels[perm]))
    assert np.array_equal(a.features.data, b.features.data)
    assert np.array_equal(a.mask, b.mask)


def test_duplication_idempotent():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, (25, 3))
    labels = rng.integers(0, 3, 25)
    enc = PartEncoder(feature_width=8, hidden=16, init_seed=3)
    a = enc.encode(make_cloud(pts, labels))
    b = enc.encode(make_cloud(np.tile(pts, (2, 1)), np.tile(labels, 2)))
    assert np.array_equal(a.features.data, b.features.data)


def test_empty_part_flagged_zero_row():
    enc = PartEncoder(feature_width=4, hidden=8, init_seed=4)
    cloud = make_cloud([[0.1, 0.2, 0.3]], [0])
    feats = enc.encode(cloud)
    assert feats.part_count == 3
    assert list(feats.mask) == [True, False, False]
    assert np.array_equal(feats.features.data[1], np.zeros(4))
    assert np.array_equal(feats.features.data[2], np.zeros(4))


def test_row_count_matches_category():
    enc = PartEncoder(feature_width=4, hidden=8, init_seed=5)
    for cat, p in (("airplane", 4), ("car", 4), ("chair", 4), ("table", 3)):
        cloud = make_cloud([[0.0, 0.0, 0.0]], [0], category=cat)
        assert enc.encode(cloud).part_count == p


def test_translation_changes_features():
    # absolute position is intentionally encoded: translating the whole
    # cloud must change the output
    rng = np.random.default_rng(2)
    pts = rng.uniform(-0.5, 0.5, (30, 3))
    labels = rng.integers(0, 3, 30)
    enc = PartEncoder(feature_width=8, hidden=16, init_seed=6)
    a = enc.encode(make_cloud(pts, labels))
    b = enc.encode(make_cloud(pts + 0.3, labels))
    assert not np.allclose(a.features.data, b.features.data)


def test_encoder_grad_flow_single_point():
    enc = PartEncoder(feature_width=4, hidden=6, init_seed=7)
    cloud = make_cloud([[0.2, -0.1, 0.4]], [0])

    def model(_):
        feats = enc.encode(cloud)
        return (feats.features * feats.features).mean()

    err = T.grad_check(model, enc.parameters(), input=T.tensor([0.0]))
    assert err < 1e-6


def test_encoder_grad_flow_random_cloud():
    rng = np.random.default_rng(3)
    enc = PartEncoder(feature_width=5, hidden=7, init_seed=8)
    cloud = make_cloud(rng.uniform(-1, 1, (12, 3)), rng.integers(0, 3, 12))

    def model(_):
        feats = enc.encode(cloud)
        return (feats.features * feats.features).mean()

    err = T.grad_check(model, enc.parameters(), input=T.tensor([0.0]))
    assert err < 1e-4


def test_encoder_corrupted_backward_detected():
    rng = np.random.default_rng(4)
    enc = PartEncoder(feature_width=5, hidden=7, init_seed=9)
    cloud = make_cloud(rng.uniform(-1, 1, (12, 3)), rng.integers(0, 3, 12))

    def corrupted(x):
        # wrong backward on purpose: doubles the gradient
        return T.Tensor(x.data, requires_grad=True, parents=(x,), backward_fn=lambda g: (2.0 * g,))

    def model(_):
        feats = enc.encode(cloud)
        return (corrupted(feats.features) * feats.features).mean()

    err = T.grad_check(model, enc.parameters(), input=T.tensor([0.0]))
    assert err > 1e-2


def test_part_feature_text_export():
    enc = PartEncoder(feature_width=3, hidden=4, init_seed=10)
    cloud = make_cloud([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]], [0, 1])
    feats = enc.encode(cloud, source_id="table_0001")
    text = feats.to_text()
    assert "table_0001" in text
    assert len(text.strip().splitlines()) == 4
