import numpy as np
import pytest

from ssgen import numcore as nc
from ssgen.errors import ContractError, DataError
from ssgen.model import (
    SingleSampleModel,
    center_weights,
    classify,
    compute_centers,
    extract_features,
    infer_posterior_classifier,
    infer_prior_classifier,
    infer_source_classifier,
)
from ssgen.numcore import Tensor


@pytest.fixture
def model():
    return SingleSampleModel(num_classes=3, feature_dim=8, hidden=(16,), seed=0)


@pytest.fixture
def images():
    return np.random.default_rng(5).random((6, 28, 28)).astype(np.float32)


def test_parameter_shapes(model):
    shapes = {k: v.shape for k, v in model.named_parameters().items()}
    assert shapes["backbone.0.weight"] == (784, 16)
    assert shapes["backbone.1.weight"] == (16, 8)
    assert shapes["psi.1.weight"] == (16, 16)
    assert shapes["theta_a.0.weight"] == (16, 16)
    assert shapes["theta_a.1.bias"] == (16,)


def test_unknown_variant_rejected():
    with pytest.raises(ContractError):
        SingleSampleModel(3, variant="nope")


def test_features_are_per_row(model, images):
    batch = extract_features(model.backbone, images).data
    for i in range(len(images)):
        single = extract_features(model.backbone, images[i : i + 1]).data[0]
        np.testing.assert_allclose(batch[i], single, rtol=1e-6, atol=1e-6)


def test_features_reject_bad_shape(model):
    with pytest.raises(ContractError):
        extract_features(model.backbone, np.zeros((2, 27, 28)))


def test_features_finite_on_unit_cube(model):
    x = np.random.default_rng(0).random((32, 28, 28))
    f = extract_features(model.backbone, x)
    assert np.isfinite(f.data).all() and (f.data >= 0).all()


# ---------------------------------------------------------------- centres


def test_centers_average_domains_uniformly():
    feats = Tensor(np.array([[0.0], [2.0], [10.0], [1.0]]))
    labels = [0, 0, 0, 1]
    doms = ["a", "a", "b", "b"]
    centers = compute_centers(feats, labels, doms, ["a", "b"], 2).data
    # class 0: mean over a is 1, over b is 10 -> 5.5
    np.testing.assert_allclose(centers[:, 0], [5.5, 1.0])


def test_centers_order_and_duplication_invariant():
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((12, 4))
    labels = np.repeat([0, 1, 2], 4)
    doms = np.tile(["a", "b"], 6)
    base = compute_centers(Tensor(feats), labels, doms, ["a", "b"], 3).data
    perm = rng.permutation(12)
    shuffled = compute_centers(Tensor(feats[perm]), labels[perm], doms[perm], ["a", "b"], 3).data
    doubled = compute_centers(
        Tensor(np.concatenate([feats, feats])),
        np.concatenate([labels, labels]),
        np.concatenate([doms, doms]),
        ["a", "b"],
        3,
    ).data
    np.testing.assert_allclose(shuffled, base, atol=1e-6)
    np.testing.assert_allclose(doubled, base, atol=1e-6)


def test_centers_missing_class_is_data_error():
    with pytest.raises(DataError, match="class 1"):
        center_weights([0, 0], ["a", "a"], ["a"], 2)


def test_center_weights_rows_sum_to_one():
    w = center_weights([0, 1, 0, 1, 1], ["a", "a", "b", "b", "b"], ["a", "b"], 2)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)


# ---------------------------------------------------------------- generators


def test_generator_shapes(model):
    centers = Tensor(np.random.default_rng(0).random((3, 8)))
    assert infer_source_classifier(model.psi, centers).shape == (3, 8)
    assert infer_prior_classifier(model.theta_a, centers).shape == (3, 8)
    post = infer_posterior_classifier(model.theta_a, centers, Tensor(np.ones(8)))
    assert post.shape == (3, 8)
    batched = infer_posterior_classifier(model.theta_a, centers, Tensor(np.ones((5, 8))))
    assert batched.shape == (5, 3, 8)


def test_logvar_within_clamp(model):
    centers = Tensor(np.random.default_rng(0).random((3, 8)) * 1e3)
    g = infer_prior_classifier(model.theta_a, centers)
    assert g.logvar.data.min() >= -10 and g.logvar.data.max() <= 10


def test_prior_and_posterior_share_theta_a(model):
    centers = Tensor(np.random.default_rng(1).random((3, 8)))
    feat = Tensor(np.random.default_rng(2).random(8))
    prior_before = infer_prior_classifier(model.theta_a, centers).mean.data.copy()
    post_before = infer_posterior_classifier(model.theta_a, centers, feat).mean.data.copy()
    model.theta_a.layers[-1].bias.data[:8] += 1.0
    np.testing.assert_allclose(infer_prior_classifier(model.theta_a, centers).mean.data, prior_before + 1, rtol=1e-5)
    np.testing.assert_allclose(
        infer_posterior_classifier(model.theta_a, centers, feat).mean.data, post_before + 1, rtol=1e-5
    )


def test_posterior_depends_on_feature_only(model):
    rng = np.random.default_rng(3)
    w = Tensor(rng.random((3, 8)))
    feats = rng.random((4, 8))
    a = infer_posterior_classifier(model.theta_a, w, Tensor(feats[0])).mean.data
    b = infer_posterior_classifier(model.theta_a, w, Tensor(feats[1])).mean.data
    assert not np.allclose(a, b)
    batched = infer_posterior_classifier(model.theta_a, w, Tensor(feats)).mean.data
    np.testing.assert_allclose(batched[0], a, rtol=1e-6, atol=1e-6)


def test_posterior_rejects_wrong_feature_length(model):
    with pytest.raises(ContractError):
        infer_posterior_classifier(model.theta_a, Tensor(np.ones((3, 8))), Tensor(np.ones(7)))


def test_posterior_gradient_reaches_all_networks():
    with nc.float64_mode():
        m = SingleSampleModel(2, feature_dim=3, hidden=(8,), seed=1)
        img = np.random.default_rng(0).random((1, 28, 28))
        centers = Tensor(np.random.default_rng(1).random((2, 3)))

        def loss():
            f = extract_features(m.backbone, img)
            src = infer_source_classifier(m.psi, centers)
            w_s = nc.reparameterize(src, np.random.default_rng(7))
            post = infer_posterior_classifier(m.theta_a, w_s, f[0])
            return nc.sum_(classify(post.mean, f))

        params = [m.backbone.layers[-1].weight, m.psi.layers[0].weight, m.theta_a.layers[0].weight]
        nc.clear_tape()
        nc.backward(loss())
        for p in params:
            assert np.abs(p.grad).max() > 0
        assert nc.gradient_check(loss, params) < 1e-5


# ---------------------------------------------------------------- classify


def test_classify_orthonormal_argmax():
    w = Tensor(np.eye(4))
    for c in range(4):
        assert np.argmax(classify(w, Tensor(np.eye(4)[c : c + 1])).data) == c


def test_classify_linear_in_features():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((3, 5)))
    f = rng.standard_normal((2, 5))
    np.testing.assert_allclose(classify(w, Tensor(2 * f)).data, 2 * classify(w, Tensor(f)).data, rtol=1e-6)


def test_classify_batch_matches_loop():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((4, 3, 5))
    f = rng.standard_normal((4, 5))
    batched = classify(Tensor(w), Tensor(f)).data
    for b in range(4):
        np.testing.assert_allclose(batched[b], w[b] @ f[b], rtol=1e-5)


def test_classify_shape_mismatch():
    with pytest.raises(ContractError):
        classify(Tensor(np.ones((3, 5))), Tensor(np.ones((2, 4))))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, model):
    path = tmp_path / "m.npz"
    model.save(path, config_hash="abc")
    loaded = SingleSampleModel.load(path, expect={"feature_dim": 8, "num_classes": 3})
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(loaded.state_dict()[k], v)
    assert loaded.variant == model.variant


def test_checkpoint_rejects_mismatched_dims(tmp_path, model):
    path = tmp_path / "m.npz"
    model.save(path)
    with pytest.raises(DataError, match="feature_dim"):
        SingleSampleModel.load(path, expect={"feature_dim": 16})


def test_load_state_rejects_wrong_shapes(model):
    other = SingleSampleModel(num_classes=3, feature_dim=4, hidden=(16,), seed=0)
    with pytest.raises(DataError):
        model.load_state_dict(other.state_dict())


def test_checkpoint_unreadable(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a zip")
    with pytest.raises(DataError):
        SingleSampleModel.load(bad)
