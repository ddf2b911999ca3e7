import struct
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssgen.datasets import (
    DomainDataset,
    EpisodeSampler,
    LabeledImage,
    build_rotation_domains,
    generate_glyph_corpus,
    kmeans,
    kmeans_cost,
    kmeans_fit,
    load_idx,
    raw_pixel_features,
    regroup_sources,
    rotate_image,
    rotate_images,
    sample_episode,
    split_domains,
    stack_images,
    write_idx,
)
from ssgen.errors import ContractError, DataError


@pytest.fixture(scope="module")
def corpus100():
    return generate_glyph_corpus(seed=3, n_per_class=100)


# ---------------------------------------------------------------- glyph corpus


def test_corpus_is_deterministic():
    a, _ = stack_images(generate_glyph_corpus(seed=11, n_per_class=3))
    b, _ = stack_images(generate_glyph_corpus(seed=11, n_per_class=3))
    assert a.tobytes() == b.tobytes()


def test_corpus_one_per_class():
    samples = generate_glyph_corpus(seed=0, n_per_class=1)
    assert len(samples) == 10
    assert sorted(s.label for s in samples) == list(range(10))


def test_corpus_pixel_range(corpus100):
    images, _ = stack_images(corpus100)
    assert images.min() >= 0.0 and images.max() <= 1.0


def test_classes_are_separated(corpus100):
    images, labels = stack_images(corpus100)
    means = [images[labels == c].mean(axis=0) for c in range(10)]
    inter = np.mean([np.linalg.norm(means[i] - means[j]) for i in range(10) for j in range(i + 1, 10)])
    # intra: distance between mean images of two disjoint halves of the same class
    halves = [
        np.linalg.norm(images[labels == c][:50].mean(0) - images[labels == c][50:].mean(0))
        for c in range(10)
    ]
    assert inter > np.mean(halves)

    flat = images.reshape(len(images), -1).astype(np.float64)
    sq = (flat * flat).sum(1)
    dist = np.sqrt(np.maximum(sq[:, None] - 2 * flat @ flat.T + sq[None], 0))
    same = labels[:, None] == labels[None]
    off_diag = ~np.eye(len(flat), dtype=bool)
    assert dist[~same].mean() > dist[same & off_diag].mean()


def test_labeled_image_rejects_bad_shape():
    with pytest.raises(ContractError):
        LabeledImage(np.zeros((27, 28)), 0)


# ---------------------------------------------------------------- IDX


def _write_raw(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I" + "I" * len(dims), magic, *dims) + payload)


def test_idx_single_image_scaling(tmp_path):
    pix = np.zeros((28, 28), np.uint8)
    pix[3, 4] = 255
    _write_raw(tmp_path / "img", 0x803, (1, 28, 28), pix.tobytes())
    _write_raw(tmp_path / "lab", 0x801, (1,), bytes([7]))
    (sample,) = load_idx(tmp_path / "img", tmp_path / "lab")
    assert sample.pixels[3, 4] == 1.0 and sample.label == 7
    assert sample.pixels.sum() == 1.0


def test_idx_count_mismatch(tmp_path):
    _write_raw(tmp_path / "img", 0x803, (2, 28, 28), bytes(2 * 784))
    _write_raw(tmp_path / "lab", 0x801, (1,), bytes([0]))
    with pytest.raises(DataError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_bad_magic(tmp_path):
    _write_raw(tmp_path / "img", 0x802, (1, 28, 28), bytes(784))
    _write_raw(tmp_path / "lab", 0x801, (1,), bytes([0]))
    with pytest.raises(DataError, match="byte offset 0"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_truncated(tmp_path):
    _write_raw(tmp_path / "img", 0x803, (2, 28, 28), bytes(784))
    _write_raw(tmp_path / "lab", 0x801, (2,), bytes([0, 1]))
    with pytest.raises(DataError, match="byte offset 800"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_idx(tmp_path / "nope", tmp_path / "nope2")


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    # pixels on the uint8 grid survive quantisation exactly
    samples = [
        LabeledImage((rng.integers(0, 256, (28, 28)) / 255.0).astype(np.float32), int(i % 10))
        for i in range(5)
    ]
    write_idx(samples, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l")
    assert [s.label for s in back] == [s.label for s in samples]
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.pixels, b.pixels)


# ---------------------------------------------------------------- rotation


def test_rotate_zero_is_identity(corpus100):
    img = corpus100[5]
    assert rotate_image(img, 0).pixels.tobytes() == img.pixels.tobytes()


def test_rotate_45_corners_are_zero_padded():
    img = LabeledImage(np.ones((28, 28), np.float32), 2)
    out = rotate_image(img, 45)
    for r, c in [(0, 0), (0, 27), (27, 0), (27, 27)]:
        assert out.pixels[r, c] == 0.0
    assert out.label == 2


def test_rotate_90_permutation_oracle():
    pix = np.zeros((28, 28), np.float32)
    pix[2, 20] = 1.0
    out = rotate_image(LabeledImage(pix, 0), 90).pixels
    # counter-clockwise quarter turn maps (r, c) -> (W-1-c, r)
    expected = np.zeros_like(pix)
    expected[27 - 20, 2] = 1.0
    np.testing.assert_array_equal(out, expected)


def test_bilinear_path_agrees_with_permutation_direction(corpus100):
    img = corpus100[42].pixels
    near = rotate_images(img[None], 89.999)[0]
    exact = rotate_images(img[None], 90)[0]
    np.testing.assert_allclose(near, exact, atol=1e-3)


def test_four_quarter_turns_identity(corpus100):
    img = corpus100[17]
    out = img
    for _ in range(4):
        out = rotate_image(out, 90)
    assert out.pixels.tobytes() == img.pixels.tobytes()


def test_rotate_rejects_bad_angle():
    with pytest.raises(ContractError):
        rotate_images(np.zeros((1, 28, 28)), 360)


def test_build_rotation_domains_defaults(corpus100):
    corpus = build_rotation_domains(corpus100)
    assert corpus.source_ids == ["rot015", "rot030", "rot060", "rot075"]
    assert [d.domain_id for d in corpus.target_domains] == ["rot000", "rot045", "rot090"]
    assert all(len(d) == len(corpus100) for d in corpus.source_domains + corpus.target_domains)
    holdout = corpus.source_domains[0].holdout
    assert len(holdout) == 100
    assert all(np.array_equal(d.holdout, holdout) for d in corpus.source_domains)


def test_build_rotation_domains_table8_variant(corpus100):
    corpus = build_rotation_domains(corpus100, [15, 30, 45, 60, 75], [0, 90])
    assert len(corpus.source_domains) == 5 and len(corpus.target_domains) == 2


def test_build_rotation_domains_overlap(corpus100):
    with pytest.raises(ContractError):
        build_rotation_domains(corpus100, [15, 30], [30, 90])


# ---------------------------------------------------------------- k-means and splits


def test_kmeans_single_cluster():
    x = np.random.default_rng(0).normal(size=(20, 3))
    assert np.all(kmeans(x, 1) == 0)


def test_kmeans_k_equals_n():
    x = np.random.default_rng(1).normal(size=(12, 2))
    assign, centers = kmeans_fit(x, 12, seed=4)
    assert sorted(assign.tolist()) == list(range(12))
    assert kmeans_cost(x, assign, centers) == pytest.approx(0.0, abs=1e-12)


def test_kmeans_two_blobs_perfect():
    rng = np.random.default_rng(2)
    x = np.concatenate([rng.normal(0, 1, (50, 2)), rng.normal(100, 1, (50, 2))])
    assign, centers = kmeans_fit(x, 2, seed=0)
    # brute-force oracle: nearest of the two true blob centres
    truth = np.argmin(np.linalg.norm(x[:, None] - np.array([[0, 0], [100, 100]])[None], axis=2), 1)
    agree = (assign == truth).mean()
    assert max(agree, 1 - agree) == 1.0


def test_kmeans_rejects_too_many_clusters():
    with pytest.raises(ContractError):
        kmeans(np.zeros((3, 2)), 4)


def test_random_split_partitions(corpus100):
    pool = corpus100[:300]
    groups = split_domains(pool, "random", k=3, seed=5)
    assert len(groups) == 3 and sum(len(g) for g in groups) == 300
    seen = np.concatenate([g.images.reshape(len(g), -1) for g in groups])
    orig = stack_images(pool)[0].reshape(300, -1)
    assert sorted(map(bytes, seen)) == sorted(map(bytes, orig))


def test_annotation_split_passthrough(corpus100):
    pool = corpus100[:30]
    tags = ["a"] * 10 + ["b"] * 15 + ["a"] * 5
    groups = split_domains(pool, "annotation", tags=tags)
    assert [g.domain_id for g in groups] == ["a", "b"]
    images, _ = stack_images(pool)
    np.testing.assert_array_equal(groups[0].images, np.concatenate([images[:10], images[25:]]))
    np.testing.assert_array_equal(groups[1].images, images[10:25])


def test_split_k_exceeds_pool(corpus100):
    with pytest.raises(ContractError):
        split_domains(corpus100[:5], "random", k=6)


def test_cluster_split_recovers_rotation(corpus100):
    base = corpus100
    rotated = [rotate_image(s, 90) for s in base]
    groups = split_domains(base + rotated, "cluster", k=2, feature_fn=raw_pixel_features, seed=0)
    images, _ = stack_images(base)
    upright = {bytes(im) for im in images.reshape(len(images), -1)}
    # oracle: the ground-truth rotation of every image
    hits = [sum(bytes(im) in upright for im in g.images.reshape(len(g), -1)) for g in groups]
    sizes = [len(g) for g in groups]
    agree = (hits[0] + (sizes[1] - hits[1])) / len(base + rotated)
    assert max(agree, 1 - agree) >= 0.95


def test_regroup_annotation_reproduces_sources(corpus100):
    corpus = build_rotation_domains(corpus100, [15, 30], [0])
    again = regroup_sources(corpus, "annotation")
    for old, new in zip(corpus.train_sources(), again.source_domains):
        assert old.domain_id == new.domain_id
        np.testing.assert_array_equal(old.images, new.images)
    assert len(again.validation_set()[1]) == len(corpus.validation_set()[1])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 1000))
def test_random_split_every_sample_once(k, seed):
    pool = DomainDataset("p", np.arange(40 * 784, dtype=np.float32).reshape(40, 28, 28) / 1e5, np.zeros(40))
    groups = split_domains(pool, "random", k=k, seed=seed)
    firsts = sorted(float(im[0, 0]) for g in groups for im in g.images)
    assert firsts == sorted(float(im[0, 0]) for im in pool.images)


# ---------------------------------------------------------------- episodes


@pytest.fixture(scope="module")
def rot_corpus(corpus100):
    return build_rotation_domains(corpus100)


def test_episode_structure(rot_corpus):
    ep = sample_episode(rot_corpus, np.random.default_rng(0))
    assert ep.meta_target_id in rot_corpus.source_ids
    assert ep.meta_target_id not in ep.meta_source_ids
    assert set(ep.meta_source_ids) | {ep.meta_target_id} == set(rot_corpus.source_ids)
    assert all(v.shape == (10, 10, 28, 28) for v in ep.support.values())
    assert ep.query_images.shape == (128, 28, 28) and ep.query_labels.shape == (128,)


def test_episode_query_disjoint_from_target_support(rot_corpus):
    ep = sample_episode(rot_corpus, np.random.default_rng(3))
    support = {bytes(im) for im in ep.support[ep.meta_target_id].reshape(-1, 784)}
    assert not any(bytes(im) in support for im in ep.query_images.reshape(-1, 784))


def test_episode_set_difference(rot_corpus):
    rng = np.random.default_rng(0)
    sampler = EpisodeSampler(rot_corpus.train_sources(), 10)
    while True:
        ep = sampler.sample(rng)
        if ep.meta_target_id == "rot030":
            break
    assert ep.meta_source_ids == ["rot015", "rot060", "rot075"]


def test_episode_insufficient_samples(corpus100):
    tiny = build_rotation_domains(corpus100[:200:20], [15, 30], [0], val_fraction=0.0)
    with pytest.raises(DataError, match="class"):
        sample_episode(tiny, np.random.default_rng(0), support_per_class=6)


def test_episode_sampling_deterministic(rot_corpus):
    a = sample_episode(rot_corpus, np.random.default_rng(9))
    b = sample_episode(rot_corpus, np.random.default_rng(9))
    assert a.meta_target_id == b.meta_target_id
    assert a.query_images.tobytes() == b.query_images.tobytes()


def test_meta_target_choice_is_uniform(rot_corpus):
    from scipy.stats import chisquare

    sampler = EpisodeSampler(rot_corpus.train_sources(), 10, support_per_class=1, batch=1)
    rng = np.random.default_rng(2024)
    picks = [sampler.choose_target(rng) for _ in range(10_000)]
    assert chisquare(np.bincount(picks, minlength=4)).pvalue > 0.01


def test_sample_uses_target_choice(rot_corpus):
    sampler = EpisodeSampler(rot_corpus.train_sources(), 10)
    t = sampler.choose_target(np.random.default_rng(8))
    assert sampler.sample(np.random.default_rng(8)).meta_target_id == sampler.sources[t].domain_id
