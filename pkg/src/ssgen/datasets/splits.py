"""Pseudo-domain construction: annotation pass-through, random groups, k-means clusters."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ssgen.datasets.domains import DomainDataset, MultiDomainCorpus
from ssgen.datasets.glyphs import LabeledImage, stack_images
from ssgen.errors import ContractError

STRATEGIES = ("annotation", "cluster", "random")


def raw_pixel_features(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64).reshape(len(images), -1)


def orientation_features(images: np.ndarray) -> np.ndarray:
    """Class-agnostic orientation summary from second-order image moments.

    Returns ``(cos 2a, sin 2a) * eccentricity`` where ``a`` is the principal
    axis angle of the ink mass, so rotated copies of elongated glyphs cluster
    by angle rather than by class.
    """
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    ys, xs = np.mgrid[0:h, 0:w]
    mass = images.sum(axis=(1, 2)) + 1e-12
    cy = (images * ys).sum(axis=(1, 2)) / mass
    cx = (images * xs).sum(axis=(1, 2)) / mass
    dy = ys[None] - cy[:, None, None]
    dx = xs[None] - cx[:, None, None]
    mu20 = (images * dx**2).sum(axis=(1, 2)) / mass
    mu02 = (images * dy**2).sum(axis=(1, 2)) / mass
    mu11 = (images * dx * dy).sum(axis=(1, 2)) / mass
    spread = mu20 + mu02 + 1e-12
    return np.stack([(mu20 - mu02) / spread, 2 * mu11 / spread], axis=1)


FEATURE_FUNCTIONS = {"raw_pixels": raw_pixel_features, "orientation": orientation_features}


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None]
    return np.maximum(d, 0.0)


def kmeans_fit(
    features, k: int, max_iters: int = 100, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """k-means++ seeding followed by Lloyd iterations; returns (assignments, centroids)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError("features must be a 2-d array of equal-length vectors")
    n = len(x)
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)

    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    while len(chosen) < k:
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a centre; pick any unused index
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unused))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]])[:, 0])
    centers = x[chosen].copy()

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        dists = _sq_dists(x, centers)
        new_assign = dists.argmin(axis=1)
        for c in range(k):
            if not np.any(new_assign == c):
                own = dists[np.arange(n), new_assign]
                far = int(own.argmax())
                new_assign[far] = c
                centers[c] = x[far]
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            centers[c] = x[assign == c].mean(axis=0)
    return assign, centers


def kmeans(features, k: int, max_iters: int = 100, seed: int = 0) -> np.ndarray:
    return kmeans_fit(features, k, max_iters, seed)[0]


def kmeans_cost(features, assignments, centers) -> float:
    x = np.asarray(features, dtype=np.float64)
    return float(((x - centers[assignments]) ** 2).sum())


def _as_arrays(pool) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pool, DomainDataset):
        return pool.images, pool.labels
    return stack_images(list(pool))


def split_domains(
    pool: Sequence[LabeledImage] | DomainDataset,
    strategy: str,
    k: int | None = None,
    feature_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    seed: int = 0,
    tags: Sequence[str] | None = None,
) -> list[DomainDataset]:
    """Group a pool of images into pseudo-domains.

    ``annotation`` groups by the per-sample ``tags``; ``random`` deals a seeded
    permutation into ``k`` near-equal groups; ``cluster`` runs k-means on
    ``feature_fn(images)`` (raw pixels by default).
    """
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown split strategy {strategy!r}; expected one of {STRATEGIES}")
    images, labels = _as_arrays(pool)
    n = len(labels)

    if strategy == "annotation":
        if tags is None or len(tags) != n:
            raise ContractError("annotation split needs one domain tag per sample")
        order = list(dict.fromkeys(tags))
        tag_arr = np.asarray(tags)
        return [
            DomainDataset(t, images[tag_arr == t], labels[tag_arr == t]) for t in order
        ]

    if k is None or k < 1:
        raise ContractError(f"{strategy} split needs k >= 1")
    if k > n:
        raise ContractError(f"k={k} exceeds pool size {n}")
    if strategy == "random":
        perm = np.random.default_rng(seed).permutation(n)
        groups = [np.sort(g) for g in np.array_split(perm, k)]
        return [DomainDataset(f"random{i}", images[g], labels[g]) for i, g in enumerate(groups)]

    if k < 2:
        raise ContractError("cluster split needs k >= 2")
    feats = (feature_fn or raw_pixel_features)(images)
    assign = kmeans(feats, k, seed=seed)
    return [
        DomainDataset(f"cluster{c}", images[assign == c], labels[assign == c]) for c in range(k)
    ]


def regroup_sources(
    corpus: MultiDomainCorpus,
    strategy: str,
    k: int | None = None,
    feature_fn=None,
    seed: int = 0,
) -> MultiDomainCorpus:
    """Pool the source training data and re-split it; holdouts become the validation set."""
    train = corpus.train_sources()
    images = np.concatenate([d.images for d in train])
    labels = np.concatenate([d.labels for d in train])
    tags = [d.domain_id for d in train for _ in range(len(d))]
    pooled = DomainDataset("pooled", images, labels)
    groups = split_domains(pooled, strategy, k=k, feature_fn=feature_fn, seed=seed, tags=tags)
    return MultiDomainCorpus(
        source_domains=groups,
        target_domains=corpus.target_domains,
        val_fraction=corpus.val_fraction,
        validation=corpus.validation_domains(),
    )
