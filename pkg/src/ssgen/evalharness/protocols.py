"""Experiment protocols: rotation benchmark, leave-one-out, split study, Tent grid, visualization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ssgen import numcore as nc
from ssgen.baselines import ABLATION_FLAGS, BaselineKind, TentConfig, tent_accuracy, train_erm
from ssgen.datasets import (
    FEATURE_FUNCTIONS,
    DomainDataset,
    LabeledImage,
    MultiDomainCorpus,
    build_rotation_domains,
    generate_glyph_corpus,
    load_idx,
    regroup_sources,
)
from ssgen.errors import ConfigError, ContractError
from ssgen.evalharness.inference import InferenceContext, accuracy, predict_batch
from ssgen.evalharness.report import MetricsReport
from ssgen.evalharness.streams import STREAM_MODES, StreamSpec, build_streams
from ssgen.evalharness.viz import export_scatter, project_2d
from ssgen.model import extract_features
from ssgen.trainer import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

AMORTIZED_METHODS = ("full", "invariant", "no_hierarchy", "no_prior_supervision", "non_meta")
METHODS = AMORTIZED_METHODS + ("erm",)
SPLIT_STRATEGIES = ("annotation", "cluster", "random")


@dataclass
class DataConfig:
    n_per_class: int = 200
    source_angles: tuple[float, ...] = (15, 30, 60, 75)
    target_angles: tuple[float, ...] = (0, 90)
    val_fraction: float = 0.1
    seed: int = 0
    eval_per_domain: int = 0  # 0 evaluates every target sample
    idx_images: str = ""  # optional IDX base corpus instead of synthetic glyphs
    idx_labels: str = ""

    def __post_init__(self) -> None:
        self.source_angles = tuple(self.source_angles)
        self.target_angles = tuple(self.target_angles)
        if self.n_per_class < 1:
            raise ConfigError("data.n_per_class must be >= 1")
        if self.eval_per_domain < 0:
            raise ConfigError("data.eval_per_domain must be >= 0")
        if bool(self.idx_images) != bool(self.idx_labels):
            raise ConfigError("data.idx_images and data.idx_labels must be given together")


_BASE_CACHE: dict[tuple, list[LabeledImage]] = {}


def base_corpus(data: DataConfig) -> list[LabeledImage]:
    """Synthetic glyphs, or the first ``n_per_class`` images of each class from IDX files."""
    key = (data.n_per_class, data.seed, data.idx_images, data.idx_labels)
    if key not in _BASE_CACHE:
        if data.idx_images:
            samples = load_idx(data.idx_images, data.idx_labels)
            counts: dict[int, int] = {}
            picked = []
            for s in samples:
                if counts.get(s.label, 0) < data.n_per_class:
                    counts[s.label] = counts.get(s.label, 0) + 1
                    picked.append(s)
            _BASE_CACHE[key] = picked
        else:
            _BASE_CACHE[key] = generate_glyph_corpus(data.seed, data.n_per_class)
    return _BASE_CACHE[key]


def build_corpus(data: DataConfig, source_angles=None, target_angles=None) -> MultiDomainCorpus:
    return build_rotation_domains(
        base_corpus(data),
        source_angles=data.source_angles if source_angles is None else source_angles,
        target_angles=data.target_angles if target_angles is None else target_angles,
        val_fraction=data.val_fraction,
        seed=data.seed,
    )


def corpus_key(prefix: str, data: DataConfig) -> str:
    """Cache key for fits: evaluation subsampling does not change the training corpus."""
    return f"{prefix}:{replace(data, eval_per_domain=0)!r}"


def eval_subset(domain: DomainDataset, limit: int, seed: int) -> DomainDataset:
    """A fixed random subset of a target domain (the whole domain when ``limit`` is 0)."""
    if limit == 0 or limit >= len(domain):
        return domain
    idx = np.sort(np.random.default_rng(seed).choice(len(domain), limit, replace=False))
    return domain.subset(idx)


# ---------------------------------------------------------------- fitted methods


@dataclass
class FittedMethod:
    method: str
    model: object
    predict: Callable[[np.ndarray], np.ndarray]
    history: list[dict] = field(default_factory=list)
    context: InferenceContext | None = None


def method_config(method: str, train_cfg: TrainConfig, seed: int) -> TrainConfig:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    cfg = train_cfg.replace(seed=seed)
    if method in ("full", "erm"):
        return cfg
    return cfg.replace(**ABLATION_FLAGS[BaselineKind(method)])


def fit_method(method: str, corpus: MultiDomainCorpus, train_cfg: TrainConfig, seed: int) -> FittedMethod:
    cfg = method_config(method, train_cfg, seed)
    if method == "erm":
        result = train_erm(corpus, cfg)
        return FittedMethod(method, result.model, result.model.predict, result.history)
    result: TrainResult = train(corpus, cfg)
    ctx = InferenceContext(
        result.model, corpus, support_per_class=cfg.eval_support_per_class, eval_seed=cfg.eval_seed
    )
    return FittedMethod(method, result.model, lambda images: predict_batch(ctx, images)[0], result.history, ctx)


class ModelCache:
    """Reuse fitted methods across protocols that share data, config and seed."""

    def __init__(self) -> None:
        self._store: dict[tuple, FittedMethod] = {}
        self.fits = 0

    def get(self, method: str, corpus_key: str, corpus: MultiDomainCorpus, train_cfg: TrainConfig, seed: int) -> FittedMethod:
        key = (method, corpus_key, repr(train_cfg.replace(seed=0)), seed)
        if key not in self._store:
            log.info("fitting %s on %s, seed %d", method, corpus_key, seed)
            self._store[key] = fit_method(method, corpus, train_cfg, seed)
            self.fits += 1
        return self._store[key]


def _fitter(cache: ModelCache | None, corpus_key: str, corpus, train_cfg):
    def get(method: str, seed: int) -> FittedMethod:
        if cache is None:
            return fit_method(method, corpus, train_cfg, seed)
        return cache.get(method, corpus_key, corpus, train_cfg, seed)

    return get


def _score(fitted: FittedMethod, domain: DomainDataset) -> float:
    return accuracy(fitted.predict(domain.images), domain.labels)


# ---------------------------------------------------------------- protocols


def run_rotation_benchmark(
    data: DataConfig,
    train_cfg: TrainConfig,
    methods: Sequence[str] = ("full",),
    seeds: Sequence[int] = range(5),
    cache: ModelCache | None = None,
    in_distribution: bool = True,
) -> MetricsReport:
    """In-distribution (source held-out splits) and out-of-distribution (target angles) accuracy."""
    corpus = build_corpus(data)
    fit = _fitter(cache, corpus_key("rotation", data), corpus, train_cfg)
    targets = [eval_subset(d, data.eval_per_domain, data.seed) for d in corpus.target_domains]
    report = MetricsReport()
    for seed in seeds:
        for method in methods:
            fitted = fit(method, seed)
            if in_distribution:
                for src in corpus.source_domains:
                    held = src.holdout_view()
                    if held is not None:
                        report.add("rotation_id", method, src.domain_id, seed, _score(fitted, held))
            for tgt in targets:
                report.add("rotation_ood", method, tgt.domain_id, seed, _score(fitted, tgt))
    return report


def run_leave_one_out(
    data: DataConfig,
    train_cfg: TrainConfig,
    methods: Sequence[str] = ("full",),
    seeds: Sequence[int] = range(5),
    cache: ModelCache | None = None,
) -> MetricsReport:
    """Hold out each angle in turn, train on all the others, score the held-out angle."""
    angles = tuple(data.source_angles) + tuple(data.target_angles)
    report = MetricsReport()
    for held in angles:
        corpus = build_corpus(data, tuple(a for a in angles if a != held), (held,))
        fit = _fitter(cache, corpus_key(f"loo{held}", data), corpus, train_cfg)
        target = eval_subset(corpus.target_domains[0], data.eval_per_domain, data.seed)
        for seed in seeds:
            for method in methods:
                report.add("leave_one_out", method, target.domain_id, seed, _score(fit(method, seed), target))
    return report


def split_corpus(data: DataConfig, strategy: str, k: int | None = None, feature: str = "orientation") -> MultiDomainCorpus:
    """Pool the rotation sources and regroup them; ``annotation`` keeps the true angles."""
    if strategy not in SPLIT_STRATEGIES:
        raise ConfigError(f"unknown split strategy {strategy!r}; expected one of {SPLIT_STRATEGIES}")
    if feature not in FEATURE_FUNCTIONS:
        raise ConfigError(f"unknown split feature {feature!r}; expected one of {sorted(FEATURE_FUNCTIONS)}")
    corpus = build_corpus(data)
    return regroup_sources(corpus, strategy, k or len(data.source_angles), FEATURE_FUNCTIONS[feature], data.seed)


def run_split_study(
    data: DataConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int] = range(5),
    strategies: Sequence[str] = SPLIT_STRATEGIES,
    k: int | None = None,
    feature: str = "orientation",
    cache: ModelCache | None = None,
) -> MetricsReport:
    """The full method trained under each way of grouping the same pooled source data."""
    report = MetricsReport()
    original = build_corpus(data)
    for strategy in strategies:
        if strategy == "annotation":
            # regrouping by the true tags reproduces the original sources exactly,
            # so fits are shared with the rotation benchmark
            corpus, key = original, corpus_key("rotation", data)
        else:
            corpus, key = split_corpus(data, strategy, k, feature), corpus_key(f"split:{strategy}:{k}:{feature}", data)
        fit = _fitter(cache, key, corpus, train_cfg)
        targets = [eval_subset(d, data.eval_per_domain, data.seed) for d in corpus.target_domains]
        for seed in seeds:
            fitted = fit("full", seed)
            for tgt in targets:
                report.add("split_study", strategy, tgt.domain_id, seed, _score(fitted, tgt))
    return report


@dataclass
class TentGrid:
    batch_sizes: tuple[int, ...] = (1, 32, 128)
    steps: tuple[int, ...] = (1, 10, 100)
    modes: tuple[str, ...] = STREAM_MODES
    lr: float = 1e-3

    def __post_init__(self) -> None:
        self.batch_sizes = tuple(self.batch_sizes)
        self.steps = tuple(self.steps)
        self.modes = tuple(self.modes)
        for m in self.modes:
            if m not in STREAM_MODES:
                raise ConfigError(f"unknown stream mode {m!r}")


def tent_method_name(batch_size: int, steps: int) -> str:
    return f"tent_b{batch_size}_s{steps}"


def run_tent_comparison(
    data: DataConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int] = range(5),
    grid: TentGrid | None = None,
    cache: ModelCache | None = None,
) -> MetricsReport:
    """Tent over the batch-size x steps x stream-mode grid, and the full method on the same streams.

    Every row scores the whole stream, so ``target_domain`` is ``all``.
    """
    grid = grid or TentGrid()
    corpus = build_corpus(data)
    fit = _fitter(cache, corpus_key("rotation", data), corpus, train_cfg)
    targets = [eval_subset(d, data.eval_per_domain, data.seed) for d in corpus.target_domains]
    ids = tuple(d.domain_id for d in targets)
    report = MetricsReport()
    for seed in seeds:
        erm = fit("erm", seed)
        full = fit("full", seed)
        for mode in grid.modes:
            experiment = f"tent_{mode}"
            streams = build_streams(targets, StreamSpec(mode, ids, max(grid.batch_sizes), seed))
            images = np.concatenate([s.images for s in streams])
            labels = np.concatenate([s.all_labels for s in streams])
            report.add(experiment, "full", "all", seed, accuracy(full.predict(images), labels))
            report.add(experiment, "erm", "all", seed, accuracy(erm.predict(images), labels))
            for b in grid.batch_sizes:
                for steps in grid.steps:
                    cfg = TentConfig(batch_size=b, steps=steps, lr=grid.lr, stream_mode=mode)
                    report.add(experiment, tent_method_name(b, steps), "all", seed, tent_accuracy(erm.model, targets, cfg, seed))
    return report


# ---------------------------------------------------------------- visualization


def visualize_adaptation(
    full: FittedMethod,
    baseline: FittedMethod,
    target: DomainDataset,
    sample_indices: Sequence[int],
    out_dir,
    n_context: int = 200,
    seed: int = 0,
    config_hash: str = "",
) -> list[Path]:
    """One SVG for the baseline's fixed classifier plus one per requested test sample.

    Each scatter shows target features (red, shaped by class) and classifier
    prototypes (blue) in a PCA plane fitted to that figure's points.
    """
    if full.context is None or baseline.context is None:
        raise ContractError("visualization needs two amortized models")
    if not sample_indices:
        raise ContractError("request at least one sample")
    for i in sample_indices:
        if not 0 <= i < len(target):
            raise ContractError(f"sample index {i} outside target domain of size {len(target)}")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    others = np.setdiff1d(np.arange(len(target)), sample_indices)
    context = rng.choice(others, min(n_context, len(others)), replace=False)
    shown = np.concatenate([np.asarray(sample_indices), context])
    images, labels = target.images[shown], target.labels[shown]
    paths = []

    with nc.no_grad():
        base_feats = extract_features(baseline.model.backbone, images).data
    fixed = baseline.context.classifier_for(images[0])
    proj = project_2d(base_feats, fixed)
    path = out_dir / f"{target.domain_id}_baseline.svg"
    paths.append(
        export_scatter(path, proj.features, labels, proj.prototypes, title=f"{target.domain_id}: fixed classifier", config_hash=config_hash)
    )

    with nc.no_grad():
        feats = extract_features(full.model.backbone, images).data
    for pos, i in enumerate(sample_indices):
        adapted = full.context.classifier_for(target.images[i])
        proj = project_2d(feats, adapted)
        path = out_dir / f"{target.domain_id}_sample{i:05d}.svg"
        title = f"{target.domain_id}: classifier adapted to sample {i} (label {target.labels[i]})"
        paths.append(
            export_scatter(path, proj.features, labels, proj.prototypes, title=title, config_hash=config_hash, highlight=pos)
        )
    return paths
