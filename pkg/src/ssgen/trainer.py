"""Episodic meta-training of the single-sample classifier generators."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ssgen import numcore as nc
from ssgen.datasets import DomainDataset, Episode, EpisodeSampler, MultiDomainCorpus
from ssgen.errors import ConfigError, ContractError, NumericFailure
from ssgen.model import (
    SingleSampleModel,
    classify,
    compute_centers,
    extract_features,
    infer_posterior_classifier,
    infer_prior_classifier,
    infer_source_classifier,
)
from ssgen.numcore import Tensor, gaussian_kl, gaussian_kl_terms, reparameterize

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "ce_posterior", "ce_prior", "kl", "total", "val_accuracy")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch: int = 128
    support_per_class: int = 10
    lr_backbone: float = 5e-5
    lr_heads: float = 1e-4
    mc_M: int = 1
    mc_N: int = 1
    mc_L: int = 1
    kl_weight: float = 1.0
    kl_per_entry: bool = True  # average the KL over the C*d classifier entries instead of summing
    kl_warmup: int = 500  # iterations over which the KL weight ramps linearly from 0
    pretrain_iterations: int = 1000  # supervised warm start of the backbone on pooled sources
    seed: int = 0
    val_every: int = 100
    feature_dim: int = 64
    hidden: tuple[int, ...] = (256, 128)
    logvar_init: float = -4.0
    eval_support_per_class: int = 10
    eval_seed: int = 0
    # objective switches; each ablation flips exactly the ones it removes
    hierarchical: bool = True
    prior_supervision: bool = True
    sample_conditioning: bool = True
    meta_learning: bool = True

    def __post_init__(self) -> None:
        self.hidden = tuple(self.hidden)
        for name in ("iterations", "batch", "support_per_class", "mc_M", "mc_L", "val_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.mc_N < 0:
            raise ConfigError("train.mc_N must be >= 0")
        if self.lr_backbone <= 0 or self.lr_heads <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.kl_warmup < 0 or self.pretrain_iterations < 0:
            raise ConfigError("train.kl_warmup and train.pretrain_iterations must be >= 0")
        if self.kl_weight < 0:
            raise ConfigError("train.kl_weight must be >= 0")

    def kl_weight_at(self, iteration: int) -> float:
        if self.kl_warmup == 0:
            return self.kl_weight
        return self.kl_weight * min(1.0, iteration / self.kl_warmup)

    @property
    def variant(self) -> str:
        if not self.sample_conditioning:
            return "invariant"
        if not self.meta_learning:
            return "non_meta"
        if not self.hierarchical:
            return "no_hierarchy"
        if not self.prior_supervision:
            return "no_prior_supervision"
        return "full"

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class LossBreakdown:
    ce_posterior: float
    ce_prior: float
    kl: float
    total: float


@dataclass
class TaskBatch:
    """Everything one optimisation step consumes.

    ``prior_support`` feeds the meta-prior centres, ``source_support`` the
    source centres; both map domain id to ``(C, k, 28, 28)`` images.
    """

    prior_support: dict[str, np.ndarray]
    source_support: dict[str, np.ndarray]
    query_images: np.ndarray
    query_labels: np.ndarray

    @classmethod
    def from_episode(cls, ep: Episode) -> "TaskBatch":
        return cls(
            prior_support={ep.meta_target_id: ep.support[ep.meta_target_id]},
            source_support={d: ep.support[d] for d in ep.meta_source_ids},
            query_images=ep.query_images,
            query_labels=ep.query_labels,
        )


@dataclass
class TrainResult:
    model: SingleSampleModel
    history: list[dict] = field(default_factory=list)
    best_val_accuracy: float = float("nan")
    best_iteration: int = 0


def build_model(num_classes: int, config: TrainConfig, rng) -> SingleSampleModel:
    return SingleSampleModel(
        num_classes, config.feature_dim, config.hidden, config.variant, rng, config.logvar_init
    )


def _support_features(model: SingleSampleModel, task: TaskBatch):
    """One backbone pass over every support set and the query batch."""
    domains = list(dict.fromkeys([*task.prior_support, *task.source_support]))
    blocks, labels, tags = [], [], []
    for dom in domains:
        sup = task.prior_support.get(dom)
        if sup is None:
            sup = task.source_support[dom]
        c, k = sup.shape[:2]
        blocks.append(sup.reshape(c * k, 28, 28))
        labels.append(np.repeat(np.arange(c), k))
        tags.extend([dom] * (c * k))
    n_support = sum(len(b) for b in blocks)
    feats = extract_features(model.backbone, np.concatenate(blocks + [task.query_images]))
    return feats[:n_support], np.concatenate(labels), np.asarray(tags), feats[n_support:]


def episode_loss(
    model: SingleSampleModel,
    task: TaskBatch,
    rng: np.random.Generator,
    config: TrainConfig,
    kl_weight: float | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Negated training objective: posterior CE + prior CE + beta * KL (sums taken as means)."""
    C = model.num_classes
    support, labels, tags, fq = _support_features(model, task)
    yq = task.query_labels
    b = len(yq)
    centers_t = compute_centers(support, labels, tags, list(task.prior_support), C)
    centers_s = compute_centers(support, labels, tags, list(task.source_support), C)
    prior = infer_prior_classifier(model.theta_a, centers_t)

    if config.sample_conditioning:
        if config.hierarchical:
            source = infer_source_classifier(model.psi, centers_s)
            components = [
                infer_posterior_classifier(model.theta_a, reparameterize(source, rng), fq)
                for _ in range(config.mc_L)
            ]
        else:
            components = [infer_posterior_classifier(model.theta_a, centers_s, fq)]
        ce_terms = []
        for _ in range(config.mc_M):
            comp = components[int(rng.integers(len(components)))]
            w = reparameterize(comp, rng)
            ce_terms.append(nc.softmax_cross_entropy(classify(w, fq), yq))
        entries = b * C * model.feature_dim if config.kl_per_entry else b
        kl_terms = [nc.scale(nc.sum_(gaussian_kl_terms(comp, prior)), 1.0 / entries) for comp in components]
    else:
        posterior = infer_prior_classifier(model.theta_a, centers_s)
        ce_terms = [
            nc.softmax_cross_entropy(classify(reparameterize(posterior, rng), fq), yq)
            for _ in range(config.mc_M)
        ]
        kl = gaussian_kl(posterior, prior)
        kl_terms = [nc.scale(kl, 1.0 / (C * model.feature_dim)) if config.kl_per_entry else kl]

    ce_post = nc.scale(_total(ce_terms), 1.0 / len(ce_terms))
    kl = nc.scale(_total(kl_terms), 1.0 / len(kl_terms))
    beta = config.kl_weight if kl_weight is None else kl_weight
    total = ce_post + nc.scale(kl, beta)

    ce_prior_value = 0.0
    if config.sample_conditioning and config.prior_supervision and config.mc_N > 0:
        prior_terms = [
            nc.softmax_cross_entropy(classify(reparameterize(prior, rng), fq), yq)
            for _ in range(config.mc_N)
        ]
        ce_prior = nc.scale(_total(prior_terms), 1.0 / config.mc_N)
        total = total + ce_prior
        ce_prior_value = ce_prior.item()

    breakdown = LossBreakdown(ce_post.item(), ce_prior_value, kl.item(), total.item())
    return total, breakdown


def _total(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


class PooledSampler:
    """Non-episodic task source: every step uses all source domains for both paths."""

    def __init__(self, sources: list[DomainDataset], num_classes: int, support_per_class: int, batch: int):
        self.sources = sources
        self.num_classes = num_classes
        self.k = support_per_class
        self.batch = batch
        self.class_index = [d.class_indices(num_classes) for d in sources]
        self.pool_images = np.concatenate([d.images for d in sources])
        self.pool_labels = np.concatenate([d.labels for d in sources])

    def sample(self, rng: np.random.Generator) -> TaskBatch:
        support = {}
        for d, per_class in zip(self.sources, self.class_index):
            picks = np.stack([rng.choice(idx, self.k, replace=len(idx) < self.k) for idx in per_class])
            support[d.domain_id] = d.images[picks]
        q = rng.choice(len(self.pool_labels), self.batch, replace=False)
        return TaskBatch(support, support, self.pool_images[q], self.pool_labels[q])


def make_task_source(sources, num_classes: int, config: TrainConfig) -> Callable[[np.random.Generator], TaskBatch]:
    if config.meta_learning:
        sampler = EpisodeSampler(sources, num_classes, config.support_per_class, config.batch)
        return lambda rng: TaskBatch.from_episode(sampler.sample(rng))
    pooled = PooledSampler(sources, num_classes, config.support_per_class, config.batch)
    return pooled.sample


def validate(
    model: SingleSampleModel,
    corpus: MultiDomainCorpus,
    images: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    config: TrainConfig | None = None,
    sources: list[DomainDataset] | None = None,
) -> float:
    """Accuracy of the per-sample test-time path on held-out source data."""
    from ssgen.evalharness.inference import InferenceContext, accuracy, predict_batch

    config = config or TrainConfig()
    if images is None:
        images, labels = corpus.validation_set()
    if len(labels) == 0:
        raise ContractError("validation split is empty")
    ctx = InferenceContext(
        model,
        sources if sources is not None else corpus,
        support_per_class=config.eval_support_per_class,
        eval_seed=config.eval_seed,
    )
    predicted, _ = predict_batch(ctx, images)
    return accuracy(predicted, labels)


def train(corpus: MultiDomainCorpus, config: TrainConfig) -> TrainResult:
    """Run ``config.iterations`` steps and return the best-validation snapshot."""
    sources = corpus.train_sources()
    if config.meta_learning and len(sources) < 2:
        raise ConfigError(
            "episodic training needs >= 2 source domains; regroup a single source "
            "with split_domains (strategy 'cluster' or 'random')"
        )
    num_classes = corpus.num_classes
    init_rng, task_rng, noise_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3)
    )
    model = build_model(num_classes, config, init_rng)
    if config.pretrain_iterations:
        pretrain_backbone(model, sources, config, init_rng)
    opt_backbone = nc.Adam(model.backbone_parameters(), config.lr_backbone)
    opt_heads = nc.Adam(model.head_parameters(), config.lr_heads)
    next_task = make_task_source(sources, num_classes, config)
    val_images, val_labels = corpus.validation_set()

    result = TrainResult(model)
    best_state = None
    for it in range(1, config.iterations + 1):
        task = next_task(task_rng)
        nc.clear_tape()
        opt_backbone.zero_grad()
        opt_heads.zero_grad()
        try:
            total, parts = episode_loss(model, task, noise_rng, config, config.kl_weight_at(it))
            nc.backward(total)
            opt_backbone.step()
            opt_heads.step()
        except NumericFailure as exc:
            nc.clear_tape()
            raise NumericFailure(f"iteration {it}: {exc}") from None
        row = {"iteration": it, **dataclasses.asdict(parts), "val_accuracy": None}
        if len(val_labels) and (it % config.val_every == 0 or it == config.iterations):
            acc = validate(model, corpus, val_images, val_labels, config, sources)
            row["val_accuracy"] = acc
            if best_state is None or acc > result.best_val_accuracy:
                best_state = model.state_dict()
                result.best_val_accuracy = acc
                result.best_iteration = it
            log.info("iter %d total %.4f val %.4f", it, parts.total, acc)
        result.history.append(row)
    if best_state is not None:
        model.load_state_dict(best_state)
    return result


def pretrain_backbone(
    model: SingleSampleModel, sources: list[DomainDataset], config: TrainConfig, rng: np.random.Generator
) -> None:
    """Fit the backbone with a throwaway linear head on pooled source data."""
    images = np.concatenate([d.images for d in sources])
    labels = np.concatenate([d.labels for d in sources])
    d, c = model.feature_dim, model.num_classes
    head = nc.Tensor(rng.standard_normal((d, c)) * np.sqrt(1.0 / d), requires_grad=True)
    bias = nc.Tensor(np.zeros(c), requires_grad=True)
    opt_backbone = nc.Adam(model.backbone_parameters(), config.lr_backbone)
    opt_head = nc.Adam([head, bias], config.lr_heads)
    for it in range(1, config.pretrain_iterations + 1):
        idx = rng.choice(len(labels), min(config.batch, len(labels)), replace=False)
        nc.clear_tape()
        opt_backbone.zero_grad()
        opt_head.zero_grad()
        try:
            logits = extract_features(model.backbone, images[idx]) @ head + bias
            nc.backward(nc.softmax_cross_entropy(logits, labels[idx]))
        except NumericFailure as exc:
            nc.clear_tape()
            raise NumericFailure(f"pretraining iteration {it}: {exc}") from None
        opt_backbone.step()
        opt_head.step()


def write_history(history: list[dict], path, config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(
                ["" if row.get(col) is None else repr(row[col]) if isinstance(row[col], float) else row[col]
                 for col in HISTORY_COLUMNS]
            )


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append(
            {
                "iteration": int(rec["iteration"]),
                **{k: float(rec[k]) for k in ("ce_posterior", "ce_prior", "kl", "total")},
                "val_accuracy": float(rec["val_accuracy"]) if rec["val_accuracy"] else None,
            }
        )
    return rows


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(0, idx - window)
    return (csum[idx] - csum[lo]) / (idx - lo)
