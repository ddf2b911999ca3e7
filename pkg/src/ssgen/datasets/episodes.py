"""Episodic sampling of meta-source / meta-target tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ssgen.datasets.domains import DomainDataset, MultiDomainCorpus
from ssgen.errors import ContractError, DataError


@dataclass
class Episode:
    meta_target_id: str
    meta_source_ids: list[str]
    # domain id -> (C, support_per_class, 28, 28); includes the meta-target
    support: dict[str, np.ndarray]
    query_images: np.ndarray
    query_labels: np.ndarray

    @property
    def support_per_class(self) -> int:
        return next(iter(self.support.values())).shape[1]


class EpisodeSampler:
    """Caches per-class indices of each source domain so sampling is cheap."""

    def __init__(
        self,
        sources: list[DomainDataset],
        num_classes: int,
        support_per_class: int = 10,
        batch: int = 128,
    ):
        if len(sources) < 2:
            raise ContractError("episodic sampling needs at least two source domains")
        if support_per_class < 1 or batch < 1:
            raise ContractError("support_per_class and batch must be >= 1")
        self.sources = sources
        self.num_classes = num_classes
        self.support_per_class = support_per_class
        self.batch = batch
        self.class_index = []
        for d in sources:
            per_class = d.class_indices(num_classes)
            for c, idx in enumerate(per_class):
                if len(idx) < support_per_class:
                    raise DataError(
                        f"domain {d.domain_id!r} has {len(idx)} samples of class {c}, "
                        f"needs {support_per_class}"
                    )
            self.class_index.append(per_class)

    def choose_target(self, rng: np.random.Generator) -> int:
        return int(rng.integers(len(self.sources)))

    def sample(self, rng: np.random.Generator) -> Episode:
        t = self.choose_target(rng)
        support = {}
        target_used = None
        for i, d in enumerate(self.sources):
            picks = np.stack(
                [rng.choice(idx, self.support_per_class, replace=False) for idx in self.class_index[i]]
            )
            support[d.domain_id] = d.images[picks]
            if i == t:
                target_used = picks.ravel()
        target = self.sources[t]
        remaining = np.setdiff1d(np.arange(len(target)), target_used)
        if len(remaining) == 0:
            raise DataError(f"domain {target.domain_id!r} has no samples left for the query batch")
        query = rng.choice(remaining, self.batch, replace=len(remaining) < self.batch)
        return Episode(
            meta_target_id=target.domain_id,
            meta_source_ids=[d.domain_id for j, d in enumerate(self.sources) if j != t],
            support=support,
            query_images=target.images[query],
            query_labels=target.labels[query],
        )


def sample_episode(
    corpus: MultiDomainCorpus | list[DomainDataset],
    rng: np.random.Generator,
    support_per_class: int = 10,
    batch: int = 128,
    num_classes: int | None = None,
) -> Episode:
    sources = corpus.train_sources() if isinstance(corpus, MultiDomainCorpus) else corpus
    if num_classes is None:
        num_classes = int(max(d.labels.max() for d in sources)) + 1
    return EpisodeSampler(sources, num_classes, support_per_class, batch).sample(rng)
