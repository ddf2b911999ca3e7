"""Domain containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ssgen.datasets.glyphs import LabeledImage
from ssgen.errors import ContractError


@dataclass
class DomainDataset:
    """All samples of one domain, stored as stacked arrays.

    ``holdout`` optionally marks indices reserved for validation; they are
    excluded from :meth:`train_view`.
    """

    domain_id: str
    images: np.ndarray  # (n, 28, 28) float32
    labels: np.ndarray  # (n,) int64
    holdout: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise ContractError(f"domain {self.domain_id!r} is empty")
        if len(self.images) != len(self.labels):
            raise ContractError(f"domain {self.domain_id!r}: images/labels length differ")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]))

    @property
    def samples(self) -> list[LabeledImage]:
        return [self[i] for i in range(len(self))]

    @classmethod
    def from_samples(cls, domain_id: str, samples: list[LabeledImage]) -> "DomainDataset":
        if not samples:
            raise ContractError(f"domain {domain_id!r} is empty")
        images = np.stack([s.pixels for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return cls(domain_id, images, labels)

    def subset(self, index: np.ndarray, domain_id: str | None = None) -> "DomainDataset":
        return DomainDataset(domain_id or self.domain_id, self.images[index], self.labels[index])

    def train_view(self) -> "DomainDataset":
        if self.holdout is None or len(self.holdout) == 0:
            return self
        keep = np.ones(len(self), dtype=bool)
        keep[self.holdout] = False
        return self.subset(np.flatnonzero(keep))

    def holdout_view(self) -> "DomainDataset | None":
        if self.holdout is None or len(self.holdout) == 0:
            return None
        return self.subset(self.holdout)

    def class_indices(self, num_classes: int) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(num_classes)]


@dataclass
class MultiDomainCorpus:
    source_domains: list[DomainDataset]
    target_domains: list[DomainDataset]
    val_fraction: float = 0.1
    # held-out data used when sources were regrouped and no longer carry holdouts
    validation: list[DomainDataset] = field(default_factory=list)

    def __post_init__(self) -> None:
        src = [d.domain_id for d in self.source_domains]
        tgt = [d.domain_id for d in self.target_domains]
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise ContractError("duplicate domain ids")
        if set(src) & set(tgt):
            raise ContractError(f"domains {sorted(set(src) & set(tgt))} are both source and target")

    @property
    def source_ids(self) -> list[str]:
        return [d.domain_id for d in self.source_domains]

    @property
    def num_classes(self) -> int:
        domains = self.source_domains + self.target_domains
        return int(max(d.labels.max() for d in domains)) + 1

    def train_sources(self) -> list[DomainDataset]:
        return [d.train_view() for d in self.source_domains]

    def validation_domains(self) -> list[DomainDataset]:
        if self.validation:
            return list(self.validation)
        views = [d.holdout_view() for d in self.source_domains]
        return [v for v in views if v is not None]

    def validation_set(self) -> tuple[np.ndarray, np.ndarray]:
        parts = self.validation_domains()
        if not parts:
            return np.zeros((0, 28, 28), np.float32), np.zeros(0, np.int64)
        return (
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )

    def pooled_sources(self) -> DomainDataset:
        parts = self.train_sources()
        return DomainDataset(
            "pooled",
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )
