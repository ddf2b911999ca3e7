"""Ordered test streams for online adaptation, with or without domain mixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ssgen.datasets import DomainDataset
from ssgen.errors import ConfigError, ContractError

STREAM_MODES = ("single_domain", "multi_domain")


@dataclass(frozen=True)
class StreamSpec:
    mode: str
    target_ids: tuple[str, ...]
    batch_size: int
    shuffle_seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in STREAM_MODES:
            raise ConfigError(f"stream mode must be one of {STREAM_MODES}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass
class Stream:
    batches: list[np.ndarray]
    labels: list[np.ndarray]

    @property
    def images(self) -> np.ndarray:
        return np.concatenate(self.batches)

    @property
    def all_labels(self) -> np.ndarray:
        return np.concatenate(self.labels)


def build_streams(domains: list[DomainDataset], spec: StreamSpec) -> list[Stream]:
    """``single_domain`` yields one stream per target; ``multi_domain`` one shuffled mixture.

    Batches carry images and labels only, never domain ids.
    """
    by_id = {d.domain_id: d for d in domains}
    missing = [t for t in spec.target_ids if t not in by_id]
    if missing:
        raise ContractError(f"unknown target domains {missing}")
    chosen = [by_id[t] for t in spec.target_ids]
    if spec.mode == "single_domain":
        groups = [(d.images, d.labels) for d in chosen]
    else:
        groups = [(np.concatenate([d.images for d in chosen]), np.concatenate([d.labels for d in chosen]))]
    rng = np.random.default_rng(spec.shuffle_seed)
    streams = []
    for images, labels in groups:
        order = rng.permutation(len(labels))
        cuts = range(0, len(order), spec.batch_size)
        streams.append(
            Stream(
                [images[order[s : s + spec.batch_size]] for s in cuts],
                [labels[order[s : s + spec.batch_size]] for s in cuts],
            )
        )
    return streams
