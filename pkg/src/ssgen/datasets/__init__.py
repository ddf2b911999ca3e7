"""Synthetic and IDX image corpora, rotation domains, pseudo-domain splits, episodes."""

from ssgen.datasets.domains import DomainDataset, MultiDomainCorpus
from ssgen.datasets.episodes import Episode, EpisodeSampler, sample_episode
from ssgen.datasets.glyphs import LabeledImage, generate_glyph_corpus, render_glyph, stack_images
from ssgen.datasets.idx import load_idx, write_idx
from ssgen.datasets.rotation import (
    build_rotation_domains,
    domain_id_for_angle,
    rotate_image,
    rotate_images,
)
from ssgen.datasets.splits import (
    FEATURE_FUNCTIONS,
    orientation_features,
    kmeans,
    kmeans_cost,
    kmeans_fit,
    raw_pixel_features,
    regroup_sources,
    split_domains,
)

__all__ = [name for name in dir() if not name.startswith("_")]
