"""Rotation about the image centre and the rotated-digits domain builder."""

from __future__ import annotations

import numpy as np

from ssgen.datasets.domains import DomainDataset, MultiDomainCorpus
from ssgen.datasets.glyphs import CENTER, LabeledImage, stack_images
from ssgen.errors import ContractError


def rotate_images(images: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate a stack ``(n, H, W)`` counter-clockwise by ``angle_deg``.

    Multiples of 90 degrees use an exact index permutation; other angles use
    inverse-mapped bilinear sampling with zero padding outside the grid.
    """
    if not 0 <= angle_deg < 360:
        raise ContractError(f"angle must lie in [0, 360), got {angle_deg}")
    images = np.asarray(images)
    if angle_deg % 90 == 0:
        return np.rot90(images, k=int(angle_deg // 90), axes=(1, 2)).copy()

    n, h, w = images.shape
    theta = np.radians(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    u = cols - CENTER
    v = CENTER - rows
    src_u = cos * u + sin * v
    src_v = -sin * u + cos * v
    src_x = src_u + CENTER
    src_y = CENTER - src_v

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0
    out = np.zeros(images.shape, dtype=np.float64)
    for dy, dx, weight in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yy_c = np.clip(yy, 0, h - 1)
        xx_c = np.clip(xx, 0, w - 1)
        out += images[:, yy_c, xx_c] * (weight * valid)[None]
    return out.astype(images.dtype)


def rotate_image(img: LabeledImage, angle_deg: float) -> LabeledImage:
    if angle_deg == 0:
        return LabeledImage(img.pixels.copy(), img.label)
    return LabeledImage(rotate_images(img.pixels[None], angle_deg)[0], img.label)


def domain_id_for_angle(angle: float) -> str:
    return f"rot{int(round(angle)):03d}"


def build_rotation_domains(
    base: list[LabeledImage],
    source_angles=(15, 30, 60, 75),
    target_angles=(0, 45, 90),
    val_fraction: float = 0.1,
    seed: int = 0,
) -> MultiDomainCorpus:
    """One domain per angle, each the whole base corpus rotated.

    The held-out validation indices are drawn once and shared by every source
    domain, so a held-out base image is never seen at any training angle.
    """
    overlap = set(source_angles) & set(target_angles)
    if overlap:
        raise ContractError(f"angles {sorted(overlap)} are both source and target")
    if not base:
        raise ContractError("empty base corpus")
    if not 0 <= val_fraction < 1:
        raise ContractError("val_fraction must lie in [0, 1)")
    images, labels = stack_images(base)
    n_val = int(round(val_fraction * len(base)))
    perm = np.random.default_rng(seed).permutation(len(base))
    holdout = np.sort(perm[:n_val])

    def make(angle, keep_holdout):
        rotated = images.copy() if angle == 0 else rotate_images(images, angle)
        return DomainDataset(
            domain_id_for_angle(angle), rotated, labels.copy(), holdout if keep_holdout else None
        )

    return MultiDomainCorpus(
        source_domains=[make(a, True) for a in source_angles],
        target_domains=[make(a, False) for a in target_angles],
        val_fraction=val_fraction,
    )
